"""
最小化的稠密张量 + 反向模式自动微分
只提供 CPC 模型需要的算子；每个算子都记录到当前激活的 Tape 上
"""

from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from numpy.lib.stride_tricks import sliding_window_view

from models.errors import ContractError, DimensionError, InputTooShortError, NumericError, TrainingDivergedError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("cpcv_active_tape", default=None)


class Tensor:
    """带梯度累加器的稠密张量"""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() 需要标量张量，实际形状 {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return np.float64


class Tape:
    """按执行顺序记录的算子列表（天然拓扑序）"""

    def __init__(self):
        self.nodes: List[Tensor] = []
        self._token = None

    def record(self, node: Tensor):
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """构造算子输出；只有在激活的 Tape 上且需要梯度时才记录"""
    requires_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad, dtype=data.dtype)
    tape = _ACTIVE_TAPE.get()
    if requires_grad and tape is not None:
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.record(out)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


# ---------------------------------------------------------------- 逐元素算子

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.data.dtype.type(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def one_minus(x: Tensor) -> Tensor:
    return _result(1 - x.data, (x,), lambda g: (-g,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    positive = x.data >= 0
    out[positive] = 1 / (1 + np.exp(-x.data[positive]))
    ez = np.exp(x.data[~positive])
    out[~positive] = ez / (1 + ez)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- 形状算子

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, key) -> Tensor:
    """基本切片（不支持高级索引）"""

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] += g
        return (full,)

    return _result(np.ascontiguousarray(x.data[key]), (x,), backward)


def flip(x: Tensor, axis: int) -> Tensor:
    return _result(np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def gather(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """out[i, j] = x[rows[i], cols[j]]，用于查表式打分"""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    index = (rows[:, None], cols[None, :])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward)


# ---------------------------------------------------------------- 归约算子

def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape).astype(x.data.dtype),))


def diagonal(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError("diagonal", x.shape, (x.shape[0], x.shape[0]))

    def backward(g):
        full = np.zeros_like(x.data)
        np.fill_diagonal(full, g)
        return (full,)

    return _result(np.diagonal(x.data).copy(), (x,), backward)


# ---------------------------------------------------------------- 线性代数

def affine(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """out = x @ w (+ bias)"""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError("affine", x.shape, w.shape)
    out = x.data @ w.data
    parents: Tuple[Tensor, ...] = (x, w)
    if bias is not None:
        if bias.shape != (w.shape[1],):
            raise DimensionError("affine.bias", bias.shape, (w.shape[1],))
        out = out + bias.data
        parents = (x, w, bias)

    def backward(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result(out, parents, backward)


def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """一维卷积，x: batch x cin x len，kernels: cout x cin x k，零填充"""
    if stride < 1 or padding < 0:
        raise ContractError(f"conv1d 要求 stride>=1 且 padding>=0，实际 stride={stride}, padding={padding}")
    if x.data.ndim != 3 or kernels.data.ndim != 3 or x.shape[1] != kernels.shape[1]:
        raise DimensionError("conv1d", x.shape, kernels.shape)
    batch, cin, length = x.shape
    cout, _, k = kernels.shape
    lout = conv_output_length(length, k, stride, padding)
    if length + 2 * padding < k or lout < 1:
        raise InputTooShortError(f"conv1d 输入过短: len={length}, padding={padding}, kernel={k}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    # batch x cin x lout x k
    windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :][:, :, :lout, :]
    out = np.tensordot(windows, kernels.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError("conv1d.bias", bias.shape, (cout,))
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)
    parents: Tuple[Tensor, ...] = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g):
        grad_kernels = np.tensordot(g, windows, axes=([0, 2], [0, 2]))
        grad_windows = np.tensordot(g, kernels.data, axes=([1], [0]))  # batch x lout x cin x k
        grad_xp = np.zeros_like(xp)
        span = stride * (lout - 1) + 1
        for j in range(k):
            grad_xp[:, :, j:j + span:stride] += grad_windows[:, :, :, j].transpose(0, 2, 1)
        grads = [grad_xp[:, :, padding:padding + length], grad_kernels]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return _result(out, parents, backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    """按行 log-softmax，先减去行最大值保证数值稳定"""
    if np.isnan(x.data).any():
        raise NumericError("log_softmax_rows 输入包含 NaN")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------- GRU

@dataclass
class GruParams:
    """GRU 参数（门顺序 r, z, n；输入侧与隐藏侧各一组偏置）"""
    w_ih: Tensor
    w_hh: Tensor
    b_ih: Tensor
    b_hh: Tensor

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[0]

    def tensors(self) -> Dict[str, Tensor]:
        return {"w_ih": self.w_ih, "w_hh": self.w_hh, "b_ih": self.b_ih, "b_hh": self.b_hh}

    @staticmethod
    def parameter_count(input_size: int, hidden: int) -> int:
        return 3 * (hidden * input_size + hidden * hidden + 2 * hidden)

    @classmethod
    def init(cls, input_size: int, hidden: int, rng: np.random.Generator,
             dtype=np.float64, prefix: str = "gru") -> "GruParams":
        """权重 U(±1/√fan_in)：w_ih 按 input_size，w_hh 按 hidden；偏置为 0"""
        bound_ih = 1.0 / np.sqrt(input_size)
        bound = 1.0 / np.sqrt(hidden)
        return cls(
            w_ih=Tensor(rng.uniform(-bound_ih, bound_ih, (input_size, 3 * hidden)).astype(dtype), True, f"{prefix}.w_ih"),
            w_hh=Tensor(rng.uniform(-bound, bound, (hidden, 3 * hidden)).astype(dtype), True, f"{prefix}.w_hh"),
            b_ih=Tensor(np.zeros(3 * hidden, dtype=dtype), True, f"{prefix}.b_ih"),
            b_hh=Tensor(np.zeros(3 * hidden, dtype=dtype), True, f"{prefix}.b_hh"),
        )


def gru_cell(x_t: Tensor, h_prev: Tensor, params: GruParams) -> Tensor:
    """单步 GRU：r/z 门 sigmoid，候选 tanh，h = (1-z)*n + z*h_prev"""
    hid = params.hidden
    if x_t.data.ndim != 2 or x_t.shape[1] != params.input_size:
        raise DimensionError("gru_cell.x", x_t.shape, (x_t.shape[0], params.input_size))
    if h_prev.shape != (x_t.shape[0], hid):
        raise DimensionError("gru_cell.h", h_prev.shape, (x_t.shape[0], hid))
    gi = affine(x_t, params.w_ih, params.b_ih)
    gh = affine(h_prev, params.w_hh, params.b_hh)
    r = sigmoid(add(getitem(gi, np.s_[:, :hid]), getitem(gh, np.s_[:, :hid])))
    z = sigmoid(add(getitem(gi, np.s_[:, hid:2 * hid]), getitem(gh, np.s_[:, hid:2 * hid])))
    n = tanh(add(getitem(gi, np.s_[:, 2 * hid:]), mul(r, getitem(gh, np.s_[:, 2 * hid:]))))
    return add(mul(one_minus(z), n), mul(z, h_prev))


# ---------------------------------------------------------------- 反向传播

def backward(tape: Tape, loss: Tensor) -> List[Tensor]:
    """沿 Tape 逆序传播，把 dloss/dp 累加到叶子张量的 grad 上，返回收到梯度的叶子"""
    if loss.data.size != 1:
        raise ContractError(f"backward 需要标量 loss，实际形状 {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss 不依赖任何需要梯度的张量")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: Dict[int, Tensor] = {}
    if loss.is_leaf:
        _accumulate_leaf(loss, pending.pop(id(loss)), touched)
        return list(touched.values())

    for node in reversed(tape.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                _accumulate_leaf(parent, parent_grad, touched)
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + parent_grad
            else:
                pending[id(parent)] = parent_grad
    return list(touched.values())


def _accumulate_leaf(leaf: Tensor, grad: np.ndarray, touched: Dict[int, Tensor]):
    grad = np.asarray(grad, dtype=leaf.data.dtype).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = np.zeros_like(leaf.data)
    leaf.grad += grad
    touched[id(leaf)] = leaf


def zero_grads(params: Sequence[Tensor]):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- 优化器

@dataclass
class AdamState:
    """Adam 一阶/二阶矩状态"""
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
                   lr: float) -> Tuple[List[np.ndarray], AdamState]:
    """纯函数式 Adam 更新，返回新参数与新状态"""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("参数、梯度与优化器状态的数量不一致")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError("optimizer_step", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("梯度包含非有限值，训练发散")

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1 ** step
    correction2 = 1 - b2 ** step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m_next = b1 * m + (1 - b1) * g
        v_next = b2 * v + (1 - b2) * g * g
        update = lr * (m_next / correction1) / (np.sqrt(v_next / correction2) + state.eps)
        new_params.append((p - update).astype(p.dtype))
        new_m.append(m_next.astype(p.dtype))
        new_v.append(v_next.astype(p.dtype))
    return new_params, AdamState(step=step, m=new_m, v=new_v, beta1=b1, beta2=b2, eps=state.eps)


def apply_step(params: Sequence[Tensor], state: AdamState, lr: float) -> AdamState:
    """对 Tensor 参数执行一次 optimizer_step 并写回"""
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    updated, new_state = optimizer_step([p.data for p in params], grads, state, lr)
    for p, data in zip(params, updated):
        p.data = data
    return new_state


def numeric_gradient(fn: Callable[[], float], tensor: Tensor, step: float = 1e-6) -> np.ndarray:
    """中心差分数值梯度（用于梯度校验）"""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn()
        flat[i] = original - step
        minus = fn()
        flat[i] = original
        out[i] = (plus - minus) / (2 * step)
    logger.debug(f"[autodiff] numeric gradient over {flat.size} entries")
    return grad
