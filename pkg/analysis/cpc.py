"""
CPC：卷积编码器 + GRU 自回归模型 + InfoNCE 损失
变体 CDCK2 / CDCK5 / CDCK6（CDCK6 为共享编码器的双向模型）
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from analysis.autodiff import (
    AdamState,
    GruParams,
    Tape,
    Tensor,
    add,
    affine,
    apply_step,
    backward,
    conv1d,
    diagonal,
    flip,
    getitem,
    gru_cell,
    log_softmax_rows,
    relu,
    reshape,
    scale,
    stack,
    sum_all,
    transpose,
    zero_grads,
)
from models.cpc_models import DOWNSAMPLING, CpcConfig, Direction, EpochRecord, LossReport
from models.errors import (
    ContractError,
    DataError,
    DegenerateBatchError,
    EmptyDatasetError,
    InputTooShortError,
    NumericError,
    VariantError,
)
from models.feature_models import FeatureKind, FeatureMatrix, Waveform


def parameter_count(cfg: CpcConfig) -> int:
    """闭式参数量：编码器 + 每层 GRU + 预测矩阵"""
    total = 0
    cin = 1
    for k in cfg.kernels:
        total += cin * cfg.encoder_channels * k + cfg.encoder_channels
        cin = cfg.encoder_channels
    gru_in = cfg.encoder_channels
    per_direction = 0
    for _ in range(cfg.ar_layers):
        per_direction += GruParams.parameter_count(gru_in, cfg.ar_hidden)
        gru_in = cfg.ar_hidden
    total += cfg.directions * per_direction
    total += cfg.directions * cfg.k * cfg.ar_hidden * cfg.encoder_channels
    return total


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    stride: int
    padding: int


@dataclass
class CpcModel:
    """编码器参数、每个方向的 GRU 堆叠、每个方向的 k 个预测矩阵 W_τ（无偏置）"""
    cfg: CpcConfig
    encoder: List[ConvLayer]
    ar: Dict[Direction, List[GruParams]]
    heads: Dict[Direction, List[Tensor]]
    dtype: type = np.float32

    @classmethod
    def init(cls, cfg: CpcConfig, seed: int = 0, dtype=None) -> "CpcModel":
        """卷积/仿射权重 U(±1/√fan_in)，偏置为 0"""
        dtype = dtype or np.dtype(cfg.training_dtype).type
        rng = np.random.default_rng(seed)
        encoder = []
        cin = 1
        for i, (k, s, p) in enumerate(zip(cfg.kernels, cfg.strides, cfg.paddings)):
            bound = 1.0 / math.sqrt(cin * k)
            weight = rng.uniform(-bound, bound, (cfg.encoder_channels, cin, k)).astype(dtype)
            encoder.append(ConvLayer(
                weight=Tensor(weight, True, f"encoder.{i}.weight"),
                bias=Tensor(np.zeros(cfg.encoder_channels, dtype=dtype), True, f"encoder.{i}.bias"),
                stride=s,
                padding=p,
            ))
            cin = cfg.encoder_channels

        ar, heads = {}, {}
        bound = 1.0 / math.sqrt(cfg.ar_hidden)
        for direction in cfg.direction_list:
            layers = []
            gru_in = cfg.encoder_channels
            for layer in range(cfg.ar_layers):
                layers.append(GruParams.init(gru_in, cfg.ar_hidden, rng, dtype, prefix=f"ar.{direction.value}.{layer}"))
                gru_in = cfg.ar_hidden
            ar[direction] = layers
            heads[direction] = [
                Tensor(rng.uniform(-bound, bound, (cfg.ar_hidden, cfg.encoder_channels)).astype(dtype), True,
                       f"heads.{direction.value}.{tau}")
                for tau in range(1, cfg.k + 1)
            ]
        return cls(cfg=cfg, encoder=encoder, ar=ar, heads=heads, dtype=dtype)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        params = []
        for i, layer in enumerate(self.encoder):
            params.append((f"encoder.{i}.weight", layer.weight))
            params.append((f"encoder.{i}.bias", layer.bias))
        for direction in self.cfg.direction_list:
            for layer, gru in enumerate(self.ar[direction]):
                for key, tensor in gru.tensors().items():
                    params.append((f"ar.{direction.value}.{layer}.{key}", tensor))
            for tau, head in enumerate(self.heads[direction], start=1):
                params.append((f"heads.{direction.value}.{tau}", head))
        return params

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def count_parameters(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for name, tensor in self.named_parameters():
            if name not in state:
                raise DataError(f"检查点缺少参数 {name}")
            array = np.asarray(state[name])
            if array.shape != tensor.shape:
                raise DataError(f"参数 {name} 形状不符: {array.shape} vs {tensor.shape}")
            tensor.data = array.astype(self.dtype)


def encode(segment, model: CpcModel) -> Tensor:
    """batch x samples -> batch x frames x channels，下采样 160 倍"""
    x = segment if isinstance(segment, Tensor) else Tensor(np.asarray(segment, dtype=model.dtype))
    if x.data.ndim == 1:
        x = reshape(x, (1, x.shape[0]))
    if x.data.ndim != 2 or x.shape[1] % DOWNSAMPLING != 0 or x.shape[1] == 0:
        raise ContractError(f"编码器输入长度必须是 {DOWNSAMPLING} 的正整数倍，实际形状 {x.shape}")
    h = reshape(x, (x.shape[0], 1, x.shape[1]))
    for layer in model.encoder:
        h = relu(conv1d(h, layer.weight, stride=layer.stride, padding=layer.padding, bias=layer.bias))
    return transpose(h, (0, 2, 1))


def _run_gru(sequence: Tensor, layers: Sequence[GruParams]) -> Tensor:
    batch, frames, _ = sequence.shape
    for params in layers:
        h = Tensor(np.zeros((batch, params.hidden), dtype=sequence.data.dtype))
        outputs = []
        for t in range(frames):
            h = gru_cell(getitem(sequence, np.s_[:, t, :]), h, params)
            outputs.append(h)
        sequence = stack(outputs, axis=1)
    return sequence


def ar_context(latents: Tensor, model: CpcModel, direction: Direction = Direction.FWD) -> Tensor:
    """自回归上下文；bwd 在时间反转的序列上运行后再翻转回来"""
    direction = Direction(direction)
    if direction not in model.ar:
        raise VariantError(f"{model.cfg.variant.value} 不支持方向 {direction.value}")
    if latents.data.ndim != 3:
        raise ContractError(f"latents 需要 batch x frames x channels，实际 {latents.shape}")
    if direction == Direction.BWD:
        return flip(_run_gru(flip(latents, axis=1), model.ar[direction]), axis=1)
    return _run_gru(latents, model.ar[direction])


def _report_from_scores(scores: Sequence[Tensor], batch: int) -> LossReport:
    """scores[τ-1] 为 batch x batch，行 i 的正样本在第 i 列"""
    total = None
    for s in scores:
        term = sum_all(diagonal(log_softmax_rows(s)))
        total = term if total is None else add(total, term)
    loss = scale(total, -1.0 / (len(scores) * batch))
    last = scores[-1].data
    accuracy = float(np.mean(np.argmax(last, axis=1) == np.arange(batch)))
    return LossReport(nce_loss=loss.item(), accuracy=accuracy, batch=batch, loss=loss)


def loss_from_scores(scores: Sequence[np.ndarray]) -> LossReport:
    """直接由每一步的打分矩阵计算 InfoNCE（逐步均值）"""
    tensors = [Tensor(np.asarray(s, dtype=np.float64)) for s in scores]
    batch = tensors[0].shape[0]
    if batch < 2:
        raise DegenerateBatchError("batch 只有 1 条，没有负样本")
    return _report_from_scores(tensors, batch)


def infonce_loss(latents: Tensor, contexts: Tensor, heads: Sequence[Tensor], t: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None) -> LossReport:
    """s[i, j] = z_j(t+τ) · (W_τ c_i(t))，τ = 1..k；负样本来自同一 batch"""
    batch, frames, _ = latents.shape
    k = len(heads)
    if batch < 2:
        raise DegenerateBatchError("batch 只有 1 条，没有负样本")
    if t is None:
        rng = rng or np.random.default_rng()
        t = int(rng.integers(0, frames - k))
    if t < 0 or t + k >= frames:
        raise ContractError(f"锚点 t={t} 加上 k={k} 超出 {frames} 帧")

    c_t = getitem(contexts, np.s_[:, t, :])
    scores = []
    for tau, w in enumerate(heads, start=1):
        z = getitem(latents, np.s_[:, t + tau, :])
        scores.append(affine(affine(c_t, w), transpose(z)))
    return _report_from_scores(scores, batch)


def joint_loss(fwd: LossReport, bwd: LossReport) -> Tensor:
    """双向损失取平均"""
    if fwd.loss is not None and bwd.loss is not None:
        return scale(add(fwd.loss, bwd.loss), 0.5)
    return Tensor(np.asarray(0.5 * (fwd.nce_loss + bwd.nce_loss)))


def forward_batch(model: CpcModel, segments: np.ndarray, t: int) -> LossReport:
    """一个 batch 的前向：共享编码器，逐方向计算 InfoNCE"""
    latents = encode(segments, model)
    reports = []
    for direction in model.cfg.direction_list:
        contexts = ar_context(latents, model, direction)
        if direction == Direction.BWD:
            reports.append(infonce_loss(flip(latents, axis=1), flip(contexts, axis=1), model.heads[direction], t))
        else:
            reports.append(infonce_loss(latents, contexts, model.heads[direction], t))
    if len(reports) == 1:
        return reports[0]
    loss = joint_loss(reports[0], reports[1])
    return LossReport(
        nce_loss=loss.item(),
        accuracy=float(np.mean([r.accuracy for r in reports])),
        batch=reports[0].batch,
        loss=loss,
    )


def extract_context_features(w: Waveform, model: CpcModel) -> FeatureMatrix:
    """整段语音（截断到 160 的整数倍）编码后取上下文向量，每 10ms 一行"""
    usable = (w.samples.size // DOWNSAMPLING) * DOWNSAMPLING
    if usable < DOWNSAMPLING:
        raise InputTooShortError(f"语音只有 {w.samples.size} 个采样，至少需要 {DOWNSAMPLING}")
    segment = w.samples[:usable].astype(model.dtype)[None, :]
    latents = encode(segment, model)
    blocks = [ar_context(latents, model, direction).data[0] for direction in model.cfg.direction_list]
    return FeatureMatrix(values=np.hstack(blocks).astype(np.float64), kind=FeatureKind.CPC, frame_shift=10.0)


@dataclass
class TrainingResult:
    model: CpcModel
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_state: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def best_record(self) -> Optional[EpochRecord]:
        for record in self.history:
            if record.epoch == self.best_epoch:
                return record
        return None


class CpcTrainer:
    """CPC 训练器：随机裁剪、batch 内负样本、Adam，按 dev 损失保留最佳参数"""

    def __init__(self, cfg: CpcConfig, seed: int = 0, dev_batches: int = 4):
        self.cfg = cfg
        self.seed = seed
        self.dev_batches = dev_batches
        self.dtype = np.dtype(cfg.training_dtype).type

    def _usable(self, utterances: Sequence[Tuple[str, np.ndarray]], label: str) -> List[Tuple[str, np.ndarray]]:
        kept = []
        for utt_id, samples in utterances:
            if len(samples) < self.cfg.crop:
                logger.warning(f"[cpc] {label} 语音 {utt_id} 只有 {len(samples)} 个采样，短于裁剪长度 {self.cfg.crop}，跳过")
                continue
            kept.append((utt_id, np.asarray(samples)))
        return kept

    def _batches(self, utterances: Sequence[Tuple[str, np.ndarray]], rng: np.random.Generator, limit: Optional[int] = None):
        """按随机顺序组装 batch（丢弃不足一个 batch 的尾部）"""
        order = np.concatenate([rng.permutation(len(utterances)) for _ in range(self.cfg.crops_per_utterance)])
        count = len(order) // self.cfg.batch
        if limit is not None:
            count = min(count, limit)
        frames = self.cfg.crop_frames
        for b in range(count):
            picks = order[b * self.cfg.batch:(b + 1) * self.cfg.batch]
            segments = np.empty((self.cfg.batch, self.cfg.crop), dtype=self.dtype)
            for row, idx in enumerate(picks):
                samples = utterances[idx][1]
                start = int(rng.integers(0, len(samples) - self.cfg.crop + 1))
                segments[row] = samples[start:start + self.cfg.crop]
            t = int(rng.integers(0, frames - self.cfg.k))
            yield segments, t

    def evaluate(self, model: CpcModel, utterances: Sequence[Tuple[str, np.ndarray]], seed: int) -> LossReport:
        """固定随机种子在 dev 集上评估（不记录 Tape）"""
        rng = np.random.default_rng(seed)
        losses, accuracies = [], []
        for segments, t in self._batches(utterances, rng, limit=self.dev_batches):
            report = forward_batch(model, segments, t)
            losses.append(report.nce_loss)
            accuracies.append(report.accuracy)
        if not losses:
            raise EmptyDatasetError(f"评估集不足一个 batch（{len(utterances)} 条 < batch {self.cfg.batch}）")
        return LossReport(nce_loss=float(np.mean(losses)), accuracy=float(np.mean(accuracies)), batch=self.cfg.batch)

    def train(self, train_set: Sequence[Tuple[str, np.ndarray]], dev_set: Sequence[Tuple[str, np.ndarray]],
              epochs: int, model: Optional[CpcModel] = None) -> TrainingResult:
        train_utts = self._usable(train_set, "train")
        dev_utts = self._usable(dev_set, "dev")
        if len(train_utts) * self.cfg.crops_per_utterance < self.cfg.batch:
            raise EmptyDatasetError(
                f"可用训练语音 {len(train_utts)} 条，不足一个 batch（{self.cfg.batch}）"
            )
        if len(dev_utts) < self.cfg.batch:
            logger.warning(f"[cpc] dev 集可用语音 {len(dev_utts)} 条不足一个 batch，改用训练集评估")
            dev_utts = train_utts

        model = model or CpcModel.init(self.cfg, seed=self.seed)
        params = model.parameters()
        state = AdamState.for_params([p.data for p in params])
        rng = np.random.default_rng(self.seed)
        result = TrainingResult(model=model)
        best_loss = math.inf
        ln_batch = math.log(self.cfg.batch)
        logger.info(f"[cpc] 开始训练 {self.cfg.variant.value}: {len(train_utts)} 条训练语音, "
                    f"{model.count_parameters():,} 个参数, {epochs} 个 epoch")

        for epoch in range(1, epochs + 1):
            train_losses = []
            for segments, t in self._batches(train_utts, rng):
                zero_grads(params)
                with Tape() as tape:
                    report = forward_batch(model, segments, t)
                backward(tape, report.loss)
                state = apply_step(params, state, self.cfg.lr)
                train_losses.append(report.nce_loss)
            train_loss = float(np.mean(train_losses))
            if not math.isfinite(train_loss):
                raise NumericError(f"epoch {epoch} 训练损失非有限: {train_loss}")

            dev = self.evaluate(model, dev_utts, seed=self.seed + 1)
            bound = ln_batch - dev.nce_loss
            if bound > ln_batch + 1e-9:
                raise NumericError(f"互信息下界 {bound:.4f} 超过 ln(B)={ln_batch:.4f}")
            result.history.append(EpochRecord(epoch=epoch, train_loss=train_loss, dev_loss=dev.nce_loss,
                                              dev_accuracy=dev.accuracy, bound=bound))
            logger.info(f"[cpc] epoch {epoch}: train={train_loss:.4f} dev={dev.nce_loss:.4f} "
                        f"acc@k={dev.accuracy:.3f} bound={bound:.4f}")
            if dev.nce_loss < best_loss:
                best_loss = dev.nce_loss
                result.best_epoch = epoch
                result.best_state = model.state_dict()

        if result.best_state:
            model.load_state_dict(result.best_state)
        return result
