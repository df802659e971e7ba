"""
信息量恒等式、NCE 估计与 InfoNCE 互信息下界的数值校验
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import expit, xlogy

from analysis.autodiff import AdamState, Tape, Tensor, apply_step, backward, diagonal, gather, log_softmax_rows, scale, sum_all
from models.errors import DataError, NumericError
from models.oracle_models import BoundReport, DiscreteJoint, NceFit, NceProblem


# ---------------------------------------------------------------- 熵与互信息

def entropy(pmf) -> float:
    """H(X) = -Σ p ln p，约定 0 ln 0 = 0"""
    p = np.asarray(pmf, dtype=np.float64).reshape(-1)
    if np.any(p < 0):
        raise DataError("概率分布存在负值")
    if abs(p.sum() - 1.0) > 1e-12:
        raise DataError(f"概率分布总和必须为 1，实际 {p.sum():.15f}")
    return float(-xlogy(p, p).sum())


def _joint(joint) -> DiscreteJoint:
    return joint if isinstance(joint, DiscreteJoint) else DiscreteJoint(joint)


def conditional_entropy(joint) -> float:
    """H(X|Y) = -Σ p(x,y) ln p(x|y)"""
    j = _joint(joint)
    py = j.py
    cond = np.divide(j.p, py[None, :], out=np.zeros_like(j.p), where=py[None, :] > 0)
    return float(-xlogy(j.p, cond).sum())


def mutual_information(joint) -> float:
    """I(X;Y) = H(X) - H(X|Y)"""
    j = _joint(joint)
    return entropy(j.px) - conditional_entropy(j)


def mutual_information_double_sum(joint) -> float:
    """I(X;Y) = Σ p(x,y) ln(p(x|y) / p(x))"""
    j = _joint(joint)
    px, py = j.px, j.py
    denom = px[:, None] * py[None, :]
    ratio = np.divide(j.p, denom, out=np.ones_like(j.p), where=j.p > 0)
    return float(xlogy(j.p, ratio).sum())


# ---------------------------------------------------------------- NCE

def _nce_objective(theta: np.ndarray, problem: NceProblem, log_nu: float,
                   data_noise_logpdf: np.ndarray, noise_noise_logpdf: np.ndarray) -> Tuple[float, np.ndarray]:
    """J_T 及其梯度，theta = (mu, log_sigma, c)"""
    mu, log_sigma, c = theta
    inv_var = np.exp(-2 * log_sigma)

    def log_ratio(u, noise_logpdf):
        return -0.5 * (u - mu) ** 2 * inv_var + c - noise_logpdf - log_nu

    a_data = log_ratio(problem.data, data_noise_logpdf)
    a_noise = log_ratio(problem.noise, noise_noise_logpdf)
    # ln σ(a) = -ln(1 + e^{-a})，ln(1 - σ(a)) = -ln(1 + e^{a})
    value = (-np.logaddexp(0, -a_data).sum() - np.logaddexp(0, a_noise).sum()) / problem.data.size

    w_data = 1 - expit(a_data)
    w_noise = -expit(a_noise)

    def dparams(u, w):
        diff = u - mu
        return np.array([
            (w * diff * inv_var).sum(),
            (w * diff ** 2 * inv_var).sum(),
            w.sum(),
        ])

    grad = (dparams(problem.data, w_data) + dparams(problem.noise, w_noise)) / problem.data.size
    return float(value), grad


def nce_fit(problem: NceProblem, iters: int = 2000, seed: int = 0, tol: float = 1e-9) -> NceFit:
    """全量梯度上升 + Armijo 回溯，目标值单调不减"""
    rng = np.random.default_rng(seed)
    log_nu = float(np.log(problem.nu))
    data_noise_logpdf = problem.noise_logpdf(problem.data)
    noise_noise_logpdf = problem.noise_logpdf(problem.noise)

    spread = max(float(np.std(problem.data)), 1e-3)
    theta = np.array([
        float(np.mean(problem.data)) + 0.1 * spread * rng.standard_normal(),
        np.log(spread),
        -np.log(spread * np.sqrt(2 * np.pi)),
    ])
    value, grad = _nce_objective(theta, problem, log_nu, data_noise_logpdf, noise_noise_logpdf)
    if not np.isfinite(value):
        raise NumericError("NCE 初始目标值非有限", last_finite=None)
    trace = [value]
    step = 1.0

    for it in range(iters):
        norm2 = float(grad @ grad)
        if norm2 < tol ** 2:
            break
        accepted = False
        for _ in range(60):
            candidate = theta + step * grad
            cand_value, cand_grad = _nce_objective(candidate, problem, log_nu, data_noise_logpdf, noise_noise_logpdf)
            if not np.isfinite(cand_value):
                step *= 0.5
                continue
            if cand_value >= value + 1e-4 * step * norm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if not np.isfinite(cand_value):
                raise NumericError(f"NCE 在第 {it} 次迭代发散", last_finite=theta.copy())
            break
        theta, value, grad = candidate, cand_value, cand_grad
        trace.append(value)
        step = min(step * 2.0, 1e3)
        logger.debug(f"[nce] iter {it}: J={value:.8f} step={step:.3g}")

    logger.info(f"[nce] 拟合完成: mu={theta[0]:.4f} sigma={np.exp(theta[1]):.4f} c={theta[2]:.4f}, "
                f"{len(trace) - 1} 步")
    return NceFit(mu=float(theta[0]), log_sigma=float(theta[1]), c=float(theta[2]), trace=trace)


def nce_posterior(fit: NceFit, problem: NceProblem, samples: np.ndarray) -> np.ndarray:
    """h(u) = sigmoid(G(u) - ln ν)"""
    u = np.asarray(samples, dtype=np.float64)
    log_model = -0.5 * (u - fit.mu) ** 2 / fit.sigma ** 2 + fit.c
    return expit(log_model - problem.noise_logpdf(u) - np.log(problem.nu))


def log_ratio_g(fit: NceFit, problem: NceProblem, samples: np.ndarray) -> np.ndarray:
    """G(u) = ln P_M(u) - ln P_N(u)"""
    u = np.asarray(samples, dtype=np.float64)
    return -0.5 * (u - fit.mu) ** 2 / fit.sigma ** 2 + fit.c - problem.noise_logpdf(u)


# ---------------------------------------------------------------- InfoNCE 下界

def random_channel(n_classes: int, rng: np.random.Generator, concentration: float = 0.5) -> np.ndarray:
    """每一行为 Dirichlet 采样的条件分布 P(u | s)"""
    return rng.dirichlet(np.full(n_classes, concentration), size=n_classes)


def _sample_batch(channel: np.ndarray, batch: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n = channel.shape[0]
    contexts = rng.integers(0, n, size=batch)
    cumulative = np.cumsum(channel[contexts], axis=1)
    futures = (cumulative < rng.random(batch)[:, None]).sum(axis=1)
    return contexts, np.minimum(futures, n - 1)


def _batch_loss(table: Tensor, contexts: np.ndarray, futures: np.ndarray) -> Tensor:
    scores = gather(table, contexts, futures)
    return scale(sum_all(diagonal(log_softmax_rows(scores))), -1.0 / len(contexts))


def infonce_bound_experiment(n_classes: int, batch: int, trials: int = 200, seed: int = 0,
                             channel: Optional[np.ndarray] = None, train_steps: int = 1500,
                             lr: float = 0.05) -> BoundReport:
    """
    已知互信息的离散信道上训练表格型打分函数，再在 trials 个新 batch 上估计平均损失
    返回的下界 ln N - loss 不应超过真实互信息
    """
    if batch < 2:
        raise DataError(f"batch 至少为 2: {batch}")
    rng = np.random.default_rng(seed)
    if channel is None:
        channel = random_channel(n_classes, rng)
    channel = np.asarray(channel, dtype=np.float64)
    prior = np.full(channel.shape[0], 1.0 / channel.shape[0])
    i_true = mutual_information(DiscreteJoint.from_channel(prior, channel))

    table = Tensor(np.zeros(channel.shape), requires_grad=True, name="critic")
    state = AdamState.for_params([table.data])
    for _ in range(train_steps):
        contexts, futures = _sample_batch(channel, batch, rng)
        table.zero_grad()
        with Tape() as tape:
            loss = _batch_loss(table, contexts, futures)
        backward(tape, loss)
        state = apply_step([table], state, lr)

    losses = [_batch_loss(table, *_sample_batch(channel, batch, rng)).item() for _ in range(trials)]
    report = BoundReport(i_true=i_true, loss=float(np.mean(losses)), batch=batch)
    logger.info(f"[oracle] I={report.i_true:.4f} loss={report.loss:.4f} bound={report.bound:.4f} (N={batch})")
    return report


def infonce_bound_sweep(n_classes: int, batch: int, channels: int = 20, trials: int = 200, seed: int = 0,
                        workers: int = 1, train_steps: int = 1500) -> pd.DataFrame:
    """多个随机信道上的下界实验，返回 trial, I_true, loss, bound"""

    def run(index: int) -> BoundReport:
        report = infonce_bound_experiment(n_classes, batch, trials, seed + index, train_steps=train_steps)
        report.trial = index
        return report

    if workers <= 1:
        reports = [run(i) for i in range(channels)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run, range(channels)))
    return pd.DataFrame({
        "trial": [r.trial for r in reports],
        "I_true": [r.i_true for r in reports],
        "loss": [r.loss for r in reports],
        "bound": [r.bound for r in reports],
    })
