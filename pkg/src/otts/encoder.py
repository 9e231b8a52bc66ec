"""Trainable feature extractor with online/target parameter sets.

The extractor is a small fully-connected net (tanh hidden layers,
linear output) whose parameters are explicit numpy arrays, so the
whole training loop stays deterministic and the loss gradient can be
validated against finite differences.  Two parameter sets exist during
training: the online set updated by Adam, and the target set that
trails it by an exponential moving average and is the deployed
extractor.

The gradient of the pairwise transport loss w.r.t. the online
parameters is computed analytically: the Wasserstein term is
differentiated exactly through the Sinkhorn fixed point (see
`solvers.wasserstein_cost_gradient`), the structural term uses the
optimal coupling held fixed (it is annealed to a near-vertex where the
envelope gradient is exact), and both are backpropagated through the
encoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .graphs import Task, build_graph
from .solvers import (
    OtResult,
    SolverConfig,
    cross_cost,
    gromov_wasserstein,
    sinkhorn,
    wasserstein_cost_gradient,
)

__all__ = [
    "EncoderParams",
    "EmaConfig",
    "AdamState",
    "init_encoder",
    "forward",
    "ema_update",
    "adam_step",
    "grad_ot_loss",
    "GradResult",
    "pair_loss",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointFormatError",
]

CHECKPOINT_MAGIC = b"OTTS"
CHECKPOINT_VERSION = 1

_NORM_FLOOR = 1e-12  # treat coincident points as zero-gradient, not 0/0


@dataclass
class EncoderParams:
    """Weights and biases of the extractor, one (W, b) pair per layer."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    param_version: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        prev_out = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i} has inconsistent shapes")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ValueError(
                    f"layer {i} expects {w.shape[1]} inputs, previous "
                    f"layer emits {prev_out}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i} has non-finite parameters")
            prev_out = w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            [(w.copy(), b.copy()) for w, b in self.layers], self.param_version
        )


@dataclass(frozen=True)
class EmaConfig:
    """Target decay rate and online learning rate."""

    tau: float = 0.99
    learning_rate: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def init_encoder(dims: tuple[int, ...] = (16, 32, 8), seed: int = 0) -> EncoderParams:
    """Fan-in-scaled uniform initialisation, reproducible per seed."""
    if len(dims) < 2:
        raise ValueError("dims must chain at least input -> output")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(
            (
                rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                rng.uniform(-bound, bound, size=fan_out),
            )
        )
    return EncoderParams(layers)


def _forward_cached(params: EncoderParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    acts = [x]
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        pre = acts[-1] @ w.T + b
        acts.append(np.tanh(pre) if i < last else pre)
    return acts[-1], acts


def forward(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Encode a feature vector or an n x dim matrix of them.

    Hidden layers apply tanh; the output layer is linear.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(
            f"input dimension {x.shape[-1]} does not match encoder "
            f"input {params.in_dim}"
        )
    out, _ = _forward_cached(params, x)
    return out[0] if single else out


def _backprop(
    params: EncoderParams, acts: list, grad_out: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    grads = [None] * len(params.layers)
    g = grad_out
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        w, _ = params.layers[i]
        if i < last:
            g = g * (1.0 - acts[i + 1] ** 2)  # tanh'
        grads[i] = (g.T @ acts[i], g.sum(axis=0))
        if i > 0:
            g = g @ w
    return grads


def ema_update(target: EncoderParams, online: EncoderParams, tau: float) -> EncoderParams:
    """New target parameters tau * target + (1 - tau) * online, elementwise.

    tau = 0 copies the online set, tau = 1 keeps the target unchanged;
    training configs restrict tau to (0, 1) but the update itself is
    defined on the closed interval.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if len(target.layers) != len(online.layers):
        raise ValueError("parameter sets have different layer counts")
    layers = []
    for i, ((wt, bt), (wo, bo)) in enumerate(zip(target.layers, online.layers)):
        if wt.shape != wo.shape or bt.shape != bo.shape:
            raise ValueError(f"layer {i} shapes differ between target and online")
        layers.append((tau * wt + (1.0 - tau) * wo, tau * bt + (1.0 - tau) * bo))
    return EncoderParams(layers, param_version=target.param_version + 1)


@dataclass
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    t: int = 0

    @classmethod
    def zeros(cls, params: EncoderParams) -> "AdamState":
        zs = lambda: [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
        return cls(m=zs(), v=zs())


def adam_step(
    params: EncoderParams,
    grads: list[tuple[np.ndarray, np.ndarray]],
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[EncoderParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    for gw, gb in grads:
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise ValueError("gradient contains non-finite values")
    t = state.t + 1
    new_layers, new_m, new_v = [], [], []
    for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(
        params.layers, grads, state.m, state.v
    ):
        mw = beta1 * mw + (1 - beta1) * gw
        mb = beta1 * mb + (1 - beta1) * gb
        vw = beta2 * vw + (1 - beta2) * gw**2
        vb = beta2 * vb + (1 - beta2) * gb**2
        mw_hat = mw / (1 - beta1**t)
        mb_hat = mb / (1 - beta1**t)
        vw_hat = vw / (1 - beta2**t)
        vb_hat = vb / (1 - beta2**t)
        new_layers.append(
            (
                w - learning_rate * mw_hat / (np.sqrt(vw_hat) + eps),
                b - learning_rate * mb_hat / (np.sqrt(vb_hat) + eps),
            )
        )
        new_m.append((mw, mb))
        new_v.append((vw, vb))
    return (
        EncoderParams(new_layers, param_version=params.param_version + 1),
        AdamState(m=new_m, v=new_v, t=t),
    )


@dataclass
class GradResult:
    """Gradient w.r.t. the online parameters plus loss diagnostics."""

    grads: list[tuple[np.ndarray, np.ndarray]]
    loss: float
    solver_converged: bool


def _zero_grads(params: EncoderParams):
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]


def _accumulate(total, extra):
    return [(tw + ew, tb + eb) for (tw, tb), (ew, eb) in zip(total, extra)]


def _wd_term(
    z_online: np.ndarray, z_target: np.ndarray, cfg: SolverConfig
) -> tuple[float, np.ndarray, bool]:
    """Wasserstein value, its gradient w.r.t. the online embeddings."""
    n, m = z_online.shape[0], z_target.shape[0]
    cost = cross_cost(z_online, z_target)
    result = sinkhorn(
        cost,
        np.full(n, 1.0 / n),
        np.full(m, 1.0 / m),
        epsilon=cfg.epsilon,
        max_iter=cfg.max_iter,
        tol=cfg.tol,
        newton_polish=cfg.newton_polish,
    )
    plan_eff = wasserstein_cost_gradient(cost, result.plan.coupling, cfg.epsilon)
    safe = np.maximum(cost, _NORM_FLOOR)
    weights = np.where(cost > _NORM_FLOOR, plan_eff / safe, 0.0)
    grad_z = (weights[:, :, None] * (z_online[:, None, :] - z_target[None, :, :])).sum(
        axis=1
    )
    return result.distance, grad_z, result.converged


def _gw_term(
    z_online: np.ndarray, z_target: np.ndarray, cfg: SolverConfig, task_id: int
) -> tuple[float, np.ndarray, bool]:
    """Structural value and envelope gradient w.r.t. online embeddings."""
    g_online = build_graph(z_online, task_id)
    g_target = build_graph(z_target, task_id)
    result = gromov_wasserstein(g_online, g_target, cfg)
    coupling = result.plan.coupling
    intra_on = g_online.intra_cost
    intra_tg = g_target.intra_cost
    # S[i,k] = sum_jl sign(A_ik - B_jl) T_ij T_kl, the objective's
    # sensitivity to each intra-distance of the online graph.
    sgn = np.sign(intra_on[:, None, :, None] - intra_tg[None, :, None, :])
    sens = np.einsum("ij,kl,ijkl->ik", coupling, coupling, sgn)
    np.fill_diagonal(sens, 0.0)
    safe = np.maximum(intra_on, _NORM_FLOOR)
    weights = np.where(intra_on > _NORM_FLOOR, 2.0 * sens / safe, 0.0)
    grad_z = (weights[:, :, None] * (z_online[:, None, :] - z_online[None, :, :])).sum(
        axis=1
    )
    return result.distance, grad_z, result.converged


def grad_ot_loss(
    online: EncoderParams,
    target: EncoderParams,
    task_a: Task,
    task_b: Task,
    wd_weight: float,
    cfg: SolverConfig = SolverConfig(),
) -> GradResult:
    """Gradient of the symmetric pairwise transport loss w.r.t. online params.

    The loss encodes task_a with the online net and task_b with the
    target net, measures their mixed transport distance, then swaps the
    roles of the two tasks and adds the second distance.  Only the
    online branch receives gradient; the target branch is a constant.
    If a solver fails to converge the gradient is still formed from the
    best-found plan and flagged via solver_converged.
    """
    if not 0.0 <= wd_weight <= 1.0:
        raise ValueError(f"wd_weight must be in [0, 1], got {wd_weight}")
    grads = _zero_grads(online)
    loss = 0.0
    all_converged = True
    for task_on, task_tg in ((task_a, task_b), (task_b, task_a)):
        z_on, acts = _forward_cached(online, task_on.features)
        z_tg = forward(target, task_tg.features)
        grad_z = np.zeros_like(z_on)
        if wd_weight > 0.0:
            wd_val, wd_grad, ok = _wd_term(z_on, z_tg, cfg)
            loss += wd_weight * wd_val
            grad_z += wd_weight * wd_grad
            all_converged &= ok
        if wd_weight < 1.0:
            gw_val, gw_grad, ok = _gw_term(z_on, z_tg, cfg, task_on.task_id)
            loss += (1.0 - wd_weight) * gw_val
            grad_z += (1.0 - wd_weight) * gw_grad
            all_converged &= ok
        grads = _accumulate(grads, _backprop(online, acts, grad_z))
    return GradResult(grads=grads, loss=loss, solver_converged=all_converged)


def pair_loss(
    online: EncoderParams,
    target: EncoderParams,
    task_a: Task,
    task_b: Task,
    wd_weight: float,
    cfg: SolverConfig = SolverConfig(),
) -> float:
    """The symmetric pairwise transport loss (no gradient)."""
    from .solvers import ot_loss  # local to avoid cycle at import time

    total = 0.0
    for task_on, task_tg in ((task_a, task_b), (task_b, task_a)):
        g_on = build_graph(forward(online, task_on.features), task_on.task_id)
        g_tg = build_graph(forward(target, task_tg.features), task_tg.task_id)
        total += ot_loss(g_on, g_tg, wd_weight, cfg)
    return total


class CheckpointFormatError(ValueError):
    """Raised when a parameter checkpoint cannot be parsed."""


def save_checkpoint(params: EncoderParams, path) -> None:
    """Write parameters as a versioned little-endian binary blob."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<IQ I", CHECKPOINT_VERSION,
                                            params.param_version,
                                            len(params.layers))]
    for w, b in params.layers:
        chunks.append(struct.pack("<II", w.shape[0], w.shape[1]))
    for w, b in params.layers:
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> EncoderParams:
    """Read a checkpoint written by save_checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic bytes, not a checkpoint file")
    off = 4
    try:
        version, param_version, n_layers = struct.unpack_from("<IQ I", blob, off)
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated header: {exc}") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    off += struct.calcsize("<IQ I")
    shapes = []
    for _ in range(n_layers):
        try:
            out_dim, in_dim = struct.unpack_from("<II", blob, off)
        except struct.error as exc:
            raise CheckpointFormatError(f"truncated shape table: {exc}") from exc
        shapes.append((out_dim, in_dim))
        off += 8
    layers = []
    for out_dim, in_dim in shapes:
        need = 8 * (out_dim * in_dim + out_dim)
        if off + need > len(blob):
            raise CheckpointFormatError(
                f"truncated parameter data at byte {off}: need {need} more bytes"
            )
        w = np.frombuffer(blob, dtype="<f8", count=out_dim * in_dim, offset=off)
        off += 8 * out_dim * in_dim
        b = np.frombuffer(blob, dtype="<f8", count=out_dim, offset=off)
        off += 8 * out_dim
        layers.append((w.reshape(out_dim, in_dim).copy(), b.copy()))
    if off != len(blob):
        raise CheckpointFormatError(f"{len(blob) - off} trailing bytes after data")
    return EncoderParams(layers, param_version=param_version)
