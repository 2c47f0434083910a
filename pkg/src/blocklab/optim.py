"""Optimizers, LR schedules, and the per-block-type learning-rate wrapper.

Three base optimizers are provided: AdamW (decoupled weight decay), a
memory-light Adam variant sharing one second-moment scalar per non-Emb
tensor, and sign-based Lion. The blockwise wrapper multiplies each block
type's LR by a fixed ratio once warmup ends, keeping Norm at the base rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import BLOCK_TYPES, BlockType

# Per-block LR ratios tuned for AdamW; Norm stays at the base rate.
ADAMW_RATIOS = {
    BlockType.EMB: 10.0,
    BlockType.QK: 8.0,
    BlockType.FFN: 6.0,
    BlockType.VO: 4.0,
    BlockType.NORM: 1.0,
}

# Re-tuned ratios for the shared-second-moment optimizer, whose within-block
# dynamics are SGD-like.
ADAM_MINI_RATIOS = {
    BlockType.EMB: 4.0,
    BlockType.QK: 1.0,
    BlockType.FFN: 4.0,
    BlockType.VO: 4.0,
    BlockType.NORM: 1.0,
}


@dataclass
class ScheduleConfig:
    kind: str = "cosine"  # cosine | wsd
    warmup_steps: int = 100
    total_steps: int = 2000
    lr_max: float = 1e-3
    lr_min: float | None = None  # cosine default: lr_max / 20
    wsd_stable_frac: float = 0.667

    def __post_init__(self):
        if self.kind not in ("cosine", "wsd"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")
        if self.lr_min is None:
            self.lr_min = self.lr_max / 20.0
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if not 0.0 < self.wsd_stable_frac < 1.0:
            raise ValueError("wsd_stable_frac must lie in (0, 1)")


@dataclass
class BlockwiseLrConfig:
    enabled: bool = False
    ratios: dict = field(default_factory=lambda: dict(ADAMW_RATIOS))
    switch_step: int | None = None  # default: warmup_steps of the schedule

    def __post_init__(self):
        self.ratios = {BlockType(k): float(v) for k, v in self.ratios.items()}
        missing = [bt for bt in BLOCK_TYPES if bt not in self.ratios]
        if missing:
            raise ValueError(f"ratios missing block types: {missing}")
        if any(r < 1.0 for r in self.ratios.values()):
            raise ValueError("all multipliers must be >= 1")
        if self.ratios[BlockType.NORM] != 1.0:
            raise ValueError("the Norm multiplier is fixed at 1")


@dataclass
class OptHyper:
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    eps: float = 1e-8
    clip_threshold: float = 1.0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")


LION_DEFAULTS = OptHyper(beta1=0.9, beta2=0.99, weight_decay=0.5)


def schedule_lr(cfg: ScheduleConfig, step: int) -> float:
    """Base LR at a step: linear 0 -> lr_max warmup, then cosine or wsd."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    if cfg.kind == "cosine":
        progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
        return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))
    # wsd: flat at lr_max through the stable phase, then linear to 0
    stable_end = cfg.wsd_stable_frac * cfg.total_steps
    if step <= stable_end:
        return cfg.lr_max
    return cfg.lr_max * (cfg.total_steps - step) / (cfg.total_steps - stable_end)


def effective_lr(
    base_lr: float, block_type: BlockType, blcfg: BlockwiseLrConfig, step: int,
    warmup_steps: int | None = None,
) -> float:
    """Blockwise LR: base before the switch step, base * ratio after.

    Norm blocks stay at the base rate at every step. The switch defaults
    to the end of warmup and is a step change, not a ramp.
    """
    if base_lr < 0:
        raise ValueError("base_lr must be >= 0")
    if not blcfg.enabled:
        return base_lr
    switch = blcfg.switch_step if blcfg.switch_step is not None else warmup_steps
    if switch is None:
        raise ValueError("switch_step unset and no warmup_steps given")
    if step < switch:
        return base_lr
    return base_lr * blcfg.ratios[block_type]


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], threshold: float):
    """Scale all gradients by threshold/||g|| when the global norm exceeds it."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_grad_norm(grads)
    if norm <= threshold:
        return grads, norm
    factor = threshold / norm
    return {k: g * factor for k, g in grads.items()}, norm


@dataclass
class OptState:
    """Moment buffers plus a monotone step counter.

    `v` holds per-coordinate arrays for AdamW, scalars for shared-moment
    tensors, and is empty for Lion.
    """

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(
    state: OptState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr_per_block: dict[BlockType, float],
    hyper: OptHyper,
    block_of: dict[str, BlockType],
) -> None:
    """One decoupled-weight-decay Adam step, in place.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + lambda * theta),
    with lr the effective rate of the parameter's block type. The decay
    term is scaled by the same blockwise lr.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for pid in sorted(params):
        g = grads[pid]
        m = state.m.setdefault(pid, np.zeros_like(params[pid]))
        v = state.v.setdefault(pid, np.zeros_like(params[pid]))
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        lr = lr_per_block[block_of[pid]]
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        params[pid] -= lr * (update + hyper.weight_decay * params[pid])


def adam_mini_step(
    state: OptState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr_per_block: dict[BlockType, float],
    hyper: OptHyper,
    block_of: dict[str, BlockType],
) -> None:
    """AdamW with one shared second-moment scalar per non-Emb tensor.

    The scalar tracks the tensor mean of g^2; Emb tensors keep the full
    per-coordinate second moment.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for pid in sorted(params):
        g = grads[pid]
        m = state.m.setdefault(pid, np.zeros_like(params[pid]))
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        if block_of[pid] is BlockType.EMB:
            v = state.v.setdefault(pid, np.zeros_like(params[pid]))
            v *= hyper.beta2
            v += (1.0 - hyper.beta2) * g * g
            denom = np.sqrt(v / c2) + hyper.eps
        else:
            v = state.v.get(pid, 0.0)
            v = hyper.beta2 * v + (1.0 - hyper.beta2) * float(np.mean(g * g))
            state.v[pid] = v
            denom = math.sqrt(v / c2) + hyper.eps
        lr = lr_per_block[block_of[pid]]
        params[pid] -= lr * ((m / c1) / denom + hyper.weight_decay * params[pid])


def lion_step(
    state: OptState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr_per_block: dict[BlockType, float],
    hyper: OptHyper,
    block_of: dict[str, BlockType],
) -> None:
    """Sign-momentum step: theta -= lr*(sign(b1*m + (1-b1)*g) + lambda*theta),
    then m <- b2*m + (1-b2)*g. Keeps only the first moment."""
    state.step += 1
    for pid in sorted(params):
        g = grads[pid]
        m = state.m.setdefault(pid, np.zeros_like(params[pid]))
        c = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        lr = lr_per_block[block_of[pid]]
        params[pid] -= lr * (np.sign(c) + hyper.weight_decay * params[pid])
        m *= hyper.beta2
        m += (1.0 - hyper.beta2) * g


OPTIMIZER_STEPS = {
    "adamw": adamw_step,
    "adam_mini": adam_mini_step,
    "lion": lion_step,
}


def second_moment_scalar_count(state: OptState) -> int:
    """Number of scalars held in second-moment buffers."""
    return sum(1 if np.isscalar(v) else int(np.asarray(v).size) for v in state.v.values())


def default_ratios(optimizer: str) -> dict[BlockType, float]:
    return dict(ADAM_MINI_RATIOS if optimizer == "adam_mini" else ADAMW_RATIOS)
