"""Deterministic training loop, measurement cadence, run logs, and A/B runs.

A run writes three artifacts into its output directory: `run.ndjson`
(one MetricEvent per line, schema-versioned header first), `sharpness.csv`
(per-group statistics at every measurement step), and `model.npz` (final
checkpoint). Identical configs replay bitwise identically apart from
wall-clock fields.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset, fixed_windows, load_corpus, sample_windows
from .model import BLOCK_TYPES, ModelConfig, TransformerModel, build_model, model_loss, save_checkpoint
from .optim import (
    BlockwiseLrConfig,
    OptHyper,
    OPTIMIZER_STEPS,
    OptState,
    ScheduleConfig,
    clip_global_norm,
    effective_lr,
    schedule_lr,
)
from .sharpness import FisherConfig, block_param_norms, block_sharpness, fisher_diag, reports_to_csv

SCHEMA_VERSION = 1
OUT_DIR_ENV = "BLOCKLAB_OUT_DIR"


class TrainAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    corpus: str
    out_dir: str
    model: dict = field(default_factory=dict)  # ModelConfig kwargs, vocab from corpus
    optimizer: str = "adamw"
    hyper: OptHyper = field(default_factory=OptHyper)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    blockwise: BlockwiseLrConfig = field(default_factory=BlockwiseLrConfig)
    batch_size: int = 8
    cadence: int = 100
    fisher: FisherConfig = field(default_factory=FisherConfig)
    val_windows: int = 8
    split: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZER_STEPS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.val_windows < 1:
            raise ValueError("batch_size and val_windows must be >= 1")
        if self.cadence < 1 or self.schedule.total_steps % self.cadence != 0:
            raise ValueError("cadence must divide total_steps")

    def resolved_out_dir(self) -> str:
        base = os.environ.get(OUT_DIR_ENV)
        if base:
            return os.path.join(base, os.path.basename(os.path.normpath(self.out_dir)))
        return self.out_dir


@dataclass
class RunResult:
    out_dir: str
    events: list
    reports: list
    train_losses: np.ndarray      # per-step batch loss, steps 1..total
    val_steps: list
    val_losses: list

    @property
    def terminal_train_loss(self) -> float:
        return float(self.train_losses[-1])

    @property
    def terminal_val_loss(self) -> float:
        return float(self.val_losses[-1])

    @property
    def log_path(self) -> str:
        return os.path.join(self.out_dir, "run.ndjson")


def _mean_loss(model: TransformerModel, batch: np.ndarray) -> float:
    with ad.Tape():
        return float(model_loss(model, batch).data)


def train_run(cfg: TrainConfig) -> RunResult:
    """Run the configured training loop and write the run artifacts."""
    out_dir = cfg.resolved_out_dir()
    os.makedirs(out_dir, exist_ok=True)
    ds = load_corpus(cfg.corpus, cfg.split, cfg.seed)
    mcfg = ModelConfig(**{**cfg.model, "vocab_size": ds.vocab_size})
    model = build_model(mcfg)
    block_of = model.block_type_of()
    step_fn = OPTIMIZER_STEPS[cfg.optimizer]
    state = OptState()
    params = {pid: t.data for pid, t in model.params.items()}

    batch_rng, eval_rng, label_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)
    ]
    window = mcfg.context + 1
    val_batch = fixed_windows(ds.val_ids, cfg.val_windows, window)
    total = cfg.schedule.total_steps
    warmup = cfg.schedule.warmup_steps

    events: list[dict] = []
    reports: list = []
    train_losses = np.zeros(total)
    val_steps: list[int] = []
    val_losses: list[float] = []

    def measure(step: int) -> dict:
        val = _mean_loss(model, val_batch)
        eval_batch = sample_windows(ds.val_ids, cfg.fisher.batch_size, window, eval_rng)
        h = fisher_diag(model, eval_batch, label_rng)
        for grouping in ("block_type", "layer"):
            reports.append(block_sharpness(h, model.registry, grouping, "log", step))
        per_type, _ = block_param_norms(model)
        val_steps.append(step)
        val_losses.append(val)
        return {"val_loss": val, "param_norms": per_type}

    log_path = os.path.join(out_dir, "run.ndjson")
    with open(log_path, "w", encoding="utf-8") as log:

        def emit(event: dict):
            event["wall_clock"] = time.time()
            events.append(event)
            log.write(json.dumps(event) + "\n")

        emit({
            "type": "header",
            "schema_version": SCHEMA_VERSION,
            "config": config_to_dict(cfg),
            "vocab_size": ds.vocab_size,
            "param_count": sum(p.size for p in params.values()),
        })
        emit({"type": "measure", "step": 0, **measure(0)})

        for step in range(1, total + 1):
            batch = sample_windows(ds.train_ids, cfg.batch_size, window, batch_rng)
            with ad.Tape() as tape:
                loss = model_loss(model, batch)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    emit({"type": "abort", "step": step, "reason": "non-finite loss"})
                    raise TrainAborted(f"non-finite loss at step {step}")
                grads = tape.backward(loss, model.params)
            clipped, raw_norm = clip_global_norm(grads, cfg.hyper.clip_threshold)
            base_lr = schedule_lr(cfg.schedule, step)
            lr_by_block = {
                bt: effective_lr(base_lr, bt, cfg.blockwise, step, warmup)
                for bt in BLOCK_TYPES
            }
            step_fn(state, params, clipped, lr_by_block, cfg.hyper, block_of)
            train_losses[step - 1] = loss_val
            event = {
                "type": "step",
                "step": step,
                "train_loss": loss_val,
                "lr_base": base_lr,
                "lr": {bt.value: lr_by_block[bt] for bt in BLOCK_TYPES},
                "grad_norm_raw": raw_norm,
                "grad_norm_applied": min(raw_norm, cfg.hyper.clip_threshold),
            }
            if step % cfg.cadence == 0:
                event.update(measure(step))
            emit(event)

    with open(os.path.join(out_dir, "sharpness.csv"), "w", encoding="utf-8") as fh:
        fh.write(reports_to_csv(reports))
    save_checkpoint(model, os.path.join(out_dir, "model.npz"))
    return RunResult(
        out_dir=out_dir, events=events, reports=reports,
        train_losses=train_losses, val_steps=val_steps, val_losses=val_losses,
    )


def compare_runs(cfg_a: TrainConfig, cfg_b: TrainConfig) -> dict:
    """Run an A/B pair sharing model, data, and seed; summarize the outcome.

    Reports terminal losses, per-step loss deltas, the first measured step
    at which run B's validation loss stays below run A's, and the first
    step at which B sustains A's terminal validation loss (the speedup
    readout: total_steps / that step).
    """
    for field_name in ("corpus", "model", "seed", "split", "batch_size"):
        if getattr(cfg_a, field_name) != getattr(cfg_b, field_name):
            raise ValueError(f"configs must share {field_name}")
    if cfg_a.schedule.total_steps != cfg_b.schedule.total_steps:
        raise ValueError("configs must share total_steps")
    res_a = train_run(cfg_a)
    res_b = train_run(cfg_b)
    deltas = res_a.train_losses - res_b.train_losses

    def first_sustained(values_b, reference):
        """Earliest measured step from which B stays at or below reference."""
        best = None
        for step, v in zip(res_b.val_steps, values_b):
            if step == 0:
                continue
            if v <= reference:
                if best is None:
                    best = step
            else:
                best = None
        return best

    sustain = first_sustained(res_b.val_losses, res_a.terminal_val_loss)
    crossover = None
    for i, step in enumerate(res_b.val_steps):
        if step == 0:
            continue
        if all(b < a for a, b in zip(res_a.val_losses[i:], res_b.val_losses[i:])):
            crossover = step
            break
    total = cfg_a.schedule.total_steps
    summary = {
        "total_steps": total,
        "terminal_train_loss_a": res_a.terminal_train_loss,
        "terminal_train_loss_b": res_b.terminal_train_loss,
        "terminal_val_loss_a": res_a.terminal_val_loss,
        "terminal_val_loss_b": res_b.terminal_val_loss,
        "mean_step_delta": float(deltas.mean()),
        "step_deltas": [float(x) for x in deltas],
        "val_steps": res_a.val_steps,
        "val_losses_a": res_a.val_losses,
        "val_losses_b": res_b.val_losses,
        "crossover_step": crossover,
        "sustain_step": sustain,
        "speedup_vs_terminal": (total / sustain) if sustain else None,
        "out_dir_a": res_a.out_dir,
        "out_dir_b": res_b.out_dir,
    }
    return summary


# ---------------------------------------------------------------------------
# config file io (strict JSON: unknown keys rejected)
# ---------------------------------------------------------------------------

_SECTION_TYPES = {
    "hyper": OptHyper,
    "schedule": ScheduleConfig,
    "blockwise": BlockwiseLrConfig,
    "fisher": FisherConfig,
}
_SCALAR_KEYS = (
    "corpus", "out_dir", "optimizer", "batch_size", "cadence",
    "val_windows", "split", "seed",
)
_MODEL_KEYS = (
    "n_layer", "width", "n_head", "ffn_width", "context",
    "norm_kind", "act_kind", "norm_eps", "tie_head", "seed",
)


def _check_keys(given: dict, allowed, where: str):
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ValueError(f"unknown config key(s) in {where}: {', '.join(unknown)}")


def config_from_dict(raw: dict) -> TrainConfig:
    _check_keys(raw, _SCALAR_KEYS + ("model",) + tuple(_SECTION_TYPES), "config")
    kwargs = {k: raw[k] for k in _SCALAR_KEYS if k in raw}
    model = dict(raw.get("model", {}))
    _check_keys(model, _MODEL_KEYS, "config.model")
    kwargs["model"] = model
    for section, cls in _SECTION_TYPES.items():
        if section in raw:
            sec = dict(raw[section])
            _check_keys(sec, [f for f in cls.__dataclass_fields__], f"config.{section}")
            kwargs[section] = cls(**sec)
    return TrainConfig(**kwargs)


def config_to_dict(cfg: TrainConfig) -> dict:
    out = {k: getattr(cfg, k) for k in _SCALAR_KEYS}
    out["model"] = dict(cfg.model)
    out["hyper"] = vars(cfg.hyper).copy()
    out["schedule"] = vars(cfg.schedule).copy()
    bw = vars(cfg.blockwise).copy()
    bw["ratios"] = {bt.value: r for bt, r in cfg.blockwise.ratios.items()}
    out["blockwise"] = bw
    out["fisher"] = vars(cfg.fisher).copy()
    return out


def load_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: TrainConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")
