"""GPT-2-style decoder-only transformer with a block-type parameter registry.

Pre-norm residual layout: each layer applies self-attention then a
feedforward block, both behind a normalization, with a final norm before
the (weight-tied) output head. Every parameter tensor is tagged with one
of five block types: Emb, QK, VO, FFN, Norm.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad


class BlockType(str, Enum):
    EMB = "Emb"
    QK = "QK"
    VO = "VO"
    FFN = "FFN"
    NORM = "Norm"


BLOCK_TYPES = (BlockType.EMB, BlockType.QK, BlockType.VO, BlockType.FFN, BlockType.NORM)


@dataclass
class ModelConfig:
    n_layer: int = 2
    width: int = 128
    n_head: int = 4
    ffn_width: int = 512
    vocab_size: int = 64
    context: int = 64
    norm_kind: str = "layernorm"
    act_kind: str = "gelu"
    norm_eps: float = 1e-5
    tie_head: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_layer < 1 or self.width < 2 or self.ffn_width < 1:
            raise ValueError("invalid model dimensions")
        if self.width % self.n_head != 0:
            raise ValueError("width must be divisible by n_head")
        if self.vocab_size < 2 or self.context < 2:
            raise ValueError("vocab_size and context must be at least 2")
        if self.norm_kind not in ("layernorm", "rmsnorm"):
            raise ValueError(f"unknown norm kind {self.norm_kind!r}")
        if self.act_kind not in ("gelu", "relu", "leaky_relu"):
            raise ValueError(f"unknown activation {self.act_kind!r}")


@dataclass(frozen=True)
class ParamSpec:
    id: str
    shape: tuple
    block_type: BlockType
    layer: int  # 0 = embeddings, 1..L = transformer layers, L+1 = final norm

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def classify_param(pid: str) -> BlockType:
    """Map a parameter id to its block type by the naming contract."""
    leaf = pid.rsplit(".", 1)[-1]
    if pid in ("wte", "wpe", "head"):
        return BlockType.EMB
    if leaf in ("w_q", "w_k"):
        return BlockType.QK
    if leaf in ("w_v", "w_o"):
        return BlockType.VO
    if leaf in ("w_1", "w_2"):
        return BlockType.FFN
    if leaf == "gamma":
        return BlockType.NORM
    raise KeyError(f"unknown parameter id {pid!r}")


def build_registry(config: ModelConfig) -> list[ParamSpec]:
    """Ordered ParamSpec list for a config, without allocating tensors."""
    d, w, m = config.vocab_size, config.width, config.ffn_width
    specs = [
        ParamSpec("wte", (d, w), BlockType.EMB, 0),
        ParamSpec("wpe", (config.context, w), BlockType.EMB, 0),
    ]
    for i in range(config.n_layer):
        layer = i + 1
        pre = f"h.{i}."
        specs += [
            ParamSpec(pre + "ln_1.gamma", (w,), BlockType.NORM, layer),
            ParamSpec(pre + "attn.w_q", (w, w), BlockType.QK, layer),
            ParamSpec(pre + "attn.w_k", (w, w), BlockType.QK, layer),
            ParamSpec(pre + "attn.w_v", (w, w), BlockType.VO, layer),
            ParamSpec(pre + "attn.w_o", (w, w), BlockType.VO, layer),
            ParamSpec(pre + "ln_2.gamma", (w,), BlockType.NORM, layer),
            ParamSpec(pre + "ffn.w_1", (w, m), BlockType.FFN, layer),
            ParamSpec(pre + "ffn.w_2", (m, w), BlockType.FFN, layer),
        ]
    specs.append(ParamSpec("ln_f.gamma", (w,), BlockType.NORM, config.n_layer + 1))
    if not config.tie_head:
        specs.append(ParamSpec("head", (d, w), BlockType.EMB, config.n_layer + 1))
    for s in specs:
        assert s.block_type == classify_param(s.id)
    return specs


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count implied by a config."""
    d, w, m, L = config.vocab_size, config.width, config.ffn_width, config.n_layer
    n = d * w + config.context * w
    n += L * (4 * w * w + 2 * w * m + 2 * w)
    n += w
    if not config.tie_head:
        n += d * w
    return n


class TransformerModel:
    """Parameter tensors plus their registry; forward pass builds on a Tape."""

    def __init__(self, config: ModelConfig, params: dict[str, ad.Tensor]):
        self.config = config
        self.registry = build_registry(config)
        self.params = params
        total = sum(p.data.size for p in params.values())
        if total != param_count(config):
            raise ValueError("parameter tensors do not match the config's count")

    def spec(self, pid: str) -> ParamSpec:
        for s in self.registry:
            if s.id == pid:
                return s
        raise KeyError(pid)

    def block_type_of(self) -> dict[str, BlockType]:
        return {s.id: s.block_type for s in self.registry}

    def logits(self, tokens: np.ndarray, return_embedded: bool = False):
        """Forward pass to next-token logits; records onto the active Tape.

        tokens: int array (batch, T) with T <= context.
        """
        tokens = np.atleast_2d(np.asarray(tokens))
        bsz, t = tokens.shape
        cfg = self.config
        if t > cfg.context:
            raise ValueError(f"sequence length {t} exceeds context {cfg.context}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id out of vocabulary range")
        p = self.params
        h, hd = cfg.n_head, cfg.width // cfg.n_head

        x = ad.add(ad.embedding(p["wte"], tokens), ad.embedding(p["wpe"], np.arange(t)))
        embedded = x
        for i in range(cfg.n_layer):
            pre = f"h.{i}."
            xn = ad.normalize(x, p[pre + "ln_1.gamma"], cfg.norm_kind, cfg.norm_eps)
            q = self._heads(ad.matmul(xn, p[pre + "attn.w_q"]), bsz, t, h, hd)
            k = self._heads(ad.matmul(xn, p[pre + "attn.w_k"]), bsz, t, h, hd)
            v = self._heads(ad.matmul(xn, p[pre + "attn.w_v"]), bsz, t, h, hd)
            att = ad.softmax_rows(
                ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(hd)),
                causal=True,
            )
            ctx = ad.reshape(ad.swapaxes(ad.matmul(att, v), 1, 2), (bsz, t, cfg.width))
            x = ad.add(x, ad.matmul(ctx, p[pre + "attn.w_o"]))
            xn2 = ad.normalize(x, p[pre + "ln_2.gamma"], cfg.norm_kind, cfg.norm_eps)
            f = ad.matmul(
                ad.activation(ad.matmul(xn2, p[pre + "ffn.w_1"]), cfg.act_kind),
                p[pre + "ffn.w_2"],
            )
            x = ad.add(x, f)
        xf = ad.normalize(x, p["ln_f.gamma"], cfg.norm_kind, cfg.norm_eps)
        head = p["wte"] if cfg.tie_head else p["head"]
        out = ad.matmul(xf, ad.transpose(head))
        if return_embedded:
            return out, embedded
        return out

    @staticmethod
    def _heads(z, bsz, t, h, hd):
        return ad.swapaxes(ad.reshape(z, (bsz, t, h, hd)), 1, 2)


def build_model(config: ModelConfig, seed: int | None = None) -> TransformerModel:
    """Initialize a model: N(0, 0.02^2) weights, residual projections
    (w_o, w_2) scaled by 1/sqrt(2L), gains at 1, head tied to wte."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    resid_scale = 1.0 / math.sqrt(2 * config.n_layer)
    params: dict[str, ad.Tensor] = {}
    for s in build_registry(config):
        if s.block_type is BlockType.NORM:
            data = np.ones(s.shape)
        else:
            data = rng.normal(0.0, 0.02, size=s.shape)
            if s.id.endswith(("attn.w_o", "ffn.w_2")):
                data *= resid_scale
        params[s.id] = ad.parameter(s.id, data)
    return TransformerModel(config, params)


def model_loss(model: TransformerModel, batch: np.ndarray) -> ad.Tensor:
    """Next-token cross-entropy over a token window (batch, T+1).

    Positions 0..T-1 are inputs, 1..T are targets; the mean runs over
    batch and positions. Must be called under an active Tape.
    """
    batch = np.atleast_2d(np.asarray(batch))
    if batch.shape[1] < 2:
        raise ValueError("batch windows need at least 2 tokens")
    logits = model.logits(batch[:, :-1])
    return ad.cross_entropy_next_token(logits, batch[:, 1:])


CHECKPOINT_VERSION = 1


def save_checkpoint(model: TransformerModel, path: str) -> None:
    """Write config + named f64 tensors to an npz container (bit-exact)."""
    meta = {"version": CHECKPOINT_VERSION, "config": vars(model.config)}
    arrays = {f"param/{pid}": t.data for pid, t in model.params.items()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str) -> TransformerModel:
    if not zipfile.is_zipfile(path):
        raise ValueError(f"{path} is not a checkpoint container")
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        config = ModelConfig(**meta["config"])
        params = {}
        for key in z.files:
            if key.startswith("param/"):
                pid = key[len("param/"):]
                params[pid] = ad.parameter(pid, z[key])
    return TransformerModel(config, params)
