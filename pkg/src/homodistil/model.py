"""BERT-style encoder built on :mod:`homodistil.numerics`.

Weights are stored ``[in, out]`` so a layer computes ``x @ W + b`` and the
columns of ``W`` are its output neurons. Each layer may have its own
query/key, value and FFN widths; that is what a physically narrowed student
looks like. Attention heads are expressed through a per-column head
assignment rather than a reshape, so heads can shrink unevenly under pruning.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import numerics as nx
from .numerics import Tensor

PAD_BIAS = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 128
    max_seq_len: int = 32
    num_layers: int = 2
    hidden_dim: int = 32
    ffn_dim: int = 128
    num_heads: int = 4
    layernorm_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "max_seq_len", "num_layers", "hidden_dim", "ffn_dim", "num_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.layernorm_eps <= 0:
            raise ValueError("layernorm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# d_hidn / d_ffn of the teacher and the distilled students (12 layers, 30522 tokens).
PRESETS: dict[str, ModelConfig] = {
    "bert-base": ModelConfig(30522, 512, 12, 768, 3072, 12),
    "homobert-base": ModelConfig(30522, 512, 12, 576, 2304, 12),
    "homobert-small": ModelConfig(30522, 512, 12, 256, 1024, 4),
    "homobert-xsmall": ModelConfig(30522, 512, 12, 240, 960, 4),
    "homobert-tiny": ModelConfig(30522, 512, 12, 224, 896, 4),
}


@dataclass
class ForwardOutput:
    logits: Tensor
    embedding_output: Tensor
    hidden_states: list[Tensor]
    attention_maps: list[Tensor]


@dataclass
class TransformerModel:
    """Parameters live in ``params``; non-trainable state lives in ``buffers``.

    Buffers: ``hidden_live`` (0/1 over the residual width, used by layernorm
    statistics) and per-layer ``qk_heads`` / ``v_heads`` head assignments.
    """

    config: ModelConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    # -- structure -------------------------------------------------------

    def layer_prefix(self, k: int) -> str:
        return f"layers.{k}"

    @property
    def hidden_width(self) -> int:
        return self.params["embeddings.token"].shape[1]

    def widths(self) -> dict[str, int]:
        """Current stored widths of every prunable dimension."""
        out = {"hidden": self.hidden_width}
        for k in range(self.config.num_layers):
            p = self.layer_prefix(k)
            out[f"{p}.qk"] = self.params[f"{p}.attn.q.weight"].shape[1]
            out[f"{p}.vo"] = self.params[f"{p}.attn.v.weight"].shape[1]
            out[f"{p}.ffn"] = self.params[f"{p}.ffn.in.weight"].shape[1]
        return out

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- forward ---------------------------------------------------------

    def forward(self, tokens, pad_mask=None) -> ForwardOutput:
        return forward(self, tokens, pad_mask)


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


def init_model(config: ModelConfig, seed: int = 0) -> TransformerModel:
    """Fresh model: truncated-normal weights (2 sigma), zero biases, unit gammas."""
    rng = np.random.default_rng(seed)
    d, f, std = config.hidden_dim, config.ffn_dim, config.init_std
    p: dict[str, np.ndarray] = {
        "embeddings.token": _trunc_normal(rng, (config.vocab_size, d), std),
        "embeddings.position": _trunc_normal(rng, (config.max_seq_len, d), std),
        "embeddings.ln.gamma": np.ones(d),
        "embeddings.ln.beta": np.zeros(d),
    }
    buffers = {"hidden_live": np.ones(d)}
    heads = np.repeat(np.arange(config.num_heads), config.head_dim).astype(np.float64)
    for k in range(config.num_layers):
        pre = f"layers.{k}"
        for proj in ("q", "k", "v"):
            p[f"{pre}.attn.{proj}.weight"] = _trunc_normal(rng, (d, d), std)
            p[f"{pre}.attn.{proj}.bias"] = np.zeros(d)
        p[f"{pre}.attn.o.weight"] = _trunc_normal(rng, (d, d), std)
        p[f"{pre}.attn.o.bias"] = np.zeros(d)
        p[f"{pre}.ln1.gamma"] = np.ones(d)
        p[f"{pre}.ln1.beta"] = np.zeros(d)
        p[f"{pre}.ffn.in.weight"] = _trunc_normal(rng, (d, f), std)
        p[f"{pre}.ffn.in.bias"] = np.zeros(f)
        p[f"{pre}.ffn.out.weight"] = _trunc_normal(rng, (f, d), std)
        p[f"{pre}.ffn.out.bias"] = np.zeros(d)
        p[f"{pre}.ln2.gamma"] = np.ones(d)
        p[f"{pre}.ln2.beta"] = np.zeros(d)
        buffers[f"{pre}.attn.qk_heads"] = heads.copy()
        buffers[f"{pre}.attn.v_heads"] = heads.copy()
    p["head.bias"] = np.zeros(config.vocab_size)
    params = {name: Tensor(arr, requires_grad=True) for name, arr in p.items()}
    return TransformerModel(config, params, buffers)


def _as_batch(tokens, pad_mask):
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    if pad_mask is None:
        pad_mask = np.ones(tokens.shape, dtype=bool)
    else:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if single:
            pad_mask = pad_mask[None, :]
    if pad_mask.shape != tokens.shape:
        raise ValueError(f"pad_mask shape {pad_mask.shape} != tokens shape {tokens.shape}")
    return tokens, pad_mask, single


def forward(model: TransformerModel, tokens, pad_mask=None) -> ForwardOutput:
    """Run the encoder.

    ``tokens`` is ``[S]`` or ``[B, S]`` integer ids; ``pad_mask`` is True at
    real tokens. A 1-D input yields unbatched outputs.
    """
    cfg, P, buf = model.config, model.params, model.buffers
    tokens, pad_mask, single = _as_batch(tokens, pad_mask)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TypeError("token ids must be integers")
    B, S = tokens.shape
    if S > cfg.max_seq_len:
        raise ValueError(f"sequence length {S} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    live = buf["hidden_live"]
    eps = cfg.layernorm_eps
    # pad keys get a large negative bias; fully padded rows still see all keys
    key_bias = np.where(pad_mask, 0.0, PAD_BIAS)[:, None, None, :]
    attn_scale = 1.0 / math.sqrt(cfg.head_dim)

    x = nx.add(nx.embedding(P["embeddings.token"], tokens), nx.embedding(P["embeddings.position"], np.arange(S)))
    x = nx.layernorm(x, P["embeddings.ln.gamma"], P["embeddings.ln.beta"], eps, live)
    emb_out = x
    hidden, maps = [], []
    H = cfg.num_heads
    for k in range(cfg.num_layers):
        pre = f"layers.{k}"
        q = nx.add(nx.matmul(x, P[f"{pre}.attn.q.weight"]), P[f"{pre}.attn.q.bias"])
        kk = nx.add(nx.matmul(x, P[f"{pre}.attn.k.weight"]), P[f"{pre}.attn.k.bias"])
        v = nx.add(nx.matmul(x, P[f"{pre}.attn.v.weight"]), P[f"{pre}.attn.v.bias"])
        qh = nx.head_split(q, buf[f"{pre}.attn.qk_heads"], H)  # B,H,S,dq
        kh = nx.repeat_axis(nx.reshape(nx.transpose(kk), (B, 1, kk.shape[-1], S)), 1, H)
        scores = nx.scale(nx.matmul(qh, kh), attn_scale)
        scores = nx.add_constant(scores, key_bias)
        probs = nx.softmax(scores, axis=-1)  # B,H,S,S
        vh = nx.head_split(v, buf[f"{pre}.attn.v_heads"], H)  # B,H,S,dv
        ctx = nx.sum_axis(nx.matmul(probs, vh), axis=1)  # B,S,dv
        attn_out = nx.add(nx.matmul(ctx, P[f"{pre}.attn.o.weight"]), P[f"{pre}.attn.o.bias"])
        x = nx.layernorm(nx.add(x, attn_out), P[f"{pre}.ln1.gamma"], P[f"{pre}.ln1.beta"], eps, live)
        h = nx.gelu(nx.add(nx.matmul(x, P[f"{pre}.ffn.in.weight"]), P[f"{pre}.ffn.in.bias"]))
        ffn_out = nx.add(nx.matmul(h, P[f"{pre}.ffn.out.weight"]), P[f"{pre}.ffn.out.bias"])
        x = nx.layernorm(nx.add(x, ffn_out), P[f"{pre}.ln2.gamma"], P[f"{pre}.ln2.beta"], eps, live)
        hidden.append(x)
        maps.append(nx.mean_axis(probs, axis=1))
    logits = nx.add(nx.matmul(x, nx.transpose(P["embeddings.token"])), P["head.bias"])
    out = ForwardOutput(logits, emb_out, hidden, maps)
    if single:
        out = ForwardOutput(
            _unbatch(out.logits),
            _unbatch(out.embedding_output),
            [_unbatch(t) for t in out.hidden_states],
            [_unbatch(t) for t in out.attention_maps],
        )
    return out


def _unbatch(t: Tensor) -> Tensor:
    return nx.reshape(t, t.shape[1:])


def clone_model(model: TransformerModel) -> TransformerModel:
    """Deep copy with fresh, independent parameter tensors."""
    params = {}
    for name, t in model.params.items():
        c = Tensor(t.data.copy(), requires_grad=True)
        params[name] = c
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    return TransformerModel(copy.deepcopy(model.config), params, buffers)


def count_parameters(model_or_config) -> tuple[int, int, int]:
    """``(embedding, backbone, total)`` parameter counts.

    The embedding share is the token table (tied with the output head);
    everything else, including position embeddings and the head bias, is
    backbone. Accepts a model (counts actual, possibly narrowed, shapes) or a
    :class:`ModelConfig`.
    """
    if isinstance(model_or_config, ModelConfig):
        cfg = model_or_config
        d, f, V = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
        emb = V * d
        layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
        backbone = cfg.max_seq_len * d + 2 * d + cfg.num_layers * layer + V
        return emb, backbone, emb + backbone
    emb = model_or_config.params["embeddings.token"].data.size
    total = sum(t.data.size for t in model_or_config.params.values())
    return emb, total - emb, total
