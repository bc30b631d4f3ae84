"""Iterative column pruning driven by (EMA-smoothed) importance scores.

Columns are never removed during training; they are zeroed together with
every entry that is coupled to them, which keeps the network shape-consistent
and lets a later :func:`compact` delete them physically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .losses import ProjectionSet
from .model import TransformerModel
from .numerics import Tensor

SCORERS = ("sensitivity", "magnitude", "movement", "platon")

# Final-iteration fractions of T per matrix type, used when per-group t_f is on.
MATRIX_TYPE_TF = {
    "attention_output": 0.5,
    "ffn_output": 0.5,
    "embedding": 0.5,
    "query": 0.9,
    "key": 0.9,
    "ffn_input": 0.9,
    "other": 0.7,
}
# hidden columns come from embedding / attention-output / FFN-output matrices
GROUP_MATRIX_TYPE = {"hidden": "embedding", "qk": "query", "vo": "other", "ffn": "ffn_input"}


class MaskIntegrityError(ValueError):
    """A masked position holds a nonzero value, or masks do not fit the model."""


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SparsitySchedule:
    """Cubic ramp of the kept fraction from 1 down to ``final_ratio``.

    ``t_i == t_f`` is allowed and means pruning to ``final_ratio`` at once
    (at initialization when both are 0). ``tf_fractions`` optionally maps a
    matrix type (see ``MATRIX_TYPE_TF``) to its own ``t_f / T``.
    """

    total_steps: int
    final_ratio: float
    t_initial: int = 0
    t_final: int | None = None
    tf_fractions: dict[str, float] | None = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 < self.final_ratio <= 1:
            raise ValueError("final_ratio must be in (0, 1]")
        tf = self.total_steps if self.t_final is None else self.t_final
        if not 0 <= self.t_initial <= tf <= self.total_steps:
            raise ValueError(
                f"need 0 <= t_i <= t_f <= T, got t_i={self.t_initial}, t_f={tf}, T={self.total_steps}"
            )
        for k, v in (self.tf_fractions or {}).items():
            if not self.t_initial <= v * self.total_steps <= self.total_steps:
                raise ValueError(f"t_f fraction for {k!r} out of range: {v}")

    def final_step(self, matrix_type: str | None = None) -> float:
        if self.tf_fractions and matrix_type is not None:
            frac = self.tf_fractions.get(matrix_type, self.tf_fractions.get("other"))
            if frac is not None:
                return frac * self.total_steps
        return float(self.total_steps if self.t_final is None else self.t_final)


def compute_schedule(t: int, schedule: SparsitySchedule, matrix_type: str | None = None) -> float:
    """Kept fraction ``r(t)`` for iteration ``t`` in ``[0, T]``."""
    T = schedule.total_steps
    if not 0 <= t <= T:
        raise ValueError(f"iteration {t} outside [0, {T}]")
    ti, tf, rf = schedule.t_initial, schedule.final_step(matrix_type), schedule.final_ratio
    if t >= tf:
        return rf
    if t < ti:
        return 1.0
    return rf + (1.0 - rf) * (1.0 - (t - ti) / (tf - ti)) ** 3


def kept_count(ratio: float, width: int) -> int:
    """``ceil(ratio * width)``, forgiving float noise just above an integer."""
    return max(1, min(width, math.ceil(ratio * width - 1e-9)))


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------


def _check_pair(theta: np.ndarray, grad: np.ndarray) -> None:
    if np.shape(theta) != np.shape(grad):
        raise ValueError(f"parameter shape {np.shape(theta)} != gradient shape {np.shape(grad)}")


def sensitivity_scores(theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """``|theta * grad|``: first-order estimate of the loss change from zeroing each entry."""
    _check_pair(theta, grad)
    return np.abs(np.asarray(theta) * np.asarray(grad))


def alternative_scores(kind: str, theta: np.ndarray, grad: np.ndarray | None = None) -> np.ndarray:
    """Instantaneous per-parameter score for ``kind``.

    ``platon`` returns the raw sensitivity; its uncertainty factor needs the
    running state in :class:`ImportanceState`.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if kind == "magnitude":
        return np.abs(theta)
    if grad is None:
        raise ValueError(f"{kind} scoring needs gradients")
    _check_pair(theta, grad)
    if kind in ("sensitivity", "platon"):
        return sensitivity_scores(theta, grad)
    if kind == "movement":
        return theta * np.asarray(grad)
    raise ValueError(f"unknown scorer {kind!r}; expected one of {SCORERS}")


def ema_update(buffer: np.ndarray, new_scores: np.ndarray, beta: float) -> np.ndarray:
    """``beta * buffer + (1 - beta) * new_scores``."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"EMA decay must be in [0, 1), got {beta}")
    if np.shape(buffer) != np.shape(new_scores):
        raise ValueError(f"buffer shape {np.shape(buffer)} != score shape {np.shape(new_scores)}")
    return beta * buffer + (1.0 - beta) * new_scores


def column_importance(scores: np.ndarray, signed: bool = False) -> np.ndarray:
    """Per-column L1 norm of a score matrix (plain column sum when ``signed``)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"column_importance expects a matrix, got shape {s.shape}")
    return s.sum(axis=0) if signed else np.abs(s).sum(axis=0)


@dataclass
class ImportanceState:
    """EMA score buffers for every scored matrix.

    For ``platon`` the buffers hold the smoothed sensitivity and ``uncertainty``
    holds an EMA of ``|I - EMA(I)|``; the final score is their product.
    """

    kind: str = "sensitivity"
    beta: float = 0.85
    beta_uncertainty: float = 0.95
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    uncertainty: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SCORERS:
            raise ValueError(f"unknown scorer {self.kind!r}; expected one of {SCORERS}")
        for b in (self.beta, self.beta_uncertainty):
            if not 0.0 <= b < 1.0:
                raise ValueError(f"EMA decay must be in [0, 1), got {b}")

    def update(self, name: str, theta: np.ndarray, grad: np.ndarray) -> None:
        inst = alternative_scores(self.kind, theta, grad)
        prev = self.buffers.get(name)
        if prev is None or prev.shape != inst.shape:
            prev = np.zeros_like(inst)
        self.buffers[name] = ema_update(prev, inst, self.beta)
        if self.kind == "platon":
            u = self.uncertainty.get(name)
            if u is None or u.shape != inst.shape:
                u = np.zeros_like(inst)
            self.uncertainty[name] = ema_update(u, np.abs(inst - self.buffers[name]), self.beta_uncertainty)

    def score(self, name: str) -> np.ndarray:
        if self.kind == "platon":
            return platon_score(self.buffers[name], self.uncertainty[name])
        return self.buffers[name]

    def column_scores(self, name: str) -> np.ndarray:
        return column_importance(self.score(name), signed=self.kind == "movement")


def platon_score(smoothed_sensitivity: np.ndarray, uncertainty: np.ndarray) -> np.ndarray:
    return smoothed_sensitivity * uncertainty


# ---------------------------------------------------------------------------
# coupling groups and masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingGroup:
    """Dimensions that must share one mask.

    ``scored`` lists the weight matrices whose columns are this group's
    neurons; ``members`` lists every ``(tensor name, axis)`` indexed by the
    group dimension and therefore zeroed with it.
    """

    name: str
    kind: str
    width: int
    scored: tuple[str, ...]
    members: tuple[tuple[str, int], ...]

    @property
    def matrix_type(self) -> str:
        return GROUP_MATRIX_TYPE[self.kind]


def coupling_groups(model: TransformerModel) -> list[CouplingGroup]:
    """Group layout for ``model``: one global hidden group plus Q/K, V/O and FFN groups per layer."""
    K = model.config.num_layers
    widths = model.widths()
    hidden_scored = ["embeddings.token", "embeddings.position"]
    hidden_members = [
        ("embeddings.token", 1), ("embeddings.position", 1),
        ("embeddings.ln.gamma", 0), ("embeddings.ln.beta", 0),
    ]
    groups = []
    for k in range(K):
        p = f"layers.{k}"
        hidden_scored += [f"{p}.attn.o.weight", f"{p}.ffn.out.weight"]
        hidden_members += [
            (f"{p}.attn.q.weight", 0), (f"{p}.attn.k.weight", 0), (f"{p}.attn.v.weight", 0),
            (f"{p}.attn.o.weight", 1), (f"{p}.attn.o.bias", 0),
            (f"{p}.ln1.gamma", 0), (f"{p}.ln1.beta", 0),
            (f"{p}.ffn.in.weight", 0),
            (f"{p}.ffn.out.weight", 1), (f"{p}.ffn.out.bias", 0),
            (f"{p}.ln2.gamma", 0), (f"{p}.ln2.beta", 0),
        ]
        groups.append(CouplingGroup(
            f"{p}.qk", "qk", widths[f"{p}.qk"],
            (f"{p}.attn.q.weight", f"{p}.attn.k.weight"),
            ((f"{p}.attn.q.weight", 1), (f"{p}.attn.q.bias", 0),
             (f"{p}.attn.k.weight", 1), (f"{p}.attn.k.bias", 0)),
        ))
        groups.append(CouplingGroup(
            f"{p}.vo", "vo", widths[f"{p}.vo"],
            (f"{p}.attn.v.weight",),
            ((f"{p}.attn.v.weight", 1), (f"{p}.attn.v.bias", 0), (f"{p}.attn.o.weight", 0)),
        ))
        groups.append(CouplingGroup(
            f"{p}.ffn", "ffn", widths[f"{p}.ffn"],
            (f"{p}.ffn.in.weight",),
            ((f"{p}.ffn.in.weight", 1), (f"{p}.ffn.in.bias", 0), (f"{p}.ffn.out.weight", 0)),
        ))
    hidden_members += [("proj.hidden", 0), ("proj.embedding", 0)]
    hidden = CouplingGroup("hidden", "hidden", widths["hidden"], tuple(hidden_scored), tuple(hidden_members))
    return [hidden] + groups


def scored_matrices(groups: list[CouplingGroup]) -> list[str]:
    return [name for g in groups for name in g.scored]


@dataclass
class MaskSet:
    masks: dict[str, np.ndarray]
    ratios: dict[str, float] = field(default_factory=dict)

    def kept(self) -> dict[str, int]:
        return {g: int(m.sum()) for g, m in self.masks.items()}

    @classmethod
    def full(cls, groups: list[CouplingGroup]) -> "MaskSet":
        return cls({g.name: np.ones(g.width) for g in groups}, {g.name: 1.0 for g in groups})


def group_importance(state: ImportanceState, group: CouplingGroup) -> np.ndarray:
    total = np.zeros(group.width)
    for name in group.scored:
        col = state.column_scores(name)
        if col.shape != (group.width,):
            raise MaskIntegrityError(f"{name}: {col.shape[0]} columns but group {group.name} has width {group.width}")
        total += col
    return total


def top_columns(importance: np.ndarray, keep: int, allowed: np.ndarray | None = None) -> np.ndarray:
    """0/1 mask of the ``keep`` highest entries; ties go to the lower index."""
    importance = np.asarray(importance, dtype=np.float64)
    if importance.size == 0:
        raise ValueError("empty group")
    if np.isnan(importance).any():
        raise FloatingPointError("NaN in importance scores")
    keep = min(keep, importance.size)
    key = -importance
    if allowed is not None:
        keep = min(keep, int(allowed.sum()))
        key = np.where(allowed > 0, key, np.inf)
    order = np.argsort(key, kind="stable")
    mask = np.zeros(importance.size)
    mask[order[:keep]] = 1.0
    return mask


def build_masks(state: ImportanceState, ratios: dict[str, float], groups: list[CouplingGroup],
                previous: MaskSet | None = None, monotone: bool = False) -> MaskSet:
    """Keep ``ceil(r * width)`` best columns per group by summed column importance.

    With ``monotone`` a column dropped by ``previous`` can never come back.
    """
    masks = {}
    for g in groups:
        r = ratios[g.name]
        if not 0 < r <= 1:
            raise ValueError(f"ratio for {g.name} must be in (0, 1], got {r}")
        if g.width < 1 or not g.scored:
            raise ValueError(f"empty group {g.name}")
        keep = kept_count(r, g.width)
        if keep == g.width:
            masks[g.name] = np.ones(g.width)
            continue
        allowed = previous.masks[g.name] if (monotone and previous is not None) else None
        masks[g.name] = top_columns(group_importance(state, g), keep, allowed)
    return MaskSet(masks, dict(ratios))


def _named_tensors(model: TransformerModel, projections: ProjectionSet | None) -> dict[str, Tensor]:
    out = dict(model.params)
    if projections is not None:
        out.update(dict(projections.named_parameters()))
    return out


def _axis_mask(mask: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = mask.size
    return mask.reshape(shape)


def apply_masks(model: TransformerModel, projections: ProjectionSet | None, masks: MaskSet,
                groups: list[CouplingGroup], optimizer=None) -> None:
    """Zero every masked column and its coupled entries, in place.

    Optimizer moments of zeroed entries are cleared too so Adam does not keep
    pushing them. The ``hidden_live`` buffer follows the hidden mask.
    """
    tensors = _named_tensors(model, projections)
    for g in groups:
        m = masks.masks[g.name]
        if m.shape != (g.width,):
            raise MaskIntegrityError(f"mask for {g.name} has shape {m.shape}, expected ({g.width},)")
        if m.all():
            continue
        for name, axis in g.members:
            t = tensors.get(name)
            if t is None:
                continue
            if t.shape[axis] != g.width:
                raise MaskIntegrityError(f"{name} axis {axis} has size {t.shape[axis]}, group {g.name} width {g.width}")
            am = _axis_mask(m, t.ndim, axis)
            t.data *= am
            if optimizer is not None:
                optimizer.mask_state(name, am)
    hm = masks.masks.get("hidden")
    if hm is not None:
        model.buffers["hidden_live"] = hm.astype(np.float64).copy()


def check_masked_zero(model: TransformerModel, projections: ProjectionSet | None, masks: MaskSet,
                      groups: list[CouplingGroup]) -> None:
    """Raise :class:`MaskIntegrityError` if any masked entry is nonzero."""
    tensors = _named_tensors(model, projections)
    for g in groups:
        m = masks.masks[g.name]
        dead = np.nonzero(m == 0)[0]
        if dead.size == 0:
            continue
        for name, axis in g.members:
            t = tensors.get(name)
            if t is None:
                continue
            vals = np.take(t.data, dead, axis=axis)
            if np.any(vals != 0):
                raise MaskIntegrityError(f"{name} has nonzero values in columns masked by {g.name}")
    hm = masks.masks.get("hidden")
    if hm is not None and not np.array_equal(model.buffers["hidden_live"], hm):
        raise MaskIntegrityError("hidden_live buffer disagrees with the hidden mask")


def compact(model: TransformerModel, projections: ProjectionSet | None, masks: MaskSet,
            groups: list[CouplingGroup]) -> tuple[TransformerModel, ProjectionSet | None]:
    """Physically delete masked columns/rows, returning a narrower copy."""
    check_masked_zero(model, projections, masks, groups)
    arrays = {name: t.data.copy() for name, t in _named_tensors(model, projections).items()}
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    for g in groups:
        keep = np.nonzero(masks.masks[g.name] > 0)[0]
        for name, axis in g.members:
            if name in arrays:
                arrays[name] = np.take(arrays[name], keep, axis=axis)
        if g.kind == "hidden":
            buffers["hidden_live"] = np.ones(keep.size)
        elif g.kind == "qk":
            key = f"{g.name[:-3]}.attn.qk_heads"
            buffers[key] = buffers[key][keep]
        elif g.kind == "vo":
            key = f"{g.name[:-3]}.attn.v_heads"
            buffers[key] = buffers[key][keep]
    params = {name: Tensor(arrays[name], requires_grad=True) for name in model.params}
    narrow = TransformerModel(model.config, params, buffers)
    proj = None
    if projections is not None:
        proj = ProjectionSet(Tensor(arrays["proj.hidden"], requires_grad=True),
                             Tensor(arrays["proj.embedding"], requires_grad=True))
    return narrow, proj

