"""Distillation objective: MLM, logit KL, hidden, embedding and attention terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from . import numerics as nx
from .model import ForwardOutput
from .numerics import Tensor

IGNORE_INDEX = -100


class LossContractError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    kl: float = 1.0
    hidden: float = 1.0
    embedding: float = 1.0
    attention: float = 1.0
    temperature: float = 2.0
    kl_direction: str = "teacher_student"

    def __post_init__(self):
        if min(self.kl, self.hidden, self.embedding, self.attention) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kl_direction not in ("teacher_student", "student_teacher"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")

    @property
    def alphas(self) -> tuple[float, float, float, float]:
        return (self.kl, self.hidden, self.embedding, self.attention)


@dataclass
class ProjectionSet:
    """Learnable ``[d_s, d_t]`` maps into the teacher's width.

    One hidden projection is shared by every layer.
    """

    hidden: Tensor
    embedding: Tensor

    def named_parameters(self):
        yield "proj.hidden", self.hidden
        yield "proj.embedding", self.embedding

    @classmethod
    def init(cls, student_dim: int, teacher_dim: int, seed: int = 0, std: float = 0.02,
             mode: str = "normal") -> "ProjectionSet":
        if mode == "identity":
            if student_dim != teacher_dim:
                raise ValueError("identity projections need equal widths")
            return cls(Tensor(np.eye(student_dim), requires_grad=True),
                       Tensor(np.eye(student_dim), requires_grad=True))
        if mode != "normal":
            raise ValueError(f"unknown projection init {mode!r}")
        rng = np.random.default_rng(seed)
        draw = lambda: truncnorm.rvs(-2, 2, scale=std, size=(student_dim, teacher_dim), random_state=rng)
        return cls(Tensor(draw(), requires_grad=True), Tensor(draw(), requires_grad=True))


@dataclass
class LossBundle:
    """Scalar loss tensors; ``total`` is the differentiable objective."""

    mlm: Tensor
    kl: Tensor
    hidden: Tensor
    embedding: Tensor
    attention: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "l_mlm": self.mlm.item(),
            "d_kl": self.kl.item(),
            "l_hidn": self.hidden.item(),
            "l_emb": self.embedding.item(),
            "l_attn": self.attention.item(),
            "l_total": self.total.item(),
        }


def _flat(t: Tensor) -> Tensor:
    return nx.reshape(t, (-1, t.shape[-1])) if t.ndim != 2 else t


def masked_positions(labels: np.ndarray) -> np.ndarray:
    flat = np.asarray(labels).reshape(-1)
    idx = np.nonzero(flat != IGNORE_INDEX)[0]
    if idx.size == 0:
        raise LossContractError("no masked positions in batch; re-mask before computing the loss")
    return idx


def mlm_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over positions whose label is not ``IGNORE_INDEX``."""
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise LossContractError(f"labels {labels.shape} do not match logits {logits.shape}")
    idx = masked_positions(labels)
    rows = nx.gather_rows(_flat(logits), idx)
    return nx.cross_entropy(rows, labels.reshape(-1)[idx])


def kd_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float,
            labels: np.ndarray | None = None, direction: str = "teacher_student") -> Tensor:
    """Temperature-softened KL between output distributions, times ``T**2``.

    Averaged over the masked positions given by ``labels`` (all positions when
    ``labels`` is None). ``direction="teacher_student"`` is KL(teacher || student).
    """
    if student_logits.shape != teacher_logits.shape:
        raise LossContractError(f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    s, t = _flat(student_logits), _flat(teacher_logits)
    if labels is not None:
        idx = masked_positions(labels)
        s, t = nx.gather_rows(s, idx), nx.gather_rows(t, idx)
    if direction == "teacher_student":
        return nx.kl_divergence(t, s, temperature)
    if direction == "student_teacher":
        return nx.kl_divergence(s, t, temperature)
    raise ValueError(f"unknown direction {direction!r}")


def hidden_loss(teacher_hidden: list[Tensor], student_hidden: list[Tensor], projection: Tensor) -> Tensor:
    """Sum over layers of ``MSE(H_t, H_s @ W)`` with one shared ``W``."""
    if len(teacher_hidden) != len(student_hidden):
        raise LossContractError(f"layer count mismatch: {len(teacher_hidden)} vs {len(student_hidden)}")
    if not teacher_hidden:
        raise LossContractError("no layers to compare")
    total = None
    for ht, hs in zip(teacher_hidden, student_hidden):
        term = nx.mse(ht, nx.matmul(hs, projection))
        total = term if total is None else nx.add(total, term)
    return total


def embedding_loss(teacher_emb: Tensor, student_emb: Tensor, projection: Tensor) -> Tensor:
    return hidden_loss([teacher_emb], [student_emb], projection)


def attention_loss(teacher_maps: list[Tensor], student_maps: list[Tensor]) -> Tensor:
    if len(teacher_maps) != len(student_maps):
        raise LossContractError(f"layer count mismatch: {len(teacher_maps)} vs {len(student_maps)}")
    total = None
    for at, as_ in zip(teacher_maps, student_maps):
        if at.shape != as_.shape:
            raise LossContractError(f"attention map shapes differ: {at.shape} vs {as_.shape}")
        term = nx.mse(at, as_)
        total = term if total is None else nx.add(total, term)
    return total


def combine(mlm: Tensor, kl: Tensor, hidden: Tensor, embedding: Tensor, attention: Tensor,
            weights: LossWeights) -> LossBundle:
    """Weighted sum ``mlm + a1*kl + a2*hidden + a3*embedding + a4*attention``."""
    a1, a2, a3, a4 = weights.alphas
    total = mlm
    for w, term in ((a1, kl), (a2, hidden), (a3, embedding), (a4, attention)):
        if w:
            total = nx.add(total, nx.scale(term, w))
    return LossBundle(mlm, kl, hidden, embedding, attention, total)


def total_loss(student: ForwardOutput, teacher: ForwardOutput, labels: np.ndarray,
               projections: ProjectionSet, weights: LossWeights) -> LossBundle:
    """All five terms on one batch. Teacher outputs are treated as constants."""
    mlm = mlm_loss(student.logits, labels)
    kl = kd_loss(student.logits, teacher.logits, weights.temperature, labels, weights.kl_direction)
    hid = hidden_loss(teacher.hidden_states, student.hidden_states, projections.hidden)
    emb = embedding_loss(teacher.embedding_output, student.embedding_output, projections.embedding)
    attn = attention_loss(teacher.attention_maps, student.attention_maps)
    return combine(mlm, kl, hid, emb, attn, weights)
