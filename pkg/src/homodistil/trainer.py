"""Teacher pretraining and simultaneous distill-and-prune training."""

from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np

from . import numerics as nx
from .checkpoint import load_arrays, save_arrays
from .data import Corpus, MLMBatch
from .losses import LossBundle, LossWeights, ProjectionSet, mlm_loss, total_loss
from .model import ModelConfig, TransformerModel, clone_model, forward, init_model
from .optim import Adam, linear_warmup_decay
from .pruning import (
    SCORERS,
    MATRIX_TYPE_TF,
    CouplingGroup,
    ImportanceState,
    MaskSet,
    SparsitySchedule,
    apply_masks,
    build_masks,
    compute_schedule,
    coupling_groups,
    scored_matrices,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, iteration: int, detail: str, last_record: dict | None = None):
        self.iteration = iteration
        self.detail = detail
        self.last_record = last_record
        msg = f"NaN/Inf encountered at iteration {iteration}: {detail}"
        if last_record is not None:
            msg += f"; last finite losses: {json.dumps({k: last_record[k] for k in LOSS_KEYS if k in last_record})}"
        super().__init__(msg)


LOSS_KEYS = ("l_mlm", "d_kl", "l_hidn", "l_emb", "l_attn", "l_total")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    total_steps: int = 500
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    grad_clip: float | None = None
    seed: int = 0
    mask_prob: float = 0.15
    # distillation objective
    alpha_kl: float = 1.0
    alpha_hidden: float = 1.0
    alpha_embedding: float = 1.0
    alpha_attention: float = 1.0
    temperature: float = 2.0
    kl_direction: str = "teacher_student"
    projection_init: str = "normal"
    # pruning
    final_ratio: float = 0.5
    t_initial_fraction: float = 0.0
    t_final_fraction: float = 0.7
    per_group_tf: bool = False
    scorer: str = "sensitivity"
    beta_ema: float = 0.85
    beta_uncertainty: float = 0.95
    monotone_masks: bool = False
    prune_interval: int = 1
    # bookkeeping
    log_interval: int = 1
    record_wall_clock: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.batch_size < 1 or self.prune_interval < 1 or self.log_interval < 1:
            raise ValueError("batch_size, prune_interval and log_interval must be >= 1")
        if self.scorer not in SCORERS:
            raise ValueError(f"unknown scorer {self.scorer!r}; expected one of {SCORERS}")
        if not 0.0 <= self.t_initial_fraction <= self.t_final_fraction <= 1.0:
            raise ValueError("need 0 <= t_initial_fraction <= t_final_fraction <= 1")
        self.loss_weights()  # validates alphas / temperature / direction

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha_kl, self.alpha_hidden, self.alpha_embedding, self.alpha_attention,
                           self.temperature, self.kl_direction)

    def schedule(self) -> SparsitySchedule:
        T = self.total_steps
        return SparsitySchedule(
            total_steps=T,
            final_ratio=self.final_ratio,
            t_initial=int(round(self.t_initial_fraction * T)),
            t_final=int(round(self.t_final_fraction * T)),
            tf_fractions=dict(MATRIX_TYPE_TF) if self.per_group_tf else None,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@contextlib.contextmanager
def frozen(*models):
    """Temporarily disable gradient tracking on the given models."""
    saved = [[p.requires_grad for p in m.parameters()] for m in models]
    for m in models:
        for p in m.parameters():
            p.requires_grad = False
    try:
        yield
    finally:
        for m, flags in zip(models, saved):
            for p, f in zip(m.parameters(), flags):
                p.requires_grad = f


def evaluate_mlm(model: TransformerModel, batches: list[MLMBatch]) -> float:
    """Masked-token cross-entropy averaged over every masked position."""
    total, count = 0.0, 0
    with frozen(model):
        for b in batches:
            out = forward(model, b.token_ids, b.pad_mask)
            n = int((b.labels != -100).sum())
            total += mlm_loss(out.logits, b.labels).item() * n
            count += n
    return total / count


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------


def pretrain_teacher(model_config: ModelConfig, corpus: Corpus, config: TrainConfig,
                     metrics: list | None = None) -> TransformerModel:
    """Train a fresh model with the MLM loss alone."""
    if len(corpus.train) == 0:
        raise ValueError("empty corpus")
    if model_config.vocab_size < len(corpus.vocab):
        raise ValueError(f"vocab_size {model_config.vocab_size} < corpus vocabulary {len(corpus.vocab)}")
    model = init_model(model_config, seed=config.seed)
    opt = Adam(model.params, (config.adam_beta1, config.adam_beta2), config.adam_eps,
               config.weight_decay, config.grad_clip)
    batches = corpus.batches(config.batch_size, config.mask_prob, config.seed)
    T = config.total_steps
    for step in range(T):
        b = next(batches)
        try:
            out = forward(model, b.token_ids, b.pad_mask)
            loss = mlm_loss(out.logits, b.labels)
        except nx.NonFiniteError as e:
            raise DivergenceError(step, str(e)) from e
        model.zero_grad()
        nx.backward(loss)
        lr = linear_warmup_decay(step, T, config.learning_rate, config.warmup_fraction)
        opt.step(lr)
        if metrics is not None and step % config.log_interval == 0:
            metrics.append({"iteration": step, "lr": lr, "l_mlm": loss.item()})
        if (step + 1) % 100 == 0:
            log.info("teacher step %d/%d  l_mlm %.4f", step + 1, T, loss.item())
    return model


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------


@dataclass
class DistillState:
    teacher: TransformerModel
    student: TransformerModel
    projections: ProjectionSet
    optimizer: Adam
    importance: ImportanceState
    groups: list[CouplingGroup]
    masks: MaskSet
    schedule: SparsitySchedule
    config: TrainConfig
    step: int = 0
    metrics: list[dict] = field(default_factory=list)
    started: float = field(default_factory=time.perf_counter)

    def trainable(self) -> dict[str, nx.Tensor]:
        out = dict(self.student.params)
        out.update(dict(self.projections.named_parameters()))
        return out

    def ratios_at(self, t: int) -> dict[str, float]:
        return {g.name: compute_schedule(t, self.schedule, g.matrix_type if self.schedule.tf_fractions else None)
                for g in self.groups}


def init_state(teacher: TransformerModel, config: TrainConfig) -> DistillState:
    """Student = copy of the teacher; projections, optimizer and scores fresh."""
    frozen_teacher = clone_model(teacher)
    frozen_teacher.set_trainable(False)
    student = clone_model(teacher)
    d = teacher.hidden_width
    projections = ProjectionSet.init(d, d, seed=config.seed, mode=config.projection_init)
    params = dict(student.params)
    params.update(dict(projections.named_parameters()))
    opt = Adam(params, (config.adam_beta1, config.adam_beta2), config.adam_eps,
               config.weight_decay, config.grad_clip)
    groups = coupling_groups(student)
    return DistillState(
        teacher=frozen_teacher,
        student=student,
        projections=projections,
        optimizer=opt,
        importance=ImportanceState(config.scorer, config.beta_ema, config.beta_uncertainty),
        groups=groups,
        masks=MaskSet.full(groups),
        schedule=config.schedule(),
        config=config,
    )


def _losses(state: DistillState, batch: MLMBatch) -> LossBundle:
    tout = forward(state.teacher, batch.token_ids, batch.pad_mask)
    sout = forward(state.student, batch.token_ids, batch.pad_mask)
    return total_loss(sout, tout, batch.labels, state.projections, state.config.loss_weights())


def _score(state: DistillState) -> None:
    for name in scored_matrices(state.groups):
        p = state.student.params[name]
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.importance.update(name, p.data, grad)


def _prune(state: DistillState, t: int) -> None:
    ratios = state.ratios_at(t)
    state.masks = build_masks(state.importance, ratios, state.groups, state.masks, state.config.monotone_masks)
    apply_masks(state.student, state.projections, state.masks, state.groups, state.optimizer)


def prune_at_init(state: DistillState, batch: MLMBatch) -> bool:
    """Prune before any update when the schedule already asks for r(0) < 1.

    Scores come from one forward/backward on ``batch`` with no parameter
    update. Returns whether anything was pruned.
    """
    if all(r >= 1.0 for r in state.ratios_at(0).values()):
        return False
    bundle = _losses(state, batch)
    for p in state.trainable().values():
        p.grad = None
    nx.backward(bundle.total)
    _score(state)
    _prune(state, 0)
    return True


def train_step(state: DistillState, batch: MLMBatch) -> dict:
    """One iteration: loss, Adam update, scoring, masking.

    The returned record describes the model the losses were computed on:
    ``iteration`` counts completed updates and ``r_t``/``ratios``/``widths``
    are the pruning state in effect for that forward pass.
    """
    cfg = state.config
    t = state.step + 1
    iteration = state.step
    record: dict[str, Any] = {"iteration": iteration}
    try:
        bundle = _losses(state, batch)
        values = bundle.values()
        params = state.trainable()
        for p in params.values():
            p.grad = None
        nx.backward(bundle.total)
        for name, p in params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise nx.NonFiniteError(f"gradient of {name}")
        lr = linear_warmup_decay(iteration, cfg.total_steps, cfg.learning_rate, cfg.warmup_fraction)
        state.optimizer.step(lr)
        for name, p in params.items():
            if not np.isfinite(p.data).all():
                raise nx.NonFiniteError(f"parameter {name} after update")
        record.update(values)
        record["lr"] = lr
        ratios = dict(state.masks.ratios)
        record["r_t"] = ratios.get("hidden", 1.0)
        record["ratios"] = ratios
        record["widths"] = state.masks.kept()
        _score(state)
        if t % cfg.prune_interval == 0 or t == cfg.total_steps:
            _prune(state, t)
    except (nx.NonFiniteError, FloatingPointError) as e:
        last = state.metrics[-1] if state.metrics else None
        raise DivergenceError(iteration, str(e), last) from e
    if cfg.record_wall_clock:
        record["wall_clock"] = time.perf_counter() - state.started
    state.step = t
    if iteration % cfg.log_interval == 0 or t == cfg.total_steps:
        state.metrics.append(record)
    return record


def distill(teacher: TransformerModel, corpus: Corpus, config: TrainConfig,
            log_file=None, callback: Callable[[DistillState, dict], None] | None = None) -> DistillState:
    """Clone the teacher, then distill and prune for ``config.total_steps`` iterations.

    ``log_file``, when given, receives one JSON object per metrics record;
    ``callback(state, record)`` runs after every iteration.
    """
    if len(corpus.train) == 0:
        raise ValueError("empty corpus")
    if teacher.config.vocab_size < len(corpus.vocab):
        raise ValueError("teacher vocabulary smaller than the corpus vocabulary")
    state = init_state(teacher, config)
    batches = corpus.batches(config.batch_size, config.mask_prob, config.seed)
    first = next(batches)
    try:
        prune_at_init(state, first)
    except nx.NonFiniteError as e:
        raise DivergenceError(0, str(e)) from e
    stream: Iterator[MLMBatch] = _chain_first(first, batches)
    for _ in range(config.total_steps):
        before = len(state.metrics)
        rec = train_step(state, next(stream))
        if state.step % 100 == 0:
            log.info("distill step %d/%d  l_total %.4f  d_kl %.3g  r_t %.3f",
                     state.step, config.total_steps, rec["l_total"], rec["d_kl"], rec["r_t"])
        if log_file is not None and len(state.metrics) > before:
            log_file.write(metrics_line(state.metrics[-1]))
        if callback is not None:
            callback(state, rec)
    return state


def _chain_first(first, rest):
    yield first
    yield from rest


def metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(model: TransformerModel, directory, extra_meta: dict | None = None) -> Path:
    meta = {"kind": "model", "config": model.config.to_dict(), **(extra_meta or {})}
    return save_arrays(directory, model.state_arrays(), meta)


def model_from_arrays(arrays: dict[str, np.ndarray], config: ModelConfig) -> TransformerModel:
    params = {k[len("param."):]: nx.Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("param.")}
    buffers = {k[len("buffer."):]: v.copy() for k, v in arrays.items() if k.startswith("buffer.")}
    return TransformerModel(config, params, buffers)


def load_model(directory) -> tuple[TransformerModel, dict]:
    arrays, meta = load_arrays(directory)
    config = ModelConfig.from_dict(meta["config"])
    return model_from_arrays(arrays, config), meta


def save_student(state: DistillState, directory, extra_meta: dict | None = None) -> Path:
    arrays = state.student.state_arrays()
    arrays.update({f"proj.{k}": v.data for k, v in
                   (("hidden", state.projections.hidden), ("embedding", state.projections.embedding))})
    arrays.update({f"mask.{g}": m for g, m in state.masks.masks.items()})
    arrays.update({f"ema.{k}": v for k, v in state.importance.buffers.items()})
    arrays.update({f"ema_unc.{k}": v for k, v in state.importance.uncertainty.items()})
    arrays.update(state.optimizer.state_arrays())
    meta = {
        "kind": "student",
        "config": state.student.config.to_dict(),
        "train_config": state.config.to_dict(),
        "counters": {"step": state.step, "adam_step": state.optimizer.step_count},
        "mask_ratios": state.masks.ratios,
        **(extra_meta or {}),
    }
    return save_arrays(directory, arrays, meta)


def load_student(directory) -> tuple[TransformerModel, ProjectionSet | None, MaskSet | None, dict]:
    arrays, meta = load_arrays(directory)
    config = ModelConfig.from_dict(meta["config"])
    model = model_from_arrays(arrays, config)
    proj = None
    if "proj.hidden" in arrays:
        proj = ProjectionSet(nx.Tensor(arrays["proj.hidden"], requires_grad=True),
                             nx.Tensor(arrays["proj.embedding"], requires_grad=True))
    masks = None
    mask_arrays = {k[len("mask."):]: v for k, v in arrays.items() if k.startswith("mask.")}
    if mask_arrays:
        masks = MaskSet(mask_arrays, dict(meta.get("mask_ratios", {})))
    return model, proj, masks, meta
