"""Command-line front end.

Every command reads one flat YAML config (``--config``), applies ``--seed`` /
``--set key=value`` overrides, writes the resolved config next to its outputs
and returns 0 on success, 1 on divergence, 2 on bad configuration or input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import get_type_hints

import numpy as np
import yaml

from .checkpoint import CheckpointError
from .data import Corpus, DataError, synthetic_corpus
from .model import PRESETS, ModelConfig, count_parameters, forward
from .pruning import MaskIntegrityError, check_masked_zero, compact, coupling_groups
from .trainer import (
    DivergenceError,
    TrainConfig,
    distill,
    evaluate_mlm,
    load_model,
    load_student,
    metrics_line,
    pretrain_teacher,
    save_model,
    save_student,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
DEFAULT_TF_LIST = (0.0, 0.5, 0.7, 0.9)
EARLY_FRACTION = 0.1  # leading share of iterations inspected by the schedule comparison
AGREEMENT_TOL = 1e-10


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class IOConfig:
    corpus: str = "synthetic"  # path to a UTF-8 text file, or "synthetic"
    synthetic_sentences: int = 4000
    synthetic_seed: int = 0
    heldout_fraction: float = 0.1
    preset: str | None = None
    teacher: str | None = None
    student: str | None = None
    eval_batch_size: int = 32
    tf_list: tuple[float, ...] = DEFAULT_TF_LIST
    plot: bool = True


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_IO_KEYS = {f.name for f in fields(IOConfig)}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    io: IOConfig
    explicit_model_keys: frozenset = frozenset()

    def to_dict(self) -> dict:
        out = {}
        out.update(self.model.to_dict())
        out.update(self.train.to_dict())
        io = {f.name: getattr(self.io, f.name) for f in fields(IOConfig)}
        io["tf_list"] = list(io["tf_list"])
        out.update(io)
        return out


def parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _coerce(cls, kw: dict) -> dict:
    """Cast numeric strings such as ``1e-3`` (a string to YAML 1.1) to the field's type."""
    hints = get_type_hints(cls)
    out = {}
    for k, v in kw.items():
        hint = str(hints.get(k, ""))
        if isinstance(v, str) and "float" in hint:
            try:
                v = float(v)
            except ValueError:
                raise ConfigError(f"{k} must be a number, got {v!r}") from None
        elif isinstance(v, int) and not isinstance(v, bool) and hints.get(k) is float:
            v = float(v)
        out[k] = v
    return out


def resolve_config(path: str | None, overrides: dict, seed: int | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text(encoding="utf-8"))
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a flat key-value mapping")
        raw.update(loaded)
    raw.update(overrides)
    if seed is not None:
        raw["seed"] = seed
    unknown = set(raw) - _MODEL_KEYS - _TRAIN_KEYS - _IO_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for k, v in raw.items():
        if isinstance(v, (dict, list)) and k != "tf_list":
            raise ConfigError(f"config is flat; {k!r} must be a scalar")

    io_kw = {k: raw[k] for k in _IO_KEYS if k in raw}
    if "tf_list" in io_kw:
        io_kw["tf_list"] = tuple(float(x) for x in io_kw["tf_list"])
    try:
        io = IOConfig(**io_kw)
        if io.preset is not None:
            if io.preset not in PRESETS:
                raise ConfigError(f"unknown preset {io.preset!r}; choose from {sorted(PRESETS)}")
            base = PRESETS[io.preset]
        else:
            base = ModelConfig()
        model_kw = {k: raw[k] for k in _MODEL_KEYS if k in raw}
        model = replace(base, **_coerce(ModelConfig, model_kw))
        train = TrainConfig.from_dict(_coerce(TrainConfig, {k: raw[k] for k in _TRAIN_KEYS if k in raw}))
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    return ExperimentConfig(model, train, io, frozenset(model_kw))


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    io, m = cfg.io, cfg.model
    if io.corpus == "synthetic":
        lines = synthetic_corpus(io.synthetic_sentences, io.synthetic_seed)
        return Corpus.from_lines(lines, m.vocab_size, m.max_seq_len, io.heldout_fraction)
    return Corpus.from_file(io.corpus, m.vocab_size, m.max_seq_len, io.heldout_fraction)


def _prepare_out(out: str) -> Path:
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_config(cfg: ExperimentConfig, out: Path) -> None:
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_teacher(cfg: ExperimentConfig):
    if cfg.io.teacher is None:
        raise ConfigError("no teacher checkpoint given (set teacher=PATH)")
    teacher, _ = load_model(cfg.io.teacher)
    mismatched = {k: (getattr(cfg.model, k), getattr(teacher.config, k))
                  for k in cfg.explicit_model_keys if getattr(cfg.model, k) != getattr(teacher.config, k)}
    if mismatched:
        raise ConfigError(f"teacher checkpoint does not match the model config: {mismatched}")
    return teacher


def _corpus_for(cfg: ExperimentConfig, model_config: ModelConfig) -> Corpus:
    return load_corpus(replace(cfg, model=model_config))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_make_corpus(cfg: ExperimentConfig, out: Path) -> int:
    lines = synthetic_corpus(cfg.io.synthetic_sentences, cfg.io.synthetic_seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(lines)} sentences to {out}")
    return EXIT_OK


def cmd_pretrain_teacher(cfg: ExperimentConfig, out: Path) -> int:
    corpus = load_corpus(cfg)
    _write_config(cfg, out)
    metrics: list[dict] = []
    try:
        teacher = pretrain_teacher(cfg.model, corpus, cfg.train, metrics)
    finally:
        with open(out / "metrics.jsonl", "w", encoding="utf-8") as f:
            f.writelines(metrics_line(r) for r in metrics)
    save_model(teacher, out / "checkpoint")
    corpus.vocab.save(out / "vocab.json")
    held = evaluate_mlm(teacher, corpus.heldout_batches(cfg.io.eval_batch_size, cfg.train.mask_prob))
    _write_json(out / "summary.json", {"heldout_mlm": held})
    print(f"teacher held-out MLM loss {held:.6f}; checkpoint in {out / 'checkpoint'}")
    return EXIT_OK


def _distill_run(teacher, corpus: Corpus, train: TrainConfig, io: IOConfig, out: Path) -> dict:
    """One distillation into ``out``; raises DivergenceError after flushing the log."""
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as f:
        state = distill(teacher, corpus, train, log_file=f)
    save_student(state, out / "checkpoint")
    held = evaluate_mlm(state.student, corpus.heldout_batches(io.eval_batch_size, train.mask_prob))
    summary = {"heldout_mlm": held, "widths": state.masks.kept(), "final_d_kl": state.metrics[-1]["d_kl"]}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_distill(cfg: ExperimentConfig, out: Path, alpha_sweep: bool = False) -> int:
    teacher = _load_teacher(cfg)
    corpus = _corpus_for(cfg, teacher.config)
    _write_config(cfg, out)
    if not alpha_sweep:
        s = _distill_run(teacher, corpus, cfg.train, cfg.io, out)
        print(f"student held-out MLM loss {s['heldout_mlm']:.6f}; widths {s['widths']}")
        return EXIT_OK
    rows = []
    for tag, a in (("alpha_1111", 1.0), ("alpha_0000", 0.0)):
        train = replace(cfg.train, alpha_kl=a, alpha_hidden=a, alpha_embedding=a, alpha_attention=a)
        s = _distill_run(teacher, corpus, train, cfg.io, out / tag)
        rows.append({"run_id": tag, "alphas": f"{a:g},{a:g},{a:g},{a:g}", "heldout_mlm": s["heldout_mlm"]})
        print(f"{tag}: held-out MLM loss {s['heldout_mlm']:.6f}")
    _write_csv(out / "alpha_sweep.csv", ["run_id", "alphas", "heldout_mlm"], rows)
    return EXIT_OK


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def schedule_summary(series: dict[str, list[tuple[int, float]]], tf_of: dict[str, float],
                     total_steps: int) -> dict:
    """Initial / early-max D_KL per run and whether single-shot starts above every iterative run."""
    early = max(1, int(round(EARLY_FRACTION * total_steps)))
    runs = {}
    for run_id, pts in series.items():
        vals = [d for it, d in pts if it < early]
        runs[run_id] = {"t_final_fraction": tf_of[run_id], "initial_d_kl": pts[0][1],
                        "max_early_d_kl": max(vals), "final_d_kl": pts[-1][1]}
    single = [r for r in runs.values() if r["t_final_fraction"] == 0.0]
    iterative = [r for r in runs.values() if r["t_final_fraction"] > 0.0]
    ordering = bool(single and iterative) and all(
        s["initial_d_kl"] > it["max_early_d_kl"] for s in single for it in iterative)
    return {"runs": runs, "early_iterations": early, "ordering_holds": ordering}


def _plot(series: dict, path: Path) -> bool:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    for run_id, pts in series.items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=run_id)
    ax.set_xlabel("iteration")
    ax.set_ylabel("D_KL(teacher || student)")
    ax.set_yscale("symlog", linthresh=1e-4)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return True


def cmd_compare_schedules(cfg: ExperimentConfig, out: Path) -> int:
    teacher = _load_teacher(cfg)
    corpus = _corpus_for(cfg, teacher.config)
    _write_config(cfg, out)
    series, tf_of, rows, status = {}, {}, [], EXIT_OK
    for tf in cfg.io.tf_list:
        run_id = f"tf_{tf:g}"
        train = replace(cfg.train, t_initial_fraction=0.0, t_final_fraction=tf)
        try:
            _distill_run(teacher, corpus, train, cfg.io, out / run_id)
        except DivergenceError as e:
            print(f"{run_id}: {e}", file=sys.stderr)
            status = EXIT_RUNTIME
            continue
        with open(out / run_id / "metrics.jsonl", encoding="utf-8") as f:
            recs = [json.loads(line) for line in f]
        series[run_id] = [(r["iteration"], r["d_kl"]) for r in recs]
        tf_of[run_id] = tf
        rows += [{"run_id": run_id, "iteration": r["iteration"], "d_kl": repr(r["d_kl"]), "r_t": repr(r["r_t"])}
                 for r in recs]
    _write_csv(out / "d_kl.csv", ["run_id", "iteration", "d_kl", "r_t"], rows)
    if series:
        summary = schedule_summary(series, tf_of, cfg.train.total_steps)
        _write_csv(out / "summary.csv",
                   ["run_id", "t_final_fraction", "initial_d_kl", "max_early_d_kl", "final_d_kl"],
                   [{"run_id": k, **v} for k, v in summary["runs"].items()])
        _write_json(out / "summary.json", summary)
        if cfg.io.plot:
            _plot(series, out / "d_kl.png")
        print(f"single-shot initial D_KL above every iterative run's early D_KL: {summary['ordering_holds']}")
    return status


def cmd_export_compact(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.io.student is None:
        raise ConfigError("no student checkpoint given (set student=PATH)")
    model, proj, masks, meta = load_student(cfg.io.student)
    if masks is None:
        raise ConfigError(f"{cfg.io.student} holds no masks")
    groups = coupling_groups(model)
    check_masked_zero(model, proj, masks, groups)
    narrow, _ = compact(model, proj, masks, groups)
    rng = np.random.default_rng([cfg.train.seed, 41])
    c = model.config
    tokens = rng.integers(0, c.vocab_size, size=(cfg.io.eval_batch_size, c.max_seq_len))
    diff = float(np.max(np.abs(forward(model, tokens).logits.data - forward(narrow, tokens).logits.data)))
    emb, backbone, total = count_parameters(narrow)
    report = {
        "widths": narrow.widths(),
        "max_logit_diff": diff,
        "params": {"embedding": emb, "backbone": backbone, "total": total},
        "params_masked_model": dict(zip(("embedding", "backbone", "total"), count_parameters(model))),
    }
    _write_config(cfg, out)
    save_model(narrow, out / "checkpoint", {"compact": True, "source": meta.get("kind", "student")})
    _write_json(out / "report.json", report)
    print(f"compact model: embedding {emb:,} / backbone {backbone:,} / total {total:,} params; "
          f"max |logit diff| {diff:.3e}")
    if diff > AGREEMENT_TOL:
        print(f"compact and masked logits disagree by {diff:.3e} > {AGREEMENT_TOL:g}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval_mlm(cfg: ExperimentConfig, checkpoint: str, out: Path | None) -> int:
    model, _ = load_model(checkpoint)
    corpus = _corpus_for(cfg, model.config)
    loss = evaluate_mlm(model, corpus.heldout_batches(cfg.io.eval_batch_size, cfg.train.mask_prob))
    print(f"held-out MLM loss {loss:.6f}")
    if out is not None:
        _write_config(cfg, out)
        _write_json(out / "eval.json", {"checkpoint": str(checkpoint), "heldout_mlm": loss})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homodistil", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat YAML config file")
        p.add_argument("--seed", type=int, help="overrides the seed key")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        return p

    common(sub.add_parser("make-corpus", help="write the synthetic grammar corpus to a text file"))
    common(sub.add_parser("pretrain-teacher", help="train a teacher with the MLM loss"))
    p = common(sub.add_parser("distill", help="distill and prune a student from a teacher"))
    p.add_argument("--teacher", help="teacher checkpoint directory (overrides the teacher key)")
    p.add_argument("--alpha-sweep", action="store_true",
                   help="run the full objective and the MLM-only objective side by side")
    p = common(sub.add_parser("compare-schedules", help="one distillation per t_f; D_KL series and summary"))
    p.add_argument("--teacher", help="teacher checkpoint directory")
    p = common(sub.add_parser("export-compact", help="physically remove pruned columns"))
    p.add_argument("--student", help="student checkpoint directory (overrides the student key)")
    p = common(sub.add_parser("eval-mlm", help="held-out masked-LM loss of a checkpoint"), out_required=False)
    p.add_argument("--checkpoint", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(args.overrides)
        for key in ("teacher", "student"):
            if getattr(args, key, None) is not None:
                overrides[key] = getattr(args, key)
        cfg = resolve_config(args.config, overrides, args.seed)
        out = Path(args.out) if args.out is not None else None
        if args.command == "make-corpus":
            return cmd_make_corpus(cfg, out)
        if out is not None:
            _prepare_out(args.out)
        if args.command == "pretrain-teacher":
            return cmd_pretrain_teacher(cfg, out)
        if args.command == "distill":
            return cmd_distill(cfg, out, args.alpha_sweep)
        if args.command == "compare-schedules":
            return cmd_compare_schedules(cfg, out)
        if args.command == "export-compact":
            return cmd_export_compact(cfg, out)
        if args.command == "eval-mlm":
            return cmd_eval_mlm(cfg, args.checkpoint, out)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, DataError, CheckpointError, MaskIntegrityError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
