"""Command-line front end.

Exit codes: 0 ok, 2 usage or configuration error, 3 training divergence,
4 checkpoint/dataset mismatch. ``PROTOFLOW_SEED`` supplies a seed when
``--seed`` is absent; ``PROTOFLOW_THREADS`` sets evaluation threads.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence


from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .episodes import (
    EmbeddingDataset,
    EpisodeConfig,
    load_embeddings,
    save_csv,
    save_pfeb,
    split_classes,
    synth_gaussian,
)
from .exceptions import ArtifactMismatch, ProtoflowError, TrainingDiverged
from .gradflow import flow_complexity_probe
from .metatrain import (
    MetaConfig,
    MetaOptimizer,
    baseline_model,
    build_model,
    evaluate,
    gradient_bias,
    meta_train,
    prototype_bias,
    write_metrics_jsonl,
)
from .protoclass import ClassifierConfig
from .solvers import E2, E2Correction, SOLVER_KINDS, SolverConfig, empirical_order

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4

log = logging.getLogger("protoflow")


class UsageError(ProtoflowError):
    pass


# -- run configuration -------------------------------------------------------

@dataclass
class RunConfig:
    """JSON training configuration; every key is optional and unknown keys are rejected."""

    data: Optional[str] = None
    train_data: Optional[str] = None
    val_data: Optional[str] = None
    split_counts: list = field(default_factory=lambda: [20, 5, 5])
    flow: str = "e2gradnet"
    flow_hparams: dict = field(default_factory=dict)
    solver: str = "e2"
    integral_time: float = 40.0
    steps: int = 40
    gamma: float = 10.0
    n_way: int = 5
    k_shot: int = 1
    queries_per_class: int = 15
    episodes_per_epoch: int = 100
    mode: str = "transductive"
    lr: float = 1e-4
    solver_lr: Optional[float] = None
    weight_decay: float = 5e-4
    epochs: int = 50
    lr_decay_epochs: list = field(default_factory=lambda: [15, 30, 40])
    lr_decay_factor: float = 0.1
    batch_episodes: int = 8
    val_episodes: int = 200
    seed: int = 0
    out: str = "model.pfpw"
    metrics: str = "metrics.jsonl"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(self.n_way, self.k_shot, self.queries_per_class, self.episodes_per_epoch,
                             self.seed, self.mode)

    def meta_config(self) -> MetaConfig:
        return MetaConfig(self.lr, self.solver_lr, self.weight_decay, self.epochs, self.episodes_per_epoch,
                          tuple(self.lr_decay_epochs), self.lr_decay_factor, self.batch_episodes,
                          self.val_episodes, self.seed, self.mode)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(self.solver, float(self.integral_time), int(self.steps))


def _config_help() -> str:
    lines = ["RunConfig keys (JSON) and defaults:"]
    for f in dataclasses.fields(RunConfig):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        lines.append(f"  {f.name} = {json.dumps(default)}")
    return "\n".join(lines)


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value


def _resolve_seed(flag: Optional[int]) -> Optional[int]:
    if flag is not None:
        return flag
    env = os.environ.get("PROTOFLOW_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"PROTOFLOW_SEED must be an integer, got {env!r}")
    return None


# -- output ------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def emit_table(rows: list[dict], csv_path: Optional[str]) -> None:
    """Print ``rows`` as an aligned table and write the same strings as CSV."""
    if not rows:
        return
    header = list(rows[0])
    cells = [[_fmt(r[h]) for h in header] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for c in cells:
        print("  ".join(v.ljust(w) for v, w in zip(c, widths)))
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(cells)


# -- data helpers ------------------------------------------------------------

def _load_split(path: str, split: str, counts: Sequence[int]) -> EmbeddingDataset:
    ds = load_embeddings(path)
    if split == "all":
        return ds
    if len(counts) != 3:
        raise UsageError("split counts must be three integers: train,val,test")
    train, val, test = split_classes(ds, counts[0], counts[1], counts[2])
    return {"train": train, "val": val, "test": test}[split]


def _counts(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _int_list(text: str) -> list[int]:
    return _counts(text)


def _check_compatible(model: MetaOptimizer, ds: EmbeddingDataset, n_way: int) -> None:
    if ds.dim != model.dim:
        raise ArtifactMismatch(f"checkpoint expects dim {model.dim}, dataset has dim {ds.dim}")
    if n_way != model.n_way:
        raise ArtifactMismatch(f"checkpoint is {model.n_way}-way, requested {n_way}-way episodes")
    if len(ds.class_ids) < n_way:
        raise ArtifactMismatch(f"dataset has {len(ds.class_ids)} classes, episodes need {n_way}")


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.classes < 1 or args.dim < 2 or args.per_class < 1:
        raise UsageError("--classes and --per-class must be positive and --dim at least 2")
    if args.noise_sigma < 0:
        raise UsageError("--noise-sigma must be non-negative")
    seed = _resolve_seed(args.seed) or 0
    ds = synth_gaussian(args.classes, args.dim, args.per_class, args.center_scale, args.noise_sigma, seed)
    if args.output.lower().endswith(".csv"):
        save_csv(ds, args.output)
    else:
        save_pfeb(ds, args.output)
    print(f"classes={len(ds.class_ids)} dim={ds.dim} samples={len(ds.labels)} -> {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config}: {exc}")
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
    for item in args.set or []:
        key, value = _parse_override(item)
        raw[key] = value
    seed = _resolve_seed(args.seed)
    if seed is not None:
        raw["seed"] = seed
    for key in ("out", "metrics"):
        if getattr(args, key):
            raw[key] = getattr(args, key)
    cfg = RunConfig.from_dict(raw)

    counts = cfg.split_counts
    if cfg.train_data and cfg.val_data:
        train, val = load_embeddings(cfg.train_data, "train"), load_embeddings(cfg.val_data, "val")
    elif cfg.data:
        train = _load_split(cfg.data, "train", counts)
        val = _load_split(cfg.data, "val", counts)
    else:
        raise UsageError("config needs 'data' or both 'train_data' and 'val_data'")

    model = build_model(cfg.flow, cfg.n_way, train.dim, cfg.solver_config(), ClassifierConfig(cfg.gamma),
                        cfg.mode, seed=cfg.seed, **cfg.flow_hparams)
    history: list[dict] = []

    def on_epoch(row):
        history.append(row)
        print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  val_acc {row['val_acc']:.4f}  lr {row['lr']:.2e}")

    try:
        result = meta_train(train, val, cfg.meta_config(), model=model, episode_config=cfg.episode_config(),
                            on_epoch=on_epoch)
    except TrainingDiverged as exc:
        write_metrics_jsonl(history, cfg.metrics)
        save_checkpoint(exc.checkpoint, cfg.out, extra={"diverged_epoch": exc.epoch})
        print(f"training diverged: {exc}; last good checkpoint written to {cfg.out}", file=sys.stderr)
        return EXIT_DIVERGED
    write_metrics_jsonl(result.history, cfg.metrics)
    save_checkpoint(result.model, cfg.out, extra={"best_epoch": result.best_epoch,
                                                  "best_val_acc": result.best_val_accuracy})
    print(f"best epoch {result.best_epoch} val_acc {result.best_val_accuracy:.4f} -> {cfg.out}")
    return EXIT_OK


def _eval_setup(args):
    model = load_checkpoint(args.checkpoint)
    ds = _load_split(args.data, args.split, args.split_counts)
    n_way = args.n_way or model.n_way
    _check_compatible(model, ds, n_way)
    episodes = EpisodeConfig(n_way, args.k_shot, args.queries, mode=model.mode)
    seed = _resolve_seed(args.seed) or 0
    return model, ds, episodes, seed


def _csv_path(args, suffix: str) -> str:
    return args.csv or str(Path(args.checkpoint).with_suffix(f".{suffix}.csv"))


def cmd_eval(args) -> int:
    model, ds, episodes, seed = _eval_setup(args)
    base = evaluate(ds, baseline_model(model), args.episodes, episodes, seed, label="baseline")
    report = evaluate(ds, model, args.episodes, episodes, seed, label=model.flow_kind)
    rows = [base.as_row(), report.as_row()]
    emit_table(rows, _csv_path(args, "eval"))
    return EXIT_OK


def cmd_proto_bias(args) -> int:
    model, ds, episodes, seed = _eval_setup(args)
    init, final = prototype_bias(ds, model, args.episodes, episodes, seed)
    emit_table([{"metric": "prototype_cosine", "initial": init, "final": final, "episodes": args.episodes}],
               _csv_path(args, "proto_bias"))
    return EXIT_OK


def cmd_grad_bias(args) -> int:
    model, ds, episodes, seed = _eval_setup(args)
    averaged, inferred = gradient_bias(ds, model, args.episodes, episodes, seed)
    emit_table([{"metric": "gradient_cosine", "averaged": averaged, "inferred": inferred,
                 "episodes": args.episodes}], _csv_path(args, "grad_bias"))
    return EXIT_OK


def cmd_bench_solvers(args) -> int:
    rows = []
    for kind in SOLVER_KINDS:
        correction = E2Correction(3) if kind == E2 else None
        res = empirical_order(kind, step_counts=args.step_counts, correction=correction)
        rows.append({"solver": kind, "order": res["order"],
                     "error_first": res["errors"][0], "error_last": res["errors"][-1]})
    emit_table(rows, args.csv or "bench_solvers.csv")
    if args.checkpoint:
        model, ds, episodes, seed = _eval_setup(args)
        acc_rows = []
        for kind in SOLVER_KINDS:
            if kind == E2 and model.correction is None:
                continue
            variant = model.clone()
            variant.solver = SolverConfig(kind, model.solver.integral_time, model.solver.steps)
            rep = evaluate(ds, variant, args.episodes, episodes, seed, label=kind)
            acc_rows.append({"solver": kind, "mean_accuracy": rep.mean_accuracy, "ci95": rep.ci95})
        print()
        acc_csv = (str(Path(args.csv).with_suffix(".accuracy.csv")) if args.csv
                   else str(Path(args.checkpoint).with_suffix(".solver_accuracy.csv")))
        emit_table(acc_rows, acc_csv)
    return EXIT_OK


def cmd_bench_runtime(args) -> int:
    seed = _resolve_seed(args.seed) or 0
    rows = []
    for flow in args.flows:
        for q in args.queries:
            res = flow_complexity_probe(flow, args.n_way, args.k_shot, q, args.dim, args.repeats, seed)
            rows.append({"flow": flow, "n_way": args.n_way, "k_shot": args.k_shot, "queries": q,
                         "samples": res["samples"], "dim": args.dim,
                         "median_s": res["median_s"], "min_s": res["min_s"]})
    emit_table(rows, args.csv or "bench_runtime.csv")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_eval_flags(p, episodes: int, required: bool = True) -> None:
    p.add_argument("--checkpoint", required=required, help="PFPW checkpoint")
    p.add_argument("--data", required=required, help="PFEB or CSV embedding file")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"],
                   help="class split of --data to use (default: test)")
    p.add_argument("--split-counts", type=_counts, default=[20, 5, 5],
                   help="train,val,test class counts by ascending class id (default: 20,5,5)")
    p.add_argument("--episodes", type=int, default=episodes, help=f"episodes (default: {episodes})")
    p.add_argument("--n-way", type=int, default=None, help="ways (default: the checkpoint's)")
    p.add_argument("--k-shot", type=int, default=1, help="shots (default: 1)")
    p.add_argument("--queries", type=int, default=15, help="queries per class (default: 15)")
    p.add_argument("--csv", default=None, help="CSV output path (default: beside the checkpoint)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoflow", description="Continuous-time prototype optimisation "
                                     "for few-shot classification over embedding vectors.")
    parser.add_argument("--version", action="version", version=f"protoflow {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    seed_parent = argparse.ArgumentParser(add_help=False)
    seed_parent.add_argument("--seed", type=int, default=None,
                             help="random seed (default: $PROTOFLOW_SEED, else 0)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[seed_parent], help="write a synthetic Gaussian embedding dataset")
    p.add_argument("--classes", type=int, default=30, help="number of classes (default: 30)")
    p.add_argument("--dim", type=int, default=64, help="embedding dimension (default: 64)")
    p.add_argument("--per-class", type=int, default=200, help="samples per class (default: 200)")
    p.add_argument("--center-scale", type=float, default=1.0, help="class-centre radius (default: 1.0)")
    p.add_argument("--noise-sigma", type=float, default=0.35, help="isotropic noise std (default: 0.35)")
    p.add_argument("-o", "--output", required=True, help="output path; .csv writes CSV, else PFEB")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[seed_parent], help="meta-train a prototype optimiser",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=_config_help())
    p.add_argument("-c", "--config", default=None, help="JSON run configuration")
    p.add_argument("--set", nargs="+", action="extend", metavar="KEY=VALUE",
                   help="override config keys; values are parsed as JSON when possible")
    p.add_argument("--out", default=None, help="checkpoint path (overrides config 'out')")
    p.add_argument("--metrics", default=None, help="metrics JSONL path (overrides config 'metrics')")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[seed_parent], help="accuracy with 95%% CI, beside the baseline")
    _add_eval_flags(p, 600)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("proto-bias", parents=[seed_parent], help="prototype cosine to the class means")
    _add_eval_flags(p, 1000)
    p.set_defaults(func=cmd_proto_bias)

    p = sub.add_parser("grad-bias", parents=[seed_parent], help="gradient cosine to the population gradient")
    _add_eval_flags(p, 1000)
    p.set_defaults(func=cmd_grad_bias)

    p = sub.add_parser("bench-solvers", parents=[seed_parent],
                       help="empirical solver orders; with --checkpoint also accuracy per solver")
    _add_eval_flags(p, 600, required=False)
    p.add_argument("--step-counts", type=_int_list, default=[8, 16, 32, 64],
                   help="geometric step counts on dp/dt=-p over T=1 (default: 8,16,32,64)")
    p.set_defaults(func=cmd_bench_solvers)

    p = sub.add_parser("bench-runtime", parents=[seed_parent], help="median flow-evaluation time grid")
    p.add_argument("--flows", nargs="+", default=["gradnet", "e2gradnet"], help="flow kinds")
    p.add_argument("--n-way", type=int, default=5, help="ways (default: 5)")
    p.add_argument("--k-shot", type=int, default=5, help="shots (default: 5)")
    p.add_argument("--queries", type=_int_list, default=[15, 30], help="queries per class (default: 15,30)")
    p.add_argument("--dim", type=int, default=64, help="embedding dimension (default: 64)")
    p.add_argument("--repeats", type=int, default=5, help="timed repeats (default: 5)")
    p.add_argument("--csv", default=None, help="CSV output path (default: bench_runtime.csv)")
    p.set_defaults(func=cmd_bench_runtime)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "func", None) is cmd_bench_solvers and bool(args.checkpoint) != bool(args.data):
        parser.error("--checkpoint and --data go together")
    try:
        return args.func(args)
    except ArtifactMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ProtoflowError, ValueError, TypeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
