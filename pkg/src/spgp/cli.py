"""Command-line entry point: ``spgp <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from .graph import load_dataset, write_native
from .structure import KINDS, extract_all, read_prototype_cache, write_prototype_cache

log = logging.getLogger("spgp")


class CliError(Exception):
    pass


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _kinds(text: str) -> tuple[str, ...]:
    kinds = tuple(t.strip().lower() for t in text.split(",") if t.strip())
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise argparse.ArgumentTypeError(f"kinds must be a subset of {','.join(KINDS)}")
    return kinds


def _n_range(text: str) -> list[int]:
    """``lo:hi`` gives every power of ten in between; otherwise a comma list."""
    if ":" in text:
        lo, hi = (int(float(t)) for t in text.split(":"))
        if lo <= 0 or hi < lo:
            raise argparse.ArgumentTypeError("n-range must be lo:hi with 0 < lo <= hi")
        ns, n = [], lo
        while n <= hi:
            ns.append(n)
            n *= 10
        return ns
    ns = [int(v) for v in _csv_floats(text)]
    if not ns or min(ns) <= 0:
        raise argparse.ArgumentTypeError("n values must be positive")
    return ns


def read_config(path: str | Path):
    from .model import TrainConfig

    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        raw = json.loads(text)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib
        raw = tomllib.loads(text)
        raw = raw.get("train", raw)
    return TrainConfig.from_dict(raw)


# ----------------------------------------------------------------- commands


def cmd_preprocess(args) -> int:
    ds = load_dataset(args.data)
    start = time.perf_counter()
    protos = [extract_all(g, args.kinds) for g in ds.graphs]
    elapsed = time.perf_counter() - start
    write_prototype_cache(args.out, protos)
    covered = sum(any(ps.sets for ps in p.values()) for p in protos)
    print(f"{len(ds)} graphs, {covered / max(len(ds), 1):.4f} with a prototype, "
          f"{elapsed / max(len(ds), 1) * 1e3:.3f} ms per graph -> {args.out}")
    return 0


def _load_cache(path, dataset, kinds):
    if path is None:
        return None
    if not Path(path).exists():
        raise CliError(f"prototype cache {path} not found")
    return read_prototype_cache(path, len(dataset), kinds)


def cmd_train(args) -> int:
    from .model import train
    from .plotting import plot_training

    config = read_config(args.config) if args.config else None
    if config is None:
        from .model import TrainConfig
        config = TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.epochs = args.epochs
    ds = load_dataset(args.data)
    protos = _load_cache(args.cache, ds, config.prototype_kinds)
    models = []
    report = train(config, ds, protos, run_folds=args.folds, keep_models=models)
    out = Path(args.out)
    models[0].save(out)
    report.write_json(out.with_suffix(".report.json"))
    with out.with_suffix(".loss.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "epoch", "train_loss", "val_metric"])
        for f, loss, val in zip(report.fold_ids, report.train_loss, report.val_metric):
            for e, (a, b) in enumerate(zip(loss, val)):
                w.writerow([f, e, repr(a), repr(b)])
    if any(report.train_loss):
        plot_training(report.train_loss, report.val_metric, out.with_suffix(".loss.png"), report.metric_name)
    print(f"{report.metric_name} {report.mean:.4f} +- {report.std:.4f} over folds {report.fold_ids} -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .model import SPGPModel, evaluate

    model = SPGPModel.from_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    protos = _load_cache(args.cache, ds, model.config.prototype_kinds)
    report = evaluate(model, ds, protos)
    print(f"{report.metric_name} {report.fold_metrics[0]:.6f}")
    return 0


def cmd_diversity(args) -> int:
    from .plotting import plot_diversity
    from .synth import GenSpec, diversity_experiment, write_diversity_csv

    spec = GenSpec("regular", args.n, args.degree, seed=args.seed)
    res = diversity_experiment(spec, args.fractions, num_graphs=args.graphs, seed=args.seed, lam=args.lam)
    write_diversity_csv(args.out, res)
    png = Path(args.out).with_suffix(".png")
    plot_diversity(res, png)
    for r in res:
        print(f"fraction {r.rewire_fraction:.2f}: spgp {r.mean_score_std['spgp']:.4g} "
              f"baseline {r.mean_score_std['baseline']:.4g}")
    print(f"-> {args.out}, {png}")
    return 0


def cmd_complexity(args) -> int:
    from .plotting import plot_complexity
    from .pooling import SPGP, STRUCTURE_LEARNING, complexity_table, loglog_slope, write_complexity_csv

    rows = complexity_table(args.n_range, args.d, args.s)
    write_complexity_csv(args.out, rows)
    png = Path(args.out).with_suffix(".png")
    plot_complexity(rows, png)
    if len(args.n_range) > 1:
        for method in (SPGP, STRUCTURE_LEARNING):
            sel = [r for r in rows if r["method"] == method]
            slope = loglog_slope([r["n"] for r in sel], [r["space_units"] for r in sel])
            print(f"{method}: space slope {slope:.3f}")
    print(f"-> {args.out}, {png}")
    return 0


def cmd_motif_task(args) -> int:
    from .synth import planted_motif_task

    ds = planted_motif_task(args.graphs, args.n, seed=args.seed)
    write_native(ds, args.out)
    print(f"{len(ds)} graphs -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import CASES, run_all

    names = args.cases or sorted(CASES)
    unknown = sorted(set(names) - set(CASES))
    if unknown:
        raise CliError(f"unknown cases {unknown}")
    worst = run_all(range(args.seed, args.seed + args.seeds), names)
    failed = 0
    for name in names:
        ok = worst[name] <= args.tol
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:36s} {worst[name]:.3e}")
    return 1 if failed else 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spgp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--seed", type=int, default=None if name == "train" else 0)
        sp.set_defaults(func=fn)
        return sp

    sp = add("preprocess", cmd_preprocess, "extract prototypes into a cache file")
    sp.add_argument("--data", required=True, help="TUDataset directory or native file")
    sp.add_argument("--kinds", type=_kinds, default=KINDS)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "k-fold training; saves the first trained fold's model")
    sp.add_argument("--config", help="TOML or JSON config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--cache")
    sp.add_argument("--out", required=True)
    sp.add_argument("--folds", type=lambda s: [int(v) for v in _csv_floats(s)], default=None,
                    help="comma list of folds to run (default all)")
    sp.add_argument("--epochs", type=int)

    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--cache")

    sp = add("diversity", cmd_diversity, "score diversity on rewired regular graphs")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--degree", type=int, default=6)
    sp.add_argument("--fractions", type=_csv_floats, default=[round(0.1 * i, 1) for i in range(11)])
    sp.add_argument("--graphs", type=int, default=100)
    sp.add_argument("--lam", type=float, default=0.0)
    sp.add_argument("--out", required=True)

    sp = add("complexity", cmd_complexity, "analytic time/space counters")
    sp.add_argument("--n-range", type=_n_range, default=_n_range("100:100000"))
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--s", type=int, default=2)
    sp.add_argument("--out", required=True)

    sp = add("motif-task", cmd_motif_task, "write the planted-clique dataset")
    sp.add_argument("--graphs", type=int, default=200)
    sp.add_argument("--n", type=int, default=30)
    sp.add_argument("--out", required=True)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--cases", nargs="*")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"spgp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
