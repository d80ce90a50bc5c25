"""Command line entry point: gen, pretrain, run, sweep, ablate, report.

Outputs default to the directory named by ``GRAPHTTA_OUT`` (``./out`` when
unset). Every failure ends with a single ``error:`` line and exit status 2.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from pathlib import Path

from .backbone import ModelFormatError, PretrainConfig, load_model, save_model
from .data import DataError, generate_synthetic, load_csv, save_csv
from .engine import VARIANTS, AdapterState, TTAConfig, run_stream, save_adapter_state
from .graph import GraphError
from .pipeline import Experiment, prepare, train_backbone
from .report import ReportError, metrics_table, plot_reports, read_report, write_report

OUT_ENV = "GRAPHTTA_OUT"
SWEEP_AXES = {
    "alpha": [0.9, 0.99, 0.995, 0.999],
    "lambda": [0.1, 0.5, 1.0, 5.0, 10.0],
    "batch": [8, 16, 32, 64, 128],
}

log = logging.getLogger("graphtta")


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "out"))


# ---------------------------------------------------------------------------
# shared loading


def load_data_dir(path) -> tuple:
    d = Path(path)
    if not d.is_dir():
        raise CLIError(f"data directory {d} does not exist")
    coords = d / "coords.csv"
    ds, graph = load_csv(d / "readings.csv", d / "adjacency.csv", coords if coords.exists() else None)
    meta_path = d / "meta.json"
    if meta_path.exists():
        ds.meta = json.loads(meta_path.read_text())
    return ds, graph


def experiment_for_model(data_dir, meta: dict) -> Experiment:
    """Rebuild the experiment a model was pretrained on, with the same virtual set."""
    ds, graph = load_data_dir(data_dir)
    try:
        sel = meta["selection"]
    except KeyError:
        raise CLIError("model file carries no virtual selection; re-run pretrain") from None
    if meta.get("n_nodes") != ds.n_nodes:
        raise CLIError(f"model was trained on {meta.get('n_nodes')} nodes, data has {ds.n_nodes}")
    exp = prepare(ds, graph, virtual_ratio=sel["ratio"], pattern=sel["pattern"], seed=sel["seed"], window=meta["window"])
    if list(exp.selection.selected) != list(sel["selected"]):
        raise CLIError("virtual selection differs from the one used at pretraining")
    return exp


def tta_config(args, **over) -> TTAConfig:
    kw = dict(
        r_weak=args.rw,
        r_strong=args.rs,
        lam=args.lam,
        alpha=args.alpha,
        steps_per_batch=args.steps,
        lr=args.lr,
        seed=args.seed,
        hidden_dim=args.adapter_hidden,
    )
    kw.update(over)
    return TTAConfig(**kw)


def execute(model_path, data_dir, config: TTAConfig, batch: int, adapt: bool, stem, checkpoint=None):
    model, meta = load_model(model_path)
    exp = experiment_for_model(data_dir, meta)
    batches = exp.stream("test", batch)
    state = AdapterState.fresh(batches[0], config) if adapt else None
    before = model.checksum()
    report = run_stream(model, batches, config, adapt=adapt, normalizer=exp.normalizer, state=state)
    if model.checksum() != before:
        raise CLIError("backbone parameters changed during the run")
    echo = dict(config.as_dict(), adapt=adapt, batch_size=batch, model=str(model_path), data=str(data_dir))
    paths = write_report(report, stem, echo)
    if checkpoint is not None and state is not None:
        save_adapter_state(state, checkpoint, config)
    return report, paths


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    out = Path(args.out) if args.out else out_root() / "data"
    ds, graph = generate_synthetic(args.nodes, args.timesteps, args.shift, args.seed)
    save_csv(ds, graph, out)
    (out / "meta.json").write_text(json.dumps(dict(ds.meta, seed=args.seed, shift=args.shift), indent=2) + "\n")
    print(f"wrote {ds.n_timesteps}x{ds.n_nodes} readings to {out}")
    return 0


def cmd_pretrain(args) -> int:
    ds, graph = load_data_dir(args.data)
    exp = prepare(ds, graph, virtual_ratio=args.virtual_ratio, pattern=args.pattern, seed=args.seed, window=args.window)
    history: list[float] = []
    model = train_backbone(exp, PretrainConfig(epochs=args.epochs, seed=args.seed, hidden_dim=args.hidden), history)
    sel = exp.selection
    out = Path(args.out) if args.out else out_root() / "model.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(
        model,
        out,
        {
            "selection": {"pattern": sel.pattern, "ratio": sel.ratio, "seed": sel.seed, "selected": list(sel.selected)},
            "n_nodes": ds.n_nodes,
            "epochs": args.epochs,
            "seed": args.seed,
            "train_loss": history,
        },
    )
    print(f"backbone frozen after {args.epochs} epochs (final loss {history[-1]:.5f}), saved to {out}")
    return 0


def cmd_run(args) -> int:
    config = tta_config(args, variant=args.variant)
    tag = "adapt" if args.adapt else "noadapt"
    stem = Path(args.report) if args.report else out_root() / "runs" / f"{tag}-seed{args.seed}"
    report, (csv_path, _) = execute(args.model, args.data, config, args.batch, args.adapt, stem, args.checkpoint)
    s = report.summary
    print(f"{tag}: MAE {s['mae']:.4f} MRE {s['mre']:.4f} MAPE {s['mape']:.4f} over {s['n_batches']} batches -> {csv_path}")
    return 1 if s["n_errors"] else 0


def parse_grid(text: str | None) -> dict[str, list]:
    """``"alpha=0.9,0.99;lambda=1;batch=8,16"``; missing axes use the full default list."""
    grid = {k: list(v) for k, v in SWEEP_AXES.items()}
    if not text:
        return grid
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise CLIError(f"grid entry {part!r} is not axis=v1,v2")
        key, vals = part.split("=", 1)
        key = key.strip()
        if key not in SWEEP_AXES:
            raise CLIError(f"unknown sweep axis {key!r} (choose from {', '.join(SWEEP_AXES)})")
        try:
            cast = int if key == "batch" else float
            grid[key] = [cast(v) for v in vals.split(",") if v.strip()]
        except ValueError:
            raise CLIError(f"non-numeric value in grid entry {part!r}") from None
        if not grid[key]:
            raise CLIError(f"grid axis {key!r} is empty")
    return grid


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    out = Path(args.out) if args.out else out_root() / "sweep"
    failures = 0
    for alpha, lam, batch in itertools.product(grid["alpha"], grid["lambda"], grid["batch"]):
        config = tta_config(args, alpha=alpha, lam=lam)
        stem = out / f"alpha{alpha:g}_lambda{lam:g}_batch{batch}"
        report, _ = execute(args.model, args.data, config, batch, True, stem)
        failures += report.summary["n_errors"] > 0
        print(f"alpha={alpha:g} lambda={lam:g} batch={batch}: MAE {report.summary['mae']:.4f}")
    return 1 if failures else 0


def cmd_ablate(args) -> int:
    out = Path(args.out) if args.out else out_root() / "ablate"
    failures = 0
    for variant in args.variants:
        config = tta_config(args, variant=variant)
        report, _ = execute(args.model, args.data, config, args.batch, True, out / variant)
        failures += report.summary["n_errors"] > 0
        print(f"{variant}: MAE {report.summary['mae']:.4f}")
    return 1 if failures else 0


def cmd_report(args) -> int:
    rows, summaries = {}, {}
    for p in args.inputs:
        name = Path(p).name.removesuffix(".csv").removesuffix(".json")
        r, meta = read_report(p)
        rows[name] = r
        summaries[name] = meta.get("summary", {})
    table = metrics_table(summaries)
    print(table)
    out = Path(args.out) if args.out else out_root() / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.md").write_text(table + "\n")
    plot = plot_reports(rows, out / f"{args.metric}.png", args.metric)
    print(f"plot written to {plot}")
    return 0


# ---------------------------------------------------------------------------


def _add_tta_flags(p: argparse.ArgumentParser, batch: bool = True) -> None:
    d = TTAConfig()
    p.add_argument("--model", required=True, help="frozen backbone written by pretrain")
    p.add_argument("--data", required=True, help="directory with readings.csv and adjacency.csv")
    p.add_argument("--rw", type=float, default=d.r_weak, help="weak mask rate")
    p.add_argument("--rs", type=float, default=d.r_strong, help="strong mask rate")
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam, help="weight of the edge-change penalty")
    p.add_argument("--alpha", type=float, default=d.alpha, help="memory EMA coefficient")
    p.add_argument("--steps", type=int, default=d.steps_per_batch, help="optimizer steps per batch")
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--adapter-hidden", type=int, default=d.hidden_dim)
    p.add_argument("--seed", type=int, default=0)
    if batch:
        p.add_argument("--batch", type=int, default=32, help="windows per test batch")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="graphtta", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--nodes", type=int, default=40)
    p.add_argument("--timesteps", type=int, default=19440)
    p.add_argument("--shift", type=float, default=0.5, help="regime change strength in the test split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="train and freeze the backbone on observed nodes")
    p.add_argument("--data", required=True)
    p.add_argument("--virtual-ratio", type=float, default=0.5)
    p.add_argument("--pattern", choices=["random", "regional"], default="random")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--window", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="stream the test split")
    _add_tta_flags(p)
    p.add_argument("--adapt", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--report", help="output stem; .csv and .json are appended")
    p.add_argument("--checkpoint", help="save adapter and memory parameters here after the stream")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid over alpha, lambda and batch size")
    _add_tta_flags(p, batch=False)
    p.add_argument("--grid", help='e.g. "alpha=0.9,0.99;lambda=0.1,1;batch=8"')
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="one report per adapter variant")
    _add_tta_flags(p)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="metrics table and per-batch plot")
    p.add_argument("inputs", nargs="+", help="report .csv/.json files or stems")
    p.add_argument("--metric", choices=["mae", "mre", "mape", "total_loss", "mean_abs_delta"], default="mae")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, DataError, GraphError, ModelFormatError, ReportError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
