"""Command-line entry point: generate, train, sweep, theory and eval."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import time
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from .checkpoint import ChecksumError, load_checkpoint, save_checkpoint
from .config import TRAIN_TYPES, ConfigError, RunConfig, _coerce, load_config, parse_seeds
from .gnn import neighbor_operator
from .graph import SyntheticSpec, generate_synthetic, graph_summary, save_graph_csv
from .theory import check_convergence_bound, check_counterfactual_bound
from .train import (
    TrainConfig,
    evaluate,
    finetune_stage,
    model_inputs,
    pretrain_stage,
    train_vanilla,
)

TRACE_FIELDS = ("epoch", "loss_utility", "loss_objective", "loss_objective_after", "grad_norm",
                "step_norm", "grad_delta_norm", "disparity", "lambda", "val_acc", "val_dsp", "val_deo")


class UsageError(Exception):
    pass


def report_schema() -> dict:
    return json.loads(resources.files("fairwos").joinpath("report.schema.json").read_text())


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stats(values) -> tuple:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def aggregate(per_seed: list) -> dict:
    out = {}
    for key in ("acc", "dsp", "deo"):
        out[f"{key}_mean"], out[f"{key}_std"] = _stats(r[key] for r in per_seed)
    return out


def format_cell(agg: dict, key: str) -> str:
    """Percent ``mean ± std`` the way results tables usually show them."""
    m, s = agg[f"{key}_mean"], agg[f"{key}_std"]
    return "n/a" if m is None else f"{100 * m:.2f} ± {100 * s:.2f}"


class Runner:
    """Runs seeds for a RunConfig, reusing graphs and pretraining across cells."""

    def __init__(self, rc: RunConfig):
        self.rc = rc
        self._graphs = {}
        self._pre = {}

    def graph(self, seed: int):
        if seed not in self._graphs:
            self._graphs[seed] = self.rc.load_graph(seed)
        return self._graphs[seed]

    def run(self, config: TrainConfig, model: str = "fairwos"):
        g = self.graph(config.seed)
        if model == "vanilla":
            t0 = time.perf_counter()
            state = train_vanilla(g, config)
            return g, state, {"records": [], "runtime_s": {"vanilla": time.perf_counter() - t0}}
        key = config.pretrain_key()
        if key not in self._pre:
            self._pre[key] = pretrain_stage(g, config)
        return (g, *finetune_stage(g, self._pre[key], config))


def run_seeds(runner: Runner, train: TrainConfig, seeds, out: Path | None, model: str = "fairwos",
              timed: bool = False, echo: dict | None = None) -> dict:
    per_seed, runtime = [], {}
    for seed in seeds:
        config = TrainConfig(**{**train.__dict__, "seed": seed})
        g, state, trace = runner.run(config, model)
        rep = evaluate(g, state)
        row = {"seed": seed, "acc": rep.accuracy, "dsp": rep.delta_sp, "deo": rep.delta_eo,
               "selected_epoch": state.selected_epoch}
        if out is not None:
            sdir = out / f"seed_{seed}"
            sdir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(state, sdir / "checkpoint.json")
            with (sdir / "trace.jsonl").open("w") as fh:
                for rec in trace["records"]:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            row["checkpoint"] = f"seed_{seed}/checkpoint.json"
            row["trace"] = f"seed_{seed}/trace.jsonl"
        per_seed.append(row)
        for stage, secs in trace["runtime_s"].items():
            runtime[stage] = runtime.get(stage, 0.0) + secs
    report = {
        "config": {**(echo or {}), "model": model},
        "per_seed": per_seed,
        "aggregate": aggregate(per_seed),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if timed:
        report["runtime_s"] = runtime
    if out is not None:
        _dump(report, out / "report.json")
    return report


# ------------------------------------------------------------------ commands


def _run_config(args) -> RunConfig:
    rc = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seeds", None):
        rc.seeds = parse_seeds(args.seeds)
    if getattr(args, "out", None):
        rc.out = Path(args.out)
    return rc


def cmd_generate(args) -> int:
    rc = load_config(args.config) if args.config else RunConfig()
    if rc.source != "synthetic":
        raise UsageError("generate needs a synthetic spec, not CSV paths")
    spec = dict(rc.synthetic)
    if args.num_nodes is not None:
        spec["num_nodes"] = args.num_nodes
    if spec.get("num_nodes", SyntheticSpec.num_nodes) <= 0:
        raise UsageError("num_nodes must be positive")
    g = generate_synthetic(SyntheticSpec(seed=args.seed, **spec))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_graph_csv(g, out / "nodes.csv", out / "edges.csv")
    summ = graph_summary(g)
    print(f"nodes {summ['nodes']}  edges {summ['edges']}  attributes {summ['attributes']}  "
          f"average degree {summ['average_degree']:.2f}")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    model = "vanilla" if args.baseline else "fairwos"
    report = run_seeds(Runner(rc), rc.train, rc.seeds, out, model, args.time, rc.echo())
    agg = report["aggregate"]
    print(f"{model}: ACC {format_cell(agg, 'acc')}  dSP {format_cell(agg, 'dsp')}  "
          f"dEO {format_cell(agg, 'deo')}  ({len(rc.seeds)} seeds) -> {out / 'report.json'}")
    return 0


def parse_grid(items) -> dict:
    grid = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"grid entry {item!r} is not key=v1,v2,...")
        key, values = (s.strip() for s in item.split("=", 1))
        if key not in TRAIN_TYPES or key == "seed":
            raise UsageError(f"unknown grid key {key!r}")
        vals = [_coerce(v, TRAIN_TYPES[key], key) for v in values.split(",") if v.strip()]
        if not vals:
            raise UsageError(f"grid key {key!r} has no values")
        grid[key] = vals
    if not grid:
        raise UsageError("empty grid: give at least one --grid key=v1,v2")
    return grid


def cmd_sweep(args) -> int:
    rc = _run_config(args)
    grid = parse_grid(args.grid)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    runner = Runner(rc)
    rows = []
    for i, combo in enumerate(itertools.product(*grid.values())):
        cell = dict(zip(keys, combo))
        train = TrainConfig(**{**rc.train.__dict__, **cell})
        cdir = out / f"cell_{i:03d}"
        cdir.mkdir(exist_ok=True)
        echo = rc.echo()
        echo["train"].update(cell)
        report = run_seeds(runner, train, rc.seeds, None, "fairwos", args.time, echo)
        _dump(report, cdir / "report.json")
        rows.append({**cell, "seeds": len(rc.seeds), **report["aggregate"]})
        print(" ".join(f"{k}={v}" for k, v in cell.items()),
              f"dSP {format_cell(report['aggregate'], 'dsp')}  ACC {format_cell(report['aggregate'], 'acc')}")
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return 0


def read_trace(path) -> list:
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    missing = sorted({f for r in records for f in TRACE_FIELDS if f not in r})
    if missing:
        raise ValueError(f"{path}: trace records lack fields {', '.join(missing)}")
    return records


def cmd_theory(args) -> int:
    state = load_checkpoint(args.checkpoint)
    rc = _run_config(args)
    g = rc.load_graph(state.config.seed)
    x0 = model_inputs(g, state)
    nbr = neighbor_operator(g, state.gnn.backbone)
    t2 = check_counterfactual_bound(state.gnn, x0, nbr, args.trials, p=args.p, seed=args.trial_seed)
    results = {"embedding_difference": t2.to_dict()}
    ok = t2.passed
    print(f"embedding-difference bound: pass rate {t2.pass_rate:.0%} over {len(t2.trials)} trials")
    if args.trace:
        records = read_trace(args.trace)
        cfg = state.config
        trace = {"records": records, "cf_frozen": cfg.freeze_counterfactuals,
                 "lambda_frozen": cfg.disable_weight_update, "optimizer": cfg.finetune_optimizer,
                 "learning_rate": cfg.finetune_lr or cfg.learning_rate}
        if records:
            t3 = check_convergence_bound(trace)
            results["convergence"] = t3.to_dict()
            ok = ok and t3.status != "fail"
            last = t3.trials[-1]
            print(f"convergence bound: {t3.status} (T={len(records)}, min |g|^2 {last.observed:.4g} "
                  f"<= {last.bound:.4g}, L~{t3.details['L_estimate']:.4g})")
        else:
            print("convergence bound: trace has no fine-tuning epochs, nothing to check")
    if args.report:
        _dump(results, Path(args.report))
    return 0 if ok else 1


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    rc = _run_config(args)
    g = rc.load_graph(state.config.seed)
    rep = evaluate(g, state, args.split)
    print(json.dumps({"seed": state.config.seed, "split": args.split, "acc": rep.accuracy,
                      "dsp": rep.delta_sp, "deo": rep.delta_eo}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairwos", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic biased graph as nodes.csv/edges.csv")
    gen.add_argument("--config", help="config file; only synthetic.* keys are used")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--num-nodes", type=int)
    gen.set_defaults(func=cmd_generate)

    def common(sp, need_out=True):
        sp.add_argument("--config", help="key = value run configuration")
        sp.add_argument("--seeds", help="comma-separated seeds (default from config, else 0..9)")
        if need_out:
            sp.add_argument("--out", help="output directory (default from config)")
            sp.add_argument("--time", action="store_true", help="record wall-clock per stage")

    tr = sub.add_parser("train", help="train on every seed and write report.json")
    common(tr)
    tr.add_argument("--baseline", action="store_true", help="train the vanilla backbone instead")
    tr.set_defaults(func=cmd_train)

    sw = sub.add_parser("sweep", help="grid over TrainConfig fields, one CSV row per cell")
    common(sw)
    sw.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="repeatable")
    sw.set_defaults(func=cmd_sweep)

    th = sub.add_parser("theory", help="check the embedding-difference and convergence bounds")
    common(th, need_out=False)
    th.add_argument("--checkpoint", required=True)
    th.add_argument("--trace", help="trace.jsonl written by train")
    th.add_argument("--trials", type=int, default=100)
    th.add_argument("--p", type=float, default=2)
    th.add_argument("--trial-seed", type=int, default=0)
    th.add_argument("--report", help="write the check results as JSON")
    th.set_defaults(func=cmd_theory)

    ev = sub.add_parser("eval", help="metrics of a saved checkpoint")
    common(ev, need_out=False)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))
    except (ChecksumError, ValueError, OSError) as exc:
        print(f"fairwos: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
