"""Command-line entry point: ``constraint-uq <verb> --config cfg.yaml --out dir``.

Every verb writes deterministic files into ``--out``: JSON reports use sorted
keys and floats in shortest round-trip form, CSVs write floats with ``repr``.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import bnn
from .. import extract as ext
from ..errors import (
    ConstraintError, ConvergenceError, DataError, DomainError, InfeasibleError, NumericalError, ParseError,
)
from ..expr import dump_constraints, load_constraints
from . import pipeline as pl
from .config import ExperimentConfig, load_config

log = logging.getLogger("constraint_uq")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _seed(cfg: ExperimentConfig, args) -> int:
    return cfg.seeds[0] if args.seed is None else args.seed


def _model_for(cfg, task, args, seed) -> pl.TrainedModel:
    if args.checkpoint:
        return pl.from_checkpoint(bnn.load_checkpoint(args.checkpoint), task)
    log.info("no --checkpoint given; training seed %d first", seed)
    return pl.train(cfg, task, seed)


def _write_evaluation(out: Path, ev: pl.Evaluation, extra: dict) -> None:
    _write_json(out / "report.json", {**extra, "metrics": ev.metrics, "n_test": len(ev.data.Y)})
    _write_csv(out / "reliability.csv", ["bin_center", "confidence", "observed", "count"],
               [[_fmt(v) for v in row] for row in ev.report.reliability_rows()])
    header, rows = pl.prediction_rows(ev)
    _write_csv(out / "predictions.csv", header, rows)


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------


def cmd_extract(cfg: ExperimentConfig, args, out: Path) -> None:
    task = pl.load_task(cfg)
    found = pl.run_extraction(cfg, task.split.train, task.d_y)
    (out / "constraints.dsl").write_text(dump_constraints(found), encoding="utf-8")
    report = {
        "tau_score": cfg.knowledge.tau_score,
        "sim_threshold": cfg.knowledge.sim_threshold,
        "n_extracted": len(found),
        "constraints": [{"id": c.id, "kind": c.kind, "score": c.score, "dsl": c.to_dsl()} for c in found],
    }
    if cfg.knowledge.gold is not None:
        gold = load_constraints(cfg.knowledge.gold, task.d_y, task.d_x)
        report["metrics"] = dataclasses.asdict(ext.extraction_metrics(found, gold))
    _write_json(out / "extraction_report.json", report)


def cmd_train(cfg: ExperimentConfig, args, out: Path) -> None:
    task = pl.load_task(cfg)
    seed = _seed(cfg, args)
    tm = pl.train(cfg, task, seed)
    bnn.save_checkpoint(tm.model, out / "checkpoint.json")
    _write_csv(out / "train_log.csv", pl.LOG_COLUMNS, [[_fmt(r[k]) for k in pl.LOG_COLUMNS] for r in tm.log_rows])
    if tm.extracted:
        (out / "constraints.dsl").write_text(dump_constraints(tm.extracted), encoding="utf-8")


def cmd_evaluate(cfg: ExperimentConfig, args, out: Path) -> None:
    task = pl.load_task(cfg)
    seed = _seed(cfg, args)
    tm = _model_for(cfg, task, args, seed)
    ev = pl.evaluate(cfg, tm, task.split.test, seed)
    _write_evaluation(out, ev, {"seed": seed, "severity": cfg.data.severity, "toggles": dataclasses.asdict(cfg.toggles)})


def _seeds(cfg, args) -> ExperimentConfig:
    return cfg if args.seed is None else dataclasses.replace(cfg, seeds=[args.seed])


def cmd_ablate(cfg: ExperimentConfig, args, out: Path) -> None:
    cfg = _seeds(cfg, args)
    res = pl.run_ablation(cfg)
    table = res.table()
    cols = list(table[0].keys())
    _write_csv(out / "ablation.csv", cols, [[_fmt(r[c]) for c in cols] for r in table])
    run_cols = ["config", "seed", *pl.METRICS]
    _write_csv(out / "ablation_runs.csv", run_cols, [[_fmt(r[c]) for c in run_cols] for r in res.runs])
    _write_json(out / "ablation_tests.json", res.tests)
    samples = out / "samples"
    samples.mkdir(exist_ok=True)
    for (name, seed), ev in res.evaluations.items():
        header, rows = pl.prediction_rows(ev)
        _write_csv(samples / f"{name}_seed{seed}.csv", header, rows)


def cmd_shift_sweep(cfg: ExperimentConfig, args, out: Path) -> None:
    cfg = _seeds(cfg, args)
    if cfg.data.source != "synthetic":
        raise DataError("shift-sweep needs a synthetic data source")
    res = pl.run_shift_sweep(cfg, args.severities)
    rows = []
    for name, _ in pl.SWEEP_CONFIGS:
        for s, m, sd in res.curve(name):
            rows.append([name, _fmt(s), _fmt(m), _fmt(sd), str(len(cfg.seeds))])
    _write_csv(out / "shift_sweep.csv", ["config", "severity", "ece_mean", "ece_std", "n_seeds"], rows)
    _write_csv(out / "shift_sweep_runs.csv", ["config", "severity", "seed", "ece"],
               [[r["config"], _fmt(r["severity"]), str(r["seed"]), _fmt(r["ece"])] for r in res.runs])


def cmd_explain(cfg: ExperimentConfig, args, out: Path) -> None:
    task = pl.load_task(cfg)
    seed = _seed(cfg, args)
    tm = _model_for(cfg, task, args, seed)
    ev = pl.evaluate(cfg, tm, task.split.test, seed)
    run = pl.explain_predictions(cfg, tm, ev)
    with (out / "explanations.jsonl").open("w", encoding="utf-8") as fh:
        for i, row in enumerate(run.per_sample):
            if not row:
                continue
            items = [{"constraint": e.constraint_id, "kind": e.kind, "magnitude": e.magnitude, "text": e.text}
                     for e in row]
            fh.write(json.dumps({"index": i, "explanations": items}, sort_keys=True) + "\n")
    _write_json(out / "explain_report.json", {
        "seed": seed,
        "n_test": len(ev.data.Y),
        "n_significant": run.n_significant,
        "n_explanations": sum(len(r) for r in run.per_sample),
        "coverage": run.coverage,
        "template_accuracy": run.template_accuracy,
    })


VERBS = {
    "extract": (cmd_extract, "extract constraints from a knowledge graph"),
    "train": (cmd_train, "train one model and write a checkpoint"),
    "evaluate": (cmd_evaluate, "evaluate a checkpoint on the test split"),
    "ablate": (cmd_ablate, "run the six-way ablation over all seeds"),
    "shift-sweep": (cmd_shift_sweep, "ECE against distribution-shift severity"),
    "explain": (cmd_explain, "explain projections on the test split"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="constraint-uq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for name, (_, help_) in VERBS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        s.add_argument("--seed", type=int, help="seed override (ablate/shift-sweep: run only this seed)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("evaluate", "explain"):
            s.add_argument("--checkpoint", help="checkpoint from `train`; trains in-process when omitted")
        if name == "shift-sweep":
            s.add_argument("--severities", type=float, nargs="+", help="override eval.severities")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    fn = VERBS[args.verb][0]
    try:
        cfg = load_config(args.config)
        sevs = getattr(args, "severities", None)
        if sevs and any(not 0.0 <= s <= 1.0 for s in sevs):
            raise UsageError("severities must lie in [0, 1]")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        fn(cfg, args, out)
    except UsageError as exc:
        print(f"constraint-uq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, ConstraintError, InfeasibleError, OSError) as exc:
        print(f"constraint-uq: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ConvergenceError, DomainError, FloatingPointError) as exc:
        print(f"constraint-uq: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
