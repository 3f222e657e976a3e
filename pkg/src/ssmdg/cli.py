"""Command line entry point: ``ssmdg run | ablation-grid | diag``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as C
from . import diffcore as dc
from .trainer import CSV_COLUMNS, NumericFailure, metrics_csv, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
RUN_FILES = ("resolved-config.json", "metrics.csv", "report.json")

log = logging.getLogger("ssmdg")


def _setup_logging() -> None:
    level = os.environ.get("SSMDG_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _emit_error(record: dict) -> None:
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")


def _resolve(args) -> C.ExperimentConfig:
    if args.config:
        cfg, extras = C.load(args.config)
        if args.out is None and extras.get("out_dir"):
            args.out = extras["out_dir"]
    else:
        cfg = C.ExperimentConfig()
    cfg = C.apply_overrides(cfg, list(args.set or []))
    if args.seed_list:
        try:
            seeds = tuple(int(s) for s in args.seed_list.split(",") if s.strip())
        except ValueError:
            raise C.ConfigError([("--seed-list", f"not a comma separated integer list: {args.seed_list!r}")])
        cfg = replace(cfg, seeds=seeds)
    return cfg.validate()


def write_run(out: Path, cfg: C.ExperimentConfig, jobs: int = 1) -> dict:
    """Run one configuration and write exactly the three run files into ``out``."""
    report, results = run_experiment(cfg, jobs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config.json").write_text(json.dumps(C.to_document(cfg), indent=2, sort_keys=True) + "\n")
    (out / "metrics.csv").write_text(metrics_csv(results))
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def cmd_run(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out or "runs/" + cfg.preset.replace(" ", "_"))
    report = write_run(out, cfg, args.jobs)
    print(f"{cfg.preset}: mean target accuracy {report['summary']['mean']:.4f} -> {out}")
    return EXIT_OK


def _cell_dir(name: str) -> str:
    return name.replace(" ", "_").replace("+", "-")


def _grid_cell(payload):
    name, base_doc, out = payload
    cfg, _ = C.from_dict(base_doc)
    cfg = C.apply_overrides(cfg, [f"preset={name}"])
    try:
        report = write_run(Path(out), cfg, 1)
        return name, report, None
    except NumericFailure as exc:
        return name, None, {"error": "numeric", "cell": name, "step": exc.step, "message": str(exc)}
    except dc.NonFiniteError as exc:
        return name, None, {"error": "numeric", "cell": name, "message": str(exc)}
    except Exception as exc:  # one bad cell must not stop the grid
        return name, None, {"error": type(exc).__name__, "cell": name, "message": str(exc)}


def cmd_grid(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out or "runs/grid")
    out.mkdir(parents=True, exist_ok=True)
    # base without a preset folded in; each cell applies its own
    base = C.to_document(replace(cfg, preset="Full"))
    base["preset_applied"] = True
    cells = args.cells.split(",") if args.cells else list(C.GRID)
    unknown = [c for c in cells if c not in C.PRESETS]
    if unknown:
        raise C.ConfigError([("--cells", f"unknown cells {unknown}")])
    payloads = [(name, base, str(out / _cell_dir(name))) for name in cells]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            outcomes = list(ex.map(_grid_cell, payloads))
    else:
        outcomes = [_grid_cell(p) for p in payloads]

    failures = []
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "target", "accuracy", "status"])
        for name, report, err in outcomes:
            if err is not None:
                failures.append(err)
                _emit_error(err)
                w.writerow([name, "", "", "", "failed"])
                continue
            for run in report["runs"]:
                for target, entry in sorted(run["per_target"].items(), key=lambda kv: int(kv[0])):
                    w.writerow([name, run["seed"], target, repr(entry["accuracy"]), "ok"])
    print(f"grid: {len(outcomes) - len(failures)}/{len(outcomes)} cells complete -> {out}")
    return EXIT_PARTIAL if failures else EXIT_OK


# ------------------------------------------------------------------- diag


def _diag_gradients(cases: int = 20) -> List[tuple]:
    from .losses import loss_cdcr, loss_dar, loss_sup, total_objective
    from .model import ModelConfig, forward, init_model, translate_into
    from .prototypes import PrototypeBank, ema_update, loss_cmpa

    def setup(case):
        rng = np.random.default_rng(case)
        model = init_model(ModelConfig(input_dims=(3, 3), num_classes=3, feature_dims=(2, 2),
                                       encoder_hidden=4, translator_hidden=3, init_seed=case))
        for name, t in model.params.items():
            if name.endswith(("b1", "b2")):
                t.data[...] = rng.normal(scale=0.3, size=t.shape)
        bank = PrototypeBank([2, 2], 3, 3)
        for m in range(2):
            for c in range(3):
                for k in range(3):
                    ema_update(bank, m, rng.normal(size=(1, 2)), [c], [k])
        xw = [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))]
        xs = [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))]
        y = rng.integers(0, 3, 3)
        dom = rng.integers(0, 3, 3)
        return model, bank, xw, xs, y, dom

    def cmpa(model, bank, xw, xs, y, dom, weak=None, strong=None):
        weak = weak or forward(model, xw)
        strong = strong or forward(model, xs)
        feats = {"weak": weak.features, "strong": strong.features}
        trans = {j: [translate_into(model, m, dict(enumerate(f))) for m in range(2)] for j, f in feats.items()}
        return loss_cmpa(bank, feats, trans, y, dom)

    def total(mdl, b, xw, xs, y, d):
        weak, strong = forward(mdl, xw), forward(mdl, xs)
        return total_objective(
            loss_sup(weak.heads, y), loss_cdcr(strong.heads, y),
            loss_dar(weak.heads, strong.heads, y, q=0.7), cmpa(mdl, b, xw, xs, y, d, weak, strong),
        )[0]

    losses = {
        "sup": lambda mdl, b, xw, xs, y, d: loss_sup(forward(mdl, xw).heads, y),
        "cdcr": lambda mdl, b, xw, xs, y, d: loss_cdcr(forward(mdl, xs).heads, y),
        "dar": lambda mdl, b, xw, xs, y, d: loss_dar(forward(mdl, xw).heads, forward(mdl, xs).heads, y, q=0.7),
        "cmpa": cmpa,
        "total": total,
    }
    rows = []
    for name, fn in losses.items():
        worst = 0.0
        for case in range(cases):
            model, bank, xw, xs, y, dom = setup(case)
            worst = max(worst, dc.finite_diff_check(lambda p: fn(model, bank, xw, xs, y, dom), model.params))
        rows.append((f"grad:{name}", worst < 1e-4, f"max_relative_error={worst:.3e}"))
    return rows


def _diag_gate() -> tuple:
    import itertools

    from .gating import GateVariant, gate_sample

    def naive(uni, fused, tau, variant):
        y = int(np.argmax(fused))
        if fused[y] <= tau:
            return "rejected", None
        if variant == "fused_only":
            return "consensus", y
        agree = [int(np.argmax(u)) == y and u.max() > tau for u in uni]
        if variant == "full" or variant == "any2":
            ok = any(agree)
        elif variant == "strict":
            ok = all(agree)
        else:
            sel = [p for p in list(uni) + [fused] if p.max() > tau]
            avg = np.mean(sel, axis=0)
            ok = avg.max() > tau and int(np.argmax(avg)) == y
        return ("consensus" if ok else "disagreement"), y

    grid = []
    for mx in (0.90, 0.94, 0.96, 0.99):
        for pos in range(3):
            p = np.full(3, (1 - mx) / 2)
            p[pos] = mx
            grid.append(p)
    bad = total = 0
    for variant in GateVariant:
        for a, b, f in itertools.product(grid, grid, grid):
            d = gate_sample([a, b], f, 0.95, variant)
            total += 1
            bad += (d.tag.value, d.pseudo_label) != naive([a, b], f, 0.95, variant.value)
    return ("gate-oracle", bad == 0, f"disagreements={bad}/{total}")


def _diag_ema() -> tuple:
    from .prototypes import PrototypeBank, ema_update

    worst = 0.0
    for alpha in (0.5, 0.9, 0.99):
        bank = PrototypeBank([2], 1, 1, alpha)
        mu0, b = np.array([1.0, -2.0]), np.array([0.25, 4.0])
        ema_update(bank, 0, [mu0], [0], [0])
        for _ in range(10):
            ema_update(bank, 0, [b], [0], [0])
        expect = alpha ** 10 * mu0 + (1 - alpha ** 10) * b
        worst = max(worst, float(np.abs(bank.protos[0][0, 0] - expect).max()))
    return ("ema-unroll", worst <= 1e-10, f"max_abs_error={worst:.3e}")


def _diag_kernels() -> List[tuple]:
    rows = []
    rng = np.random.default_rng(0)
    probes = {
        "matmul": lambda p: dc.mean_all(dc.matmul(p["x"], dc.Tensor(rng_w))),
        "add": lambda p: dc.mean_all(dc.pow_scalar(dc.add(p["x"], dc.Tensor(np.ones(4))), 2)),
        "relu": lambda p: dc.mean_all(dc.pow_scalar(dc.relu(p["x"]), 2)),
        "softmax_last_axis": lambda p: dc.mean_all(dc.pow_scalar(dc.softmax_last_axis(p["x"]), 2)),
        "log": lambda p: dc.mean_all(dc.log(dc.pow_scalar(p["x"], 2))),
        "pow_scalar": lambda p: dc.mean_all(dc.pow_scalar(dc.pow_scalar(p["x"], 2), 0.7)),
        "sq_l2_dist": lambda p: dc.mean_all(dc.sq_l2_dist(p["x"], dc.Tensor(np.zeros((3, 4))))),
        "concat_last_axis": lambda p: dc.mean_all(dc.pow_scalar(dc.concat_last_axis([p["x"], p["x"]]), 2)),
        "gather_index": lambda p: dc.mean_all(dc.pow_scalar(dc.gather_index(p["x"], [0, 1, 3]), 2)),
        "scale": lambda p: dc.mean_all(dc.pow_scalar(dc.scale(p["x"], 1.7), 2)),
        "clamp_min": lambda p: dc.mean_all(dc.pow_scalar(dc.clamp_min(p["x"], -10.0), 2)),
    }
    rng_w = rng.normal(size=(4, 2))
    x0 = rng.uniform(0.2, 1.5, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    for kernel, fn in probes.items():
        params = {"x": dc.Tensor(x0.copy(), requires_grad=True, name="x")}
        err = dc.finite_diff_check(fn, params)
        rows.append((f"kernel:{kernel}", err < 1e-4, f"max_relative_error={err:.3e}"))
    return rows


def run_diag(fault: Optional[str] = None) -> int:
    if fault:
        dc.inject_gradient_fault(fault)
    try:
        rows = _diag_kernels() + _diag_gradients() + [_diag_gate(), _diag_ema()]
    finally:
        dc.clear_gradient_faults()
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}")
    failed = [name for name, ok, _ in rows if not ok]
    if failed:
        print("diag failed: " + ", ".join(failed))
        return 1
    return EXIT_OK


def cmd_diag(args) -> int:
    if args.config:
        _resolve(args)   # validate only
    return run_diag(args.inject_fault)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--seed-list", help="comma separated seeds, replaces config seeds")

    p = argparse.ArgumentParser(prog="ssmdg", description="semi-supervised multimodal domain generalization runs")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="one configuration, every target and seed").set_defaults(fn=cmd_run)
    g = sub.add_parser("ablation-grid", parents=[common], help="component and variant ablations")
    g.add_argument("--cells", help="comma separated subset of grid cells")
    g.set_defaults(fn=cmd_grid)
    d = sub.add_parser("diag", parents=[common], help="gradient, gate and EMA self checks")
    d.add_argument("--inject-fault", metavar="KERNEL", help=argparse.SUPPRESS)
    d.set_defaults(fn=cmd_diag)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        _emit_error({"error": "config", "problems": [{"path": "--jobs", "message": "must be >= 1"}]})
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except C.ConfigError as exc:
        _emit_error(exc.record())
        return EXIT_CONFIG
    except NumericFailure as exc:
        _emit_error({"error": "numeric", "step": exc.step, "message": str(exc)})
        return EXIT_NUMERIC
    except dc.NonFiniteError as exc:
        _emit_error({"error": "numeric", "message": str(exc)})
        return EXIT_NUMERIC
    except Exception as exc:
        log.debug(traceback.format_exc())
        _emit_error({"error": type(exc).__name__, "message": str(exc)})
        return 1


if __name__ == "__main__":
    sys.exit(main())
