"""Command-line experiment harness.

Every command reads an optional JSON run config (``--config``), applies
``--seed`` on top, and embeds the resolved config in each report it writes.
A report can itself be passed as ``--config`` to rerun it.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from bioage import cleaning, io, synth
from bioage.cleaning import CleaningConfig, EmptyRetainedPoolError, evaluate_final
from bioage.core import Cohort, DataFormatError, compute_metrics
from bioage.outlier import sweep_r
from bioage.regressor import RegressorConfig, RegressorModel, TrainingDivergedError, train
from bioage.aggregate import aggregate_cohort

log = logging.getLogger("bioage")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

DEFAULT_R_VALUES = [0.5, 1.0, 1.5, 1.96, 2.5, 3.0]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_run_config() -> dict:
    return {
        "cohort": synth.CohortSpec().to_dict(),
        "balance": {"enabled": False, "bins": 10, "seed": 0},
        "regressor": RegressorConfig().to_dict(),
        "cleaning": CleaningConfig().to_dict(),
        "sweep": {"r_values": list(DEFAULT_R_VALUES), "include_fixed": True, "iteration": 1},
        "deviations": {"bin_width": 1.0},
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def bundled_config(name: str) -> dict:
    """Load one of the example configs shipped with the package."""
    text = resources.files("bioage").joinpath("configs", f"{name}.json").read_text("utf-8")
    return json.loads(text)


def load_run_config(path: str | None, seed: int | None) -> dict:
    cfg = default_run_config()
    if path:
        if path.startswith("bundled:"):
            user = bundled_config(path.split(":", 1)[1])
        else:
            try:
                user = io.read_json(path)
            except FileNotFoundError:
                raise UsageError(f"config file not found: {path}") from None
        if "schema_version" in user and "config" in user:
            user = user["config"]
        cfg = _merge(cfg, user)
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise UsageError("--seed must be a 64-bit unsigned integer")
        cfg["cohort"]["seed"] = seed
        cfg["regressor"]["seed"] = seed
        cfg["cleaning"]["seed"] = seed
    return cfg


def _parse_sections(cfg: dict):
    try:
        return {
            "cohort": synth.CohortSpec.from_dict(cfg["cohort"]),
            "regressor": RegressorConfig.from_dict(cfg["regressor"]),
            "cleaning": CleaningConfig.from_dict(cfg["cleaning"]),
        }
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_cohort(path) -> Cohort:
    return Cohort.from_samples(io.read_dataset(path))


def _load_model(path) -> RegressorModel:
    try:
        return RegressorModel.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise DataFormatError(f"model file not found: {path}") from None
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"invalid model file {path}: {exc}") from None


# -- commands ----------------------------------------------------------------


def cmd_synth(args, cfg) -> None:
    spec = _parse_sections(cfg)["cohort"]
    out = Path(args.out)
    dataset, truth = synth.generate(spec)
    balance = dict(cfg["balance"])
    if args.balance:
        balance["enabled"] = True
        cfg["balance"] = balance
    files = {"dataset": "dataset.csv", "truth": "truth.csv"}
    io.write_dataset(out / "dataset.csv", dataset)
    io.write_truth(out / "truth.csv", truth)
    body = {"n_rows": len(dataset), "n_patients": len(truth)}
    if balance["enabled"]:
        kept, rest = synth.age_balance(dataset, int(balance["bins"]), int(balance.get("seed", 0)))
        io.write_dataset(out / "train.csv", kept)
        io.write_dataset(out / "test.csv", rest)
        files.update(train="train.csv", test="test.csv")
        body.update(n_train_rows=len(kept), n_test_rows=len(rest))
    body["files"] = files
    io.write_report(out / "synth_report.json", "synth", cfg, body)


def cmd_train_ca(args, cfg) -> None:
    reg = _parse_sections(cfg)["regressor"]
    out = Path(args.out)
    cohort = _load_cohort(args.dataset)
    model = train(cohort.samples(), reg)
    io.atomic_write_text(out / "model.json", model.dumps())
    body = {
        "inputs": {"dataset_sha256": _sha256(args.dataset)},
        "loss_trace": model.loss_trace,
        "model_file": "model.json",
    }
    if args.test:
        test = _load_cohort(args.test)
        body["inputs"]["test_sha256"] = _sha256(args.test)
        ev = evaluate_final(model, test)
        body["metrics"] = {g: m.to_dict() for g, m in ev.metrics.items()}
        chunk_pred = model.predict_samples(test.samples())
        body["chunk_metrics"] = compute_metrics(chunk_pred, [s.ca_label for s in test.samples()]).to_dict()
    io.write_report(out / "train_report.json", "train-ca", cfg, body)


def cmd_clean(args, cfg) -> None:
    ccfg = _parse_sections(cfg)["cleaning"]
    out = Path(args.out)
    pool = _load_cohort(args.dataset)
    report = cleaning.run_cleaning(pool, ccfg)
    retained = set(report.retained)
    io.write_dataset(out / "cleaned.csv", [s for s in pool.samples() if s.patient_id in retained])
    io.write_table(
        out / "flags.csv",
        ["iteration", "patient_id", "deviation", "threshold", "cohort_label"],
        report.flags_table(pool.labels),
    )
    io.atomic_write_text(out / "model.json", report.final_model.dumps())
    body = report.to_dict()
    body.pop("config")
    body["inputs"] = {"dataset_sha256": _sha256(args.dataset)}
    body["files"] = {"cleaned": "cleaned.csv", "flags": "flags.csv", "model": "model.json"}
    io.write_report(out / "clean_report.json", "clean", cfg, body)


def _parse_r_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"invalid --r list {text!r}") from None
    if not values:
        raise UsageError("empty r list")
    return values


def cmd_sweep_r(args, cfg) -> None:
    secs = _parse_sections(cfg)
    out = Path(args.out)
    sweep_cfg = cfg["sweep"]
    if args.r is not None:
        sweep_cfg["r_values"] = _parse_r_list(args.r)
    r_values = [float(r) for r in sweep_cfg["r_values"]]
    if not r_values:
        raise UsageError("empty r list")
    cohort = _load_cohort(args.dataset)
    inputs = {"dataset_sha256": _sha256(args.dataset)}
    if args.model:
        model = _load_model(args.model)
        inputs["model_sha256"] = _sha256(args.model)
        estimates = aggregate_cohort(model, cohort.groups)
        source = "model"
    else:
        # same split and training seeds as the matching cleaning iteration
        iteration = int(sweep_cfg.get("iteration", 1))
        _, _, estimates = cleaning.iteration_estimates(cohort, secs["cleaning"], iteration)
        source = f"cleaning-iteration-{iteration}"
    try:
        rows = sweep_r(
            estimates,
            r_values,
            cohort.labels,
            sigma_floor=secs["cleaning"].threshold_policy.sigma_floor,
            include_fixed=bool(sweep_cfg.get("include_fixed", True)),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    table = [(row.r_text, row.cohort_label, row.flagged_count, row.cohort_size) for row in rows]
    io.write_table(out / "sweep.csv", ["r", "cohort_label", "flagged_count", "cohort_size"], table)
    body = {
        "inputs": inputs,
        "estimates_source": source,
        "rows": [dict(zip(["r", "cohort_label", "flagged_count", "cohort_size"], t)) for t in table],
    }
    io.write_report(out / "sweep_report.json", "sweep-r", cfg, body)


def deviation_histogram(
    deviations: dict[str, list[float]], bin_width: float, groups: Sequence[str] = ()
):
    """Shared bins covering [min - width, max + width], centered on multiples
    of ``bin_width`` (so zero sits mid-bin); returns ``(edges, {group: counts})``."""
    if not bin_width > 0:
        raise UsageError("bin width must be positive")
    values = [v for vs in deviations.values() for v in vs]
    if values:
        k_lo = math.floor((min(values) - bin_width) / bin_width + 0.5)
        k_hi = math.floor((max(values) + bin_width) / bin_width + 0.5)
    else:
        k_lo, k_hi = -1, 1
    n_bins = k_hi - k_lo + 1
    lo = (k_lo - 0.5) * bin_width
    edges = lo + bin_width * np.arange(n_bins + 1)
    counts = {}
    for g in sorted(set(deviations) | set(groups)):
        vs = np.asarray(deviations.get(g, []), dtype=np.float64)
        idx = np.clip(np.floor((vs - lo) / bin_width).astype(int), 0, n_bins - 1)
        counts[g] = np.bincount(idx, minlength=n_bins).tolist()
    return edges.tolist(), counts


def cmd_report_deviations(args, cfg) -> None:
    out = Path(args.out)
    width = float(args.bin_width if args.bin_width is not None else cfg["deviations"]["bin_width"])
    cfg["deviations"]["bin_width"] = width
    model = _load_model(args.model)
    test = _load_cohort(args.dataset)
    ev = evaluate_final(model, test)
    devs = {g: [d for _, d in rows] for g, rows in ev.deviations.items()}
    groups = args.groups.split(",") if args.groups else ()
    edges, counts = deviation_histogram(devs, width, groups)
    rows = [
        (g, edges[i], edges[i + 1], c)
        for g, cs in counts.items()
        for i, c in enumerate(cs)
    ]
    io.write_table(out / "deviations.csv", ["group_label", "bin_lo", "bin_hi", "count"], rows)
    body = {
        "inputs": {"dataset_sha256": _sha256(args.dataset), "model_sha256": _sha256(args.model)},
        "bin_edges": edges,
        "group_means": {g: (float(np.mean(v)) if v else None) for g, v in sorted(devs.items())}
        | {g: None for g in groups if g not in devs},
        "group_sizes": {g: sum(c) for g, c in counts.items()},
    }
    io.write_report(out / "deviations_report.json", "report-deviations", cfg, body)


def cmd_evaluate(args, cfg) -> None:
    out = Path(args.out)
    model = _load_model(args.model)
    test = _load_cohort(args.dataset)
    ev = evaluate_final(model, test)
    body = {
        "inputs": {"dataset_sha256": _sha256(args.dataset), "model_sha256": _sha256(args.model)},
        **ev.to_dict(),
        "mean_deviation": {g: ev.mean_deviation(g) for g in ev.deviations},
    }
    io.write_report(out / "eval_report.json", "evaluate", cfg, body)


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config, a previous report, or bundled:NAME")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="bioage", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--balance", action="store_true", help="also write age-balanced train/test files")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-ca", parents=[common], help="train on CA labels")
    p.add_argument("--dataset", required=True)
    p.add_argument("--test")
    p.set_defaults(func=cmd_train_ca)

    p = sub.add_parser("clean", parents=[common], help="run iterative data cleaning")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("sweep-r", parents=[common], help="flag counts over threshold multipliers")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", help="estimate the whole dataset with this model instead")
    p.add_argument("--r", help="comma-separated ascending r values")
    p.set_defaults(func=cmd_sweep_r)

    p = sub.add_parser("report-deviations", parents=[common], help="histogram of signed deviations")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--bin-width", type=float)
    p.add_argument("--groups", help="comma-separated group labels to always report")
    p.set_defaults(func=cmd_report_deviations)

    p = sub.add_parser("evaluate", parents=[common], help="per-group metrics of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_run_config(args.config, args.seed)
        args.func(args, cfg)
    except UsageError as exc:
        print(f"bioage: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataFormatError as exc:
        print(f"bioage: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EmptyRetainedPoolError as exc:
        print(f"bioage: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TrainingDivergedError, OSError) as exc:
        print(f"bioage: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
