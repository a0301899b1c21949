"""``cognitivetwin`` command line: generate, ingest, train, evaluate, fairness, mnar, ablate, forecast.

Settings resolve as built-in defaults < JSON ``--config`` file < explicit
flags. Every command writes the resolved settings to ``run_config.json`` in
its output directory. Exit codes: 0 success, 1 usage, 2 data, 3 numerical.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .data import (
    DataError, NormalizationStats, SyntheticConfig, generate_synthetic_cohort, ingest_cohort,
    load_cohort, load_schema, save_cohort, select_split, stratified_split,
)
from .estimator import CognitiveTwin
from .evaluation import (
    MNARConfig, apply_mnar_mask, evaluate_model, evaluate_under_mnar, run_ablation_matrix,
    stratify_and_evaluate, write_calibration_csv, write_report, write_residuals_csv,
    write_trajectory_csv,
)
from .model import VARIANTS
from .training import CheckpointError, NumericalError, load_checkpoint, save_checkpoint

logger = logging.getLogger("cognitivetwin")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
OUTPUT_DIR_ENV = "COGNITIVETWIN_OUTPUT_DIR"
CHECKPOINT_NAME = "model.ckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Settings


def _common(p: argparse.ArgumentParser, out_dir: bool = True):
    p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    p.add_argument("--config", type=Path, default=None, help="JSON settings file")
    if out_dir:
        p.add_argument("--out-dir", type=Path, default=None,
                       help=f"output directory (default ${OUTPUT_DIR_ENV} or .)")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p):
    p.add_argument("--variant", choices=None, default=None, help=f"one of {', '.join(VARIANTS)}")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cognitivetwin", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic cohort (cohort/v1 JSON)")
    _common(p, out_dir=False)
    p.add_argument("--patients", type=int, default=None)
    p.add_argument("--decliner-fraction", type=float, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ingest", help="convert a longitudinal CSV to cohort/v1 JSON")
    _common(p, out_dir=False)
    p.add_argument("--csv", type=Path, required=True)
    p.add_argument("--schema", type=Path, default=None, help="JSON column mapping")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="fit a model and write a checkpoint plus history")
    _common(p)
    p.add_argument("--cohort", type=Path, required=True)
    _model_flags(p)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")

    p = sub.add_parser("evaluate", help="metrics report, residuals and calibration bins")
    _common(p)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--mnar", type=float, default=None, help="imaging masking probability")
    p.add_argument("--mnar-threshold", type=float, default=None)

    p = sub.add_parser("fairness", help="subgroup metrics by sex and age band")
    _common(p)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default=None)

    p = sub.add_parser("mnar", help="write an MNAR-masked copy of a cohort")
    _common(p, out_dir=False)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--probability", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    _common(p)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--variants", default=None, help="comma-separated tags")
    p.add_argument("--parallel", action="store_true", default=None)
    p.add_argument("--max-epochs", type=int, default=None)

    p = sub.add_parser("forecast", help="Monte-Carlo trajectory CSV for one patient")
    _common(p)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--horizon", type=int, default=None, help="grid steps past the last visit")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--condition-months", type=float, default=None,
                   help="condition only on visits up to this month")
    return ap


DEFAULTS = {
    "seed": 0,
    "patients": 200, "decliner_fraction": None,
    "split": "test", "mnar": None, "mnar_threshold": 24.0,
    "probability": 0.15, "threshold": 24.0,
    "variants": ",".join(VARIANTS), "parallel": False,
    "horizon": 4, "samples": 1000, "condition_months": None,
    "model": {},
}
_MODEL_FLAGS = {"variant": "variant", "max_epochs": "max_epochs", "batch_size": "batch_size",
                "learning_rate": "learning_rate"}
_NOT_SETTINGS = {"command", "config", "verbose"}


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge defaults, the ``--config`` file and explicit flags (flags win)."""
    settings = json.loads(json.dumps(DEFAULTS))
    if args.config is not None:
        try:
            extra = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config {args.config}: invalid JSON ({exc.msg})") from None
        if not isinstance(extra, dict):
            raise UsageError("--config must hold a JSON object")
        model = extra.pop("model", {})
        settings.update(extra)
        settings["model"].update(model)
    for key, value in vars(args).items():
        if key in _NOT_SETTINGS or value is None:
            continue
        if key in _MODEL_FLAGS:
            settings["model"][_MODEL_FLAGS[key]] = value
        else:
            settings[key] = str(value) if isinstance(value, Path) else value
    settings["command"] = args.command
    if "out_dir" in vars(args) and settings.get("out_dir") is None:
        settings["out_dir"] = os.environ.get(OUTPUT_DIR_ENV, ".")
    settings["model"].setdefault("random_state", settings["seed"])
    if args.seed is not None:
        settings["model"]["random_state"] = args.seed
    return settings


def _out_dir(settings) -> Path:
    if "out_dir" in settings:
        d = Path(settings["out_dir"])
    else:
        d = Path(settings["out"]).parent
    d.mkdir(parents=True, exist_ok=True)
    return d


def _echo(settings, out_dir: Path):
    with open(out_dir / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(settings, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _estimator(params: dict) -> CognitiveTwin:
    valid = CognitiveTwin().get_params()
    unknown = sorted(set(params) - set(valid))
    if unknown:
        raise UsageError(f"unknown model settings: {', '.join(unknown)}")
    if params.get("variant", "full") not in VARIANTS:
        raise UsageError(f"unknown variant {params['variant']!r}; valid tags: {', '.join(VARIANTS)}")
    return CognitiveTwin(**params)


def _read_cohort(path):
    if not Path(path).exists():
        raise DataError(f"cohort file not found: {path}")
    return load_cohort(path)


def _load_model(path) -> CognitiveTwin:
    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    ck = load_checkpoint(path)
    model = CognitiveTwin(**ck["config"])
    return model.load(ck["state_dict"], NormalizationStats.from_dict(ck["normalization"]),
                      ck["extra"].get("residual_std", 1.0))


def _split(cohort, name):
    if name in (None, "all"):
        return cohort
    part = select_split(cohort, name)
    if not part:
        raise DataError(f"cohort has no patients in split {name!r}")
    return part


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(s: dict) -> int:
    if s["patients"] <= 0:
        raise UsageError(f"--patients must be a positive integer, got {s['patients']}")
    kw = {"n_patients": s["patients"]}
    if s["decliner_fraction"] is not None:
        kw["decliner_fraction"] = s["decliner_fraction"]
    cohort = stratified_split(generate_synthetic_cohort(SyntheticConfig(**kw), s["seed"]), seed=s["seed"])
    _echo(s, _out_dir(s))
    save_cohort(cohort, s["out"])
    print(f"wrote {len(cohort)} patients, {sum(len(p.visits) for p in cohort)} visits to {s['out']}")
    return EXIT_OK


def cmd_ingest(s: dict) -> int:
    if not Path(s["csv"]).exists():
        raise DataError(f"csv not found: {s['csv']}")
    schema = load_schema(s["schema"]) if s.get("schema") else None
    with open(s["csv"], newline="", encoding="utf-8") as fh:
        cohort = ingest_cohort(fh, schema)
    cohort = stratified_split(cohort, seed=s["seed"])
    _echo(s, _out_dir(s))
    save_cohort(cohort, s["out"])
    print(f"ingested {len(cohort)} patients, {sum(len(p.visits) for p in cohort)} visits to {s['out']}")
    return EXIT_OK


def cmd_train(s: dict) -> int:
    out = _out_dir(s)
    cohort = _read_cohort(s["cohort"])
    resume = None
    params = dict(s["model"])
    if s.get("resume"):
        if not Path(s["resume"]).exists():
            raise DataError(f"checkpoint not found: {s['resume']}")
        resume = load_checkpoint(s["resume"])
        # the architecture comes from the checkpoint; only the epoch budget may change
        params = {**resume["config"], **{k: v for k, v in params.items() if k == "max_epochs"}}
    model = _estimator(params)
    s["model"] = model.get_params()
    _echo(s, out)
    hist_path = out / "history.jsonl"
    with open(hist_path, "w", encoding="utf-8") as fh:
        for rec in (resume or {}).get("history", []):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        def on_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        model.fit(cohort, resume=resume, on_epoch=on_epoch)
    r = model.fit_result_
    save_checkpoint(
        out / CHECKPOINT_NAME, state_dict=r.best_state, config=model.get_params(),
        normalization=model.stats_.to_dict(), epoch=r.epoch, best_val_loss=r.best_val_loss,
        history=r.history, last_state=r.last_state, optimizer=r.optimizer_state,
        stopper=r.stopper_state, extra={"residual_std": model.residual_std_, "best_epoch": r.best_epoch},
    )
    print(f"trained {r.epoch} epochs (best {r.best_epoch}, val {r.best_val_loss:.4f}); "
          f"checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_evaluate(s: dict) -> int:
    out = _out_dir(s)
    _echo(s, out)
    model = _load_model(s["checkpoint"])
    cohort = _split(_read_cohort(s["cohort"]), s["split"])
    ev = evaluate_model(model, cohort)
    body = {"split": s["split"], "variant": model.variant, "metrics": ev.report}
    if s["mnar"] is not None:
        cfg = MNARConfig(s["mnar"], s["mnar_threshold"], seed=s["seed"])
        body["mnar"] = evaluate_under_mnar(model, cohort, cfg)
    write_report(out / "report.json", "metrics", body)
    write_residuals_csv(out / "residuals.csv", ev.patient_ids, ev.predictions, ev.targets)
    write_calibration_csv(out / "calibration.csv", ev.bins)
    r = ev.report
    print(f"{s['split']}: n={r.n_patients} mae={_fmt(r.mae)} rmse={_fmt(r.rmse)} "
          f"r2={_fmt(r.r_squared)} auroc={_fmt(r.auroc)} ece={_fmt(r.ece)}")
    if s["mnar"] is not None:
        print(f"mnar: masked {body['mnar']['n_masked_visits']}/{body['mnar']['n_eligible_visits']} "
              f"visits, degradation {_fmt(body['mnar']['degradation_percent'])}%")
    return EXIT_OK


def _fmt(x):
    return "NA" if x is None else f"{x:.4f}"


def cmd_fairness(s: dict) -> int:
    out = _out_dir(s)
    _echo(s, out)
    model = _load_model(s["checkpoint"])
    cohort = _split(_read_cohort(s["cohort"]), s["split"])
    rep = stratify_and_evaluate(cohort, model.predict(cohort), model.predict_progression_proba(cohort),
                                targets=model.targets(cohort))
    write_report(out / "fairness.json", "fairness", rep)
    for axis, rows in rep.groups.items():
        for g, r in rows.items():
            print(f"{axis:4s} {g:7s} n={r.n_patients:4d} mae={_fmt(r.mae)} ece={_fmt(r.ece)}")
        print(f"{axis} max mae difference {_fmt(rep.max_mae_difference[axis])}")
    return EXIT_OK


def cmd_mnar(s: dict) -> int:
    cohort = _read_cohort(s["cohort"])
    res = apply_mnar_mask(cohort, MNARConfig(s["probability"], s["threshold"], seed=s["seed"]))
    _echo(s, _out_dir(s))
    save_cohort(res.cohort, s["out"])
    log = Path(s["out"]).with_suffix(".mnar_log.csv")
    with open(log, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "visit_index"])
        w.writerows(res.masked)
    print(f"masked {len(res.masked)} of {res.n_eligible} eligible visits; log {log}")
    return EXIT_OK


def cmd_ablate(s: dict) -> int:
    out = _out_dir(s)
    tags = [t.strip() for t in s["variants"].split(",") if t.strip()]
    bad = [t for t in tags if t not in VARIANTS]
    if bad or not tags:
        raise UsageError(f"unknown variant(s) {', '.join(bad) or '(none)'}; valid tags: {', '.join(VARIANTS)}")
    base = dict(s["model"])
    base.pop("variant", None)
    _estimator(base)
    _echo(s, out)
    cohort = _read_cohort(s["cohort"])
    results = run_ablation_matrix(tags, cohort, base, parallel=bool(s["parallel"]))
    rows = []
    for t, res in results.items():
        write_report(out / f"ablation_{t}.json", "ablation", {"variant": t, **res})
        r = res["report"]
        rows.append([t, r.mae, r.rmse, r.r_squared, r.auroc, r.ece, res["degradation_percent"]])
        print(f"{t:15s} mae={_fmt(r.mae)} auroc={_fmt(r.auroc)} degradation={_fmt(res['degradation_percent'])}%")
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "mae", "rmse", "r_squared", "auroc", "ece", "degradation_percent"])
        w.writerows([["" if v is None else v for v in row] for row in rows])
    return EXIT_OK


def cmd_forecast(s: dict) -> int:
    out = _out_dir(s)
    if s["horizon"] < 1 or s["samples"] < 1:
        raise UsageError("--horizon and --samples must be positive")
    model = _load_model(s["checkpoint"])
    cohort = _read_cohort(s["cohort"])
    match = [p for p in cohort if p.patient_id == s["patient"]]
    if not match:
        raise DataError(f"unknown patient id {s['patient']!r}")
    _echo(s, out)
    fc = model.forecast(match[0], s["horizon"], s["samples"], seed=s["seed"],
                        condition_months=s["condition_months"])
    path = out / f"trajectory_{s['patient']}.csv"
    write_trajectory_csv(path, match[0], fc)
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "ingest": cmd_ingest, "train": cmd_train, "evaluate": cmd_evaluate,
    "fairness": cmd_fairness, "mnar": cmd_mnar, "ablate": cmd_ablate, "forecast": cmd_forecast,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        settings = resolve_settings(args)
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"cognitivetwin {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"cognitivetwin {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"cognitivetwin {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
