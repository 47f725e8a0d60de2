"""Command-line entry point exposing every pipeline stage.

Subcommands: probe, audit, asha, bench, metrics, delta, synth, refmodel,
validate.  Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 external-process failure.  Diagnostics go to stderr; machine output goes
to stdout or to --output paths.  All randomness flows from --seed; when the
flag is omitted a fresh seed is drawn and printed so runs stay replayable.
"""

from __future__ import annotations

import argparse
import csv
import json
import secrets
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .asha import BudgetExhausted, RungLadder, load_search_space
from .bench import (
    ExternalProcessError,
    ModelCommands,
    fixed_holdout_plan,
    read_predictions,
    run_protocol,
    run_search,
)
from .bundle import EsbFormatError, read_bundle, validate_bundle, write_bundle
from .dft import amplitude_spectrum, spatial_covariance
from .harness import (
    AuditPlan,
    audit_delta_rows,
    condition_delta_table,
    make_synthetic_bundle,
    radar_rows,
    reference_bandpower_classifier,
    run_audit,
)
from .metrics import METRIC_NAMES, evaluate
from .probes import (
    BandDefinition,
    ProbeSpec,
    default_bands,
    load_bands,
    load_montage,
    phase_randomize,
    probe_bundle,
    resolve_band,
    spatial_perturb,
    spectral_ablate,
)

USAGE_EXIT = 1
DATA_EXIT = 2
EXTERNAL_EXIT = 3


class _CliError(Exception):
    """Data/validation error surfaced to the user with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _add_common(parser: _Parser, *, seed=True, workers=False, montage=False,
                bands=False, output=False, output_required=False) -> None:
    if seed:
        parser.add_argument("--seed", type=int, default=None,
                            help="base seed; omitted -> a random seed is drawn and printed")
    if workers:
        parser.add_argument("--workers", type=int, default=1,
                            help="max concurrent external processes")
    if montage:
        parser.add_argument("--montage", default=None,
                            help="JSON file mapping channel name -> region")
    if bands:
        parser.add_argument("--bands", default=None,
                            help="JSON band table overriding the built-in defaults")
    if output:
        parser.add_argument("--output", required=output_required, default=None,
                            help="output path" + (" (required)" if output_required else " (default: stdout)"))


def build_parser() -> _Parser:
    parser = _Parser(prog="eegprobe",
                     description="Surrogate-signal probing and benchmarking for "
                                 "black-box EEG classifiers.")
    parser.add_argument("--version", action="version", version=f"eegprobe {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("probe", help="apply one surrogate transform to an ESB file")
    p.add_argument("input", help="input ESB file")
    p.add_argument("--kind", required=True, choices=("temporal", "spatial", "spectral"))
    p.add_argument("--region", default=None, help="ROI region label (spatial)")
    p.add_argument("--lam", type=float, default=1.0, help="noise scaling factor (spatial)")
    p.add_argument("--band", default=None, help="band name or LOW:HIGH in Hz (spectral)")
    _add_common(p, workers=False, montage=True, bands=True, output=True, output_required=True)

    p = sub.add_parser("audit", help="run an audit plan against a predictor")
    p.add_argument("plan", help="audit plan JSON file")
    _add_common(p, workers=True, montage=True, output=True, output_required=True)
    p.add_argument("--cache-dir", default=None, help="surrogate cache directory")

    p = sub.add_parser("asha", help="stage-1 hyperparameter search only")
    p.add_argument("--space", required=True, help="search space JSON file")
    p.add_argument("--trainer", required=True, help="trainer command")
    p.add_argument("--bundle", required=True, help="ESB data file")
    p.add_argument("--split", required=True,
                   help="JSON file with train/val/test trial index arrays")
    p.add_argument("--r-min", type=int, required=True, help="bottom rung resource level")
    p.add_argument("--r-max", type=int, required=True, help="top rung resource level")
    p.add_argument("--eta", type=int, default=3, help="reduction factor")
    p.add_argument("--budget", type=int, required=True, help="total resource units")
    p.add_argument("--workdir", default=None, help="working directory for manifests")
    _add_common(p, workers=True, output=True)

    p = sub.add_parser("bench", help="full two-stage benchmarking protocol")
    p.add_argument("--space", required=True, help="search space JSON file")
    p.add_argument("--trainer", required=True, help="trainer command")
    p.add_argument("--predictor", required=True,
                   help="predictor command template (may contain {trial_id})")
    p.add_argument("--bundle", required=True, help="ESB data file")
    p.add_argument("--strategy", required=True, choices=("fixed_holdout", "subject_loocv"))
    p.add_argument("--split", default=None,
                   help="JSON split file (required for fixed_holdout)")
    p.add_argument("--iterations", type=int, default=None,
                   help="number of seeds (fixed_holdout); derived for subject_loocv")
    p.add_argument("--default-config", required=True,
                   help="JSON file with the default hyperparameter configuration")
    p.add_argument("--r-min", type=int, required=True)
    p.add_argument("--r-max", type=int, required=True)
    p.add_argument("--eta", type=int, default=3)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--workdir", default=None)
    _add_common(p, workers=True, output=True)

    p = sub.add_parser("metrics", help="score a prediction file against a bundle")
    p.add_argument("--bundle", required=True, help="labeled ESB file")
    p.add_argument("--pred", required=True, help="prediction CSV file")
    p.add_argument("--classes", type=int, default=None,
                   help="class count (default: inferred from labels)")
    _add_common(p, seed=False, output=True)

    p = sub.add_parser("delta", help="difference two metric reports into a CSV")
    p.add_argument("--a", required=True, help="first report JSON (minuend)")
    p.add_argument("--b", required=True, help="second report JSON (subtrahend)")
    p.add_argument("--label-a", default="a", help="name for the first condition")
    p.add_argument("--label-b", default="b", help="name for the second condition")
    _add_common(p, seed=False, output=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic ESB bundle")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--trials-per-class", type=int, required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--fs", type=float, required=True)
    p.add_argument("--amps", required=True,
                   help="per-class band amplitudes: JSON list of {band: amp} maps, "
                        "inline or @file")
    p.add_argument("--noise", type=float, default=0.0, help="white-noise level")
    p.add_argument("--subjects", type=int, default=None, help="subject id count")
    _add_common(p, bands=True, output=True, output_required=True)

    p = sub.add_parser("refmodel", help="band-power reference classifier "
                                        "(predictor protocol)")
    p.add_argument("--band", required=True, help="band name or LOW:HIGH in Hz")
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--input", required=True, help="ESB file to predict")
    _add_common(p, seed=False, bands=True, output=True, output_required=True)

    p = sub.add_parser("validate", help="check ESB integrity and probe invariants")
    p.add_argument("input", help="ESB file to check")
    _add_common(p, seed=True)

    return parser


def _resolve_seed(args) -> int:
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = secrets.randbits(32)
        print(f"selected seed {seed}", file=sys.stderr)
    return int(seed)


def _load_band_table(args):
    path = getattr(args, "bands", None)
    return load_bands(path) if path else None


def _load_montage_arg(args):
    path = getattr(args, "montage", None)
    return load_montage(path) if path else None


def _parse_band(value: str, table, fs) -> BandDefinition:
    if ":" in value:
        lo, hi = value.split(":", 1)
        return BandDefinition(value, float(lo), float(hi))
    return resolve_band(value, table, fs)


def _emit_json(obj, output: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _write_csv(path: str, rows, fieldnames) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


# -- subcommand handlers ----------------------------------------------------


def _cmd_probe(args) -> int:
    seed = _resolve_seed(args)
    bundle = read_bundle(args.input)
    table = _load_band_table(args)
    if args.kind == "temporal":
        spec = ProbeSpec(kind="temporal", base_seed=seed)
    elif args.kind == "spatial":
        if args.region is None:
            raise _CliError("spatial probe needs --region")
        spec = ProbeSpec(kind="spatial", base_seed=seed, region=args.region,
                         noise_level=args.lam)
    else:
        if args.band is None:
            raise _CliError("spectral probe needs --band")
        band = _parse_band(args.band, table, bundle.fs)
        spec = ProbeSpec(kind="spectral", base_seed=seed, band=band)
    out = probe_bundle(bundle, spec, montage=_load_montage_arg(args))
    write_bundle(out, args.output)
    return 0


def _cmd_audit(args) -> int:
    plan = AuditPlan.from_json(args.plan)
    if args.seed is not None:
        plan.base_seed = int(args.seed)
    if args.workers and args.workers != 1:
        plan.workers = args.workers
    if args.cache_dir:
        plan.cache_dir = args.cache_dir
    report = run_audit(plan, montage=_load_montage_arg(args))

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    _write_csv(out_dir / "radar.csv", radar_rows(report),
               ["axis_kind", "label", "metric", "delta_mean", "delta_std"])
    _write_csv(out_dir / "deltas.csv", audit_delta_rows(report),
               ["dataset", "metric", "delta", "direction"])
    print(f"audit written to {out_dir}", file=sys.stderr)
    return 0


def _load_split_file(path: str):
    obj = json.loads(Path(path).read_text())
    return fixed_holdout_plan(obj["train"], obj["val"], obj["test"])


def _cmd_asha(args) -> int:
    seed = _resolve_seed(args)
    space = load_search_space(args.space)
    split = _load_split_file(args.split)
    ladder = RungLadder.from_bounds(args.r_min, args.r_max, args.eta)
    result = run_search(
        space, args.trainer, split, args.bundle, ladder, args.budget,
        seed=seed, workers=args.workers, workdir=args.workdir,
    )
    _emit_json(
        {
            "best_config": result.best_config,
            "consumed": result.consumed,
            "n_jobs": result.n_jobs,
        },
        args.output,
    )
    return 0


def _cmd_bench(args) -> int:
    seed = _resolve_seed(args)
    space = load_search_space(args.space)
    default_config = json.loads(Path(args.default_config).read_text())
    base_split = _load_split_file(args.split) if args.split else None
    if args.strategy == "fixed_holdout" and base_split is None:
        raise _CliError("fixed_holdout needs --split")
    ladder = RungLadder.from_bounds(args.r_min, args.r_max, args.eta)
    result = run_protocol(
        ModelCommands(trainer=args.trainer, predictor=args.predictor),
        args.bundle, args.strategy, space, default_config, ladder, args.budget,
        n_iterations=args.iterations, base_split=base_split, seed=seed,
        workers=args.workers, workdir=args.workdir,
    )
    _emit_json(result.to_dict(), args.output)
    return 0


def _cmd_metrics(args) -> int:
    bundle = read_bundle(args.bundle)
    labels = bundle.labels
    if labels is None:
        raise _CliError("bundle is unlabeled; metrics need ground truth")
    y_pred = read_predictions(args.pred, bundle.n_trials)
    n_classes = args.classes
    if n_classes is None:
        n_classes = int(max(max(labels), int(y_pred.max()))) + 1
    report = evaluate(labels, y_pred, n_classes)
    _emit_json(report.to_dict(), args.output)
    return 0


def _load_report_set(path: str, label: str) -> dict:
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict):
        raise _CliError(f"{path}: report must be a JSON object")
    if all(name in obj for name in METRIC_NAMES):
        return {label: {name: obj[name] for name in METRIC_NAMES}}
    if "means" in obj:
        return {label: dict(obj["means"])}
    out = {}
    for key, value in obj.items():
        if not isinstance(value, dict):
            raise _CliError(f"{path}: entry '{key}' is not a metric mapping")
        if "means" in value:
            out[key] = dict(value["means"])
        else:
            out[key] = {name: value[name] for name in METRIC_NAMES if name in value}
    return out


def _cmd_delta(args) -> int:
    set_a = _load_report_set(args.a, args.label_a)
    set_b = _load_report_set(args.b, args.label_b)
    if set(set_a) != set(set_b) and len(set_a) == 1 and len(set_b) == 1:
        # two single reports under different labels: compare them head to head
        name = f"{next(iter(set_a))}-vs-{next(iter(set_b))}"
        set_a = {name: next(iter(set_a.values()))}
        set_b = {name: next(iter(set_b.values()))}
    rows = condition_delta_table(set_a, set_b)
    if args.output:
        _write_csv(args.output, rows, ["dataset", "metric", "delta", "direction"])
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=["dataset", "metric", "delta", "direction"])
        writer.writeheader()
        writer.writerows(rows)
    return 0


def _cmd_synth(args) -> int:
    seed = _resolve_seed(args)
    amps_text = args.amps
    if amps_text.startswith("@"):
        amps_text = Path(amps_text[1:]).read_text()
    amps = json.loads(amps_text)
    bundle = make_synthetic_bundle(
        n_classes=args.classes,
        trials_per_class=args.trials_per_class,
        n_channels=args.channels,
        n_samples=args.samples,
        fs=args.fs,
        class_band_amps=amps,
        noise_level=args.noise,
        seed=seed,
        bands=_load_band_table(args),
        n_subjects=args.subjects,
    )
    write_bundle(bundle, args.output)
    return 0


def _cmd_refmodel(args) -> int:
    bundle = read_bundle(args.input)
    table = _load_band_table(args)
    band = _parse_band(args.band, table, bundle.fs)
    preds = reference_bandpower_classifier(bundle, band, args.threshold)
    with open(args.output, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["trial_index", "predicted_label"])
        for i, label in enumerate(preds):
            writer.writerow([i, int(label)])
    return 0


def _cmd_validate(args) -> int:
    bundle = read_bundle(args.input)
    violations = validate_bundle(bundle)
    if violations:
        for v in violations:
            print(v, file=sys.stderr)
        return DATA_EXIT
    seed = args.seed if args.seed is not None else 0

    # probe-invariant spot checks on the first few trials
    for i, trial in enumerate(bundle.trials[: min(3, bundle.n_trials)]):
        x = np.asarray(trial.data, dtype=np.float64)
        surr = phase_randomize(x, seed + i)
        for c in range(x.shape[0]):
            a0 = amplitude_spectrum(x[c])
            a1 = amplitude_spectrum(surr[c])
            tol = 1e-5 * max(float(a0.max()), 1e-9)
            if float(np.max(np.abs(a0 - a1))) > tol:
                print(f"trial {i}, channel {c}: amplitude spectrum not preserved",
                      file=sys.stderr)
                return DATA_EXIT
        cov0 = spatial_covariance(x)
        cov1 = spatial_covariance(surr)
        scale = max(float(np.linalg.norm(cov0)), 1e-9)
        if float(np.linalg.norm(cov0 - cov1)) > 1e-4 * scale:
            print(f"trial {i}: spatial covariance not preserved", file=sys.stderr)
            return DATA_EXIT
        ident = spatial_perturb(x, np.ones(x.shape[0], dtype=np.uint8), 0.0, seed)
        if not np.array_equal(ident, x):
            print(f"trial {i}: zero-noise perturbation is not an identity", file=sys.stderr)
            return DATA_EXIT
        killed = spectral_ablate(x, (0.0, bundle.fs / 2.0), bundle.fs)
        if float(np.max(np.abs(killed))) > 1e-6 * max(1.0, float(np.max(np.abs(x)))):
            print(f"trial {i}: full-band ablation left signal behind", file=sys.stderr)
            return DATA_EXIT

    print("OK")
    return 0


_HANDLERS = {
    "probe": _cmd_probe,
    "audit": _cmd_audit,
    "asha": _cmd_asha,
    "bench": _cmd_bench,
    "metrics": _cmd_metrics,
    "delta": _cmd_delta,
    "synth": _cmd_synth,
    "refmodel": _cmd_refmodel,
    "validate": _cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("eegprobe: error: a subcommand is required", file=sys.stderr)
        return USAGE_EXIT
    handler = _HANDLERS[args.command]
    try:
        return handler(args)
    except BudgetExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except ExternalProcessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXTERNAL_EXIT
    except (_CliError, EsbFormatError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
