"""End-to-end audits: probe a bundle, score a black-box predictor, report deltas.

An audit evaluates the predictor once on the original bundle (the baseline),
then once per surrogate bundle per repetition, and reports per-metric
``delta = baseline - surrogate`` (positive means the model relied on the
destroyed property).  Deterministic transforms (spectral ablation) run a
single repetition regardless of the plan; stochastic probes default to
R = 5 with per-repetition values retained and mean +/- std reported.

Surrogate bundles are written to a content-addressed cache keyed by
(input digest, probe spec, seed), so repeated audits skip regeneration.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bundle import SignalBundle, Trial, read_bundle, write_bundle
from .dft import band_power
from .metrics import (
    METRIC_NAMES,
    MetricReport,
    delta as metric_delta,
    direction_tag,
    evaluate,
)
from .probes import (
    BandDefinition,
    Montage,
    ProbeSpec,
    default_bands,
    default_montage,
    load_montage,
    mix64,
    probe_bundle,
)
from .bench import run_predictor, read_predictions
from .validation import as_seed

_AXIS_FOR_KIND = {"temporal": "temporal", "spatial": "region", "spectral": "band"}

#: Default repetition count for stochastic probes.
DEFAULT_REPETITIONS = 5


@dataclass
class AuditPlan:
    """Everything needed to run one audit against one predictor."""

    predictor: str
    bundle_path: str
    specs: list[ProbeSpec]
    repetitions: int = DEFAULT_REPETITIONS
    base_seed: int = 0
    workers: int = 1
    cache_dir: str | None = None
    montage_path: str | None = None

    def __post_init__(self):
        if int(self.repetitions) < 1:
            raise ValueError("repetitions must be >= 1")
        self.repetitions = int(self.repetitions)
        self.base_seed = as_seed(self.base_seed)
        self.workers = max(1, int(self.workers))
        if not self.specs:
            raise ValueError("audit plan needs at least one probe spec")

    @classmethod
    def from_json(cls, source: str | Path | Mapping, base_dir: str | Path | None = None) -> "AuditPlan":
        """Load a plan; relative paths resolve against the plan file's directory."""
        if isinstance(source, (str, Path)):
            base_dir = Path(source).parent if base_dir is None else Path(base_dir)
            obj = json.loads(Path(source).read_text())
        else:
            obj = dict(source)
            base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

        def resolve(p):
            p = Path(p)
            return str(p if p.is_absolute() else base_dir / p)

        specs = [ProbeSpec.from_dict(s) for s in obj["probes"]]
        return cls(
            predictor=str(obj["predictor"]),
            bundle_path=resolve(obj["bundle"]),
            specs=specs,
            repetitions=obj.get("repetitions", DEFAULT_REPETITIONS),
            base_seed=obj.get("seed", 0),
            workers=obj.get("workers", 1),
            cache_dir=resolve(obj["cache_dir"]) if "cache_dir" in obj else None,
            montage_path=resolve(obj["montage"]) if "montage" in obj else None,
        )


@dataclass(frozen=True)
class RepetitionResult:
    seed: int
    report: MetricReport
    deltas: dict[str, float]


@dataclass(frozen=True)
class ProbeAuditResult:
    spec: ProbeSpec
    label: str
    reps: tuple[RepetitionResult, ...]

    def delta_mean(self) -> dict[str, float]:
        return {
            m: float(np.mean([r.deltas[m] for r in self.reps])) for m in METRIC_NAMES
        }

    def delta_std(self) -> dict[str, float]:
        return {
            m: float(np.std([r.deltas[m] for r in self.reps])) for m in METRIC_NAMES
        }


@dataclass(frozen=True)
class SeriesEntry:
    label: str
    delta_mean: dict[str, float]
    delta_std: dict[str, float]
    rep_deltas: tuple[dict[str, float], ...]


@dataclass(frozen=True)
class SensitivitySeries:
    """Per-axis-label metric deltas: the data behind one radar plot."""

    axis: str
    entries: tuple[SeriesEntry, ...]

    def __post_init__(self):
        labels = [e.label for e in self.entries]
        if len(labels) != len(set(labels)):
            raise ValueError(f"duplicate axis labels in series: {labels}")


@dataclass(frozen=True)
class AuditReport:
    baseline: MetricReport
    probes: tuple[ProbeAuditResult, ...]
    series: tuple[SensitivitySeries, ...]
    n_classes: int
    base_seed: int

    def to_dict(self) -> dict:
        return {
            "base_seed": self.base_seed,
            "n_classes": self.n_classes,
            "baseline": self.baseline.to_dict(),
            "probes": [
                {
                    "spec": p.spec.to_dict(),
                    "label": p.label,
                    "delta_mean": p.delta_mean(),
                    "delta_std": p.delta_std(),
                    "repetitions": [
                        {
                            "seed": r.seed,
                            "metrics": r.report.to_dict(),
                            "deltas": dict(r.deltas),
                        }
                        for r in p.reps
                    ],
                }
                for p in self.probes
            ],
            "series": [
                {
                    "axis": s.axis,
                    "entries": [
                        {
                            "label": e.label,
                            "delta_mean": dict(e.delta_mean),
                            "delta_std": dict(e.delta_std),
                            "repetition_deltas": [dict(d) for d in e.rep_deltas],
                        }
                        for e in s.entries
                    ],
                }
                for s in self.series
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _spec_labels(specs: Sequence[ProbeSpec]) -> list[str]:
    base = [s.label() for s in specs]
    labels = []
    for i, (spec, label) in enumerate(zip(specs, base)):
        if base.count(label) > 1 and spec.kind == "spatial":
            label = f"{label} lam={spec.noise_level:g}"
        labels.append(label)
    # last-resort disambiguation so series invariants always hold
    seen: dict[str, int] = {}
    out = []
    for label in labels:
        if label in seen:
            seen[label] += 1
            out.append(f"{label} #{seen[label]}")
        else:
            seen[label] = 1
            out.append(label)
    return out


def _surrogate_digest(bundle_digest: str, spec: ProbeSpec, seed: int) -> str:
    spec_obj = spec.to_dict()
    spec_obj["seed"] = int(seed)
    blob = bundle_digest + json.dumps(spec_obj, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def run_audit(plan: AuditPlan, montage: Montage | None = None) -> AuditReport:
    """Run a full audit; see the module docstring for semantics."""
    bundle = read_bundle(plan.bundle_path)
    labels = bundle.labels
    if labels is None:
        raise ValueError("unlabeled bundle: audits need ground-truth labels")
    y_true = np.asarray(labels)
    n_classes = int(y_true.max()) + 1

    if montage is None and plan.montage_path is not None:
        montage = load_montage(plan.montage_path)
    if montage is None and any(s.kind == "spatial" for s in plan.specs):
        montage = default_montage(bundle.channel_names)

    bundle_digest = hashlib.sha256(Path(plan.bundle_path).read_bytes()).hexdigest()
    labels_list = _spec_labels(plan.specs)

    cleanup = None
    if plan.cache_dir is None:
        cleanup = tempfile.TemporaryDirectory(prefix="eegprobe-audit-")
        cache_dir = Path(cleanup.name)
    else:
        cache_dir = Path(plan.cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)

    try:
        with tempfile.TemporaryDirectory(prefix="eegprobe-pred-") as pred_dir:
            pred_dir = Path(pred_dir)
            baseline_csv = pred_dir / "baseline.csv"
            run_predictor(plan.predictor, plan.bundle_path, baseline_csv)
            baseline = evaluate(
                y_true, read_predictions(baseline_csv, bundle.n_trials), n_classes
            )
            baseline_metrics = baseline.metrics()

            tasks = []
            for si, spec in enumerate(plan.specs):
                reps = 1 if spec.is_deterministic else plan.repetitions
                for r in range(reps):
                    tasks.append((si, r))

            def run_one(task: tuple[int, int]) -> tuple[int, int, int, MetricReport]:
                si, r = task
                spec = plan.specs[si]
                seed = mix64(plan.base_seed, si * 65536 + r)
                surrogate_path = cache_dir / f"{_surrogate_digest(bundle_digest, spec, seed)}.esb"
                if not surrogate_path.exists():
                    surrogate = probe_bundle(bundle, spec.with_seed(seed), montage)
                    tmp = surrogate_path.with_suffix(f".tmp{si}_{r}")
                    write_bundle(surrogate, tmp)
                    os.replace(tmp, surrogate_path)
                out_csv = pred_dir / f"pred_{si}_{r}.csv"
                run_predictor(plan.predictor, surrogate_path, out_csv)
                report = evaluate(
                    y_true, read_predictions(out_csv, bundle.n_trials), n_classes
                )
                return si, r, seed, report

            if plan.workers > 1:
                with ThreadPoolExecutor(max_workers=plan.workers) as pool:
                    results = list(pool.map(run_one, tasks))
            else:
                results = [run_one(t) for t in tasks]
    finally:
        if cleanup is not None:
            cleanup.cleanup()

    by_key = {(si, r): (seed, report) for si, r, seed, report in results}
    probe_results = []
    for si, spec in enumerate(plan.specs):
        reps = []
        r = 0
        while (si, r) in by_key:
            seed, report = by_key[(si, r)]
            surrogate_metrics = report.metrics()
            deltas = {m: baseline_metrics[m] - surrogate_metrics[m] for m in METRIC_NAMES}
            reps.append(RepetitionResult(seed=seed, report=report, deltas=deltas))
            r += 1
        probe_results.append(
            ProbeAuditResult(spec=spec, label=labels_list[si], reps=tuple(reps))
        )

    series = []
    for axis in ("temporal", "region", "band"):
        entries = []
        for result in probe_results:
            if _AXIS_FOR_KIND[result.spec.kind] != axis:
                continue
            entries.append(
                SeriesEntry(
                    label=result.label,
                    delta_mean=result.delta_mean(),
                    delta_std=result.delta_std(),
                    rep_deltas=tuple(dict(r.deltas) for r in result.reps),
                )
            )
        if entries:
            series.append(SensitivitySeries(axis=axis, entries=tuple(entries)))

    return AuditReport(
        baseline=baseline,
        probes=tuple(probe_results),
        series=tuple(series),
        n_classes=n_classes,
        base_seed=plan.base_seed,
    )


def radar_rows(report: AuditReport) -> list[dict]:
    """Rows for the radar CSV: axis_kind, label, metric, delta_mean, delta_std."""
    rows = []
    for series in report.series:
        for entry in series.entries:
            for metric in METRIC_NAMES:
                rows.append(
                    {
                        "axis_kind": series.axis,
                        "label": entry.label,
                        "metric": metric,
                        "delta_mean": entry.delta_mean[metric],
                        "delta_std": entry.delta_std[metric],
                    }
                )
    return rows


def audit_delta_rows(report: AuditReport) -> list[dict]:
    """Rows for the delta CSV: dataset (probe label), metric, delta, direction."""
    rows = []
    for probe in report.probes:
        mean = probe.delta_mean()
        for metric in METRIC_NAMES:
            rows.append(
                {
                    "dataset": probe.label,
                    "metric": metric,
                    "delta": mean[metric],
                    "direction": direction_tag(mean[metric]),
                }
            )
    return rows


def condition_delta_table(results_a: Mapping, results_b: Mapping) -> list[dict]:
    """Per-dataset, per-metric deltas A - B with direction tags.

    Both arguments map dataset name -> MetricReport / AggregateResult (or a
    plain metric mapping); the key sets must match exactly.
    """
    if set(results_a) != set(results_b):
        raise ValueError(
            f"key mismatch: {sorted(results_a)} vs {sorted(results_b)}"
        )
    rows = []
    for name in results_a:
        d = metric_delta(results_a[name], results_b[name], label_a=name, label_b=name)
        for metric, value in d.deltas.items():
            rows.append(
                {
                    "dataset": name,
                    "metric": metric,
                    "delta": value,
                    "direction": d.directions[metric],
                }
            )
    return rows


def reference_bandpower_classifier(
    bundle: SignalBundle, band: BandDefinition, threshold: float
) -> np.ndarray:
    """Predict class 1 iff the mean per-channel band power exceeds the threshold.

    A deliberately transparent predictor: its decision statistic depends only
    on amplitude spectra, so phase randomization cannot move it, while
    ablating its band collapses it to a constant prediction.
    """
    if band.f_high > bundle.fs / 2.0 + 1e-12:
        raise ValueError(f"band [{band.f_low}, {band.f_high}] exceeds Nyquist {bundle.fs / 2}")
    threshold = float(threshold)
    preds = np.zeros(bundle.n_trials, dtype=np.int64)
    for i, trial in enumerate(bundle.trials):
        powers = [band_power(channel, bundle.fs, band) for channel in trial.data]
        preds[i] = 1 if float(np.mean(powers)) > threshold else 0
    return preds


# Channel pool used by the synthetic generator; every name resolves under the
# default 10-20 prefix montage, and small channel counts still span regions.
_CHANNEL_POOL = (
    "C3", "C4", "Fp1", "Fp2", "P3", "P4", "O1", "O2", "T3", "T4",
    "F3", "F4", "Cz", "Pz", "Fz", "Oz", "F7", "F8", "T5", "T6",
    "AF3", "AF4", "FC1", "FC2", "CP1", "CP2", "PO3", "PO4", "FT7", "FT8",
    "TP7", "TP8",
)


def _band_center_frequency(band: BandDefinition, n_samples: int, fs: float) -> float:
    """Bin-aligned frequency nearest the band center, guaranteed inside the band."""
    lo_bin = int(np.ceil(band.f_low * n_samples / fs))
    hi_bin = int(np.floor(band.f_high * n_samples / fs))
    hi_bin = min(hi_bin, n_samples // 2)
    if lo_bin > hi_bin:
        raise ValueError(
            f"band '{band.name}' holds no DFT bin for T={n_samples}, fs={fs}"
        )
    center_bin = int(round(band.center() * n_samples / fs))
    center_bin = min(max(center_bin, lo_bin), hi_bin)
    return center_bin * fs / n_samples


def make_synthetic_bundle(
    n_classes: int,
    trials_per_class: int,
    n_channels: int,
    n_samples: int,
    fs: float,
    class_band_amps: Sequence[Mapping[str, float]],
    noise_level: float = 0.0,
    seed: int = 0,
    bands: Sequence[BandDefinition] | None = None,
    n_subjects: int | None = None,
) -> SignalBundle:
    """Labeled test-data factory: per-band sinusoids plus white noise.

    Each class c gets ``class_band_amps[c]``, a mapping band name ->
    sinusoid amplitude; the sinusoid frequency is the DFT-bin-aligned band
    center so its band power is analytic (amp^2 / 2).  Classes are
    interleaved in trial order; with ``n_subjects`` set, consecutive
    class-blocks are dealt round-robin so every subject sees every class.
    """
    n_classes = int(n_classes)
    trials_per_class = int(trials_per_class)
    n_channels = int(n_channels)
    n_samples = int(n_samples)
    fs = float(fs)
    if n_classes < 1 or trials_per_class < 1 or n_channels < 1 or n_samples < 2 or fs <= 0:
        raise ValueError("invalid dimensions for synthetic bundle")
    if len(class_band_amps) != n_classes:
        raise ValueError(f"need one band-amplitude map per class ({n_classes})")
    if n_subjects is not None and n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")

    table = {b.name.lower(): b for b in (bands if bands is not None else default_bands(fs))}
    class_tones: list[list[tuple[float, float]]] = []
    for amps in class_band_amps:
        tones = []
        for name, amp in amps.items():
            band = table.get(str(name).lower())
            if band is None:
                raise ValueError(f"unknown band '{name}' in class amplitude map")
            tones.append((_band_center_frequency(band, n_samples, fs), float(amp)))
        class_tones.append(tones)

    channel_names = [
        _CHANNEL_POOL[i] if i < len(_CHANNEL_POOL) else f"C{i + 1}"
        for i in range(n_channels)
    ]
    rng = np.random.Generator(np.random.PCG64(as_seed(seed)))
    t = np.arange(n_samples) / fs

    trials = []
    total = n_classes * trials_per_class
    for i in range(total):
        label = i % n_classes
        data = noise_level * rng.standard_normal((n_channels, n_samples)) \
            if noise_level > 0 else np.zeros((n_channels, n_samples))
        for freq, amp in class_tones[label]:
            phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_channels, 1))
            data = data + amp * np.sin(2.0 * np.pi * freq * t[np.newaxis, :] + phases)
        trials.append(Trial(data=data.astype(np.float32), label=label))

    subject_ids = None
    if n_subjects is not None:
        subject_ids = [(i // n_classes) % n_subjects for i in range(total)]
    return SignalBundle(
        trials=trials, fs=fs, channel_names=channel_names, subject_ids=subject_ids
    )
