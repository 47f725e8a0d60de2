"""Drive external trainer/predictor processes through the benchmarking protocol.

Trainer protocol (line-delimited JSON over the child's standard streams):
the parent sends one job object::

    {"trial_id": ..., "config": {...}, "resource_level": R,
     "train_manifest_path": "...", "val_manifest_path": "...", "seed": S}

and the child emits zero or more progress objects plus exactly one final
``{"trial_id": ..., "resource_consumed": R', "metric": M}`` before exiting 0.
Manifest files are JSON ``{"bundle": <esb path>, "indices": [...]}``.

Predictor protocol: ``<cmd> --input <bundle.esb> --output <pred.csv>`` where
pred.csv has columns ``trial_index,predicted_label[,prob_0..prob_K-1]``.
When probability columns are present the label is their argmax.

Trainers and predictors run with the fold working directory as cwd; a
predictor command template may contain ``{trial_id}`` to select the model
state persisted by the matching training job.

Leakage guard: test-set trial indices are never written into any manifest
handed to a trainer during the search stage; every manifest written is
recorded so audits can assert this on file evidence.
"""

from __future__ import annotations

import csv
import json
import shlex
import subprocess
import tempfile
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .asha import AshaState, BudgetExhausted, Job, ParamSpec, RungLadder, validate_config
from .bundle import SignalBundle, read_bundle, write_bundle
from .metrics import METRIC_NAMES, AggregateResult, MetricReport, aggregate, evaluate
from .probes import mix64
from .validation import as_seed


class ExternalProcessError(RuntimeError):
    """A trainer or predictor process failed or broke its protocol."""


class ProtocolError(ExternalProcessError):
    """The child process violated the line-delimited JSON protocol."""


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint train/validation/test trial-index sets for one iteration."""

    strategy: str
    fold: int
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        train = tuple(int(i) for i in self.train)
        val = tuple(int(i) for i in self.val)
        test = tuple(int(i) for i in self.test)
        object.__setattr__(self, "train", train)
        object.__setattr__(self, "val", val)
        object.__setattr__(self, "test", test)
        sets = [set(train), set(val), set(test)]
        if any(len(s) != len(t) for s, t in zip(sets, (train, val, test))):
            raise ValueError("split contains duplicate indices")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("train/val/test sets must be pairwise disjoint")

    def with_fold(self, fold: int) -> "SplitPlan":
        return SplitPlan(self.strategy, int(fold), self.train, self.val, self.test)


def fixed_holdout_plan(train, val, test, fold: int = 1) -> SplitPlan:
    return SplitPlan("fixed_holdout", fold, tuple(train), tuple(val), tuple(test))


def subject_loocv_splits(bundle: SignalBundle) -> list[SplitPlan]:
    """One fold per subject: that subject's trials are the test set.

    The validation set for the inner search is the next subject in sorted
    order (cyclically); the remaining subjects form the training set.
    """
    if bundle.subject_ids is None:
        raise ValueError("subject_loocv needs a bundle with subject ids")
    subjects = sorted(set(bundle.subject_ids))
    if len(subjects) < 3:
        raise ValueError("subject_loocv needs at least 3 distinct subjects")
    by_subject: dict[int, list[int]] = {s: [] for s in subjects}
    for idx, subj in enumerate(bundle.subject_ids):
        by_subject[subj].append(idx)
    plans = []
    for k, test_subject in enumerate(subjects, start=1):
        val_subject = subjects[k % len(subjects)]
        train = [
            i
            for s in subjects
            if s not in (test_subject, val_subject)
            for i in by_subject[s]
        ]
        plans.append(
            SplitPlan(
                "subject_loocv",
                k,
                tuple(train),
                tuple(by_subject[val_subject]),
                tuple(by_subject[test_subject]),
            )
        )
    return plans


def get_split(
    strategy: str,
    k: int,
    bundle: SignalBundle,
    base_split: SplitPlan | None = None,
) -> SplitPlan:
    """The k-th iteration's split: static for fixed_holdout, k-th fold for LOOCV."""
    if strategy == "fixed_holdout":
        if base_split is None:
            raise ValueError("fixed_holdout needs user-provided split boundaries")
        return base_split.with_fold(k)
    if strategy == "subject_loocv":
        return subject_loocv_splits(bundle)[k - 1]
    raise ValueError(f"unknown strategy '{strategy}'")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    indices: tuple[int, ...]
    role: str
    stage: str
    fold: int


@dataclass
class ManifestLog:
    """Every manifest file handed to a trainer, for leakage audits."""

    records: list[ManifestRecord] = field(default_factory=list)

    def add(self, record: ManifestRecord) -> None:
        self.records.append(record)

    def stage_indices(self, stage: str, fold: int | None = None) -> set[int]:
        out: set[int] = set()
        for rec in self.records:
            if rec.stage != stage:
                continue
            if fold is not None and rec.fold != fold:
                continue
            out.update(rec.indices)
        return out


def write_manifest(
    path: Path,
    bundle_path: str | Path,
    indices: Sequence[int],
    *,
    log: ManifestLog | None = None,
    role: str = "train",
    stage: str = "search",
    fold: int = 1,
    forbidden: Sequence[int] = (),
) -> Path:
    """Write a trainer manifest; refuses to include any forbidden (test) index."""
    idx = sorted(int(i) for i in indices)
    banned = set(int(i) for i in forbidden)
    overlap = banned.intersection(idx)
    if overlap:
        raise ValueError(f"leakage guard: manifest would expose test indices {sorted(overlap)}")
    payload = {"bundle": str(Path(bundle_path).resolve()), "indices": idx}
    path = Path(path)
    path.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")))
    if log is not None:
        log.add(ManifestRecord(str(path), tuple(idx), role, stage, fold))
    return path


def _as_argv(command: str | Sequence[str]) -> list[str]:
    if isinstance(command, str):
        return shlex.split(command)
    return [str(c) for c in command]


def run_trainer_job(
    command: str | Sequence[str],
    job_payload: Mapping[str, Any],
    cwd: str | Path | None = None,
    timeout: float | None = None,
) -> tuple[float, int]:
    """Run one trainer job to completion; return (metric, resource_consumed)."""
    argv = _as_argv(command)
    try:
        proc = subprocess.run(
            argv,
            input=json.dumps(dict(job_payload)) + "\n",
            capture_output=True,
            text=True,
            cwd=str(cwd) if cwd is not None else None,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired as exc:
        raise ExternalProcessError(f"trainer timed out after {timeout}s") from exc
    except OSError as exc:
        raise ExternalProcessError(f"trainer could not be launched: {exc}") from exc
    if proc.returncode != 0:
        tail = proc.stderr.strip().splitlines()[-3:]
        raise ExternalProcessError(
            f"trainer exited with code {proc.returncode}: {' | '.join(tail)}"
        )

    final = None
    for line in proc.stdout.splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"trainer emitted a non-JSON line: {line[:80]!r}") from exc
        if not isinstance(obj, dict):
            raise ProtocolError("trainer emitted a non-object JSON line")
        if "metric" in obj and "resource_consumed" in obj:
            if final is not None:
                raise ProtocolError("trainer emitted more than one final result")
            final = obj
    if final is None:
        raise ProtocolError("trainer exited without a final result object")
    if final.get("trial_id") != job_payload["trial_id"]:
        raise ProtocolError(
            f"trainer answered for trial {final.get('trial_id')!r}, "
            f"expected {job_payload['trial_id']!r}"
        )
    return float(final["metric"]), int(final["resource_consumed"])


def run_predictor(
    command: str | Sequence[str],
    input_path: str | Path,
    output_path: str | Path,
    cwd: str | Path | None = None,
    timeout: float | None = None,
) -> Path:
    """Invoke a predictor: ``<cmd> --input <esb> --output <csv>``."""
    argv = _as_argv(command) + ["--input", str(input_path), "--output", str(output_path)]
    try:
        proc = subprocess.run(
            argv,
            capture_output=True,
            text=True,
            cwd=str(cwd) if cwd is not None else None,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired as exc:
        raise ExternalProcessError(f"predictor timed out after {timeout}s") from exc
    except OSError as exc:
        raise ExternalProcessError(f"predictor could not be launched: {exc}") from exc
    if proc.returncode != 0:
        tail = proc.stderr.strip().splitlines()[-3:]
        raise ExternalProcessError(
            f"predictor exited with code {proc.returncode}: {' | '.join(tail)}"
        )
    out = Path(output_path)
    if not out.exists():
        raise ExternalProcessError(f"predictor produced no output file at {out}")
    return out


def read_predictions(path: str | Path, n_trials: int) -> np.ndarray:
    """Parse a prediction CSV into labels for trials 0..n_trials-1.

    Probability columns, when present, are argmax-reduced to a label.
    Raises if the file covers a different trial set than the bundle.
    """
    rows: dict[int, int] = {}
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or "trial_index" not in reader.fieldnames:
            raise ExternalProcessError("prediction file lacks a trial_index column")
        prob_cols = sorted(
            (c for c in reader.fieldnames if c.startswith("prob_")),
            key=lambda c: int(c.split("_", 1)[1]),
        )
        for row in reader:
            idx = int(row["trial_index"])
            if idx in rows:
                raise ExternalProcessError(f"duplicate prediction for trial {idx}")
            if prob_cols:
                probs = np.array([float(row[c]) for c in prob_cols])
                rows[idx] = int(np.argmax(probs))
            else:
                rows[idx] = int(row["predicted_label"])
    if set(rows) != set(range(n_trials)):
        raise ExternalProcessError(
            f"prediction file covers trials {sorted(rows)[:5]}..., expected 0..{n_trials - 1}"
        )
    return np.array([rows[i] for i in range(n_trials)], dtype=np.int64)


@dataclass
class SearchResult:
    best_config: dict[str, Any]
    state: AshaState
    manifests: ManifestLog
    n_jobs: int

    @property
    def consumed(self) -> int:
        return self.state.consumed


def run_search(
    space: Sequence[ParamSpec],
    trainer: str | Sequence[str],
    split: SplitPlan,
    bundle_path: str | Path,
    ladder: RungLadder,
    budget: int,
    seed: int = 0,
    workers: int = 1,
    workdir: str | Path | None = None,
    timeout: float | None = None,
    manifest_log: ManifestLog | None = None,
    stage: str = "search",
) -> SearchResult:
    """Stage-1 hyperparameter search against an external trainer.

    Runs up to ``workers`` trainer processes concurrently; scheduler
    decisions are serialized in the calling thread.  Crashed or
    protocol-violating trials are stopped and the search continues.
    """
    if budget is None or int(budget) < 1:
        raise ValueError("search budget (total resource units) is required")
    seed = as_seed(seed)
    workers = max(1, int(workers))

    cleanup = None
    if workdir is None:
        cleanup = tempfile.TemporaryDirectory(prefix="eegprobe-search-")
        workdir = cleanup.name
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    log = manifest_log if manifest_log is not None else ManifestLog()
    train_manifest = write_manifest(
        workdir / "train_manifest.json", bundle_path, split.train,
        log=log, role="train", stage=stage, fold=split.fold, forbidden=split.test,
    )
    val_manifest = write_manifest(
        workdir / "val_manifest.json", bundle_path, split.val,
        log=log, role="val", stage=stage, fold=split.fold, forbidden=split.test,
    )

    state = AshaState(space, ladder, seed=seed, budget=int(budget))
    n_jobs = 0

    def payload(job: Job) -> dict:
        return {
            "trial_id": job.trial_id,
            "config": job.config,
            "resource_level": job.resource_level,
            "train_manifest_path": str(train_manifest),
            "val_manifest_path": str(val_manifest),
            "seed": mix64(seed, job.trial_id),
        }

    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outstanding: dict = {}
            while True:
                while len(outstanding) < workers:
                    try:
                        job = state.next_job()
                    except BudgetExhausted:
                        break
                    n_jobs += 1
                    fut = pool.submit(run_trainer_job, trainer, payload(job), workdir, timeout)
                    outstanding[fut] = job
                if not outstanding:
                    break
                done, _ = wait(outstanding, return_when=FIRST_COMPLETED)
                for fut in done:
                    job = outstanding.pop(fut)
                    try:
                        metric, consumed = fut.result()
                    except ExternalProcessError as exc:
                        state.mark_stopped(job.trial_id, str(exc))
                        continue
                    state.report_result(job.trial_id, job.resource_level, metric, consumed)
    finally:
        if cleanup is not None:
            cleanup.cleanup()

    try:
        best = state.best_config()
    except ValueError as exc:
        raise BudgetExhausted("budget exhausted with zero completed reports") from exc
    return SearchResult(best_config=best, state=state, manifests=log, n_jobs=n_jobs)


@dataclass(frozen=True)
class ModelCommands:
    """The two command templates that define an external model."""

    trainer: str
    predictor: str

    def predictor_for(self, trial_id) -> str:
        if "{trial_id}" in self.predictor:
            return self.predictor.replace("{trial_id}", str(trial_id))
        return self.predictor


@dataclass
class IterationResult:
    fold: int
    split: SplitPlan
    best_config: dict[str, Any]
    metrics_tuned: MetricReport
    metrics_default: MetricReport
    phi: dict[str, float]
    winners: dict[str, str]
    search_consumed: int

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "best_config": self.best_config,
            "metrics_tuned": self.metrics_tuned.to_dict(),
            "metrics_default": self.metrics_default.to_dict(),
            "phi": dict(self.phi),
            "winners": dict(self.winners),
            "search_consumed": self.search_consumed,
        }


@dataclass
class ProtocolResult:
    aggregate: AggregateResult
    iterations: list[IterationResult]
    failures: list[dict]
    manifests: ManifestLog

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate.to_dict(),
            "iterations": [it.to_dict() for it in self.iterations],
            "failures": list(self.failures),
        }


def run_protocol(
    model: ModelCommands,
    bundle_path: str | Path,
    strategy: str,
    space: Sequence[ParamSpec],
    default_config: Mapping[str, Any],
    ladder: RungLadder,
    budget: int,
    n_iterations: int | None = None,
    base_split: SplitPlan | None = None,
    seed: int = 0,
    workers: int = 1,
    workdir: str | Path | None = None,
    timeout: float | None = None,
) -> ProtocolResult:
    """Two-stage benchmarking: per iteration, search then retrain-and-assess.

    Iteration k derives its split, searches hyperparameters on train/val,
    retrains from scratch with both the tuned and the default configuration
    on train+val, assesses both on the held-out test set via the predictor,
    and keeps the per-metric maximum.  Results aggregate as mean +/-
    population std over iterations.  A failed iteration is recorded and
    skipped; partial results are preserved.
    """
    bundle_path = Path(bundle_path)
    bundle = read_bundle(bundle_path)
    labels = bundle.labels
    if labels is None:
        raise ValueError("protocol needs a fully labeled bundle")
    n_classes = max(labels) + 1
    validate_config(space, default_config)
    seed = as_seed(seed)

    if strategy == "subject_loocv":
        total = len(subject_loocv_splits(bundle))
        if n_iterations is not None and int(n_iterations) != total:
            raise ValueError(
                f"subject_loocv on this bundle runs {total} folds, not {n_iterations}"
            )
        n_iterations = total
    elif strategy == "fixed_holdout":
        if n_iterations is None or int(n_iterations) < 1:
            raise ValueError("fixed_holdout needs the number of iterations (seeds)")
        n_iterations = int(n_iterations)
    else:
        raise ValueError(f"unknown strategy '{strategy}'")

    cleanup = None
    if workdir is None:
        cleanup = tempfile.TemporaryDirectory(prefix="eegprobe-bench-")
        workdir = cleanup.name
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    log = ManifestLog()
    iterations: list[IterationResult] = []
    failures: list[dict] = []

    try:
        for k in range(1, n_iterations + 1):
            try:
                iterations.append(
                    _run_iteration(
                        model, bundle, bundle_path, strategy, k, space,
                        default_config, ladder, budget, seed, workers,
                        workdir / f"fold_{k:02d}", timeout, base_split, log, n_classes,
                    )
                )
            except (ExternalProcessError, BudgetExhausted, ValueError, OSError) as exc:
                failures.append({"fold": k, "error": f"{type(exc).__name__}: {exc}"})
    finally:
        if cleanup is not None:
            cleanup.cleanup()

    if not iterations:
        raise ExternalProcessError(
            f"every iteration failed; first error: {failures[0]['error'] if failures else 'n/a'}"
        )
    agg = aggregate([it.phi for it in iterations])
    return ProtocolResult(aggregate=agg, iterations=iterations, failures=failures, manifests=log)


def _run_iteration(
    model: ModelCommands,
    bundle: SignalBundle,
    bundle_path: Path,
    strategy: str,
    k: int,
    space: Sequence[ParamSpec],
    default_config: Mapping[str, Any],
    ladder: RungLadder,
    budget: int,
    seed: int,
    workers: int,
    fold_dir: Path,
    timeout: float | None,
    base_split: SplitPlan | None,
    log: ManifestLog,
    n_classes: int,
) -> IterationResult:
    fold_dir.mkdir(parents=True, exist_ok=True)
    split = get_split(strategy, k, bundle, base_split)

    search = run_search(
        space, model.trainer, split, bundle_path, ladder, budget,
        seed=mix64(seed, k), workers=workers, workdir=fold_dir / "search",
        timeout=timeout, manifest_log=log, stage="search",
    )
    tuned_config = search.best_config

    trainval = sorted(split.train + split.val)
    trainval_manifest = write_manifest(
        fold_dir / "trainval_manifest.json", bundle_path, trainval,
        log=log, role="train", stage="retrain", fold=k, forbidden=split.test,
    )

    jobs = {
        "tuned": (f"retrain-k{k}-tuned", dict(tuned_config)),
        "default": (f"retrain-k{k}-default", dict(default_config)),
    }
    retrain_seed = mix64(seed, (1 << 32) + k)

    def retrain(version: str) -> None:
        trial_id, config = jobs[version]
        payload = {
            "trial_id": trial_id,
            "config": config,
            "resource_level": ladder.top,
            "train_manifest_path": str(trainval_manifest),
            "val_manifest_path": str(trainval_manifest),
            "seed": retrain_seed,
        }
        run_trainer_job(model.trainer, payload, fold_dir, timeout)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            futs = [pool.submit(retrain, v) for v in jobs]
            for fut in futs:
                fut.result()
    else:
        for version in jobs:
            retrain(version)

    test_bundle = bundle.subset(split.test)
    test_path = fold_dir / "test.esb"
    write_bundle(test_bundle, test_path)
    y_true = test_bundle.labels

    reports: dict[str, MetricReport] = {}
    for version, (trial_id, _config) in jobs.items():
        pred_path = fold_dir / f"pred_{version}.csv"
        run_predictor(model.predictor_for(trial_id), test_path, pred_path, fold_dir, timeout)
        y_pred = read_predictions(pred_path, test_bundle.n_trials)
        reports[version] = evaluate(y_true, y_pred, n_classes)

    phi: dict[str, float] = {}
    winners: dict[str, str] = {}
    tuned_metrics = reports["tuned"].metrics()
    default_metrics = reports["default"].metrics()
    for name in METRIC_NAMES:
        if default_metrics[name] > tuned_metrics[name]:
            phi[name] = default_metrics[name]
            winners[name] = "default"
        else:
            phi[name] = tuned_metrics[name]
            winners[name] = "tuned"

    return IterationResult(
        fold=k,
        split=split,
        best_config=tuned_config,
        metrics_tuned=reports["tuned"],
        metrics_default=reports["default"],
        phi=phi,
        winners=winners,
        search_consumed=search.consumed,
    )
