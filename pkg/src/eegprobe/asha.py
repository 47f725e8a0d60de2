"""Asynchronous successive-halving scheduler and search-space sampling.

Promotion-type ASHA: trials start at the bottom resource rung; whenever a
paused trial ranks in the top floor(n/eta) of its rung's recorded metrics it
is promoted to the next rung, otherwise a fresh configuration is started.
Decisions use only the state present at call time, so no synchronization
barrier ever blocks a worker.

The scheduler itself is transport-free: it hands out :class:`Job` values and
consumes reported metrics.  Driving external trainer processes lives in
:mod:`eegprobe.bench`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .probes import mix64
from .validation import as_seed

PARAM_KINDS = ("log_uniform", "uniform", "categorical")


class BudgetExhausted(RuntimeError):
    """No further job fits in the remaining resource budget."""


@dataclass(frozen=True)
class ParamSpec:
    """One tunable parameter: a log-uniform/uniform range or a categorical set."""

    name: str
    kind: str
    lo: float | None = None
    hi: float | None = None
    values: tuple | None = None

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise ValueError(f"parameter '{self.name}': unknown kind '{self.kind}'")
        if self.kind == "categorical":
            if not self.values:
                raise ValueError(f"parameter '{self.name}': categorical needs >= 1 value")
            object.__setattr__(self, "values", tuple(self.values))
        else:
            if self.lo is None or self.hi is None:
                raise ValueError(f"parameter '{self.name}': needs lo and hi bounds")
            lo, hi = float(self.lo), float(self.hi)
            if not lo < hi:
                raise ValueError(f"parameter '{self.name}': need lo < hi, got [{lo}, {hi}]")
            if self.kind == "log_uniform" and lo <= 0:
                raise ValueError(f"parameter '{self.name}': log_uniform needs lo > 0")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)

    def contains(self, value) -> bool:
        if self.kind == "categorical":
            return value in self.values
        return self.lo <= float(value) <= self.hi

    def to_dict(self) -> dict:
        if self.kind == "categorical":
            return {"name": self.name, "kind": self.kind, "values": list(self.values)}
        return {"name": self.name, "kind": self.kind, "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ParamSpec":
        return cls(
            name=str(obj["name"]),
            kind=str(obj["kind"]),
            lo=obj.get("lo"),
            hi=obj.get("hi"),
            values=tuple(obj["values"]) if "values" in obj else None,
        )


def load_search_space(source: str | Path | Sequence[Mapping]) -> list[ParamSpec]:
    """Load a search space from a JSON file (or already-parsed list)."""
    if isinstance(source, (str, Path)):
        entries = json.loads(Path(source).read_text())
    else:
        entries = list(source)
    if not isinstance(entries, list):
        raise ValueError("search space must be a JSON list of parameter objects")
    return [ParamSpec.from_dict(e) for e in entries]


def sample_config(space: Sequence[ParamSpec], seed: int) -> dict[str, Any]:
    """Draw one configuration, each parameter independently, deterministic in seed."""
    if not space:
        raise ValueError("empty search space")
    rng = np.random.Generator(np.random.PCG64(as_seed(seed)))
    config: dict[str, Any] = {}
    for param in space:
        if param.name in config:
            raise ValueError(f"duplicate parameter name '{param.name}'")
        if param.kind == "log_uniform":
            config[param.name] = float(np.exp(rng.uniform(np.log(param.lo), np.log(param.hi))))
        elif param.kind == "uniform":
            config[param.name] = float(rng.uniform(param.lo, param.hi))
        else:
            config[param.name] = param.values[int(rng.integers(len(param.values)))]
    return config


def validate_config(space: Sequence[ParamSpec], config: Mapping[str, Any]) -> None:
    """Check that a config binds every space parameter to an in-domain value."""
    names = {p.name for p in space}
    if set(config) != names:
        raise ValueError(f"config keys {sorted(config)} do not match space {sorted(names)}")
    for param in space:
        if not param.contains(config[param.name]):
            raise ValueError(f"parameter '{param.name}': value {config[param.name]!r} outside domain")


def rung_levels(r_min: int, r_max: int, eta: int = 3) -> list[int]:
    """Geometric resource ladder r_min * eta^j capped (and closed) at r_max."""
    r_min, r_max, eta = int(r_min), int(r_max), int(eta)
    if r_min < 1 or r_max < r_min:
        raise ValueError(f"invalid bounds: r_min={r_min}, r_max={r_max}")
    if eta < 2:
        raise ValueError("eta must be >= 2")
    levels = []
    level = r_min
    while level <= r_max:
        levels.append(level)
        level *= eta
    if levels[-1] != r_max:
        levels.append(r_max)
    return levels


@dataclass(frozen=True)
class RungLadder:
    """Strictly increasing resource levels plus the reduction factor eta."""

    levels: tuple[int, ...]
    eta: int = 3

    def __post_init__(self):
        levels = tuple(int(x) for x in self.levels)
        if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("ladder levels must be non-empty and strictly increasing")
        if int(self.eta) < 2:
            raise ValueError("eta must be >= 2")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "eta", int(self.eta))

    @classmethod
    def from_bounds(cls, r_min: int, r_max: int, eta: int = 3) -> "RungLadder":
        return cls(levels=tuple(rung_levels(r_min, r_max, eta)), eta=eta)

    @property
    def top(self) -> int:
        return self.levels[-1]


@dataclass
class TrialRecord:
    """One configuration's life in the scheduler."""

    trial_id: int
    config: dict[str, Any]
    history: dict[int, float] = field(default_factory=dict)
    status: str = "running"

    def rungs_reached(self) -> int:
        return len(self.history)


@dataclass(frozen=True)
class Job:
    """A unit of work for a worker: run `config` up to `resource_level`."""

    trial_id: int
    config: dict[str, Any]
    resource_level: int
    is_promotion: bool = False


class AshaState:
    """Scheduler state; a single logically-serialized decision point.

    All methods must be called from one thread (or under one lock): every
    promotion decision is atomic with respect to the rung rankings it reads.
    """

    def __init__(
        self,
        space: Sequence[ParamSpec],
        ladder: RungLadder,
        seed: int = 0,
        budget: int | None = None,
    ):
        if not space:
            raise ValueError("empty search space")
        self.space = list(space)
        self.ladder = ladder
        self.seed = as_seed(seed)
        self.budget = int(budget) if budget is not None else None
        self.trials: dict[int, TrialRecord] = {}
        self.consumed = 0
        self._committed: dict[int, int] = {}
        self._promoted_from: dict[int, set[int]] = {j: set() for j in range(len(ladder.levels))}
        self._next_id = 0
        self.trace: list[dict] = []

    # -- budget -----------------------------------------------------------

    @property
    def committed(self) -> int:
        return sum(self._committed.values())

    def _affordable(self, cost: int) -> bool:
        if self.budget is None:
            return True
        return self.consumed + self.committed + cost <= self.budget

    # -- rung bookkeeping ---------------------------------------------------

    def rung_records(self, rung_index: int) -> list[tuple[int, float]]:
        """(trial_id, metric) pairs recorded at a rung, stopped trials excluded."""
        level = self.ladder.levels[rung_index]
        out = []
        for trial in self.trials.values():
            if trial.status == "stopped":
                continue
            if level in trial.history:
                out.append((trial.trial_id, trial.history[level]))
        return out

    def _promotion_candidate(self, rung_index: int) -> tuple[int, list, int] | None:
        records = self.rung_records(rung_index)
        n = len(records)
        k = n // self.ladder.eta
        if k == 0:
            return None
        ranked = sorted(records, key=lambda r: (-r[1], r[0]))
        for trial_id, _metric in ranked[:k]:
            if trial_id in self._promoted_from[rung_index]:
                continue
            if self.trials[trial_id].status != "paused_at_rung":
                continue
            return trial_id, ranked, k
        return None

    # -- scheduler interface -------------------------------------------------

    def next_job(self) -> Job:
        """Promote the best eligible paused trial, else start a fresh config.

        Rungs are scanned top-down.  Raises BudgetExhausted when no job fits
        in the remaining budget.
        """
        levels = self.ladder.levels
        for j in range(len(levels) - 2, -1, -1):
            found = self._promotion_candidate(j)
            if found is None:
                continue
            trial_id, ranked, k = found
            cost = levels[j + 1]
            if not self._affordable(cost):
                continue
            trial = self.trials[trial_id]
            trial.status = "promoted"
            self._promoted_from[j].add(trial_id)
            self._committed[trial_id] = cost
            self.trace.append(
                {
                    "event": "promote",
                    "trial_id": trial_id,
                    "from_level": levels[j],
                    "to_level": cost,
                    "rung_snapshot": ranked,
                    "n_records": len(ranked),
                    "n_promotable": k,
                }
            )
            return Job(trial_id=trial_id, config=dict(trial.config),
                       resource_level=cost, is_promotion=True)

        cost = levels[0]
        if not self._affordable(cost):
            raise BudgetExhausted("budget exhausted")
        trial_id = self._next_id
        self._next_id += 1
        config = sample_config(self.space, mix64(self.seed, trial_id))
        self.trials[trial_id] = TrialRecord(trial_id=trial_id, config=config, status="running")
        self._committed[trial_id] = cost
        self.trace.append({"event": "start", "trial_id": trial_id, "level": cost})
        return Job(trial_id=trial_id, config=dict(config), resource_level=cost)

    def report_result(self, trial_id: int, resource_level: int,
                      metric: float, resource_consumed: int | None = None) -> None:
        """Record a trial's metric at a rung; NaN marks the trial stopped."""
        if trial_id not in self.trials:
            raise ValueError(f"unknown trial {trial_id}")
        trial = self.trials[trial_id]
        if trial.status == "stopped":
            raise ValueError(f"trial {trial_id} is stopped")
        resource_level = int(resource_level)
        if resource_level in trial.history:
            raise ValueError(f"duplicate report for trial {trial_id} at level {resource_level}")
        if trial.rungs_reached() >= len(self.ladder.levels):
            raise ValueError(f"trial {trial_id} already completed the ladder")
        expected = self.ladder.levels[trial.rungs_reached()]
        if resource_level != expected:
            raise ValueError(
                f"out-of-order level for trial {trial_id}: got {resource_level}, expected {expected}"
            )

        estimate = self._committed.pop(trial_id, 0)
        self.consumed += int(resource_consumed) if resource_consumed is not None else estimate

        metric = float(metric)
        if not math.isfinite(metric):
            trial.status = "stopped"
            self.trace.append({"event": "stop", "trial_id": trial_id, "reason": "non-finite metric"})
            return
        trial.history[resource_level] = metric
        if resource_level == self.ladder.top:
            trial.status = "completed"
        else:
            trial.status = "paused_at_rung"
        self.trace.append(
            {"event": "report", "trial_id": trial_id, "level": resource_level, "metric": metric}
        )

    def mark_stopped(self, trial_id: int, reason: str = "worker failure") -> None:
        """Stop a trial (crash/protocol violation); its records leave the rankings."""
        if trial_id not in self.trials:
            raise ValueError(f"unknown trial {trial_id}")
        estimate = self._committed.pop(trial_id, 0)
        self.consumed += estimate
        self.trials[trial_id].status = "stopped"
        self.trace.append({"event": "stop", "trial_id": trial_id, "reason": reason})

    def best_trial(self) -> TrialRecord:
        """Trial with the highest metric at the highest rung reached; ties -> lower id."""
        best = None
        best_key = None
        for trial in self.trials.values():
            if trial.status == "stopped" or not trial.history:
                continue
            top_level = max(trial.history)
            key = (self.ladder.levels.index(top_level), trial.history[top_level], -trial.trial_id)
            if best_key is None or key > best_key:
                best = trial
                best_key = key
        if best is None:
            raise ValueError("no recorded metrics")
        return best

    def best_config(self) -> dict[str, Any]:
        return dict(self.best_trial().config)

    def has_outstanding(self) -> bool:
        return bool(self._committed)
