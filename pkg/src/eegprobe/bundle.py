"""In-memory trial containers and the ESB on-disk exchange format.

A :class:`SignalBundle` is an ordered set of labeled trials, each a
(channels, samples) float32 matrix, plus sampling rate, channel names and
optional per-trial subject ids.  The ESB container is the single exchange
format between this toolkit and external trainer/predictor processes:

* bytes 0-3: ASCII magic ``ESB1``
* bytes 4-7: little-endian uint32 header length ``H``
* bytes 8..8+H: UTF-8 JSON header, keys in lexicographic order
* remainder: ``n_trials * C * T`` IEEE-754 binary32 little-endian samples,
  trial-major, then channel-major, then sample index

The header holds exactly: ``channel_names``, ``encoding`` (always
``"f32le"``), ``fs``, ``has_labels``, ``has_subject_ids``, ``n_channels``,
``n_samples``, ``n_trials``, ``version``, plus optional ``labels`` and
``subject_ids`` integer arrays of length ``n_trials``.

Writing a fixed bundle is byte-identical across runs: the header carries no
timestamps and key order is fixed by lexicographic serialization.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

ESB_MAGIC = b"ESB1"
ESB_VERSION = 1
ESB_ENCODING = "f32le"

_HEADER_KEYS = {
    "channel_names",
    "encoding",
    "fs",
    "has_labels",
    "has_subject_ids",
    "n_channels",
    "n_samples",
    "n_trials",
    "version",
}
_OPTIONAL_KEYS = {"labels", "subject_ids"}


class EsbFormatError(ValueError):
    """Raised when a byte stream is not a well-formed ESB container."""


@dataclass(eq=False)
class Trial:
    """One trial: a (channels, samples) float32 matrix and an optional class index."""

    data: np.ndarray
    label: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 1:
            arr = arr[np.newaxis, :]
        if arr.ndim != 2:
            raise ValueError(f"trial data must be 2-D (channels, samples), got {arr.ndim}-D")
        self.data = np.ascontiguousarray(arr)
        if self.label is not None:
            self.label = int(self.label)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trial):
            return NotImplemented
        return (
            self.label == other.label
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass(eq=False)
class SignalBundle:
    """Ordered trials sharing a sampling rate and channel layout.

    Bundles are treated as immutable after construction and are safe to
    share read-only across concurrent workers.
    """

    trials: list[Trial]
    fs: float
    channel_names: list[str]
    subject_ids: list[int] | None = None

    def __post_init__(self):
        self.trials = list(self.trials)
        self.fs = float(self.fs)
        self.channel_names = [str(c) for c in self.channel_names]
        if self.subject_ids is not None:
            self.subject_ids = [int(s) for s in self.subject_ids]

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    @property
    def n_samples(self) -> int:
        if not self.trials:
            raise ValueError("empty bundle has no sample count")
        return self.trials[0].n_samples

    @property
    def labels(self) -> list[int] | None:
        """Labels for all trials, or None if any trial is unlabeled."""
        out = [t.label for t in self.trials]
        if any(lbl is None for lbl in out):
            return None
        return out  # type: ignore[return-value]

    def data_array(self) -> np.ndarray:
        """Stack all trials into one (n_trials, C, T) float32 array."""
        return np.stack([t.data for t in self.trials], axis=0)

    def subset(self, indices: Sequence[int]) -> "SignalBundle":
        """New bundle holding the given trials (data shared, not copied)."""
        idx = [int(i) for i in indices]
        sub_subjects = None
        if self.subject_ids is not None:
            sub_subjects = [self.subject_ids[i] for i in idx]
        return SignalBundle(
            trials=[self.trials[i] for i in idx],
            fs=self.fs,
            channel_names=list(self.channel_names),
            subject_ids=sub_subjects,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SignalBundle):
            return NotImplemented
        return (
            self.fs == other.fs
            and self.channel_names == other.channel_names
            and self.subject_ids == other.subject_ids
            and len(self.trials) == len(other.trials)
            and all(a == b for a, b in zip(self.trials, other.trials))
        )


def validate_bundle(bundle: SignalBundle) -> list[str]:
    """Check every bundle invariant; return one description per violation.

    An empty list means the bundle is valid.  Violations are data, not
    errors: this never raises on bad content.
    """
    violations: list[str] = []
    if not np.isfinite(bundle.fs) or bundle.fs <= 0:
        violations.append("fs must be positive")
    if bundle.n_channels < 1:
        violations.append("channel_names must be non-empty")
    if not bundle.trials:
        violations.append("bundle has no trials")
        return violations

    n_channels = bundle.n_channels
    n_samples = bundle.trials[0].n_samples
    if n_samples < 2:
        violations.append("trial 0: fewer than 2 samples")
    for i, trial in enumerate(bundle.trials):
        if trial.n_channels != n_channels:
            violations.append(f"trial {i}: channel count mismatch")
        if trial.n_samples != n_samples:
            violations.append(f"trial {i}: sample count mismatch")
        if not np.all(np.isfinite(trial.data)):
            bad = np.where(~np.isfinite(trial.data).all(axis=1))[0]
            for c in bad:
                violations.append(f"trial {i}, channel {c}: non-finite sample")
        if trial.label is not None and trial.label < 0:
            violations.append(f"trial {i}: negative label")

    labeled = [t.label is not None for t in bundle.trials]
    if any(labeled) and not all(labeled):
        violations.append("labels must be set for all trials or none")

    if bundle.subject_ids is not None and len(bundle.subject_ids) != bundle.n_trials:
        violations.append("subject_ids length must equal number of trials")
    return violations


def _header_dict(bundle: SignalBundle) -> dict:
    labels = bundle.labels
    header = {
        "version": ESB_VERSION,
        "n_trials": bundle.n_trials,
        "n_channels": bundle.n_channels,
        "n_samples": bundle.n_samples,
        "fs": bundle.fs,
        "channel_names": bundle.channel_names,
        "has_labels": labels is not None,
        "has_subject_ids": bundle.subject_ids is not None,
        "encoding": ESB_ENCODING,
    }
    if labels is not None:
        header["labels"] = labels
    if bundle.subject_ids is not None:
        header["subject_ids"] = bundle.subject_ids
    return header


def write_bundle(bundle: SignalBundle, destination: BinaryIO | str | Path) -> None:
    """Serialize a bundle to the ESB container format.

    The output is byte-identical for a fixed bundle.  Raises ValueError if
    the bundle violates any invariant (e.g. a non-finite sample).
    """
    violations = validate_bundle(bundle)
    if violations:
        raise ValueError("cannot write invalid bundle: " + "; ".join(violations))

    header_bytes = json.dumps(
        _header_dict(bundle), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")

    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as sink:
            _write_parts(sink, header_bytes, bundle)
    else:
        _write_parts(destination, header_bytes, bundle)


def _write_parts(sink: BinaryIO, header_bytes: bytes, bundle: SignalBundle) -> None:
    sink.write(ESB_MAGIC)
    sink.write(len(header_bytes).to_bytes(4, "little"))
    sink.write(header_bytes)
    for trial in bundle.trials:
        sink.write(np.ascontiguousarray(trial.data, dtype="<f4").tobytes())


def bundle_to_bytes(bundle: SignalBundle) -> bytes:
    buf = io.BytesIO()
    write_bundle(bundle, buf)
    return buf.getvalue()


def read_bundle(source: BinaryIO | str | Path | bytes) -> SignalBundle:
    """Parse a complete ESB container into a SignalBundle.

    Raises EsbFormatError on bad magic, version mismatch, truncated payload
    or any header/payload size disagreement.
    """
    if isinstance(source, (str, Path)):
        raw = Path(source).read_bytes()
    elif isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    else:
        raw = source.read()

    if len(raw) < 8 or raw[:4] != ESB_MAGIC:
        raise EsbFormatError("bad magic")
    header_len = int.from_bytes(raw[4:8], "little")
    if len(raw) < 8 + header_len:
        raise EsbFormatError("truncated header")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EsbFormatError(f"unreadable header: {exc}") from exc
    if not isinstance(header, dict):
        raise EsbFormatError("header is not a JSON object")

    keys = set(header)
    missing = _HEADER_KEYS - keys
    if missing:
        raise EsbFormatError(f"header missing keys: {sorted(missing)}")
    unexpected = keys - _HEADER_KEYS - _OPTIONAL_KEYS
    if unexpected:
        raise EsbFormatError(f"unexpected header keys: {sorted(unexpected)}")
    if header["version"] != ESB_VERSION:
        raise EsbFormatError(f"version mismatch: {header['version']!r}")
    if header["encoding"] != ESB_ENCODING:
        raise EsbFormatError(f"unsupported encoding: {header['encoding']!r}")

    n_trials = int(header["n_trials"])
    n_channels = int(header["n_channels"])
    n_samples = int(header["n_samples"])
    channel_names = [str(c) for c in header["channel_names"]]
    if len(channel_names) != n_channels:
        raise EsbFormatError("n_channels disagrees with channel_names length")

    labels = header.get("labels")
    if header["has_labels"] != (labels is not None):
        raise EsbFormatError("has_labels flag disagrees with labels array")
    if labels is not None and len(labels) != n_trials:
        raise EsbFormatError("labels length disagrees with n_trials")
    subject_ids = header.get("subject_ids")
    if header["has_subject_ids"] != (subject_ids is not None):
        raise EsbFormatError("has_subject_ids flag disagrees with subject_ids array")
    if subject_ids is not None and len(subject_ids) != n_trials:
        raise EsbFormatError("subject_ids length disagrees with n_trials")

    payload = raw[8 + header_len :]
    expected = n_trials * n_channels * n_samples * 4
    if len(payload) < expected:
        raise EsbFormatError("truncated payload")
    if len(payload) > expected:
        raise EsbFormatError("header/payload size disagreement")

    samples = np.frombuffer(payload, dtype="<f4").reshape(n_trials, n_channels, n_samples)
    trials = []
    for i in range(n_trials):
        label = int(labels[i]) if labels is not None else None
        trials.append(Trial(data=samples[i].copy(), label=label))

    bundle = SignalBundle(
        trials=trials,
        fs=float(header["fs"]),
        channel_names=channel_names,
        subject_ids=[int(s) for s in subject_ids] if subject_ids is not None else None,
    )
    violations = validate_bundle(bundle)
    if violations:
        raise EsbFormatError("container decodes to invalid bundle: " + "; ".join(violations))
    return bundle
