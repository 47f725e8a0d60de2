"""Surrogate-signal generators for probing what a classifier relies on.

Three transforms, each destroying one signal property while preserving the
others:

* :func:`phase_randomize` rotates every Fourier bin of every channel by one
  shared random phase, which destroys phase-locked temporal structure but
  preserves per-channel amplitude spectra and the spatial covariance matrix.
* :func:`spatial_perturb` injects signal-scaled Gaussian noise into the
  channels of one scalp region, leaving all other channels bit-identical.
* :func:`spectral_ablate` zeroes every DFT bin inside a frequency band and
  reconstructs the signal.

:func:`probe_bundle` lifts any of the three to a whole
:class:`~eegprobe.bundle.SignalBundle`, deriving one child seed per trial so
results do not depend on worker scheduling.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bundle import SignalBundle, Trial, validate_bundle
from .validation import as_seed, check_mask, check_trial_matrix

REGIONS = ("frontal", "central", "parietal", "occipital", "temporal")

PROBE_KINDS = ("temporal", "spatial", "spectral")

#: Conventional noise scaling factors for the spatial probe.
DEFAULT_NOISE_LEVELS = (0.5, 1.0, 2.0)

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1

# Channel-name prefix -> region, two-letter rules first so e.g. FT7 resolves
# to temporal rather than frontal.
_PREFIX_REGIONS = (
    ("FP", "frontal"),
    ("AF", "frontal"),
    ("FC", "central"),
    ("CP", "central"),
    ("PO", "parietal"),
    ("FT", "temporal"),
    ("TP", "temporal"),
    ("F", "frontal"),
    ("C", "central"),
    ("P", "parietal"),
    ("O", "occipital"),
    ("T", "temporal"),
)


def mix64(seed: int, index: int) -> int:
    """Derive a child seed from (seed, index) with the SplitMix64 finalizer.

    Gives every trial/repetition an independent, reproducible stream from a
    single base seed.
    """
    z = (as_seed(seed) + (int(index) * _GOLDEN)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class BandDefinition:
    """A named frequency band [f_low, f_high] in Hz."""

    name: str
    f_low: float
    f_high: float

    def __post_init__(self):
        object.__setattr__(self, "f_low", float(self.f_low))
        object.__setattr__(self, "f_high", float(self.f_high))
        if not (0.0 <= self.f_low < self.f_high):
            raise ValueError(
                f"band '{self.name}': need 0 <= f_low < f_high, got [{self.f_low}, {self.f_high}]"
            )

    def center(self) -> float:
        return 0.5 * (self.f_low + self.f_high)


def default_bands(fs: float | None = None) -> list[BandDefinition]:
    """The standard clinical band table; gamma is capped at min(100, fs/2).

    When the sampling rate is too low to represent any gamma content the
    gamma row is omitted.
    """
    bands = [
        BandDefinition("delta", 0.5, 4.0),
        BandDefinition("theta", 4.0, 8.0),
        BandDefinition("alpha", 8.0, 13.0),
        BandDefinition("beta", 13.0, 30.0),
    ]
    gamma_high = 100.0 if fs is None else min(100.0, float(fs) / 2.0)
    if gamma_high > 30.0:
        bands.append(BandDefinition("gamma", 30.0, gamma_high))
    return bands


def resolve_band(name_or_band, bands: Sequence[BandDefinition] | None = None,
                 fs: float | None = None) -> BandDefinition:
    """Look up a band by name in ``bands`` (default table when omitted)."""
    if isinstance(name_or_band, BandDefinition):
        return name_or_band
    table = list(bands) if bands is not None else default_bands(fs)
    wanted = str(name_or_band).lower()
    for band in table:
        if band.name.lower() == wanted:
            return band
    raise ValueError(f"unknown band '{name_or_band}'")


def load_bands(path: str | Path) -> list[BandDefinition]:
    """Load a band table from a JSON list of {name, f_low, f_high} objects."""
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise ValueError("band file must hold a JSON list")
    return [BandDefinition(str(e["name"]), e["f_low"], e["f_high"]) for e in entries]


@dataclass(frozen=True)
class Montage:
    """Mapping channel name -> scalp region label."""

    regions: Mapping[str, str]

    def __post_init__(self):
        mapping = {str(k): str(v) for k, v in dict(self.regions).items()}
        for channel, region in mapping.items():
            if region not in REGIONS:
                raise ValueError(f"channel '{channel}': unknown region label '{region}'")
        object.__setattr__(self, "regions", mapping)

    def region_of(self, channel: str) -> str:
        try:
            return self.regions[channel]
        except KeyError:
            raise ValueError(f"unknown channel '{channel}'") from None


def classify_channel(name: str) -> str | None:
    """Region for a 10-20 channel name via prefix rules, or None if unknown."""
    upper = name.strip().upper()
    for prefix, region in _PREFIX_REGIONS:
        if upper.startswith(prefix):
            return region
    return None


def default_montage(channel_names: Iterable[str]) -> Montage:
    """Build a montage for the given channels from standard 10-20 prefix rules."""
    mapping = {}
    for name in channel_names:
        region = classify_channel(name)
        if region is None:
            raise ValueError(f"unknown channel '{name}': no default region rule")
        mapping[name] = region
    return Montage(mapping)


def load_montage(path: str | Path) -> Montage:
    """Load a montage from a JSON object mapping channel name -> region."""
    mapping = json.loads(Path(path).read_text())
    if not isinstance(mapping, dict):
        raise ValueError("montage file must hold a JSON object")
    return Montage(mapping)


@dataclass(frozen=True)
class RoiMask:
    """Binary channel-inclusion vector for one region of interest."""

    values: np.ndarray
    region: str = ""

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values)).astype(np.uint8)
        if values.ndim != 1:
            raise ValueError("mask must be one-dimensional")
        if not np.all((values == 0) | (values == 1)):
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "values", values)

    @property
    def is_empty(self) -> bool:
        return not bool(self.values.any())

    def __len__(self) -> int:
        return int(self.values.shape[0])


def make_roi_mask(montage: Montage, region: str, channel_names: Sequence[str]) -> RoiMask:
    """Mask with 1 exactly where the montage maps the channel to ``region``.

    A region with no member channels yields an all-zero mask (flagged via
    ``RoiMask.is_empty``) and a warning.
    """
    if region not in REGIONS:
        raise ValueError(f"unknown region label '{region}'")
    values = np.zeros(len(channel_names), dtype=np.uint8)
    for i, name in enumerate(channel_names):
        if montage.region_of(name) == region:
            values[i] = 1
    mask = RoiMask(values=values, region=region)
    if mask.is_empty:
        warnings.warn(f"region '{region}' has no member channels", stacklevel=2)
    return mask


def phase_randomize(trial, seed: int) -> np.ndarray:
    """Rotate all Fourier phases of a (C, T) trial by one shared random vector.

    Per channel: remove the temporal mean, multiply spectrum bin k by
    exp(i theta[k]) with theta[k] ~ U(0, 2pi) drawn once and shared across
    all channels, invert, and restore the mean.  theta is forced to 0 at
    DC and at the even-T Nyquist bin so the output stays real.
    """
    x = check_trial_matrix(trial)
    n_samples = x.shape[1]
    means = x.mean(axis=1, keepdims=True)
    spectra = np.fft.rfft(x - means, axis=1)

    rng = np.random.Generator(np.random.PCG64(as_seed(seed)))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=spectra.shape[1])
    theta[0] = 0.0
    if n_samples % 2 == 0:
        theta[-1] = 0.0

    spectra *= np.exp(1j * theta)[np.newaxis, :]
    out = np.fft.irfft(spectra, n=n_samples, axis=1) + means
    return _match_dtype(out, trial)


def spatial_perturb(trial, mask, noise_level: float, seed: int) -> np.ndarray:
    """Add scaled Gaussian noise to the masked channels of a (C, T) trial.

    The noise scale is ``noise_level * std(trial)`` with the standard
    deviation taken over all C*T samples.  Channels with mask 0 are
    returned bit-identical; ``noise_level=0`` is an exact identity.
    """
    x = check_trial_matrix(trial)
    arr = np.asarray(trial)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    values = check_mask(mask, x.shape[0])
    noise_level = float(noise_level)
    if noise_level < 0:
        raise ValueError("noise level must be >= 0")

    out = arr.copy()
    if noise_level == 0.0 or not values.any():
        return out
    sigma = float(x.std())
    rng = np.random.Generator(np.random.PCG64(as_seed(seed)))
    noise = rng.standard_normal(size=x.shape)
    rows = values == 1
    out[rows] = (x[rows] + noise_level * sigma * noise[rows]).astype(out.dtype, copy=False)
    return out


def spectral_ablate(trial, band, fs: float) -> np.ndarray:
    """Zero every DFT bin of a (C, T) trial with frequency inside ``band``.

    Band membership is inclusive on both edges; the inverse transform is
    taken with explicit length T.
    """
    f_low, f_high = _band_bounds(band)
    fs = float(fs)
    if f_high > fs / 2.0 + 1e-12:
        raise ValueError(f"band [{f_low}, {f_high}] exceeds Nyquist {fs / 2.0}")
    x = check_trial_matrix(trial)
    n_samples = x.shape[1]
    spectra = np.fft.rfft(x, axis=1)
    freqs = np.arange(spectra.shape[1]) * (fs / n_samples)
    spectra[:, (freqs >= f_low) & (freqs <= f_high)] = 0.0
    out = np.fft.irfft(spectra, n=n_samples, axis=1)
    return _match_dtype(out, trial)


def _band_bounds(band) -> tuple[float, float]:
    if hasattr(band, "f_low"):
        return float(band.f_low), float(band.f_high)
    f_low, f_high = band
    return float(f_low), float(f_high)


def _match_dtype(out: np.ndarray, like) -> np.ndarray:
    dtype = getattr(np.asarray(like), "dtype", np.float64)
    if np.issubdtype(dtype, np.floating):
        return out.astype(dtype, copy=False)
    return out


@dataclass(frozen=True)
class ProbeSpec:
    """Descriptor of one surrogate transformation.

    kind 'temporal' needs nothing else; 'spatial' needs a region label and a
    noise level; 'spectral' needs a band.  ``base_seed`` feeds the per-trial
    seed derivation in :func:`probe_bundle`.
    """

    kind: str
    base_seed: int = 0
    region: str | None = None
    noise_level: float | None = None
    band: BandDefinition | None = None

    def __post_init__(self):
        if self.kind not in PROBE_KINDS:
            raise ValueError(f"unknown probe kind '{self.kind}'")
        if self.kind == "spatial":
            if self.region is None or self.noise_level is None:
                raise ValueError("spatial probe needs a region and a noise level")
            if self.region not in REGIONS:
                raise ValueError(f"unknown region label '{self.region}'")
            if float(self.noise_level) < 0:
                raise ValueError("noise level must be >= 0")
            object.__setattr__(self, "noise_level", float(self.noise_level))
        elif self.kind == "spectral":
            if self.band is None:
                raise ValueError("spectral probe needs a band")

    @property
    def is_deterministic(self) -> bool:
        """True when the transform uses no randomness (spectral ablation)."""
        return self.kind == "spectral"

    def with_seed(self, seed: int) -> "ProbeSpec":
        return ProbeSpec(
            kind=self.kind,
            base_seed=int(seed),
            region=self.region,
            noise_level=self.noise_level,
            band=self.band,
        )

    def label(self) -> str:
        if self.kind == "temporal":
            return "phase"
        if self.kind == "spatial":
            return str(self.region)
        return self.band.name  # type: ignore[union-attr]

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind, "seed": int(self.base_seed)}
        if self.kind == "spatial":
            out["region"] = self.region
            out["noise_level"] = self.noise_level
        elif self.kind == "spectral":
            band = self.band
            out["band"] = {"name": band.name, "f_low": band.f_low, "f_high": band.f_high}
        return out

    @classmethod
    def from_dict(cls, obj: Mapping, bands: Sequence[BandDefinition] | None = None) -> "ProbeSpec":
        kind = obj["kind"]
        seed = int(obj.get("seed", 0))
        if kind == "spatial":
            return cls(kind=kind, base_seed=seed, region=obj["region"],
                       noise_level=obj.get("noise_level", 1.0))
        if kind == "spectral":
            band = obj["band"]
            if isinstance(band, str):
                return cls(kind=kind, base_seed=seed, band=resolve_band(band, bands))
            return cls(kind=kind, base_seed=seed,
                       band=BandDefinition(str(band["name"]), band["f_low"], band["f_high"]))
        return cls(kind=kind, base_seed=seed)


def probe_bundle(bundle: SignalBundle, spec: ProbeSpec,
                 montage: Montage | None = None) -> SignalBundle:
    """Apply a probe to every trial of a bundle independently.

    Trial ``i`` uses the derived seed ``mix64(spec.base_seed, i)``, so the
    output is independent of any parallel execution order.  Labels, fs,
    channel names and subject ids are copied unchanged.
    """
    violations = validate_bundle(bundle)
    if violations:
        raise ValueError("cannot probe invalid bundle: " + "; ".join(violations))

    if spec.kind == "spatial":
        montage = montage or default_montage(bundle.channel_names)
        mask = make_roi_mask(montage, spec.region, bundle.channel_names)
    elif spec.kind == "spectral":
        band = spec.band
        if band.f_high > bundle.fs / 2.0 + 1e-12:
            raise ValueError(
                f"band [{band.f_low}, {band.f_high}] exceeds Nyquist {bundle.fs / 2.0}"
            )

    trials = []
    for i, trial in enumerate(bundle.trials):
        seed = mix64(spec.base_seed, i)
        if spec.kind == "temporal":
            data = phase_randomize(trial.data, seed)
        elif spec.kind == "spatial":
            data = spatial_perturb(trial.data, mask, spec.noise_level, seed)
        else:
            data = spectral_ablate(trial.data, spec.band, bundle.fs)
        trials.append(Trial(data=data, label=trial.label))

    out = SignalBundle(
        trials=trials,
        fs=bundle.fs,
        channel_names=list(bundle.channel_names),
        subject_ids=list(bundle.subject_ids) if bundle.subject_ids is not None else None,
    )
    leftover = validate_bundle(out)
    if leftover:
        raise RuntimeError("probe produced invalid bundle: " + "; ".join(leftover))
    return out
