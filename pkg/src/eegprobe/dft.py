"""Real-input DFT pair and spectral utilities.

Conventions: the forward transform is the unnormalized DFT sum
``bins[k] = sum_t x[t] exp(-i 2 pi k t / T)`` for ``k = 0..floor(T/2)``;
the inverse carries the ``1/T`` factor.  For odd ``T`` there is no Nyquist
bin and only bin 0 is forced real.  Any ``T >= 2`` is supported (trial
lengths are not powers of two in practice).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import check_trial_matrix


@dataclass(frozen=True)
class HalfSpectrum:
    """One-sided spectrum of a real signal: floor(T/2)+1 complex bins.

    Bin k corresponds to frequency k*fs/T Hz; bin 0 is DC.
    """

    bins: np.ndarray
    n_samples: int
    fs: float = 1.0

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 1:
            raise ValueError("spectrum bins must be one-dimensional")
        if bins.shape[0] != self.n_samples // 2 + 1:
            raise ValueError(
                f"length mismatch: {bins.shape[0]} bins for T={self.n_samples}"
            )
        object.__setattr__(self, "bins", bins)

    @property
    def n_bins(self) -> int:
        return self.bins.shape[0]

    def frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * (self.fs / self.n_samples)

    def amplitudes(self) -> np.ndarray:
        return np.abs(self.bins)


def rfft(signal, fs: float = 1.0) -> HalfSpectrum:
    """Forward real-input DFT of a 1-D signal (unnormalized sum convention)."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("rfft expects a 1-D signal")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite sample in input")
    return HalfSpectrum(bins=np.fft.rfft(x), n_samples=x.shape[0], fs=float(fs))


def irfft(spectrum: HalfSpectrum | np.ndarray, n_samples: int) -> np.ndarray:
    """Inverse transform under Hermitian extension of the half spectrum.

    Only the real parts of the forced-real bins (0 and, for even T, T/2)
    enter the reconstruction.
    """
    bins = spectrum.bins if isinstance(spectrum, HalfSpectrum) else np.asarray(spectrum)
    bins = np.asarray(bins, dtype=np.complex128)
    n_samples = int(n_samples)
    if bins.ndim != 1 or bins.shape[0] != n_samples // 2 + 1:
        raise ValueError(
            f"length mismatch: {bins.shape[0]} bins for T={n_samples}"
        )
    bins = bins.copy()
    bins[0] = bins[0].real
    if n_samples % 2 == 0:
        bins[-1] = bins[-1].real
    return np.fft.irfft(bins, n=n_samples)


def bin_frequency(k: int, n_samples: int, fs: float) -> float:
    """Frequency in Hz of spectrum bin ``k`` for a length-``n_samples`` signal."""
    k = int(k)
    if k < 0 or k > n_samples // 2:
        raise ValueError(f"bin index {k} out of range for T={n_samples}")
    return k * float(fs) / int(n_samples)


def amplitude_spectrum(signal) -> np.ndarray:
    """Per-bin modulus of the half spectrum of a 1-D signal."""
    return rfft(signal).amplitudes()


def band_power(signal, fs: float, band) -> float:
    """Mean power of the signal content inside ``band`` = (f_low, f_high).

    Computed from the half spectrum with Hermitian double-counting
    (weight 2 on every bin except DC and the even-T Nyquist bin) divided
    by T^2, so that summing over the full band [0, fs/2] reproduces the
    time-domain mean square (Parseval).
    """
    f_low, f_high = _band_edges(band)
    fs = float(fs)
    if not (0.0 <= f_low <= f_high <= fs / 2.0):
        raise ValueError(f"invalid band bounds [{f_low}, {f_high}] for fs={fs}")
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("band_power expects a 1-D signal")
    n_samples = x.shape[0]
    spec = np.fft.rfft(x)
    weights = np.full(spec.shape[0], 2.0)
    weights[0] = 1.0
    if n_samples % 2 == 0:
        weights[-1] = 1.0
    freqs = np.arange(spec.shape[0]) * (fs / n_samples)
    in_band = (freqs >= f_low) & (freqs <= f_high)
    return float(np.sum(weights[in_band] * np.abs(spec[in_band]) ** 2) / n_samples**2)


def _band_edges(band) -> tuple[float, float]:
    f_low = getattr(band, "f_low", None)
    if f_low is not None:
        return float(band.f_low), float(band.f_high)
    f_low, f_high = band
    return float(f_low), float(f_high)


def spatial_covariance(trial) -> np.ndarray:
    """Channel-by-channel sample covariance of a (C, T) trial.

    Per-channel means are removed; the denominator is T (population form).
    """
    x = check_trial_matrix(trial)
    centered = x - x.mean(axis=1, keepdims=True)
    return centered @ centered.T / x.shape[1]
