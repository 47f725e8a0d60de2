"""Scikit-learn style wrappers around the surrogate transforms.

These estimators operate on trial arrays shaped (n_trials, n_channels,
n_samples) — the convention EEG pipelines use — or a single (n_channels,
n_samples) matrix.  ``fit`` only validates; the transforms are stateless.
Trial ``i`` always uses the derived seed ``mix64(seed, i)``, so transformed
output is reproducible and independent of batch splitting order.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .dft import band_power
from .probes import (
    BandDefinition,
    default_montage,
    make_roi_mask,
    mix64,
    phase_randomize,
    spatial_perturb,
    spectral_ablate,
)
from .validation import check_mask, check_trial_stack


def _transform_stack(X, per_trial):
    arr = np.asarray(X, dtype=np.float64)
    single = arr.ndim == 2
    stack = check_trial_stack(arr)
    out = np.stack([per_trial(stack[i], i) for i in range(stack.shape[0])], axis=0)
    return out[0] if single else out


class PhaseRandomizer(BaseEstimator, TransformerMixin):
    """Destroy phase-locked temporal structure, preserving spectra and covariance."""

    def __init__(self, seed=0):
        self.seed = seed

    def fit(self, X, y=None):
        check_trial_stack(X)
        return self

    def transform(self, X):
        return _transform_stack(
            X, lambda trial, i: phase_randomize(trial, mix64(self.seed, i))
        )


class SpatialPerturber(BaseEstimator, TransformerMixin):
    """Inject signal-scaled Gaussian noise into one scalp region's channels.

    Pass either an explicit binary ``mask`` or a ``region`` label together
    with ``channel_names`` (resolved through the default 10-20 montage).
    """

    def __init__(self, mask=None, region=None, channel_names=None, noise_level=1.0, seed=0):
        self.mask = mask
        self.region = region
        self.channel_names = channel_names
        self.noise_level = noise_level
        self.seed = seed

    def _resolve_mask(self, n_channels):
        if self.mask is not None:
            return check_mask(self.mask, n_channels)
        if self.region is None or self.channel_names is None:
            raise ValueError("need either a mask or a region with channel_names")
        montage = default_montage(self.channel_names)
        return make_roi_mask(montage, self.region, list(self.channel_names)).values

    def fit(self, X, y=None):
        stack = check_trial_stack(X)
        self._resolve_mask(stack.shape[1])
        return self

    def transform(self, X):
        stack = check_trial_stack(np.asarray(X, dtype=np.float64))
        mask = self._resolve_mask(stack.shape[1])
        return _transform_stack(
            X,
            lambda trial, i: spatial_perturb(trial, mask, self.noise_level, mix64(self.seed, i)),
        )


class SpectralAblator(BaseEstimator, TransformerMixin):
    """Zero every DFT bin inside [f_low, f_high] and reconstruct the signal."""

    def __init__(self, f_low=8.0, f_high=13.0, fs=256.0):
        self.f_low = f_low
        self.f_high = f_high
        self.fs = fs

    def _band(self):
        return BandDefinition("ablate", self.f_low, self.f_high)

    def fit(self, X, y=None):
        check_trial_stack(X)
        self._band()
        return self

    def transform(self, X):
        band = self._band()
        return _transform_stack(
            X, lambda trial, i: spectral_ablate(trial, band, self.fs)
        )


class BandPowerClassifier(BaseEstimator, ClassifierMixin):
    """Threshold on mean per-channel band power; the audit reference model.

    With ``threshold=None``, ``fit`` places the threshold at the geometric
    midpoint of the two class means of the decision statistic.
    """

    def __init__(self, f_low=8.0, f_high=13.0, fs=256.0, threshold=None):
        self.f_low = f_low
        self.f_high = f_high
        self.fs = fs
        self.threshold = threshold

    def _statistic(self, stack):
        band = BandDefinition("target", self.f_low, self.f_high)
        return np.array(
            [
                np.mean([band_power(ch, self.fs, band) for ch in trial])
                for trial in stack
            ]
        )

    def fit(self, X, y=None):
        stack = check_trial_stack(X)
        if self.threshold is not None:
            self.threshold_ = float(self.threshold)
            return self
        if y is None:
            raise ValueError("fitting the threshold needs binary labels")
        y = np.asarray(y)
        classes = np.unique(y)
        if classes.shape[0] != 2:
            raise ValueError("threshold fitting supports exactly 2 classes")
        stats = self._statistic(stack)
        mean_low = stats[y == classes[0]].mean()
        mean_high = stats[y == classes[1]].mean()
        if mean_low > mean_high:
            mean_low, mean_high = mean_high, mean_low
        if mean_low <= 0:
            self.threshold_ = float(0.5 * (mean_low + mean_high))
        else:
            self.threshold_ = float(np.sqrt(mean_low * mean_high))
        return self

    def predict(self, X):
        stack = check_trial_stack(X)
        threshold = getattr(self, "threshold_", None)
        if threshold is None:
            if self.threshold is None:
                raise ValueError("classifier is not fitted and has no fixed threshold")
            threshold = float(self.threshold)
        return (self._statistic(stack) > threshold).astype(np.int64)
