"""eegprobe: surrogate-signal probing and benchmarking for black-box EEG classifiers."""

from .bundle import (
    EsbFormatError,
    SignalBundle,
    Trial,
    bundle_to_bytes,
    read_bundle,
    validate_bundle,
    write_bundle,
)
from .dft import (
    HalfSpectrum,
    amplitude_spectrum,
    band_power,
    bin_frequency,
    irfft,
    rfft,
    spatial_covariance,
)
from .probes import (
    DEFAULT_NOISE_LEVELS,
    REGIONS,
    BandDefinition,
    Montage,
    ProbeSpec,
    RoiMask,
    classify_channel,
    default_bands,
    default_montage,
    load_bands,
    load_montage,
    make_roi_mask,
    mix64,
    phase_randomize,
    probe_bundle,
    resolve_band,
    spatial_perturb,
    spectral_ablate,
)
from .metrics import (
    METRIC_NAMES,
    AggregateResult,
    ConfusionMatrix,
    DeltaReport,
    MetricReport,
    aggregate,
    balanced_accuracy,
    cohen_kappa,
    confusion_matrix,
    delta,
    evaluate,
    macro_f1,
)
from .asha import (
    AshaState,
    BudgetExhausted,
    Job,
    ParamSpec,
    RungLadder,
    TrialRecord,
    load_search_space,
    rung_levels,
    sample_config,
)
from .bench import (
    ExternalProcessError,
    ManifestLog,
    ModelCommands,
    ProtocolError,
    ProtocolResult,
    SearchResult,
    SplitPlan,
    fixed_holdout_plan,
    get_split,
    read_predictions,
    run_predictor,
    run_protocol,
    run_search,
    run_trainer_job,
    subject_loocv_splits,
    write_manifest,
)
from .harness import (
    AuditPlan,
    AuditReport,
    SensitivitySeries,
    condition_delta_table,
    make_synthetic_bundle,
    reference_bandpower_classifier,
    run_audit,
)
__version__ = "0.1.0"

# The estimator layer pulls in scikit-learn, which is slow to import and
# unnecessary for CLI/pipeline use; load it lazily on first attribute access.
_ESTIMATOR_NAMES = (
    "BandPowerClassifier",
    "PhaseRandomizer",
    "SpatialPerturber",
    "SpectralAblator",
)


def __getattr__(name):
    if name in _ESTIMATOR_NAMES:
        from . import estimators

        return getattr(estimators, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_ESTIMATOR_NAMES))
