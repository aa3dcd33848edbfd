"""Change-point detection in run-to-failure series via calibrated one-class SVMs."""

from .calibration import (
    CalibrationConfig,
    CalibrationResult,
    Hypothesis,
    assemble_training_set,
    calibrate,
    decode_hypothesis,
    fitness,
    hypothesized_labels,
    log_loss,
)
from .dataset import (
    Normalizer,
    SyntheticConfig,
    SyntheticTruth,
    TimeSeriesInstance,
    apply_normalizer,
    fit_normalizer,
    generate_synthetic,
    parse_cmapss,
    parse_csv,
)
from .de import DEConfig, DEResult, DETrace, de_run
from .detect import (
    DetectionReport,
    detect_batch,
    infer_change_point,
    predict_series,
    smooth_labels,
)
from .errors import CalibrationError, ConvergenceError, DataError, KneepointError
from .svm import (
    KernelParams,
    TrainedModel,
    classify,
    decision_value,
    decision_values,
    load_model,
    qp_reference_solve,
    rbf_kernel,
    save_model,
    train_ocsvm,
)

__version__ = "0.1.0"
