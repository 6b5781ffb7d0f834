"""orthocast: causal time-series forecasting with orthogonal learning and
switch-based (regression-discontinuity) causal evaluation."""

from .encodings import (
    CUMULATIVE,
    LINEAR,
    ONE_HOT,
    cate_from_theta,
    encode_treatment,
    encoded_dim,
    outcome_shift,
    treatment_frequencies,
)
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    NoIdentificationError,
    NumericalError,
    OrthocastError,
    ParseError,
    ValidationError,
)
from .evaluation import (
    CateHistogram,
    DirectBaseline,
    MetricsReport,
    cate_histogram,
    convergence_sweep,
    direct_cate,
    direct_predict,
    draw_population_sample,
    fit_direct_baseline,
    forecast_metrics,
    oracle_cate_rmse,
    orthogonality_check,
    random_direction_pair,
    rloss_hessian_check,
)
from .learners import (
    BINARY_CE,
    MSE,
    RLOSS,
    SOFTMAX_CE,
    FittedModel,
    LearnerSpec,
    fit_mlp,
    fit_ridge,
    gradient_check,
    load_model,
    predict,
    save_model,
)
from .orthogonal import (
    AveragedForecaster,
    CausalForecaster,
    NuisancePair,
    ResidualizedSample,
    empirical_rloss,
    fit_causal_forecaster,
    fit_nuisance,
    fit_theta,
    load_forecaster,
    predict_cate,
    predict_outcome,
    residualize,
    save_forecaster,
    split_sample,
)
from .rdd import (
    CausalTestSet,
    RddConfig,
    RddEntry,
    apply_weekday_correction,
    build_causal_test_set,
    build_window,
    eligible_switches,
    estimate_switch_cate,
    find_switching_times,
    fit_weekday_model,
    kernel_weights,
    load_test_set,
    save_test_set,
    score_predictions,
)
from .synthetic import Oracle, SynthConfig, generate, inject_step_series
from .timeseries import (
    Dataset,
    FeatureContext,
    FeatureStats,
    FeaturizerConfig,
    TimeSeries,
    compute_feature_stats,
    featurize,
    load_dataset,
    save_dataset,
    validate_series,
)

__version__ = "0.1.0"
