"""Online nonparametric additive quantile regression by projected functional SGD."""

__version__ = "0.1.0"

from .basis import (
    BasisFamily,
    BasisSpec,
    DomainError,
    centering_residual,
    eval_basis_vector,
    eval_univariate,
    gram_deviation,
)
from .core import (
    CoefficientState,
    EstimatorConfig,
    LearnerBank,
    MiniBatch,
    Mode,
    OnlineQuantileRegressor,
    Sample,
    StreamedPinball,
    align_dimension,
    pinball_loss,
    predict,
    predict_many,
    step_size,
    subgradient_scalar,
    truncation_dim,
    update_batch,
    update_single,
)
from .ensemble import (
    EnsembleConfig,
    OnlineEnsemble,
    ensemble_predict,
    select_coordinates,
    update_masked,
)
from .projection import ProjectionResult, l1_project, l1_project_oracle
