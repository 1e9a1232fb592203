"""Thin-plate roughness-regularized prediction for the additive functional model

    Y = int_0^1 F(t, X(t)) dt + eps,

with GCV-tuned fitting, functional linear baselines and a simulation harness.
"""

from .curves import (
    CurveDataset,
    FunctionalCurve,
    TimeGrid,
    ValueTransform,
    fit_transform,
    quadrature_1d,
    read_csv_dataset,
    write_csv_dataset,
)
from .errors import (
    ConditioningError,
    ConfigError,
    DegenerateDesignError,
    ExperimentError,
    InputError,
    NumericalError,
    ParseError,
    UnsupportedOrderError,
)
from .fit import (
    FitResult,
    LambdaGrid,
    eval_surface,
    fit_thinspline,
    gcv,
    hat_matrix,
    predict,
    predict_many,
    select_lambda,
    solve_penalized,
)
from .tps_kernel import GramMatrices, TpsKernelSpec, assemble_sigma, assemble_xi, j_m, semikernel_point

__version__ = "0.1.0"
