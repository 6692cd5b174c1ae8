"""Numerical laboratory for robust finance under drift and volatility uncertainty."""

__version__ = "0.1.0"

from .conditions import (  # noqa: E402
    Certificates,
    certify_all,
    certify_convexity,
    certify_ellipticity,
    certify_growth,
    certify_mpr,
    classify,
    solve_mpr,
)
from .config import dump_model, load_model, loads_model  # noqa: E402
from .duality import (  # noqa: E402
    conjugacy_check,
    eval_shifted_conjugate,
    shape_check,
    weak_duality_check,
)
from .model import (  # noqa: E402
    CoefficientField,
    ParameterBox,
    Structure,
    UncertaintySpec,
    builtin,
    eval_coefficients,
    sample_theta_set,
)
from .simulate import (  # noqa: E402
    Selector,
    euler_paths,
    girsanov_drift_check,
    moment_stability_check,
    stochastic_exponential,
)
from .utility import UtilitySpec, eval_conjugate  # noqa: E402
from .value import LatticeConfig, dual_value, primal_value, superhedge, verify_superhedge  # noqa: E402
