"""Constant-rank differential operators, A-free fields and generalized Young measures."""

from .operators import (
    RANK_TOL,
    LinearOperator,
    MultiIndex,
    OperatorError,
    constant_rank_audit,
    exactness_check,
    image_cone_membership,
    image_cone_span,
    kernel_basis,
    span_basis,
    symbol,
    wave_cone_membership,
)
from .spectral import (
    RangeError,
    TorusField,
    a_representative,
    afree_part,
    apply_operator,
    helmholtz,
    poincare_check,
    potential_solve,
    sobolev_norm,
)
from .integrands import Integrand, IntegrandError, parse as parse_integrand, tilde_transform, upper_recession
from .quasiconvexity import (
    cell_energy,
    coercivity_bound_check,
    envelope_with_refinement,
    lambda_convexity_check,
    quasiconvex_envelope,
)
from .young import (
    Box,
    DiscreteMeasure,
    DiscreteYoungMeasure,
    barycenter,
    concentration_builder,
    divergence_flexibility,
    elementary,
    generation_estimate,
    jensen_certificate,
    pairing,
    shift,
)
from .approximation import Mollifier, area_strict_run, bgradient_run, circle_measure, mollify
from . import gallery

__version__ = "0.1.0"
