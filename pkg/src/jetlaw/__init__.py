"""Exact jet-space calculus and conservation-law verification toolkit."""

from .expr import (
    Expr,
    JetlawError,
    ZeroDenominatorError,
    IllegalSubstitutionError,
    PowerCapError,
    DimensionError,
    rational,
    indep,
    jet,
    const,
    opaque,
    exp_,
    sin_,
    cos_,
    sinh_,
    cosh_,
    lambertw_,
    power,
    normalize,
    is_zero,
    substitute,
    atom_partial,
    OpaqueRule,
    slot,
)
from .jets import (
    Characteristic,
    midx,
    prolong_apply,
    total_derivative,
    total_derivative_multi,
    signed_total_derivative_multi,
)
from .variational import (
    FluxVector,
    LinearDiffOperator,
    adjoint,
    antidiff,
    divergence,
    euler,
    euler_tuple,
    frechet,
    helmholtz_defect,
    invert_divergence,
    lagrange_fluxes,
    noether_remainder,
    reduce_operator_cosymmetry,
)

__version__ = "0.1.0"
