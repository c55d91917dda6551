"""Geometry of regular Hamiltonians on (co)tangent bundles and the formal
star products built from them."""

from .errors import (
    DegenerateHessian,
    InsufficientJetOrder,
    JetDomainError,
    NewtonDivergence,
    ParseError,
    StarquantError,
    UnknownVariable,
)
from .expr import jet_function, parse
from .fedosov import (
    FedosovState,
    WickElement,
    ad_wick,
    build_state,
    chern_weyl,
    chern_weyl_closedness,
    connection_context,
    delta_inv_pair,
    delta_pair,
    extended_D,
    flat_connection_apply,
    flat_connection_defect,
    lifted_torsion_curvature,
    recursion_residual,
    sigma,
    star_product,
    star_product_jets,
    tau_flatness,
    tau_lift,
    v_divide,
    wick_product,
)
from .geometry import (
    GeometryAtPoint,
    canonical_dconnection,
    einstein_residual,
    fundamental_tensor_hamilton,
    fundamental_tensor_lagrange,
    nconnection_cotangent,
    nconnection_tangent,
    phi_connection,
    poisson_bracket,
    ricci_scalar_phi,
    torsion_curvature,
    vielbein_lift,
)
from .jets import (
    Jet,
    JetSpace,
    PhasePoint,
    align,
    apply_unary,
    jet_const,
    jet_matrix_inverse,
    jet_space,
    jet_var,
    pow_const,
)
from .mechanics import (
    Trajectory,
    hamilton_flow,
    lagrange_flow,
    legendre_to_hamiltonian,
    legendre_to_lagrangian,
    momentum_from_velocity,
    poisson_flow_check,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateHessian",
    "FedosovState",
    "GeometryAtPoint",
    "InsufficientJetOrder",
    "Jet",
    "JetDomainError",
    "JetSpace",
    "NewtonDivergence",
    "ParseError",
    "PhasePoint",
    "StarquantError",
    "Trajectory",
    "UnknownVariable",
    "WickElement",
    "ad_wick",
    "align",
    "apply_unary",
    "build_state",
    "canonical_dconnection",
    "chern_weyl",
    "chern_weyl_closedness",
    "connection_context",
    "delta_inv_pair",
    "delta_pair",
    "einstein_residual",
    "extended_D",
    "flat_connection_apply",
    "flat_connection_defect",
    "fundamental_tensor_hamilton",
    "fundamental_tensor_lagrange",
    "hamilton_flow",
    "jet_const",
    "jet_function",
    "jet_matrix_inverse",
    "jet_space",
    "jet_var",
    "lagrange_flow",
    "legendre_to_hamiltonian",
    "legendre_to_lagrangian",
    "lifted_torsion_curvature",
    "momentum_from_velocity",
    "nconnection_cotangent",
    "nconnection_tangent",
    "parse",
    "phi_connection",
    "poisson_bracket",
    "poisson_flow_check",
    "pow_const",
    "recursion_residual",
    "ricci_scalar_phi",
    "sigma",
    "star_product",
    "star_product_jets",
    "tau_flatness",
    "tau_lift",
    "torsion_curvature",
    "v_divide",
    "vielbein_lift",
    "wick_product",
    "__version__",
]
