"""Controllability, noise-driven Markov chains on manifolds and mixing certificates."""

from .control import (ControlError, ExactControl, KrenerFrame, alpha_to_control, approach, build_frame,
                      exact_control_f, exact_control_g, solid_witness)
from .fields import (BracketFamily, VectorField, bracket_family, extend_system, hormander_rank, jacobian,
                     lie_bracket, parse_field)
from .flow import ControlSignal, ControlSystem, Trajectory, flow_batch, integrate, time_one_map
from .geometry import Circle, Sphere, Torus, make_manifold
from .markov import (ConditionEstimate, HistogramMeasure, estimate_coupling, estimate_minorization,
                     estimate_recurrence, tv_distance)
from .mixing import (FiniteChain, MixingCertificate, contraction_certificate, decompose_pair,
                     end_to_end_mixing, finite_oracle, fit_mixing_rate)
from .noise import NoiseLaw

__version__ = "0.1.0"

__all__ = [
    "ControlError", "ExactControl", "KrenerFrame", "alpha_to_control", "approach", "build_frame",
    "exact_control_f", "exact_control_g", "solid_witness",
    "BracketFamily", "VectorField", "bracket_family", "extend_system", "hormander_rank", "jacobian",
    "lie_bracket", "parse_field",
    "ControlSignal", "ControlSystem", "Trajectory", "flow_batch", "integrate", "time_one_map",
    "Circle", "Sphere", "Torus", "make_manifold",
    "ConditionEstimate", "HistogramMeasure", "estimate_coupling", "estimate_minorization",
    "estimate_recurrence", "tv_distance",
    "FiniteChain", "MixingCertificate", "contraction_certificate", "decompose_pair",
    "end_to_end_mixing", "finite_oracle", "fit_mixing_rate",
    "NoiseLaw",
]
