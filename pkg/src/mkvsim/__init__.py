"""Particle-based simulator and verification toolkit for mean-field SDEs
driven by both idiosyncratic and common Brownian noise.

The package is organized around six pieces:

- ``model``:     drift/interaction specifications, constants, built-in examples
- ``rng``:       counter-based random streams for reproducible parallel runs
- ``ensemble``:  N-particle Euler-Maruyama integration and empirical statistics
- ``coupling``:  reflection/synchronous coupling of two ensembles
- ``eberle``:    concave distance function, certified contraction rate, and
                 sample-based transport distances
- ``analytics``: closed-form references, bound verifiers, decay-rate fitting
- ``cli``:       config-driven orchestration and CSV emission
"""

from mkvsim.model import (
    ConstantsLedger,
    ModelSpec,
    build_model,
    check_assumptions,
    kappa_canonical,
    make_double_well,
    make_ou_variant,
    make_variance_counterexample,
)
from mkvsim.ensemble import (
    ParticleEnsemble,
    StatsTrajectory,
    em_step,
    empirical_stats,
    sample_initial,
    simulate,
    simulate_batch,
)

__all__ = [
    "ConstantsLedger",
    "ModelSpec",
    "ParticleEnsemble",
    "StatsTrajectory",
    "build_model",
    "check_assumptions",
    "em_step",
    "empirical_stats",
    "kappa_canonical",
    "make_double_well",
    "make_ou_variant",
    "make_variance_counterexample",
    "sample_initial",
    "simulate",
    "simulate_batch",
]

__version__ = "0.1.0"
