"""Two-time-scale Markov chains: expansions, diffusion limits and simulation."""

__version__ = "0.1.0"

from .chain_core import (  # noqa: E402
    CallableGenerator,
    GroupInverseBundle,
    PolynomialGenerator,
    TimeVaryingGenerator,
    TwoScaleModel,
    forward_solve,
    group_inverse,
    load_generator,
    load_model,
    nu_derivative,
    quasi_stationary,
    stationary_vector,
    transition_matrix,
    transition_matrices,
    validate_generator,
)
from .diffusion_limit import (  # noqa: E402
    initial_layer_bias,
    martingale_component,
    sigma_squared,
    sigma_squared_quadrature_oracle,
    variance_profile,
)
from .expansion import build_expansion, expansion_eval, fit_layer_decay  # noqa: E402
from .queue_models import QueueModel, build_generator, queue_nu_closed_form, queue_occupation_band  # noqa: E402
from .simulator import OccupationSpec, PathRecord, monte_carlo, occupation, sample_path, scaled_occupation  # noqa: E402
from .harness import ExperimentConfig, ExperimentReport, reference_model, run_experiment  # noqa: E402
