"""Gradient diversity, batch-size bounds, and mini-batch SGD experiments."""

from .diversity import (
    DifferentialStats,
    DiversityProfile,
    GradientStats,
    conflict_bound,
    differential_diversity,
    diversity_profile,
    glm_bound,
    gradient_diversity,
    spectral_sq_norm,
)
from .dims import (
    DimKind,
    Dropout,
    McBound,
    Quantize,
    Sgld,
    dim_batch_bound_analytic,
    dim_batch_bound_mc,
    run_sgd_with_dim,
    surrogate_gradient,
)
from .lowerbound import (
    DivergenceReport,
    FloorReport,
    closed_form_bs,
    divergence_check,
    floor_experiment,
    hull_membership,
    one_step_distance_mc,
)
from .problems import (
    Dataset,
    L2Ball,
    LeastSquares,
    Logistic,
    LossModel,
    QuadraticDistance,
    SparseConflict,
    Unconstrained,
    eval_full_gradient,
    eval_gradient,
    gen_gaussian_dataset,
    gen_lowerbound_instance,
    gen_rademacher_dataset,
    gen_sparse_conflict,
    load_dataset,
    replicate_dataset,
    save_dataset,
)
from .sgd import (
    ParityReport,
    SgdConfig,
    Trajectory,
    convergence_parity_experiment,
    lemma1_closed_form,
    lemma1_exact_expectation,
    run_sgd,
    sgd_step,
    tuned_step_size,
)
from .stability import (
    CoupledRun,
    CoupledSample,
    StabilityReport,
    coupled_sgd,
    lipschitz_estimate,
    make_coupled_sample,
    stability_bounds,
    stability_experiment,
    stability_sweep,
    step_size_threshold,
)

__version__ = "0.1.0"
