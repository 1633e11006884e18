"""Certified-robust federated learning by ensembles of group-trained models."""

from .certify import (
    LabelHistogram,
    ProbabilityBounds,
    certify_d,
    certify_p_bounds,
    certify_p_exact,
    clopper_pearson_lower,
    survival_ratio,
)
from .ensemble import (
    ABSTAIN,
    CertifiedPrediction,
    label_histogram,
    majority_vote,
    predict_and_certify_d,
    predict_and_certify_p,
    predict_and_certify_p_exact,
)
from .experiment import (
    attack_success_rate,
    certified_accuracy,
    cost_estimate,
    load_config,
    run_experiment,
)
from .grouping import GroupAssignment, assign_groups_d, enumerate_all_groups, sample_groups_p

__version__ = "0.1.0"
