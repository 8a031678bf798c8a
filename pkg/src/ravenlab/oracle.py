"""Ground-truth pipelines used to verify everything else.

The oracle encoder maps factor assignments to perfectly disentangled
posteriors (one latent dimension per factor, nuisance dims at the prior);
the brute-force solver works directly on assignments; the variance-rule
solver is the closed-form counterpart of the learned scorer.
"""

from __future__ import annotations

import numpy as np

from .puzzles import RpmInstance
from .reasoner import row_std
from .space import FactorSpace
from .vae import PosteriorGaussian

ORACLE_LOG_VAR = -4.0  # sigma ~ 0.135 keeps row divergences finite and well-spread


class AmbiguousPuzzleError(RuntimeError):
    """Zero or multiple choices consistently complete the grid."""


def normalize_factors(space: FactorSpace, assignments: np.ndarray) -> np.ndarray:
    """Map factor indices onto [-1, 1] per factor."""
    assignments = np.asarray(assignments, dtype=np.float64)
    cards = np.asarray(space.cardinalities, dtype=np.float64)
    return 2.0 * assignments / (cards - 1.0) - 1.0


def oracle_encode(space: FactorSpace, assignment, n_nuisance: int = 0) -> PosteriorGaussian:
    """Perfectly disentangled posterior for one assignment."""
    values = space.validate_assignment(assignment)
    batch = oracle_encode_batch(space, np.asarray([values]), n_nuisance)
    return PosteriorGaussian(batch.mean[0], batch.log_var[0])


def oracle_encode_batch(space: FactorSpace, assignments: np.ndarray, n_nuisance: int = 0) -> PosteriorGaussian:
    """(n, K + N) oracle posteriors; factor dims injective over the grid."""
    assignments = np.asarray(assignments)
    n, k = assignments.shape
    mean = np.zeros((n, k + n_nuisance))
    mean[:, :k] = normalize_factors(space, assignments)
    log_var = np.zeros((n, k + n_nuisance))
    log_var[:, :k] = ORACLE_LOG_VAR
    return PosteriorGaussian(mean, log_var)


def brute_force_solve(instance: RpmInstance) -> int:
    """Unique choice keeping every rows-1-and-2-constant factor row-constant.

    Works on the withheld view: the 8 visible cells plus the choice list.
    Raises AmbiguousPuzzleError when the consistent choice is not unique.
    """
    cells = instance.context()
    rows = [cells[0:3], cells[3:6], cells[6:8]]
    k_count = instance.space.num_factors
    shared = [
        k
        for k in range(k_count)
        if len({c[k] for c in rows[0]}) == 1 and len({c[k] for c in rows[1]}) == 1
    ]
    consistent = [
        i
        for i, choice in enumerate(instance.choices)
        if all(rows[2][0][k] == rows[2][1][k] == choice[k] for k in shared)
    ]
    if len(consistent) != 1:
        raise AmbiguousPuzzleError(
            f"{len(consistent)} consistent choices {consistent}; puzzle invalid"
        )
    return consistent[0]


def variance_rule_solve(meta: np.ndarray, o: np.ndarray) -> int:
    """Candidate minimizing summed rule-dim dispersion; ties to lowest index."""
    o = np.asarray(o).astype(bool)
    if not o.any():
        raise ValueError("rule mask is empty")
    sigma = row_std(np.asarray(meta))  # (8, D)
    scores = sigma[2:, o].sum(axis=1)
    return int(np.argmin(scores))
