"""Disentanglement metrics over (representation codes, ground-truth factors).

Four scores, all in [0, 1]: variance-vote classification accuracy, mutual
information gap, attribute predictability gap, and predictor-importance
entropy.  Mutual information uses rank-based equal-mass binning, making it
exactly invariant to strictly monotone per-dimension transforms; the
importance matrix comes from L1-regularized linear predictors on
standardized codes with the penalty chosen by 5-fold validation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import Lasso

from .rng import RngStream
from .space import FactorSpace

MIN_PROBE_ROWS = 1000
DEFAULT_BINS = 20
PRUNE_THRESHOLD = 0.05
LASSO_GRID = tuple(float(a) for a in np.logspace(-4, -1, 7))


@dataclass
class ProbeSet:
    codes: np.ndarray  # (n, code_dim) floats
    factors: np.ndarray  # (n, num_factors) ints

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        self.factors = np.asarray(self.factors, dtype=np.int64)
        if self.codes.shape[0] != self.factors.shape[0]:
            raise ValueError(
                f"codes rows {self.codes.shape[0]} != factor rows {self.factors.shape[0]}"
            )
        if self.codes.shape[0] < 1:
            raise ValueError("probe set is empty")
        if self.codes.shape[0] < MIN_PROBE_ROWS:
            warnings.warn(
                f"probe has {self.codes.shape[0]} rows; metrics are unreliable "
                f"below {MIN_PROBE_ROWS}",
                stacklevel=2,
            )

    @property
    def code_dim(self) -> int:
        return self.codes.shape[1]

    @property
    def num_factors(self) -> int:
        return self.factors.shape[1]


@dataclass
class MetricReport:
    factor_vae: float
    mig: float
    sap: float
    dci_d: float
    per_factor: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("factor_vae", "mig", "sap", "dci_d"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0 + 1e-9):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "factor_vae": self.factor_vae,
            "mig": self.mig,
            "sap": self.sap,
            "dci_d": self.dci_d,
            "per_factor": self.per_factor,
        }

    def table(self) -> str:
        """Plain-text row mirroring the usual reporting column order."""
        header = f"{'F-VAE':>8} {'DCI':>8} {'MIG':>8} {'SAP':>8}"
        row = (
            f"{self.factor_vae:8.4f} {self.dci_d:8.4f} "
            f"{self.mig:8.4f} {self.sap:8.4f}"
        )
        return header + "\n" + row


# shared helpers --------------------------------------------------------------


def quantile_bins(x: np.ndarray, bins: int) -> np.ndarray:
    """Equal-mass bin labels via stable ranks.

    Invariant under strictly monotone per-dim transforms; ties are split by
    sample order, which keeps the labeling reproducible.
    """
    n = len(x)
    order = np.argsort(x, kind="stable")
    labels = np.empty(n, dtype=np.int64)
    labels[order] = (np.arange(n, dtype=np.int64) * bins) // n
    return labels


def discrete_entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def discrete_mutual_info(a: np.ndarray, b: np.ndarray) -> float:
    """I(a; b) in nats from the empirical joint distribution."""
    n = len(a)
    au, ai = np.unique(a, return_inverse=True)
    bu, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((len(au), len(bu)))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= n
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float((joint[mask] * np.log(joint[mask] / (pa @ pb)[mask])).sum())


# metric: mutual information gap ----------------------------------------------


def mig(probe: ProbeSet, bins: int = DEFAULT_BINS):
    """Mean over factors of (top MI - second MI) / factor entropy."""
    binned = np.stack(
        [quantile_bins(probe.codes[:, d], bins) for d in range(probe.code_dim)], axis=1
    )
    per_factor = []
    for k in range(probe.num_factors):
        h = discrete_entropy(probe.factors[:, k])
        if h == 0.0:
            warnings.warn(f"factor {k} is constant; excluded from the gap score", stacklevel=2)
            per_factor.append(None)
            continue
        mi = np.array(
            [discrete_mutual_info(binned[:, d], probe.factors[:, k]) for d in range(probe.code_dim)]
        )
        top = np.sort(mi)[::-1]
        per_factor.append(float((top[0] - top[1]) / h))
    valid = [v for v in per_factor if v is not None]
    if not valid:
        raise ValueError("every factor is constant; no gap to measure")
    return float(np.mean(valid)), per_factor


# metric: attribute predictability gap ----------------------------------------


def sap(probe: ProbeSet):
    """Mean over factors of the gap between the two best single-dim R^2."""
    codes = probe.codes
    code_std = codes.std(axis=0)
    per_factor = []
    for k in range(probe.num_factors):
        y = probe.factors[:, k].astype(np.float64)
        y_std = y.std()
        if y_std == 0.0:
            per_factor.append(None)
            continue
        scores = np.zeros(probe.code_dim)
        for d in range(probe.code_dim):
            if code_std[d] == 0.0:
                continue  # degenerate dim scores 0
            c = np.corrcoef(codes[:, d], y)[0, 1]
            scores[d] = c * c
        top = np.sort(scores)[::-1]
        per_factor.append(float(top[0] - top[1]))
    valid = [v for v in per_factor if v is not None]
    if not valid:
        raise ValueError("every factor is constant; no gap to measure")
    return float(np.mean(valid)), per_factor


# metric: importance-entropy disentanglement -----------------------------------


def _lasso_importance(x: np.ndarray, y: np.ndarray, folds: int = 5) -> np.ndarray:
    """|weights| of an L1 linear predictor, penalty chosen by k-fold validation."""
    n = len(y)
    chunks = np.array_split(np.arange(n), folds)
    best_alpha, best_mse = None, np.inf
    for alpha in LASSO_GRID:
        mse = 0.0
        for held in chunks:
            train = np.setdiff1d(np.arange(n), held, assume_unique=True)
            model = Lasso(alpha=alpha, fit_intercept=False, tol=1e-10, max_iter=100000)
            model.fit(x[train], y[train])
            pred = x[held] @ model.coef_
            mse += float(np.mean((pred - y[held]) ** 2))
        if mse < best_mse - 1e-15:
            best_mse, best_alpha = mse, alpha
    model = Lasso(alpha=best_alpha, fit_intercept=False, tol=1e-10, max_iter=100000)
    model.fit(x, y)
    return np.abs(model.coef_)


def dci_d(probe: ProbeSet):
    """Importance-weighted mean of per-dim (1 - importance entropy / log K)."""
    codes = probe.codes
    std = codes.std(axis=0)
    x = (codes - codes.mean(axis=0)) / np.where(std == 0.0, 1.0, std)
    k_count = probe.num_factors
    importance = np.zeros((probe.code_dim, k_count))
    for k in range(k_count):
        y = probe.factors[:, k].astype(np.float64)
        y_sd = y.std()
        if y_sd == 0.0:
            continue
        importance[:, k] = _lasso_importance(x, (y - y.mean()) / y_sd)

    dim_totals = importance.sum(axis=1)
    included = dim_totals > 0.0
    if not included.any():
        raise ValueError("all dimensions have zero importance")
    log_k = np.log(k_count)
    disent = np.zeros(probe.code_dim)
    for d in np.where(included)[0]:
        p = importance[d] / dim_totals[d]
        nz = p > 0
        disent[d] = 1.0 - float(-(p[nz] * np.log(p[nz])).sum()) / log_k
    weights = dim_totals[included] / dim_totals[included].sum()
    score = float(np.clip((weights * disent[included]).sum(), 0.0, 1.0))
    return score, importance


# metric: variance-vote classification ----------------------------------------


def factor_vae_score(
    space: FactorSpace,
    repr_fn,
    rng: RngStream,
    train_votes: int = 800,
    eval_votes: int = 200,
    vote_batch: int = 64,
    prune_threshold: float = PRUNE_THRESHOLD,
    variance_samples: int = 10000,
):
    """Majority-vote accuracy of the fixed-factor / least-variance-dim game.

    repr_fn maps an (n, num_factors) int array of assignments to an
    (n, code_dim) code matrix.  Dims whose global variance falls below the
    prune threshold never vote.
    """
    gen = rng.generator()
    cards = np.asarray(space.cardinalities)
    k_count = space.num_factors

    assignments = gen.integers(0, cards, size=(variance_samples, k_count))
    global_var = np.asarray(repr_fn(assignments)).var(axis=0)
    active = np.where(global_var >= prune_threshold)[0]
    if len(active) == 0:
        raise ValueError("all representation dimensions pruned by global variance")

    votes = np.zeros((train_votes + eval_votes, 2), dtype=np.int64)
    for t in range(train_votes + eval_votes):
        f = int(gen.integers(0, k_count))
        value = int(gen.integers(0, cards[f]))
        batch = gen.integers(0, cards, size=(vote_batch, k_count))
        batch[:, f] = value
        codes = np.asarray(repr_fn(batch))
        ratios = codes.var(axis=0)[active] / global_var[active]
        votes[t] = (active[int(np.argmin(ratios))], f)

    counts = np.zeros((len(global_var), k_count), dtype=np.int64)
    np.add.at(counts, (votes[:train_votes, 0], votes[:train_votes, 1]), 1)
    classifier = np.argmax(counts, axis=1)
    ev = votes[train_votes:]
    accuracy = float(np.mean(classifier[ev[:, 0]] == ev[:, 1]))
    return accuracy, {"active_dims": active.tolist()}


# assembled report -------------------------------------------------------------


def build_probe(space: FactorSpace, repr_fn, rng: RngStream, n: int = 10000) -> ProbeSet:
    gen = rng.generator()
    factors = gen.integers(0, np.asarray(space.cardinalities), size=(n, space.num_factors))
    return ProbeSet(codes=np.asarray(repr_fn(factors)), factors=factors)


def evaluate_metrics(
    space: FactorSpace,
    repr_fn,
    rng: RngStream,
    n_probe: int = 10000,
    bins: int = DEFAULT_BINS,
    **fv_kwargs,
) -> MetricReport:
    probe = build_probe(space, repr_fn, rng.child(0), n_probe)
    mig_score, mig_pf = mig(probe, bins)
    sap_score, sap_pf = sap(probe)
    dci_score, _ = dci_d(probe)
    fv_score, _ = factor_vae_score(space, repr_fn, rng.child(1), **fv_kwargs)
    per_factor = {
        name: {"mig": mig_pf[k], "sap": sap_pf[k]}
        for k, name in enumerate(space.names)
    }
    return MetricReport(
        factor_vae=fv_score,
        mig=mig_score,
        sap=sap_score,
        dci_d=dci_score,
        per_factor=per_factor,
    )
