"""Masked latent inference over puzzle panels.

Given per-panel posteriors Z' (inferred independently by the encoder), this
module estimates which latent dimensions are active at all (o_kn, via
empirical variance of posterior means), which of those carry the puzzle's
rules (o, via lowest within-row divergence), and produces the consistency
estimate: rule dimensions replaced by their row-mean, everything else passed
through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vae import PosteriorGaussian, gaussian_kl

CONTEXT_PANELS = 8
CHOICE_PANELS = 6
M = 3

DEFAULT_EPSILON = 0.05


@dataclass
class LatentTensor:
    """Posteriors for the 8 context panels (row-major) and 6 choices."""

    context: PosteriorGaussian  # arrays (8, D)
    choices: PosteriorGaussian  # arrays (6, D)
    stage: str = "raw"  # raw (Z') | consistent (averaged)

    def __post_init__(self):
        if self.context.mean.shape[0] != CONTEXT_PANELS:
            raise ValueError(f"expected {CONTEXT_PANELS} context posteriors")
        if self.choices.mean.shape[0] != CHOICE_PANELS:
            raise ValueError(f"expected {CHOICE_PANELS} choice posteriors")
        if self.context.dim != self.choices.dim:
            raise ValueError("context/choice latent dims differ")
        if self.stage not in ("raw", "consistent"):
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def dim(self) -> int:
        return self.context.dim

    def context_rows(self) -> list[PosteriorGaussian]:
        """Rows 1-2 in full, row 3's two known panels."""
        c = self.context
        return [
            PosteriorGaussian(c.mean[0:3], c.log_var[0:3]),
            PosteriorGaussian(c.mean[3:6], c.log_var[3:6]),
            PosteriorGaussian(c.mean[6:8], c.log_var[6:8]),
        ]


@dataclass
class AttributeMasks:
    o_kn: np.ndarray  # active (non-nuisance) dims, uint8
    o: np.ndarray  # rule dims, uint8
    l: int

    def __post_init__(self):
        self.o_kn = np.asarray(self.o_kn, dtype=np.uint8)
        self.o = np.asarray(self.o, dtype=np.uint8)
        if self.o_kn.shape != self.o.shape:
            raise ValueError("o and o_kn must have equal length")
        if np.any(self.o & ~self.o_kn):
            raise ValueError("o must be contained in o_kn")
        if int(self.o.sum()) != self.l:
            raise ValueError(f"popcount(o)={int(self.o.sum())} != l={self.l}")


@dataclass
class DivergenceProfile:
    delta_kl: np.ndarray  # (D,), >= 0; nuisance entries reported, never selected

    def __post_init__(self):
        self.delta_kl = np.asarray(self.delta_kl, dtype=np.float64)
        if np.any(self.delta_kl < -1e-12):
            raise ValueError("divergence profile must be non-negative")
        self.delta_kl = np.maximum(self.delta_kl, 0.0)


def infer_z_prime(encode_fn, panels: np.ndarray) -> LatentTensor:
    """Encode the 8 context + 6 choice panels independently."""
    panels = np.asarray(panels)
    if panels.shape[0] != CONTEXT_PANELS + CHOICE_PANELS:
        raise ValueError(
            f"expected {CONTEXT_PANELS + CHOICE_PANELS} panels, got {panels.shape[0]}"
        )
    post = encode_fn(panels)
    return LatentTensor(
        context=PosteriorGaussian(post.mean[:CONTEXT_PANELS], post.log_var[:CONTEXT_PANELS]),
        choices=PosteriorGaussian(post.mean[CONTEXT_PANELS:], post.log_var[CONTEXT_PANELS:]),
        stage="raw",
    )


def infer_active_mask(means: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Bit k set iff the empirical variance of posterior means exceeds epsilon."""
    means = np.asarray(means)
    if means.size == 0:
        raise ValueError("empty reference batch")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    variance = means.var(axis=0)
    return (variance > epsilon).astype(np.uint8)


class ReferenceBuffer:
    """Rolling batch of recent posterior means for the active-dim variance."""

    def __init__(self, dim: int, capacity: int = 1024):
        self.capacity = capacity
        self._buf = np.zeros((capacity, dim), dtype=np.float64)
        self._count = 0
        self._pos = 0

    def push(self, means: np.ndarray) -> None:
        means = np.asarray(means, dtype=np.float64).reshape(-1, self._buf.shape[1])
        if len(means) >= self.capacity:
            self._buf[:] = means[-self.capacity :]
            self._pos = 0
            self._count = self.capacity
            return
        end = self._pos + len(means)
        if end <= self.capacity:
            self._buf[self._pos : end] = means
        else:
            head = self.capacity - self._pos
            self._buf[self._pos :] = means[:head]
            self._buf[: end - self.capacity] = means[head:]
        self._pos = end % self.capacity
        self._count = min(self._count + len(means), self.capacity)

    def __len__(self):
        return self._count

    def means(self) -> np.ndarray:
        return self._buf[: self._count]


def delta_kl_profile(rows) -> DivergenceProfile:
    """Mean within-row pairwise divergence per latent dimension.

    rows: list of PosteriorGaussian with arrays (panels_in_row, D).  All
    ordered pairs (j, m) within each row contribute
    KL(q(z_j^k) || q(z_m^k)); the sum is normalized by M^3 = 27 regardless
    of how many panels each row actually exposes.
    """
    total = None
    for row in rows:
        mu, lv = row.mean, row.log_var
        pair_kl = gaussian_kl(
            mu[:, None, :], lv[:, None, :], mu[None, :, :], lv[None, :, :]
        )
        row_sum = pair_kl.sum(axis=(0, 1))
        total = row_sum if total is None else total + row_sum
    return DivergenceProfile(total / float(M**3))


def infer_rule_mask(latent: LatentTensor, o_kn: np.ndarray, l: int):
    """Select the l active dims with lowest divergence; ties to lower index."""
    o_kn = np.asarray(o_kn, dtype=np.uint8)
    active = int(o_kn.sum())
    if l > active:
        raise ValueError(f"l={l} exceeds active dimension count {active}")
    profile = delta_kl_profile(latent.context_rows())
    keyed = profile.delta_kl.copy()
    keyed[o_kn == 0] = np.inf  # nuisance dims are never selected
    order = np.argsort(keyed, kind="stable")
    o = np.zeros_like(o_kn)
    o[order[:l]] = 1
    return AttributeMasks(o_kn=o_kn, o=o, l=l), profile


def factor_consistency(
    latent: LatentTensor, masks: AttributeMasks, answer_index: int | None = None
) -> LatentTensor:
    """Replace rule-dim means by their row average; everything else unchanged.

    Rows 1-2 average over their three panels.  Row 3 averages its two known
    panels, or all three when answer_index designates the true choice (in
    which case that choice's posterior is updated too).  Log-variances pass
    through untouched.
    """
    if latent.stage == "consistent":
        raise ValueError("latent tensor is already consistency-averaged")
    o = masks.o.astype(bool)
    mean = latent.context.mean.copy()
    choice_mean = latent.choices.mean.copy()

    def average(rows_mean):
        avg = rows_mean.mean(axis=0)
        out = rows_mean.copy()
        out[:, o] = avg[o]
        return out

    mean[0:3] = average(mean[0:3])
    mean[3:6] = average(mean[3:6])
    if answer_index is None:
        mean[6:8] = average(mean[6:8])
    else:
        row3 = np.vstack([mean[6:8], choice_mean[answer_index : answer_index + 1]])
        row3 = average(row3)
        mean[6:8] = row3[:2]
        choice_mean[answer_index] = row3[2]
    return LatentTensor(
        context=PosteriorGaussian(mean, latent.context.log_var.copy()),
        choices=PosteriorGaussian(choice_mean, latent.choices.log_var.copy()),
        stage="consistent",
    )


def masks_to_json(masks: AttributeMasks, profile: DivergenceProfile) -> dict:
    """Diagnostic record for the per-puzzle inference dump."""
    return {
        "delta_kl": [float(v) for v in profile.delta_kl],
        "o_kn": [int(v) for v in masks.o_kn],
        "o": [int(v) for v in masks.o],
    }
