"""Candidate scoring from row-dispersion features.

The meta tensor stacks the two context rows with the six third-row
completions (one per choice).  Each row's per-dimension standard deviation
is the feature the scorer consumes: a correct completion leaves the rule
dimensions with zero dispersion.  The scorer is a three-layer MLP applied
per candidate with shared weights, trained by cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import RngStream

META_ROWS = 8  # 2 context rows + 6 candidate completions
ROW_LEN = 3


@dataclass
class ReasonerConfig:
    latent_dim: int = 10
    hidden: tuple = (512, 512)
    dropout: float = 0.5
    dtype: type = np.float32

    @property
    def feature_dim(self) -> int:
        return ROW_LEN * self.latent_dim


def build_meta(context_means: np.ndarray, choice_means: np.ndarray) -> np.ndarray:
    """(8, 3, D) meta tensor from 8 context and 6 choice mean vectors.

    Rows 0-1 are the context rows; row 2+c is [z31, z32, choice_c].
    """
    context_means = np.asarray(context_means)
    choice_means = np.asarray(choice_means)
    if context_means.shape[0] != 8 or choice_means.shape[0] != 6:
        raise ValueError(
            f"expected 8 context + 6 choice vectors, got "
            f"{context_means.shape[0]} + {choice_means.shape[0]}"
        )
    d = context_means.shape[1]
    meta = np.zeros((META_ROWS, ROW_LEN, d), dtype=context_means.dtype)
    meta[0] = context_means[0:3]
    meta[1] = context_means[3:6]
    meta[2:, 0] = context_means[6]
    meta[2:, 1] = context_means[7]
    meta[2:, 2] = choice_means
    return meta


def row_std(meta: np.ndarray) -> np.ndarray:
    """Population standard deviation over each row's 3 vectors, per dim."""
    return np.asarray(meta).std(axis=-2)


def candidate_features(sigma: np.ndarray) -> np.ndarray:
    """(6, 3D) scorer inputs: concat(sigma row0, sigma row1, sigma row 2+c)."""
    d = sigma.shape[-1]
    feats = np.zeros((6, 3 * d), dtype=sigma.dtype)
    feats[:, :d] = sigma[0]
    feats[:, d : 2 * d] = sigma[1]
    feats[:, 2 * d :] = sigma[2:]
    return feats


def scorer_section(g: ad.GraphBuilder, feats: ad.Ref, cfg: ReasonerConfig) -> ad.Ref:
    """Shared-weight MLP on (..., 3D) features -> (..., 1) score."""
    h = feats
    for i, width in enumerate(cfg.hidden):
        h = g.relu(g.dense(h, width, name=f"psi.fc{i}"))
    h = g.dropout(h, cfg.dropout)
    return g.dense(h, 1, name="psi.out")


def build_scorer(cfg: ReasonerConfig) -> ad.Graph:
    g = ad.GraphBuilder(cfg.dtype)
    feats = g.input("features", (-1, 6, cfg.feature_dim))
    scores = g.reshape(scorer_section(g, feats, cfg), (-1, 6))
    return g.build({"logits": scores})


class Reasoner:
    def __init__(self, cfg: ReasonerConfig, rng: RngStream):
        self.cfg = cfg
        self.graph = build_scorer(cfg)
        self.params = ad.init_params(self.graph, rng)

    def score(self, features: np.ndarray, mode: str = "eval", rng: RngStream | None = None) -> np.ndarray:
        """6 logits per puzzle; shared weights across candidates."""
        features = np.asarray(features, dtype=self.cfg.dtype)
        single = features.ndim == 2
        if single:
            features = features[None]
        if features.shape[-1] != self.cfg.feature_dim:
            raise ad.ShapeError(
                f"feature width {features.shape[-1]} != {self.cfg.feature_dim}"
            )
        out, _ = ad.forward(self.graph, self.params, {"features": features}, mode=mode, rng=rng)
        logits = out["logits"]
        return logits[0] if single else logits


def predict(logits: np.ndarray) -> int:
    """Arg-max answer index; ties break to the lowest index."""
    return int(np.argmax(logits))


def reasoner_loss(logits: np.ndarray, answer_index: int) -> float:
    """Cross-entropy -log softmax(logits)[answer]."""
    logits = np.asarray(logits, dtype=np.float64)
    if not (0 <= answer_index < logits.shape[-1]):
        raise ValueError(f"answer index {answer_index} out of range")
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[answer_index])
