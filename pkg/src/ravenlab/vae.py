"""Gaussian VAE with a factorization-pressure (total correlation) term.

The encoder maps images to a (K+N)-dimensional diagonal Gaussian posterior,
the decoder returns per-pixel Bernoulli logits, and a density-ratio
discriminator estimates the total correlation of the aggregate latent.
A puzzle-batch loss head ties these together with the masked row-averaging
of rule dimensions; gradients flow through the averaging into the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .optim import AdamState, adam_init, adam_step
from .rng import RngStream


@dataclass
class PosteriorGaussian:
    """Diagonal Gaussian q(z|x); arrays of shape (..., D)."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean)
        self.log_var = np.asarray(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ValueError(
                f"mean shape {self.mean.shape} != log_var shape {self.log_var.shape}"
            )
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_var))):
            raise ValueError("posterior parameters must be finite")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def reparameterize(posterior: PosteriorGaussian, noise: np.ndarray) -> np.ndarray:
    """z = mu + exp(log_var / 2) * noise."""
    noise = np.asarray(noise)
    if noise.shape != posterior.mean.shape:
        raise ValueError(f"noise shape {noise.shape} != {posterior.mean.shape}")
    return posterior.mean + np.exp(0.5 * posterior.log_var) * noise


def kl_to_prior(posterior: PosteriorGaussian) -> np.ndarray:
    """Per-dimension KL(q || N(0, 1)) = (mu^2 + var - log var - 1) / 2."""
    return 0.5 * (
        np.square(posterior.mean) + np.exp(posterior.log_var) - posterior.log_var - 1.0
    )


def gaussian_kl(mu1, lv1, mu2, lv2):
    """Closed-form KL between univariate Gaussians, elementwise."""
    v1, v2 = np.exp(lv1), np.exp(lv2)
    return 0.5 * (lv2 - lv1 + (v1 + np.square(mu1 - mu2)) / v2 - 1.0)


@dataclass
class LossTerms:
    reconstruction: float
    kl_per_dim: np.ndarray
    tc: float
    total: float
    lambda1: float
    lambda2: float

    @property
    def kl(self) -> float:
        return float(self.kl_per_dim.sum())


@dataclass
class VaeConfig:
    image_size: int = 64
    channels: int = 1
    latent_dim: int = 10
    arch: str = "conv"  # conv | dense
    enc_hidden: tuple = (256,)
    dec_hidden: tuple = (256,)
    disc_hidden: tuple = (1000,) * 6
    dtype: type = np.float32

    @property
    def pixels(self) -> int:
        return self.image_size * self.image_size * self.channels


_CONV_CHANNELS = (32, 32, 64, 64)


def _conv_depth(size: int) -> int:
    # stride-2 stack down to a 4x4 spatial map
    depth = int(math.log2(size / 4))
    if 4 * 2**depth != size:
        raise ValueError(f"conv arch expects size in (16, 32, 64), got {size}")
    return depth


def build_encoder(cfg: VaeConfig) -> ad.Graph:
    g = ad.GraphBuilder(cfg.dtype)
    x = g.input("x", (-1, cfg.image_size, cfg.image_size, cfg.channels))
    if cfg.arch == "conv":
        h = x
        depth = _conv_depth(cfg.image_size)
        for i, ch in enumerate(_CONV_CHANNELS[-depth:]):
            h = g.relu(g.conv2d(h, ch, name=f"enc.conv{i}"))
        h = g.reshape(h, (-1, 4 * 4 * _CONV_CHANNELS[-1]))
        h = g.relu(g.dense(h, 256, name="enc.fc0"))
    else:
        h = g.reshape(x, (-1, cfg.pixels))
        for i, width in enumerate(cfg.enc_hidden):
            h = g.relu(g.dense(h, width, name=f"enc.fc{i}"))
    out = g.dense(h, 2 * cfg.latent_dim, name="enc.out")
    return g.build({"posterior": out})


def _decoder_section(g: ad.GraphBuilder, z: ad.Ref, cfg: VaeConfig) -> ad.Ref:
    """Decoder layers; shared between the standalone graph and loss heads."""
    if cfg.arch == "conv":
        depth = _conv_depth(cfg.image_size)
        h = g.relu(g.dense(z, 256, name="dec.fc0"))
        h = g.relu(g.dense(h, 4 * 4 * 64, name="dec.fc1"))
        h = g.reshape(h, (-1, 4, 4, 64))
        up_channels = list(reversed(_CONV_CHANNELS[-depth:]))[1:] + [cfg.channels]
        for i, ch in enumerate(up_channels):
            h = g.conv2d_transpose(h, ch, name=f"dec.up{i}")
            if i < len(up_channels) - 1:
                h = g.relu(h)
        return h
    h = z
    for i, width in enumerate(cfg.dec_hidden):
        h = g.relu(g.dense(h, width, name=f"dec.fc{i}"))
    h = g.dense(h, cfg.pixels, name="dec.out")
    return g.reshape(h, (-1, cfg.image_size, cfg.image_size, cfg.channels))


def build_decoder(cfg: VaeConfig) -> ad.Graph:
    g = ad.GraphBuilder(cfg.dtype)
    z = g.input("z", (-1, cfg.latent_dim))
    return g.build({"logits": _decoder_section(g, z, cfg)})


def _discriminator_section(g: ad.GraphBuilder, z: ad.Ref, cfg: VaeConfig) -> ad.Ref:
    h = z
    for i, width in enumerate(cfg.disc_hidden):
        h = g.leaky_relu(g.dense(h, width, name=f"disc.fc{i}"))
    return g.dense(h, 2, name="disc.out")


def build_discriminator(cfg: VaeConfig) -> ad.Graph:
    g = ad.GraphBuilder(cfg.dtype)
    z = g.input("z", (-1, cfg.latent_dim))
    logits = _discriminator_section(g, z, cfg)
    l0 = g.reduce_mean(g.slice(logits, axis=1, start=0, stop=1))
    l1 = g.reduce_mean(g.slice(logits, axis=1, start=1, stop=2))
    tc = g.sub(l0, l1)
    return g.build({"logits": logits, "tc": tc})


def build_discriminator_trainer(cfg: VaeConfig) -> ad.Graph:
    """Classify joint latents (class 0) against dimension-permuted ones (class 1)."""
    g = ad.GraphBuilder(cfg.dtype)
    z = g.input("z", (-1, cfg.latent_dim))  # joint and permuted stacked
    labels = g.input("labels", (-1,))
    logits = _discriminator_section(g, z, cfg)
    loss = g.softmax_cross_entropy(logits, labels)
    return g.build({"loss": loss})


def permute_dims(z: np.ndarray, rng: RngStream) -> np.ndarray:
    """Shuffle each latent dimension independently across the batch."""
    gen = rng.generator()
    out = np.empty_like(z)
    for d in range(z.shape[1]):
        out[:, d] = z[gen.permutation(z.shape[0]), d]
    return out


def tc_minibatch(z: np.ndarray, posterior: PosteriorGaussian) -> float:
    """Discriminator-free minibatch estimate: E[log q(z) - sum_l log q(z_l)].

    Density q is approximated by the mixture over the batch posteriors.
    """
    n, d = z.shape
    diff = z[:, None, :] - posterior.mean[None, :, :]
    log_density = -0.5 * (
        np.square(diff) / np.exp(posterior.log_var)[None]
        + posterior.log_var[None]
        + math.log(2 * math.pi)
    )
    log_qz = _logsumexp(log_density.sum(axis=2), axis=1) - math.log(n)
    log_qz_product = (_logsumexp(log_density, axis=1) - math.log(n)).sum(axis=1)
    return float(np.mean(log_qz - log_qz_product))


def _logsumexp(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


class VaeModel:
    """Encoder/decoder/discriminator parameters plus their loss heads."""

    def __init__(self, cfg: VaeConfig, rng: RngStream):
        self.cfg = cfg
        self.enc_graph = build_encoder(cfg)
        self.dec_graph = build_decoder(cfg)
        self.disc_graph = build_discriminator(cfg)
        self.disc_trainer = build_discriminator_trainer(cfg)
        self.enc_params = ad.init_params(self.enc_graph, rng.child(1))
        self.dec_params = ad.init_params(self.dec_graph, rng.child(2))
        self.disc_params = ad.init_params(self.disc_graph, rng.child(3))
        self._warm_head = None
        self._puzzle_head = None
        self._puzzle_scope = None

    # plain forward passes -------------------------------------------------

    def encode(self, images: np.ndarray) -> PosteriorGaussian:
        images = np.asarray(images)
        single = images.ndim == 3
        if single:
            images = images[None]
        out, _ = ad.forward(self.enc_graph, self.enc_params, {"x": images})
        post = out["posterior"]
        d = self.cfg.latent_dim
        mean, log_var = post[:, :d], post[:, d:]
        if single:
            mean, log_var = mean[0], log_var[0]
        return PosteriorGaussian(mean, log_var)

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=self.cfg.dtype)
        if z.shape[-1] != self.cfg.latent_dim:
            raise ad.ShapeError(
                f"latent dim {z.shape[-1]} != {self.cfg.latent_dim}"
            )
        single = z.ndim == 1
        out, _ = ad.forward(self.dec_graph, self.dec_params, {"z": z.reshape(-1, self.cfg.latent_dim)})
        logits = out["logits"]
        return logits[0] if single else logits

    def tc_term(self, z: np.ndarray, rng: RngStream | None = None):
        """Density-ratio TC estimate and the matching discriminator loss.

        The discriminator loss is evaluated against a dimension-permuted copy
        of the batch (requires rng); pass rng=None to get the estimate only.
        """
        z = np.asarray(z, dtype=self.cfg.dtype)
        if z.ndim != 2 or z.shape[0] < 2:
            raise ValueError("tc_term needs a (batch >= 2, dim) latent matrix")
        out, _ = ad.forward(self.disc_graph, self.disc_params, {"z": z})
        tc = float(out["tc"])
        if rng is None:
            return tc, None
        z_perm = permute_dims(z, rng)
        stacked = np.concatenate([z, z_perm], axis=0)
        labels = np.concatenate(
            [np.zeros(len(z), dtype=np.int64), np.ones(len(z), dtype=np.int64)]
        )
        lout, _ = ad.forward(
            self.disc_trainer, self.disc_params, {"z": stacked, "labels": labels}
        )
        return tc, float(lout["loss"])

    def discriminator_step(self, z: np.ndarray, rng: RngStream, state: AdamState, lr: float) -> float:
        """One ADAM step of the density-ratio discriminator; returns its loss."""
        z_perm = permute_dims(z, rng)
        stacked = np.concatenate([z, z_perm], axis=0).astype(self.cfg.dtype)
        labels = np.concatenate(
            [np.zeros(len(z), dtype=np.int64), np.ones(len(z), dtype=np.int64)]
        )
        out, cache = ad.forward(
            self.disc_trainer, self.disc_params, {"z": stacked, "labels": labels}, mode="train"
        )
        grads, _ = ad.backward(self.disc_trainer, cache, {"loss": 1.0})
        adam_step(self.disc_params, grads, state, lr)
        return float(out["loss"])

    def new_disc_adam(self, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
        return adam_init(self.disc_params, beta1, beta2, eps)

    # loss heads -------------------------------------------------------------

    def warm_head(self) -> ad.Graph:
        """Single-image ELBO head: recon + per-dim KL + TC on reparam latents."""
        if self._warm_head is not None:
            return self._warm_head
        cfg = self.cfg
        d = cfg.latent_dim
        g = ad.GraphBuilder(cfg.dtype)
        post = g.input("posterior", (-1, 2 * d))
        noise = g.input("noise", (-1, d))
        targets = g.input("targets", (-1, cfg.image_size, cfg.image_size, cfg.channels))
        mu = g.slice(post, 1, 0, d)
        logvar = g.slice(post, 1, d, 2 * d)
        kl = self._kl_section(g, mu, logvar)
        z = g.gaussian_reparam(mu, logvar, noise)
        recon = self._recon_section(g, z, targets)
        disc_logits = _discriminator_section(g, z, cfg)
        tc = self._tc_readout(g, disc_logits)
        self._warm_head = g.build(
            {"recon": recon, "kl_per_dim": kl, "tc": tc, "z": z,
             "zhat_mu": mu, "zhat_lv": logvar}
        )
        return self._warm_head

    def puzzle_head(self, scope: str = "all") -> ad.Graph:
        """Puzzle-batch ELBO head with masked row-average consistency.

        Inputs: per-panel posteriors for the 14 panels of each puzzle, the
        rule mask o per puzzle, the answer selector, reparam noise, and the
        reconstruction targets (all 9 grid cells, or just the true answer
        when scope="answer"; the KL always covers all 9).
        """
        if scope not in ("all", "answer"):
            raise ValueError(f"scope must be all|answer, got {scope!r}")
        if self._puzzle_head is not None and self._puzzle_scope == scope:
            return self._puzzle_head
        cfg = self.cfg
        d = cfg.latent_dim
        g = ad.GraphBuilder(cfg.dtype)
        post = g.input("posterior", (-1, 2 * d))  # (B*14, 2D)
        o_mask = g.input("o", (-1, 1, 1, d))  # per-puzzle rule mask
        answer_onehot = g.input("answer_onehot", (-1, 6, 1))
        noise = g.input("noise", (-1, 3, 3, d))
        targets = g.input("targets", (-1, cfg.image_size, cfg.image_size, cfg.channels))

        panels = g.reshape(post, (-1, 14, 2 * d))
        mu = g.slice(panels, 2, 0, d)
        logvar = g.slice(panels, 2, d, 2 * d)
        context_mu = g.slice(mu, 1, 0, 8)
        choice_mu = g.slice(mu, 1, 8, 14)
        context_lv = g.slice(logvar, 1, 0, 8)
        choice_lv = g.slice(logvar, 1, 8, 14)

        ans_mu = g.reduce_sum(g.mul(choice_mu, answer_onehot), axis=1, keepdims=True)
        ans_lv = g.reduce_sum(g.mul(choice_lv, answer_onehot), axis=1, keepdims=True)
        grid_mu = g.reshape(g.concat([context_mu, ans_mu], axis=1), (-1, 3, 3, d))
        grid_lv = g.reshape(g.concat([context_lv, ans_lv], axis=1), (-1, 3, 3, d))

        row_avg = g.tile(g.reduce_mean(grid_mu, axis=2, keepdims=True), axis=2, reps=3)
        not_o = g.add_const(g.scale(o_mask, -1.0), 1.0)
        zhat_mu = g.add(g.mul(o_mask, row_avg), g.mul(not_o, grid_mu))

        kl = self._kl_section(g, zhat_mu, grid_lv)
        z_grid = g.gaussian_reparam(zhat_mu, grid_lv, noise)
        z = g.reshape(z_grid, (-1, d))
        if scope == "all":
            recon = self._recon_section(g, z, targets)
        else:
            z_answer = g.reshape(g.slice(g.slice(z_grid, 1, 2, 3), 2, 2, 3), (-1, d))
            recon = self._recon_section(g, z_answer, targets)
        disc_logits = _discriminator_section(g, z, cfg)
        tc = self._tc_readout(g, disc_logits)
        self._puzzle_head = g.build(
            {
                "recon": recon,
                "kl_per_dim": kl,
                "tc": tc,
                "z": z,
                "zhat_mu": g.reshape(zhat_mu, (-1, d)),
                "zhat_lv": g.reshape(grid_lv, (-1, d)),
            }
        )
        self._puzzle_scope = scope
        return self._puzzle_head

    def _kl_section(self, g, mu, logvar):
        # mean over batch/panels, per latent dimension
        term = g.add_const(
            g.sub(g.add(g.square(mu), g.exp(logvar)), logvar), -1.0
        )
        ndim = len(mu.shape)
        return g.scale(g.reduce_mean(term, axis=tuple(range(ndim - 1))), 0.5)

    def _recon_section(self, g, z, targets):
        logits = _decoder_section(g, z, self.cfg)
        ll = g.bernoulli_logits_ll(logits, targets)
        # mean per image, summed over pixels
        return g.scale(g.reduce_mean(ll), float(self.cfg.pixels))

    def _tc_readout(self, g, disc_logits):
        l0 = g.reduce_mean(g.slice(disc_logits, axis=1, start=0, stop=1))
        l1 = g.reduce_mean(g.slice(disc_logits, axis=1, start=1, stop=2))
        return g.sub(l0, l1)

    def merged_params(self) -> dict[str, np.ndarray]:
        return {**self.enc_params, **self.dec_params, **self.disc_params}


def vae_loss(
    model: VaeModel,
    panels: np.ndarray,
    o_mask: np.ndarray,
    answer_onehot: np.ndarray,
    targets: np.ndarray,
    noise: np.ndarray,
    lambda1: float,
    lambda2: float,
) -> LossTerms:
    """Puzzle-batch loss terms (values only; the trainer drives gradients).

    panels: (B, 14, H, W, C); o_mask: (B, D) rule mask from mask inference;
    targets: (B*9, H, W, C) row-major context cells plus the true answer;
    noise: (B, 3, 3, D) standard normal.
    """
    cfg = model.cfg
    b = panels.shape[0]
    flat = panels.reshape((-1,) + panels.shape[2:])
    enc_out, _ = ad.forward(model.enc_graph, model.enc_params, {"x": flat})
    head = model.puzzle_head()
    out, _ = ad.forward(
        head,
        model.merged_params(),
        {
            "posterior": enc_out["posterior"],
            "o": o_mask.reshape(b, 1, 1, cfg.latent_dim).astype(cfg.dtype),
            "answer_onehot": answer_onehot.reshape(b, 6, 1).astype(cfg.dtype),
            "noise": noise.reshape(b, 3, 3, cfg.latent_dim),
            "targets": targets,
        },
    )
    recon = float(out["recon"])
    kl_per_dim = np.asarray(out["kl_per_dim"], dtype=np.float64)
    tc = float(out["tc"])
    total = -recon + lambda1 * float(kl_per_dim.sum()) + lambda2 * tc
    if not math.isfinite(total):
        raise FloatingPointError(
            f"non-finite loss: recon={recon} kl={kl_per_dim.sum()} tc={tc}"
        )
    return LossTerms(
        reconstruction=recon,
        kl_per_dim=kl_per_dim,
        tc=tc,
        total=total,
        lambda1=lambda1,
        lambda2=lambda2,
    )
