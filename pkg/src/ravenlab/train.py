"""Training and evaluation orchestration.

Two phases: a warm start that trains the VAE alone on single uniformly
sampled images (plain ELBO + total-correlation pressure, no masks), then the
joint loop that generates fresh puzzles every step, infers the attribute
masks, applies factor consistency inside the loss head, and takes one ADAM
step on encoder + decoder + scorer while the density-ratio discriminator
trains separately at its own learning rate.  Everything is a pure function
of (config, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .inference import ReferenceBuffer, infer_active_mask
from .optim import adam_init, adam_step
from .puzzles import generate_puzzle
from .reasoner import Reasoner, ReasonerConfig, scorer_section
from .render import PanelCache, image_channels
from .rng import RngStream
from .space import build_space, sample_assignments
from .vae import VaeConfig, VaeModel, gaussian_kl

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    space: object = "toy2"  # preset name or space config dict
    l: int = 1
    image_size: int = 16
    latent_dim: int = 10
    arch: str = "dense"  # dense | conv
    enc_hidden: tuple = (256,)
    dec_hidden: tuple = (256,)
    disc_hidden: tuple = (1000,) * 6
    psi_hidden: tuple = (512, 512)
    psi_dropout: float = 0.5
    lambda1: float = 1.0
    gamma: float = 10.0  # weight on the total-correlation term
    epsilon: float = 0.05
    batch_size: int = 64
    warm_batch_size: int = 64
    learning_rate: float = 1e-4
    disc_learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warm_start_steps: int = 2000
    joint_steps: int = 20000
    reasoner_weight: float = 1.0
    seed: int = 1
    recon_scope: str = "all"  # all | answer
    buffer_capacity: int = 1024
    tc_estimator: str = "discriminator"  # | minibatch (reporting only)

    def __post_init__(self):
        for name in (
            "l", "image_size", "latent_dim", "batch_size", "warm_batch_size",
            "buffer_capacity",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("learning_rate", "disc_learning_rate", "lambda1", "epsilon"):
            if getattr(self, name) < 0 or (name.endswith("rate") and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.recon_scope not in ("all", "answer"):
            raise ValueError(f"recon_scope must be all|answer, got {self.recon_scope!r}")
        for name in ("enc_hidden", "dec_hidden", "disc_hidden", "psi_hidden"):
            setattr(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("enc_hidden", "dec_hidden", "disc_hidden", "psi_hidden"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def desk_config(**overrides) -> TrainConfig:
    """Laptop-core configuration: small widths, small batches."""
    base = dict(
        space="toy2",
        image_size=16,
        arch="dense",
        enc_hidden=(128,),
        dec_hidden=(128,),
        disc_hidden=(256, 256),
        psi_hidden=(128, 128),
        batch_size=8,
        warm_batch_size=32,
        warm_start_steps=2000,
        joint_steps=20000,
        gamma=10.0,
        seed=1,
    )
    base.update(overrides)
    return TrainConfig(**base)


def paper_scale_config(**overrides) -> TrainConfig:
    """The full-size architecture and schedule (not desk-runnable)."""
    base = dict(
        space="dsprites-like",
        image_size=64,
        arch="conv",
        disc_hidden=(1000,) * 6,
        psi_hidden=(512, 512),
        batch_size=64,
        warm_start_steps=100000,
        joint_steps=200000,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _delta_kl_batch(mu: np.ndarray, lv: np.ndarray) -> np.ndarray:
    """Per-puzzle divergence profiles from (B, 14, D) posteriors.

    Context rows only: rows 1-2 in full, row 3's two known panels; the sum
    of all ordered within-row pairs is normalized by the fixed 27.
    """
    total = np.zeros((mu.shape[0], mu.shape[2]))
    for lo, hi in ((0, 3), (3, 6), (6, 8)):
        m, v = mu[:, lo:hi], lv[:, lo:hi]
        pair = gaussian_kl(
            m[:, :, None, :], v[:, :, None, :], m[:, None, :, :], v[:, None, :, :]
        )
        total += pair.sum(axis=(1, 2))
    return total / 27.0


def _rule_masks(delta: np.ndarray, o_kn: np.ndarray, l: int) -> np.ndarray:
    """(B, D) one-hot-l masks: lowest-divergence active dims, ties to low index."""
    keyed = delta.copy()
    keyed[:, o_kn == 0] = np.inf
    order = np.argsort(keyed, axis=1, kind="stable")[:, :l]
    masks = np.zeros_like(delta)
    np.put_along_axis(masks, order, 1.0, axis=1)
    return masks


class Trainer:
    """Owns the model, scorer, optimizer states, and rng streams."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.space = build_space(config.space)
        channels = image_channels(self.space)
        self.vae_cfg = VaeConfig(
            image_size=config.image_size,
            channels=channels,
            latent_dim=config.latent_dim,
            arch=config.arch,
            enc_hidden=config.enc_hidden,
            dec_hidden=config.dec_hidden,
            disc_hidden=config.disc_hidden,
        )
        root = RngStream(config.seed)
        self.model = VaeModel(self.vae_cfg, root.child(1))
        self.reasoner = Reasoner(
            ReasonerConfig(config.latent_dim, config.psi_hidden, config.psi_dropout),
            root.child(2),
        )
        self._warm_rng = root.child(3)
        self._joint_rng = root.child(4)
        self.panel_cache = PanelCache(self.space, config.image_size)
        self.buffer = ReferenceBuffer(config.latent_dim, config.buffer_capacity)
        self.disc_adam = self.model.new_disc_adam(config.beta1, config.beta2, config.adam_eps)
        self.step = 0
        self._ce_head = None

    # heads -----------------------------------------------------------------

    def _reasoner_head(self) -> ad.Graph:
        """Scorer head on raw posterior means: posteriors + labels -> ce, logits."""
        if self._ce_head is not None:
            return self._ce_head
        d = self.config.latent_dim
        g = ad.GraphBuilder(self.vae_cfg.dtype)
        post = g.input("posterior", (-1, 2 * d))
        labels = g.input("labels", (-1,))
        mu = g.slice(g.reshape(post, (-1, 14, 2 * d)), 2, 0, d)
        row0 = g.reshape(g.slice(mu, 1, 0, 3), (-1, 1, 3, d))
        row1 = g.reshape(g.slice(mu, 1, 3, 6), (-1, 1, 3, d))
        base = g.tile(g.reshape(g.slice(mu, 1, 6, 8), (-1, 1, 2, d)), axis=1, reps=6)
        cand = g.reshape(g.slice(mu, 1, 8, 14), (-1, 6, 1, d))
        meta = g.concat([row0, row1, g.concat([base, cand], axis=2)], axis=1)  # (B,8,3,D)
        centered = g.sub(meta, g.tile(g.reduce_mean(meta, axis=2, keepdims=True), axis=2, reps=3))
        sigma = g.sqrt(g.reduce_mean(g.square(centered), axis=2))  # (B,8,D)
        sig01 = g.tile(g.reshape(g.slice(sigma, 1, 0, 2), (-1, 1, 2 * d)), axis=1, reps=6)
        sigc = g.slice(sigma, 1, 2, 8)
        feats = g.concat([sig01, sigc], axis=2)  # (B,6,3D)
        logits = g.reshape(
            scorer_section(g, feats, self.reasoner.cfg), (-1, 6)
        )
        ce = g.softmax_cross_entropy(logits, labels)
        self._ce_head = g.build({"ce": ce, "logits": logits})
        return self._ce_head

    # training steps -----------------------------------------------------------

    def warm_step(self, rng: RngStream) -> dict:
        cfg = self.config
        assignments = sample_assignments(self.space, cfg.warm_batch_size, rng)
        images = self.panel_cache.batch(assignments)
        enc_out, enc_cache = ad.forward(
            self.model.enc_graph, self.model.enc_params, {"x": images}, mode="train"
        )
        head = self.model.warm_head()
        noise = rng.normal((cfg.warm_batch_size, cfg.latent_dim)).astype(self.vae_cfg.dtype)
        out, cache = ad.forward(
            head,
            self.model.merged_params(),
            {"posterior": enc_out["posterior"], "noise": noise, "targets": images},
            mode="train",
        )
        seeds = {"recon": -1.0, "kl_per_dim": cfg.lambda1 * np.ones(cfg.latent_dim)}
        if cfg.gamma != 0.0:
            seeds["tc"] = cfg.gamma
        head_grads, head_inputs = ad.backward(head, cache, seeds)
        enc_grads, _ = ad.backward(
            self.model.enc_graph, enc_cache, {"posterior": head_inputs["posterior"]}
        )
        params = {**self.model.enc_params, **self.model.dec_params}
        grads = {**enc_grads, **{k: v for k, v in head_grads.items() if k in params}}
        adam_step(params, grads, self._warm_adam, cfg.learning_rate)
        self.model.discriminator_step(
            np.asarray(out["z"]), rng, self.disc_adam, cfg.disc_learning_rate
        )
        kl_vec = np.asarray(out["kl_per_dim"], dtype=np.float64)
        entry = {
            "recon": float(out["recon"]),
            "kl": float(kl_vec.sum()),
            "tc": self._tc_value(out),
        }
        entry["total"] = -entry["recon"] + cfg.lambda1 * entry["kl"] + cfg.gamma * entry["tc"]
        self._check_finite(entry)
        return entry

    def joint_step(self, rng: RngStream) -> dict:
        cfg = self.config
        b = cfg.batch_size
        d = cfg.latent_dim
        puzzles = [generate_puzzle(self.space, cfg.l, rng) for _ in range(b)]
        panel_assignments = np.array(
            [p.context() + p.choices for p in puzzles], dtype=np.int64
        )  # (B, 14, num_factors)
        images = self.panel_cache.batch(panel_assignments)  # (B, 14, H, W, C)
        labels = np.array([p.answer_index for p in puzzles], dtype=np.int64)

        flat = images.reshape((-1,) + images.shape[2:])
        enc_out, enc_cache = ad.forward(
            self.model.enc_graph, self.model.enc_params, {"x": flat}, mode="train"
        )
        post = np.asarray(enc_out["posterior"])
        mu = post[:, :d].reshape(b, 14, d)
        lv = post[:, d:].reshape(b, 14, d)

        self.buffer.push(mu.reshape(-1, d))
        o_kn = infer_active_mask(self.buffer.means(), cfg.epsilon)
        if int(o_kn.sum()) < cfg.l:
            # degenerate early batches: fall back to the l highest-variance dims
            variance = self.buffer.means().var(axis=0)
            o_kn = np.zeros(d, dtype=np.uint8)
            o_kn[np.argsort(-variance, kind="stable")[: cfg.l]] = 1
        delta = _delta_kl_batch(mu, lv)
        o_masks = _rule_masks(delta, o_kn, cfg.l).astype(self.vae_cfg.dtype)

        answer_onehot = np.zeros((b, 6, 1), dtype=self.vae_cfg.dtype)
        answer_onehot[np.arange(b), labels, 0] = 1.0
        if cfg.recon_scope == "all":
            target_idx = np.concatenate(
                [np.tile(np.arange(8), (b, 1)), (8 + labels)[:, None]], axis=1
            )
        else:
            target_idx = (8 + labels)[:, None]
        targets = images[np.arange(b)[:, None], target_idx].reshape(
            (-1,) + images.shape[2:]
        )
        noise = rng.normal((b, 3, 3, d)).astype(self.vae_cfg.dtype)

        head = self.model.puzzle_head(scope=cfg.recon_scope)
        out, cache = ad.forward(
            head,
            self.model.merged_params(),
            {
                "posterior": post,
                "o": o_masks.reshape(b, 1, 1, d),
                "answer_onehot": answer_onehot,
                "noise": noise,
                "targets": targets,
            },
            mode="train",
        )
        seeds = {"recon": -1.0, "kl_per_dim": cfg.lambda1 * np.ones(d)}
        if cfg.gamma != 0.0:
            seeds["tc"] = cfg.gamma
        vae_grads, vae_inputs = ad.backward(head, cache, seeds)

        ce_head = self._reasoner_head()
        ce_out, ce_cache = ad.forward(
            ce_head,
            self.reasoner.params,
            {"posterior": post, "labels": labels},
            mode="train",
            rng=rng,
        )
        ce_grads, ce_inputs = ad.backward(
            ce_head, ce_cache, {"ce": float(cfg.reasoner_weight)}
        )

        post_grad = vae_inputs["posterior"]
        if ce_inputs["posterior"] is not None:
            post_grad = post_grad + ce_inputs["posterior"]
        enc_grads, _ = ad.backward(
            self.model.enc_graph, enc_cache, {"posterior": post_grad}
        )

        params = {
            **self.model.enc_params,
            **self.model.dec_params,
            **self.reasoner.params,
        }
        grads = dict(enc_grads)
        grads.update({k: v for k, v in vae_grads.items() if k in self.model.dec_params})
        grads.update(ce_grads)
        adam_step(params, grads, self._joint_adam, cfg.learning_rate)

        self.model.discriminator_step(
            np.asarray(out["z"]), rng, self.disc_adam, cfg.disc_learning_rate
        )

        kl_vec = np.asarray(out["kl_per_dim"], dtype=np.float64)
        logits = np.asarray(ce_out["logits"])
        entry = {
            "recon": float(out["recon"]),
            "kl": float(kl_vec.sum()),
            "tc": self._tc_value(out),
            "ce": float(ce_out["ce"]),
            "acc": float(np.mean(np.argmax(logits, axis=1) == labels)),
        }
        entry["total"] = (
            -entry["recon"]
            + cfg.lambda1 * entry["kl"]
            + cfg.gamma * entry["tc"]
            + cfg.reasoner_weight * entry["ce"]
        )
        self._check_finite(entry)
        return entry

    def _tc_value(self, out) -> float:
        if self.config.tc_estimator == "minibatch":
            from .vae import PosteriorGaussian, tc_minibatch

            z = np.asarray(out["z"], dtype=np.float64)
            mu = np.asarray(out["zhat_mu"], dtype=np.float64).reshape(z.shape)
            lv = np.asarray(out["zhat_lv"], dtype=np.float64).reshape(z.shape)
            return tc_minibatch(z, PosteriorGaussian(mu, lv))
        return float(out["tc"])

    def _check_finite(self, entry: dict) -> None:
        if not math.isfinite(entry["total"]) or abs(entry["total"]) > DIVERGENCE_LIMIT:
            raise RuntimeError(f"training diverged at step {self.step}: {entry}")

    # phases --------------------------------------------------------------------

    def run_warm_start(self, log=None) -> None:
        cfg = self.config
        self._warm_adam = adam_init(
            {**self.model.enc_params, **self.model.dec_params},
            cfg.beta1, cfg.beta2, cfg.adam_eps,
        )
        for i in range(cfg.warm_start_steps):
            entry = self.warm_step(self._warm_rng.child(i))
            if log is not None and (i % 50 == 0 or i == cfg.warm_start_steps - 1):
                log.append({"phase": "warm", "step": i, **entry})

    def run_joint(self, log=None) -> None:
        cfg = self.config
        self._joint_adam = adam_init(
            {
                **self.model.enc_params,
                **self.model.dec_params,
                **self.reasoner.params,
            },
            cfg.beta1, cfg.beta2, cfg.adam_eps,
        )
        for i in range(cfg.joint_steps):
            self.step = i
            entry = self.joint_step(self._joint_rng.child(i))
            if log is not None and (i % 50 == 0 or i == cfg.joint_steps - 1):
                log.append({"phase": "joint", "step": i, **entry})

    # evaluation ------------------------------------------------------------------

    def encode_means(self, assignments: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Posterior means for factor assignments (rendered then encoded)."""
        assignments = np.asarray(assignments)
        outs = []
        for lo in range(0, len(assignments), chunk):
            imgs = self.panel_cache.batch(assignments[lo : lo + chunk])
            outs.append(self.model.encode(imgs).mean)
        return np.concatenate(outs, axis=0)

    def score_puzzles(self, puzzles) -> np.ndarray:
        """Eval-mode logits (n, 6) for a list of puzzles."""
        d = self.config.latent_dim
        images = self.panel_cache.batch(
            np.array([p.context() + p.choices for p in puzzles], dtype=np.int64)
        )
        flat = images.reshape((-1,) + images.shape[2:])
        means = self.model.encode(flat).mean.reshape(len(puzzles), 14, d)
        ce_head = self._reasoner_head()
        out, _ = ad.forward(
            ce_head,
            self.reasoner.params,
            {
                "posterior": np.concatenate([means, np.zeros_like(means)], axis=2).reshape(-1, 2 * d),
                "labels": np.zeros(len(puzzles), dtype=np.int64),
            },
            mode="eval",
        )
        return np.asarray(out["logits"])


def warm_start(config: TrainConfig, log=None) -> Trainer:
    """Train the VAE alone on single images; returns the warm trainer."""
    trainer = Trainer(config)
    trainer.run_warm_start(log)
    return trainer


def train_joint(config: TrainConfig, trainer: Trainer | None = None, log=None) -> Trainer:
    """Joint puzzle training on a (typically warm-started) trainer."""
    if trainer is None:
        trainer = Trainer(config)
        trainer._warm_adam = None
    trainer.run_joint(log)
    return trainer


def run_training(config: TrainConfig, log=None) -> Trainer:
    trainer = warm_start(config, log)
    trainer.run_joint(log)
    return trainer


def evaluate_reasoning(trainer: Trainer, n_puzzles: int, seed: int, batch: int = 100) -> dict:
    """Accuracy on fresh puzzles plus the per-rule-factor breakdown."""
    space = trainer.space
    cfg = trainer.config
    root = RngStream(seed).child(999)
    puzzles = [generate_puzzle(space, cfg.l, root.child(i)) for i in range(n_puzzles)]
    correct = 0
    factor_totals: dict[str, list[int]] = {name: [0, 0] for name in space.names}
    for lo in range(0, n_puzzles, batch):
        chunk = puzzles[lo : lo + batch]
        logits = trainer.score_puzzles(chunk)
        preds = np.argmax(logits, axis=1)
        for p, pred in zip(chunk, preds):
            hit = int(pred) == p.answer_index
            correct += hit
            for k in p.structure.rule_factors:
                name = space.names[k]
                factor_totals[name][0] += hit
                factor_totals[name][1] += 1
    per_factor = {
        name: (hits / total if total else float("nan"))
        for name, (hits, total) in factor_totals.items()
    }
    return {
        "accuracy": correct / n_puzzles,
        "n_puzzles": n_puzzles,
        "seed": seed,
        "per_factor": per_factor,
    }


# checkpoint plumbing -----------------------------------------------------------


def trainer_to_checkpoint(trainer: Trainer, path, step: int | None = None) -> None:
    tensors = {}
    for prefix, params in (
        ("enc", trainer.model.enc_params),
        ("dec", trainer.model.dec_params),
        ("disc", trainer.model.disc_params),
        ("psi", trainer.reasoner.params),
    ):
        for k, v in params.items():
            tensors[f"param.{k}"] = v
    extra = {}
    for label in ("_warm_adam", "_joint_adam"):
        state = getattr(trainer, label, None)
        if state is None:
            continue
        name = label.strip("_")
        for k, v in state.m.items():
            tensors[f"{name}.m.{k}"] = v
        for k, v in state.v.items():
            tensors[f"{name}.v.{k}"] = v
        extra[f"{name}_step"] = state.step
    for k, v in trainer.disc_adam.m.items():
        tensors[f"disc_adam.m.{k}"] = v
    for k, v in trainer.disc_adam.v.items():
        tensors[f"disc_adam.v.{k}"] = v
    extra["disc_adam_step"] = trainer.disc_adam.step
    save_checkpoint(
        path,
        tensors,
        trainer.config.to_dict(),
        step=trainer.step if step is None else step,
        extra=extra,
    )


def trainer_from_checkpoint(path) -> tuple[Trainer, Checkpoint]:
    ckpt = load_checkpoint(path)
    config = TrainConfig.from_dict(ckpt.config)
    trainer = Trainer(config)
    for params in (
        trainer.model.enc_params,
        trainer.model.dec_params,
        trainer.model.disc_params,
        trainer.reasoner.params,
    ):
        for k in params:
            tensor = ckpt.tensors.get(f"param.{k}")
            if tensor is None:
                raise KeyError(f"checkpoint missing parameter {k!r}")
            if tensor.shape != params[k].shape:
                raise ValueError(
                    f"parameter {k!r}: checkpoint shape {tensor.shape} != {params[k].shape}"
                )
            params[k] = tensor.astype(np.float32)
    return trainer, ckpt
