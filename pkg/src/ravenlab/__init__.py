"""Desk-scale laboratory for Raven-style matrix puzzles.

Procedural puzzle generation over quantized factor grids, a deterministic
rasterizer, a small reverse-mode gradient engine, a VAE with masked
row-consistency inference, a dispersion-feature reasoner, disentanglement
metrics, and the training harness that ties them together.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .inference import (
    AttributeMasks,
    DivergenceProfile,
    LatentTensor,
    delta_kl_profile,
    factor_consistency,
    infer_active_mask,
    infer_rule_mask,
    infer_z_prime,
)
from .metrics import MetricReport, ProbeSet, dci_d, evaluate_metrics, factor_vae_score, mig, sap
from .oracle import brute_force_solve, oracle_encode, oracle_encode_batch, variance_rule_solve
from .puzzles import (
    Relation,
    RpmInstance,
    Structure,
    generate_choices,
    generate_matrix,
    generate_puzzle,
    sample_structure,
    validate_puzzle,
)
from .render import Palette, render, render_grid
from .rng import RngStream
from .space import (
    FactorDef,
    FactorSpace,
    assignment_index,
    build_space,
    index_to_assignment,
    sample_assignment,
)
from .train import TrainConfig, Trainer, desk_config, evaluate_reasoning, run_training, warm_start
from .vae import PosteriorGaussian, VaeConfig, VaeModel, kl_to_prior, reparameterize

__version__ = "0.1.0"
