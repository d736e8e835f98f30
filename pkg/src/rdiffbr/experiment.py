"""End-to-end pipelines shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .backbone import BackboneState, init_backbone
from .config import RunConfig
from .data import (AffiliationPartition, Dataset, load_dataset_dir, partition_affiliations,
                   synth_planted_dataset, z_train_val)
from .diffusion import NoiseSchedule, ResidualApproximator, build_schedule, init_approximator
from .evaluation import VARIANTS, EvalReport, InferenceSettings, ablation_wo_r, evaluate, rho_sweep
from .training import EpochStats, JointTrainer, TrainConfig, sub_seed

log = logging.getLogger(__name__)


def replicate_seeds(cfg: RunConfig) -> list[int]:
    base = cfg.training.seed
    return [base + i for i in range(cfg.eval.n_seeds)]


def build_data(cfg: RunConfig, seed: int) -> tuple[Dataset, AffiliationPartition]:
    """Dataset and affiliation partition for one replicate seed."""
    ds = cfg.dataset
    if ds.source == "synthetic":
        return synth_planted_dataset(ds.synthetic, sub_seed(seed, "data"))
    data = load_dataset_dir(ds.source, ds.ratios, sub_seed(seed, "split"))
    return data, partition_affiliations(data.z_full, 10, sub_seed(seed, "partition"))


def schedule_of(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return build_schedule(s.T, s.s, s.alpha_min, s.alpha_max)


def train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    tr = cfg.training
    return TrainConfig(lam=tr.lam, lr=tr.lr, T=cfg.schedule.T, T_prime=tr.T_prime,
                       epochs=tr.epochs, batch_size=tr.batch_size, seed=sub_seed(seed, "train"),
                       detach=tr.detach, learn_delta=tr.learn_delta)


def inference_settings(cfg: RunConfig, seed: int) -> InferenceSettings:
    return InferenceSettings(cfg.training.T_prime, sub_seed(seed, "inference-noise"),
                             cfg.training.deterministic_noise)


def initial_models(cfg: RunConfig, data: Dataset, seed: int, variant: str):
    """Identically seeded starting point for each variant."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    bb = init_backbone(data.n_users, data.n_bundles, data.n_items, cfg.backbone.D,
                       cfg.backbone.scale, sub_seed(seed, "init"), cfg.backbone.l2_reg)
    if variant == "backbone":
        return bb, None
    ap = cfg.approximator
    approx = init_approximator(cfg.backbone.D, ap.depth, ap.hidden_size, ap.d, ap.delta,
                               sub_seed(seed, "init-approx"), ap.anchor_policy,
                               residual=(variant == "rdiffbr"))
    return bb, approx


@dataclass
class TrainedVariant:
    backbone: BackboneState
    approx: ResidualApproximator | None
    history: list[EpochStats]


def make_trainer(cfg: RunConfig, data: Dataset, partition: AffiliationPartition, seed: int,
                 variant: str) -> JointTrainer:
    bb, approx = initial_models(cfg, data, seed, variant)
    return JointTrainer(bb, approx, data, z_train_val(partition), schedule_of(cfg),
                        train_config(cfg, seed))


def train_variant(cfg: RunConfig, data: Dataset, partition: AffiliationPartition, seed: int,
                  variant: str, epochs: int | None = None) -> TrainedVariant:
    tr = make_trainer(cfg, data, partition, seed, variant)
    hist = tr.fit(epochs or cfg.training.epochs)
    log.info("trained %s seed=%d final loss=%.5f", variant, seed, hist[-1].loss_total)
    return TrainedVariant(tr.backbone, tr.approx, hist)


def train_variants(cfg: RunConfig, data, partition, seed: int, variants=VARIANTS) -> dict:
    return {v: train_variant(cfg, data, partition, seed, v) for v in variants}


def sweep_seed(cfg: RunConfig, seed: int, rhos=None, Ks=None, variants=("backbone", "rdiffbr"),
               trained: dict | None = None) -> EvalReport:
    """Train (unless given) and evaluate the requested variants for one seed."""
    data, part = build_data(cfg, seed)
    if trained is None:
        trained = train_variants(cfg, data, part, seed, variants)
    models = {v: (trained[v].backbone, trained[v].approx) for v in variants}
    rhos = list(cfg.eval.rhos if rhos is None else rhos)
    Ks = list(cfg.eval.Ks if Ks is None else Ks)
    infer = inference_settings(cfg, seed)
    if "rdiffbr_wo_r" in variants:
        return ablation_wo_r(models, data, part, schedule_of(cfg), infer, rhos, Ks, seed)
    return rho_sweep(models, data, part, schedule_of(cfg), infer, rhos, Ks, seed)


def validation_metrics(cfg: RunConfig, data: Dataset, part: AffiliationPartition, seed: int,
                       model: TrainedVariant) -> list[dict]:
    """Validation uses the unperturbed training affiliations."""
    return evaluate(model.backbone, model.approx, data, z_train_val(part), schedule_of(cfg),
                    inference_settings(cfg, seed), cfg.eval.Ks, relevant=data.x_val)
