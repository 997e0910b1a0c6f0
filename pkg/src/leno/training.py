"""Losses and the two-phase noise-decoupled training procedure.

Phase 1 trains on ``L_side + L_pred`` and alternates SGD steps between the
network weights and the noise weights. Phase 2 freezes the stem and the
noise weights, derives the noise target from the frozen shallow-noise
output and trains the rest on ``L_noise + L_side + L_pred``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .sodnet import SodModel, forward, freeze_for_phase2, noise_gt
from .tensor import Tensor

log = logging.getLogger(__name__)

ALTERNATIONS = ("per_batch", "per_epoch", "none")


@dataclass
class LossConfig:
    lam: float = 0.1
    side_count: int = 3
    use_noise: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs_phase1: int = 20
    epochs_phase2: int = 10
    batch_size: int = 8
    seed: int = 0
    alternation: str = "per_batch"

    def validate(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ConfigError("batch_size must be positive and epoch counts non-negative")
        if self.alternation not in ALTERNATIONS:
            raise ConfigError(f"alternation must be one of {ALTERNATIONS}, got {self.alternation!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# -- losses --------------------------------------------------------------------

def loss_noise(n_est: Tensor, n_gt: Tensor, lam: float = 0.1) -> Tensor:
    """``BCE(N_est, N_gt) + lam * MSE(N_est, N_gt)``."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return T.add(T.bce(n_est, n_gt), T.scale(T.mse(n_est, n_gt), lam))


def loss_side(sides, g: Tensor, side_count: int = 3) -> Tensor:
    if len(sides) != side_count:
        raise ContractError(f"expected {side_count} side outputs, got {len(sides)}")
    total = T.bce(sides[0], g)
    for s in sides[1:]:
        total = T.add(total, T.bce(s, g))
    return total


def loss_pred(s: Tensor, g: Tensor) -> Tensor:
    return T.bce(s, g)


def loss_total(l_noise: Tensor | None, l_side: Tensor, l_pred: Tensor) -> Tensor:
    total = T.add(l_side, l_pred)
    return total if l_noise is None else T.add(l_noise, total)


def noise_target(model_out, n_est_shape) -> Tensor:
    """Normalised noise target resized to the noise-estimate resolution (no gradient)."""
    with T.no_grad():
        gt = noise_gt(model_out.F_tilde)
        return T.upsample_bilinear(gt, *n_est_shape[-2:])


def model_losses(model: SodModel, images, masks, loss_cfg: LossConfig, with_noise: bool) -> dict:
    """Forward a batch and return the loss terms (``l_noise`` is None without supervision)."""
    out = forward(model, images)
    g = Tensor(masks, dtype=model.dtype)
    parts = {"l_side": loss_side(out.sides, g, loss_cfg.side_count), "l_pred": loss_pred(out.S, g), "l_noise": None}
    if with_noise and loss_cfg.use_noise:
        parts["l_noise"] = loss_noise(out.N_est, noise_target(out, out.N_est.shape), loss_cfg.lam)
    parts["l_total"] = loss_total(parts["l_noise"], parts["l_side"], parts["l_pred"])
    return parts


# -- loops ---------------------------------------------------------------------

def _check_clean(dataset):
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    dirty = [s.id for s in dataset if not s.is_clean]
    if dirty:
        raise ContractError(f"training uses clean images only; adversarial samples found: {dirty[:5]}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _run(model, dataset, cfg, loss_cfg, phase, epochs, pick_partition, with_noise, on_log):
    images_all, masks_all = dataset.arrays()
    images_all = images_all.astype(model.dtype)
    masks_all = masks_all.astype(model.dtype)
    counter = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([cfg.seed, phase, epoch])
        for batch, idx in enumerate(_batches(len(dataset), cfg.batch_size, rng)):
            label, params = pick_partition(counter, epoch)
            counter += 1
            if not params:
                continue
            model.set_trainable(params)
            parts = model_losses(model, images_all[idx], masks_all[idx], loss_cfg, with_noise)
            T.backward(parts["l_total"])
            T.sgd_step(params, cfg.lr)
            record = {
                "phase": phase,
                "epoch": epoch,
                "batch": batch,
                "l_noise": None if parts["l_noise"] is None else parts["l_noise"].item(),
                "l_side": parts["l_side"].item(),
                "l_pred": parts["l_pred"].item(),
                "l_total": parts["l_total"].item(),
                "updated_partition": label,
            }
            if on_log is not None:
                on_log(record)
        log.debug("phase %d epoch %d done", phase, epoch)
    model.set_trainable(model.parameters())
    return model


def train_phase1(model: SodModel, dataset, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
                 on_log: Callable[[dict], None] | None = None) -> SodModel:
    """Train on ``L_side + L_pred``, alternating between network and noise weights.

    With ``per_batch`` alternation the global batch counter decides: even
    batches step the network weights, odd batches the noise weights.
    ``per_epoch`` alternates by epoch; ``none`` steps everything each batch.
    """
    cfg.validate()
    _check_clean(dataset)
    loss_cfg = loss_cfg or LossConfig()
    theta_n, theta_w = model.theta_n, model.theta_w

    def pick(counter, epoch):
        if cfg.alternation == "none":
            return "all", theta_n + theta_w
        turn = counter if cfg.alternation == "per_batch" else epoch
        return ("theta_n", theta_n) if turn % 2 == 0 else ("theta_w", theta_w)

    return _run(model, dataset, cfg, loss_cfg, 1, cfg.epochs_phase1, pick, False, on_log)


def train_phase2(model: SodModel, dataset, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
                 on_log: Callable[[dict], None] | None = None) -> SodModel:
    """Freeze stem and noise weights, then train the rest on the full objective."""
    cfg.validate()
    _check_clean(dataset)
    loss_cfg = loss_cfg or LossConfig()
    trainable = freeze_for_phase2(model)
    with_noise = bool(model.noises)
    return _run(model, dataset, cfg, loss_cfg, 2, cfg.epochs_phase2,
                lambda c, e: ("theta_n_unfrozen", trainable), with_noise, on_log)


def train_baseline(model: SodModel, dataset, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
                   on_log: Callable[[dict], None] | None = None) -> SodModel:
    """Single-phase training on ``L_side + L_pred`` with every weight updated each batch."""
    plain = TrainConfig(**{**cfg.to_dict(), "alternation": "none"})
    return train_phase1(model, dataset, plain, loss_cfg, on_log)


def train_leno(model: SodModel, dataset, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
               on_log: Callable[[dict], None] | None = None) -> SodModel:
    train_phase1(model, dataset, cfg, loss_cfg, on_log)
    return train_phase2(model, dataset, cfg, loss_cfg, on_log)
