"""L-infinity bounded FGSM, PGD and ROSA-style pixel-set attacks.

Attacks take either a :class:`SodModel` or any callable mapping an input
tensor to a saliency tensor in (0, 1). Model weights are treated as
constants for the duration of the call. Inputs may be a single ``[3,H,W]``
image or a batch; batched images are attacked independently.
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import AttackError, ConfigError
from .tensor import Tensor

DEFAULT_EPSILON = 20 / 255
DEFAULT_STEPS = {"fgsm": 0.3, "pgd": 0.04, "rosa": 0.1}
DEFAULT_ITERS = {"fgsm": 1, "pgd": 10, "rosa": 30}
KINDS = tuple(DEFAULT_STEPS)
GRAD_FLOOR = 1e-12


@dataclass
class AttackSpec:
    kind: str = "pgd"
    epsilon: float = DEFAULT_EPSILON
    step: float | None = None
    max_iters: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; choose from {KINDS}")
        if not 0 <= self.epsilon <= 1:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.step is None:
            self.step = min(DEFAULT_STEPS["fgsm"], self.epsilon) if self.kind == "fgsm" else DEFAULT_STEPS[self.kind]
        if self.max_iters is None:
            self.max_iters = DEFAULT_ITERS[self.kind]
        if self.step < 0:
            raise ConfigError(f"step must be non-negative, got {self.step}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be positive, got {self.max_iters}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "epsilon": self.epsilon, "step": self.step, "iters": self.max_iters}


@dataclass
class AdvResult:
    adv_image: np.ndarray
    linf: float
    iters_run: int
    loss_trace: list = field(default_factory=list)
    step_linf: list = field(default_factory=list)


def _predictor(model) -> Callable[[Tensor], Tensor]:
    from .sodnet import SodModel, forward

    if isinstance(model, SodModel):
        return lambda x: forward(model, x).S
    return model


@contextlib.contextmanager
def _weights_frozen(model):
    from .sodnet import SodModel

    if isinstance(model, SodModel):
        with model.frozen():
            yield
    else:
        yield


def bce_loss(s: Tensor, g: Tensor) -> Tensor:
    return T.bce(s, g)


def project(z: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto ``{|z - x|_inf <= epsilon} ∩ [0, 1]``."""
    return np.clip(np.clip(z, x - epsilon, x + epsilon), 0.0, 1.0)


def _input_grad(predict, x: np.ndarray, target: Tensor, loss_fn) -> tuple[np.ndarray, float]:
    xt = Tensor(x.copy(), requires_grad=True)
    loss = loss_fn(predict(xt), target)
    T.backward(loss)
    g = xt.grad if xt.grad is not None else np.zeros_like(x)
    if not np.all(np.isfinite(g)):
        raise AttackError("input gradient is not finite")
    return g, float(loss.data)


def _results(x, adv, iters, traces, norms) -> list[AdvResult] | AdvResult:
    single = x.ndim == 3
    xs, advs = (x[None], adv[None]) if single else (x, adv)
    out = []
    for i in range(len(xs)):
        linf = float(np.abs(advs[i].astype(np.float64) - xs[i]).max())
        out.append(AdvResult(advs[i], linf, int(iters[i]), list(traces[i]), list(norms[i])))
    return out[0] if single else out


def _prepare(model, image, mask_gt):
    predict = _predictor(model)
    dtype = getattr(model, "dtype", None) or np.asarray(image).dtype
    x = np.asarray(image, dtype=dtype)
    if x.dtype.kind != "f":
        x = x.astype(np.float32)
    g = Tensor(np.asarray(mask_gt, dtype=x.dtype))
    return predict, x, g


def _signed_steps(model, image, mask_gt, spec: AttackSpec, iters: int, loss_fn) -> AdvResult | list:
    predict, x, g = _prepare(model, image, mask_gt)
    n = 1 if x.ndim == 3 else len(x)
    eps = x.dtype.type(spec.epsilon)
    step = x.dtype.type(spec.step)
    adv = x.copy()
    traces = [[] for _ in range(n)]
    with _weights_frozen(model):
        for _ in range(iters):
            grad, loss = _input_grad(predict, adv, g, loss_fn)
            for t in traces:
                t.append(loss)
            adv = project(adv + step * np.sign(grad), x, eps)
    return _results(x, adv, [iters] * n, traces, [[] for _ in range(n)])


def fgsm(model, image, mask_gt, spec: AttackSpec | None = None, loss_fn=bce_loss):
    """One signed-gradient step of size ``spec.step``, then projection onto the epsilon ball."""
    spec = spec or AttackSpec("fgsm")
    return _signed_steps(model, image, mask_gt, spec, 1, loss_fn)


def pgd(model, image, mask_gt, spec: AttackSpec | None = None, loss_fn=bce_loss):
    """``spec.max_iters`` signed steps from the clean image, projecting after each one."""
    spec = spec or AttackSpec("pgd")
    return _signed_steps(model, image, mask_gt, spec, spec.max_iters, loss_fn)


def rosa_attack(model, image, mask_gt, spec: AttackSpec | None = None, threshold: float = 0.5):
    """Push still-correct pixels toward the wrong class with L-inf normalised steps.

    Per iteration the direction is the input gradient of
    ``sum_{i correct} (g_{i,1-y_i} - g_{i,y_i})`` with ``g_{i,1} = S_i`` and
    ``g_{i,0} = 1 - S_i``, rescaled to have max-norm ``spec.step``. An image
    stops early once no pixel is correct or the gradient vanishes; the final
    iterate is projected onto the epsilon ball and [0, 1].
    """
    spec = spec or AttackSpec("rosa")
    predict, x, g = _prepare(model, image, mask_gt)
    single = x.ndim == 3
    xs = x[None] if single else x
    ys = (g.data[None] if single else g.data) >= 0.5
    n = len(xs)
    alpha = spec.step
    adv = xs.copy()
    active = np.ones(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    traces = [[] for _ in range(n)]
    norms = [[] for _ in range(n)]
    # d/dS of (g_{1-y} - g_y) is +2 for non-salient and -2 for salient pixels
    sign = np.where(ys, -2.0, 2.0).astype(x.dtype)
    with _weights_frozen(model):
        for _ in range(spec.max_iters):
            if not active.any():
                break
            xt = Tensor(adv[active].copy(), requires_grad=True)
            s = predict(xt)
            correct = (s.data >= threshold) == ys[active]
            weights = np.where(correct, sign[active], 0).astype(x.dtype)
            objective = T.sum_all(T.mul(s, Tensor(weights)))
            T.backward(objective)
            grad = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
            if not np.all(np.isfinite(grad)):
                raise AttackError("input gradient is not finite")
            for j, i in enumerate(np.flatnonzero(active)):
                n_correct = int(correct[j].sum())
                peak = float(np.abs(grad[j]).max())
                if n_correct == 0 or peak < GRAD_FLOOR:
                    active[i] = False
                    continue
                p = alpha * (grad[j].astype(np.float64) / peak)
                adv[i] = (adv[i] + p).astype(x.dtype)
                norms[i].append(float(np.abs(p).max()))
                traces[i].append(float(n_correct))
                iters[i] += 1
    adv = project(adv, xs, x.dtype.type(spec.epsilon))
    return _results(x, adv[0] if single else adv, iters, traces, norms)


ATTACKS = {"fgsm": fgsm, "pgd": pgd, "rosa": rosa_attack}


def run_attack(model, image, mask_gt, spec: AttackSpec):
    return ATTACKS[spec.kind](model, image, mask_gt, spec)


def attack_dataset(model, dataset, spec: AttackSpec, out_dir=None, batch_size: int = 8,
                   source_checksum: str | None = None):
    """Attack every sample and (optionally) write an adversarial dataset.

    Returns ``(dataset, errors)``; a sample whose PNG cannot be written is
    reported in ``errors`` and the rest of the batch continues.
    """
    from .checkpoint import model_checksum
    from .data import Dataset, Sample, save_sample, write_manifest

    if source_checksum is None and hasattr(model, "state"):
        source_checksum = model_checksum(model)
    meta = {"attack": spec.to_dict(), "source_model_checksum": source_checksum,
            "source_dataset": str(dataset.root) if dataset.root else None}
    out_samples, entries, errors = [], [], []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        masks = np.stack([s.mask for s in chunk])
        results = run_attack(model, images, masks, spec)
        for src, res in zip(chunk, results):
            if res.linf > spec.epsilon + 1e-6 or res.adv_image.min() < 0 or res.adv_image.max() > 1:
                raise AttackError(f"sample {src.id}: adversarial image violates its bounds")
            prov = {"kind": "adversarial", "source_id": src.id,
                    "attack": {**spec.to_dict(), "source_model_checksum": source_checksum}}
            sample = Sample(src.id, np.asarray(res.adv_image, dtype=np.float32), src.mask.copy(), prov)
            if out_dir is not None:
                try:
                    entries.append(save_sample(sample, out_dir))
                except OSError as exc:
                    errors.append({"id": src.id, "error": str(exc)})
                    continue
            out_samples.append(sample)
    if out_dir is not None:
        write_manifest(out_dir, entries, meta)
    return Dataset(out_samples, Path(out_dir) if out_dir is not None else None, meta), errors
