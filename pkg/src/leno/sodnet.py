"""Toy encoder-decoder saliency network with learnable shallow noise.

Layout (input ``3 x H x W``, base width ``C``)::

    stem     conv3x3/2 (3->C), relu, conv3x3 (C->C)            -> F      C  x H/2 x W/2
    noise    maxpool(relu(F + N1 + N2))                         -> F~     C  x H/4 x W/4
    enc1     conv3x3 (C->2C), relu                              -> e1     2C x H/4
    enc2     maxpool, conv3x3 (2C->4C), relu                    -> e2     4C x H/8
    enc3     conv3x3 (4C->8C), relu                             -> e3     8C x H/8
    dec3     conv3x3 (8C->4C), relu          side3              -> d3     4C x H/8
    dec2     conv3x3 (d3+e2 -> 2C), relu     side2              -> d2     2C x H/8
    dec1     conv3x3 (up(d2)+e1 -> C), relu  side1              -> d1     C  x H/4
    head     conv3x3 (up(d1) -> K)                              -> K x H/2
             channel 0 -> sigmoid -> noise estimate
             relu(channels 1..K-1) -> conv1x1 -> up -> sigmoid -> S

With more than one noise layer, extra insertions follow enc1 and enc2 as
``relu(e + N1 + N2)``.
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

INIT_KINDS = ("gaussian", "uniform", "constant")
PLACEMENTS = ("cross", "full", "center")
GAUSSIAN_VARIANCE = 0.734
WEIGHT_INIT = 0.25


@dataclass
class ModelConfig:
    channels: int = 16
    height: int = 64
    width: int = 64
    defense: bool = True
    init_kind: str = "gaussian"
    placement: str = "cross"
    noise_layers: int = 1
    resample: bool = False
    head_channels: int = 8

    def validate(self):
        if self.height % 8 or self.width % 8 or self.height <= 0 or self.width <= 0:
            raise ConfigError(f"height and width must be positive multiples of 8, got {self.height}x{self.width}")
        if self.channels < 4:
            raise ConfigError(f"channels must be >= 4, got {self.channels}")
        if self.head_channels < 2:
            raise ConfigError("head_channels must be >= 2")
        if self.init_kind not in INIT_KINDS:
            raise ConfigError(f"unknown init_kind {self.init_kind!r}; choose from {INIT_KINDS}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement {self.placement!r}; choose from {PLACEMENTS}")
        if self.noise_layers not in (1, 2, 3):
            raise ConfigError(f"noise_layers must be 1, 2 or 3, got {self.noise_layers}")
        if self.noise_layers == 3 and (self.height % 16 or self.width % 16):
            raise ConfigError("noise_layers=3 needs height and width divisible by 16")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def sample_base_noise(shape, init_kind: str, rng: np.random.Generator) -> np.ndarray:
    if init_kind == "gaussian":
        return rng.normal(0.0, np.sqrt(GAUSSIAN_VARIANCE), size=shape)
    if init_kind == "uniform":
        lim = np.sqrt(3.0)  # zero mean, unit variance
        return rng.uniform(-lim, lim, size=shape)
    if init_kind == "constant":
        return np.full(shape, 0.5)
    raise ConfigError(f"unknown init_kind {init_kind!r}")


def cross_pad(noise1: Tensor, noise2: Tensor) -> tuple[Tensor, Tensor]:
    """Place a ``[C,H,W/2]`` and a ``[C,H/2,W]`` block into ``[C,H,W]`` zero canvases.

    The first block becomes a vertical band centred horizontally, the second a
    horizontal band centred vertically; their sum is a cross whose four corner
    blocks are exactly zero.
    """
    c, h, half_w = noise1.shape
    c2, half_h, w = noise2.shape
    if h % 2 or w % 2:
        raise DimensionError(f"cross_pad: H and W must be even, got {h}x{w}")
    if c != c2 or half_w * 2 != w or half_h * 2 != h:
        raise DimensionError(f"cross_pad: incompatible shapes {noise1.shape} and {noise2.shape}")
    p1 = T.place(noise1, h, w, 0, w // 4)
    p2 = T.place(noise2, h, w, h // 4, 0)
    return p1, p2


class ShallowNoise:
    """Fixed base samples scaled by learnable weights and placed on the feature grid."""

    def __init__(self, shape, init_kind: str, placement: str, rng: np.random.Generator, dtype=np.float32):
        c, h, w = shape
        if h % 2 or w % 2:
            raise DimensionError(f"shallow noise needs even spatial dims, got {h}x{w}")
        self.shape = (c, h, w)
        self.init_kind = init_kind
        self.placement = placement
        self._rng = rng
        self._dtype = dtype
        if placement == "cross":
            shapes = [(c, h, w // 2), (c, h // 2, w)]
        elif placement == "full":
            shapes = [(c, h, w)]
        else:
            shapes = [(c, h // 2, w // 2)]
        self.bases = [Tensor(sample_base_noise(s, init_kind, rng), dtype=dtype) for s in shapes]
        self.weights = [Tensor(np.full(s, WEIGHT_INIT), requires_grad=True, dtype=dtype) for s in shapes]
        self._cache = None  # (snapshot of bases and weights, summed placed map) for graph-free forwards

    @property
    def n1(self):
        return self.bases[0]

    @property
    def n2(self):
        return self.bases[1] if len(self.bases) > 1 else None

    @property
    def w1(self):
        return self.weights[0]

    @property
    def w2(self):
        return self.weights[1] if len(self.weights) > 1 else None

    def resample(self):
        for b in self.bases:
            b.data = sample_base_noise(b.shape, self.init_kind, self._rng).astype(self._dtype)

    def placed(self) -> list[Tensor]:
        """The zero-padded noise maps that get added to the features."""
        scaled = [T.mul(n, w) for n, w in zip(self.bases, self.weights)]
        c, h, w = self.shape
        if self.placement == "cross":
            return list(cross_pad(*scaled))
        if self.placement == "full":
            return scaled
        return [T.place(scaled[0], h, w, h // 4, w // 4)]

    def total(self) -> np.ndarray:
        """Sum of the placed maps as a plain array."""
        with T.no_grad():
            return sum(p.data for p in self.placed())

    def _cached_total(self) -> Tensor:
        # values are compared, not identities: sgd_step and tests edit .data in place
        state = [t.data for t in self.bases + self.weights]
        if self._cache is None or not all(np.array_equal(a, b) for a, b in zip(self._cache[0], state)):
            self._cache = ([a.copy() for a in state], Tensor(self.total(), dtype=self._dtype))
        return self._cache[1]

    def add_to(self, f: Tensor) -> Tensor:
        if f.shape[-3:] != self.shape:
            raise DimensionError(f"noise shape {self.shape} does not match feature shape {f.shape}")
        if not T.is_grad_enabled():
            return T.add(f, self._cached_total())
        out = f
        for p in self.placed():
            out = T.add(out, p)
        return out


def shallow_noise_forward(f: Tensor, noise: ShallowNoise | None, enabled: bool = True) -> Tensor:
    """``maxpool(relu(F + N1 + N2))``; with the noise disabled, ``maxpool(relu(F))``."""
    if enabled and noise is not None:
        f = noise.add_to(f)
    return T.maxpool2(T.relu(f))


def noise_gt(f_tilde) -> Tensor:
    """Channel mean of the shallow-noise output, min-max normalised per sample.

    Constant maps normalise to all zeros. Returns ``[1,h,w]`` (or ``[N,1,h,w]``).
    """
    d = f_tilde.data if isinstance(f_tilde, Tensor) else np.asarray(f_tilde)
    m = d.mean(axis=-3, keepdims=True)
    lo = m.min(axis=(-2, -1), keepdims=True)
    hi = m.max(axis=(-2, -1), keepdims=True)
    rng = hi - lo
    safe = np.where(rng > 0, rng, 1)
    out = np.where(rng > 0, (m - lo) / safe, 0)
    return Tensor(out.astype(d.dtype))


class Conv:
    def __init__(self, cin: int, cout: int, k: int, stride: int, rng: np.random.Generator, dtype):
        fan_in = cin * k * k
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k)),
                             requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        k = self.weight.shape[-1]
        return T.conv2d(x, self.weight, self.bias, self.stride, k // 2)


class ForwardOutput(NamedTuple):
    S: Tensor
    sides: list
    N_est: Tensor
    F_tilde: Tensor


_LAYERS = (
    ("stem1", lambda c, k: (3, c, 3, 2)),
    ("stem2", lambda c, k: (c, c, 3, 1)),
    ("enc1", lambda c, k: (c, 2 * c, 3, 1)),
    ("enc2", lambda c, k: (2 * c, 4 * c, 3, 1)),
    ("enc3", lambda c, k: (4 * c, 8 * c, 3, 1)),
    ("dec3", lambda c, k: (8 * c, 4 * c, 3, 1)),
    ("dec2", lambda c, k: (4 * c, 2 * c, 3, 1)),
    ("dec1", lambda c, k: (2 * c, c, 3, 1)),
    ("side3", lambda c, k: (4 * c, 1, 1, 1)),
    ("side2", lambda c, k: (2 * c, 1, 1, 1)),
    ("side1", lambda c, k: (c, 1, 1, 1)),
    ("head", lambda c, k: (c, k, 3, 1)),
    ("fuse", lambda c, k: (k - 1, 1, 1, 1)),
)
STEM = ("stem1", "stem2")


class SodModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config.validate()
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        # separate streams: conv init is identical with and without the defense
        net_rng = np.random.default_rng([seed, 0])
        noise_rng = np.random.default_rng([seed, 1])
        c, k = config.channels, config.head_channels
        self.convs = {name: Conv(*spec(c, k), net_rng, self.dtype) for name, spec in _LAYERS}
        self.noises: list[ShallowNoise] = []
        if config.defense:
            h, w = config.height, config.width
            grids = [(c, h // 2, w // 2), (2 * c, h // 4, w // 4), (4 * c, h // 8, w // 8)]
            for shape in grids[: config.noise_layers]:
                self.noises.append(ShallowNoise(shape, config.init_kind, config.placement, noise_rng, self.dtype))

    # -- parameter bookkeeping ---------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, conv in self.convs.items():
            out[f"{name}.weight"] = conv.weight
            out[f"{name}.bias"] = conv.bias
        for i, nz in enumerate(self.noises):
            for j, w in enumerate(nz.weights, 1):
                out[f"noise{i}.w{j}"] = w
        return out

    def named_buffers(self) -> dict[str, Tensor]:
        return {f"noise{i}.n{j}": b for i, nz in enumerate(self.noises) for j, b in enumerate(nz.bases, 1)}

    def state(self) -> dict[str, Tensor]:
        return {**self.named_parameters(), **self.named_buffers()}

    @property
    def theta_n(self) -> list[Tensor]:
        return [t for conv in self.convs.values() for t in (conv.weight, conv.bias)]

    @property
    def theta_w(self) -> list[Tensor]:
        return [w for nz in self.noises for w in nz.weights]

    @property
    def stem_params(self) -> list[Tensor]:
        return [t for name in STEM for t in (self.convs[name].weight, self.convs[name].bias)]

    def parameters(self) -> list[Tensor]:
        return self.theta_n + self.theta_w

    def set_trainable(self, params) -> None:
        """Make exactly ``params`` require gradients."""
        keep = {id(p) for p in params}
        for p in self.parameters():
            p.requires_grad = id(p) in keep
            p.grad = None

    @contextlib.contextmanager
    def frozen(self):
        """Treat every weight as a constant inside the block (for input-gradient attacks)."""
        prev = [p.requires_grad for p in self.parameters()]
        for p in self.parameters():
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(self.parameters(), prev):
                p.requires_grad = flag

    def __call__(self, image, record_graph: bool = True) -> ForwardOutput:
        return forward(self, image, record_graph)


def build_model(config: ModelConfig | dict, seed: int = 0, dtype=np.float32) -> SodModel:
    if isinstance(config, dict):
        config = ModelConfig.from_dict(config)
    return SodModel(config, seed=seed, dtype=dtype)


def _forward(model: SodModel, x: Tensor) -> ForwardOutput:
    cv = model.convs
    h, w = x.shape[-2:]
    noises = model.noises
    if model.config.resample:
        for nz in noises:
            nz.resample()

    f = cv["stem2"](T.relu(cv["stem1"](x)))
    f_tilde = shallow_noise_forward(f, noises[0] if noises else None)
    e1 = T.relu(cv["enc1"](f_tilde))
    if len(noises) > 1:
        e1 = T.relu(noises[1].add_to(e1))
    e2 = T.relu(cv["enc2"](T.maxpool2(e1)))
    if len(noises) > 2:
        e2 = T.relu(noises[2].add_to(e2))
    e3 = T.relu(cv["enc3"](e2))

    d3 = T.relu(cv["dec3"](e3))
    d2 = T.relu(cv["dec2"](T.add(d3, e2)))
    d1 = T.relu(cv["dec1"](T.add(T.upsample_bilinear(d2, *e1.shape[-2:]), e1)))
    sides = [
        T.sigmoid(T.upsample_bilinear(cv[name](d), h, w))
        for name, d in (("side1", d1), ("side2", d2), ("side3", d3))
    ]
    feat = cv["head"](T.upsample_bilinear(d1, *f.shape[-2:]))
    k = feat.shape[-3]
    n_est = T.sigmoid(T.channels(feat, 0, 1))
    s = T.sigmoid(T.upsample_bilinear(cv["fuse"](T.relu(T.channels(feat, 1, k))), h, w))
    return ForwardOutput(s, sides, n_est, f_tilde)


def forward(model: SodModel, image, record_graph: bool = True) -> ForwardOutput:
    """Run the network on ``[3,H,W]`` or ``[N,3,H,W]``.

    With ``record_graph=False`` no autodiff bookkeeping happens.
    """
    x = T.as_tensor(image, dtype=model.dtype)
    if x.data.ndim not in (3, 4) or x.shape[-3] != 3:
        raise DimensionError(f"expected an RGB image [3,H,W] or batch [N,3,H,W], got {x.shape}")
    if x.shape[-2] % 8 or x.shape[-1] % 8:
        raise DimensionError(f"image size {x.shape[-2:]} must be divisible by 8")
    if record_graph:
        return _forward(model, x)
    with T.no_grad():
        return _forward(model, x)


def freeze_for_phase2(model: SodModel) -> list[Tensor]:
    """Freeze the stem and all noise weights; return the remaining trainable set."""
    stem = {id(p) for p in model.stem_params}
    trainable = [p for p in model.theta_n if id(p) not in stem]
    model.set_trainable(trainable)
    return trainable
