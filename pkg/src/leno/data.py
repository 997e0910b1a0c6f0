"""Synthetic salient-object datasets, PNG payloads and JSON manifests.

On disk a dataset is a directory::

    manifest.json
    images/<id>.png   8-bit RGB
    masks/<id>.png    8-bit grayscale, 0 or 255

``manifest.json`` holds ``{version, count, samples: [{id, image_file,
mask_file, provenance}], meta}``. Provenance is ``{"kind": "clean"}`` or
``{"kind": "adversarial", "source_id": ..., "attack": {...}}``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError
from .tensor import interp_matrix

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1
FG_MIN, FG_MAX = 0.05, 0.5


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float32 [3,H,W] in [0,1]
    mask: np.ndarray  # float32 [1,H,W] in {0,1}
    provenance: dict = field(default_factory=lambda: {"kind": "clean"})

    @property
    def is_clean(self) -> bool:
        return self.provenance.get("kind") == "clean"


@dataclass
class Dataset:
    samples: list
    root: Path | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def arrays(self, indices=None) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``[N,3,H,W]`` images and ``[N,1,H,W]`` masks."""
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.stack([s.image for s in chosen]), np.stack([s.mask for s in chosen])

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.root, dict(self.meta))


# -- synthetic generation ------------------------------------------------------

def _value_noise(rng, size: int, octaves=(4, 8, 16)) -> np.ndarray:
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for cells in octaves:
        grid = rng.random((cells, cells))
        a = interp_matrix(size, cells)
        out += amp * (a @ grid @ a.T)
        total += amp
        amp *= 0.5
    return out / total


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _shape_mask(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    # centre-biased placement
    cy, cx = np.clip(rng.normal(0.5, 0.12, size=2), 0.25, 0.75) * size
    r = rng.uniform(0.1, 0.24) * size
    angle = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    kind = rng.choice(["ellipse", "rectangle", "blob"])
    aspect = rng.uniform(0.55, 1.0)
    if kind == "ellipse":
        return (u / r) ** 2 + (v / (r * aspect)) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= r) & (np.abs(v) <= r * aspect)
    theta = np.arctan2(v, u)
    radius = np.ones_like(theta)
    for k in (2, 3, 5):
        radius += rng.uniform(0.0, 0.15) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return np.hypot(u, v) <= r * radius


def synth_sample(rng: np.random.Generator, size: int, sample_id: str) -> Sample:
    """One image: muted value-noise background plus 1-3 saturated shaded shapes."""
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    while True:
        mask = np.zeros((size, size), dtype=bool)
        shapes = [_shape_mask(rng, size) for _ in range(rng.integers(1, 4))]
        for m in shapes:
            mask |= m
        frac = mask.mean()
        if FG_MIN <= frac <= FG_MAX:
            break
    gray = 0.25 + 0.4 * _value_noise(rng, size)
    tint = rng.uniform(-0.05, 0.05, size=3)
    image = np.stack([gray + t for t in tint])
    for m in shapes:
        colour = _hsv_to_rgb(rng.random(), rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0))
        gy, gx = rng.normal(size=2)
        shade = 0.8 + 0.2 * np.tanh(gy * (yy - 0.5) * 3 + gx * (xx - 0.5) * 3)
        for ch in range(3):
            image[ch][m] = (colour[ch] * shade)[m]
    image = np.clip(image, 0.0, 1.0)
    # 8-bit grid so in-memory and on-disk copies agree
    image = np.round(image * 255).astype(np.float32) / np.float32(255)
    return Sample(sample_id, image, mask[None].astype(np.float32))


def synth_generate(count: int, size: int, seed: int, out_dir=None, prefix: str = "s") -> Dataset:
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if size <= 0 or size % 8:
        raise ConfigError(f"size must be a positive multiple of 8, got {size}")
    rng = np.random.default_rng(seed)
    width = max(4, len(str(count - 1)))
    samples = [synth_sample(rng, size, f"{prefix}{i:0{width}d}") for i in range(count)]
    ds = Dataset(samples, meta={"generator": "synthetic", "count": count, "size": size, "seed": seed})
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


# -- PNG I/O -------------------------------------------------------------------

def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8)


def save_sample(sample: Sample, directory) -> dict:
    """Write the sample's PNGs under ``directory`` and return its manifest entry."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    image_file = f"images/{sample.id}.png"
    mask_file = f"masks/{sample.id}.png"
    Image.fromarray(to_uint8(sample.image).transpose(1, 2, 0)).save(directory / image_file)
    Image.fromarray((sample.mask[0] >= 0.5).astype(np.uint8) * 255).save(directory / mask_file)
    return {"id": sample.id, "image_file": image_file, "mask_file": mask_file, "provenance": sample.provenance}


def write_manifest(directory, entries: list, meta: dict | None = None) -> None:
    doc = {"version": MANIFEST_VERSION, "count": len(entries), "samples": entries, "meta": meta or {}}
    Path(directory, MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        entries = [save_sample(s, directory) for s in dataset.samples]
        write_manifest(directory, entries, dataset.meta)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {directory}: {exc}") from exc
    dataset.root = directory


def _check_provenance(sid: str, prov) -> dict:
    if not isinstance(prov, dict) or prov.get("kind") not in ("clean", "adversarial"):
        raise DatasetError(f"sample {sid!r}: provenance must have kind 'clean' or 'adversarial', got {prov!r}")
    if prov["kind"] == "adversarial" and "source_id" not in prov:
        raise DatasetError(f"sample {sid!r}: adversarial provenance lacks source_id")
    if prov["kind"] == "clean" and ("attack" in prov or "source_id" in prov):
        raise DatasetError(f"sample {sid!r}: clean provenance carries attack metadata")
    return prov


def load_dataset(directory) -> Dataset:
    """Load a dataset directory in manifest order. Any bad sample fails the whole load."""
    directory = Path(directory)
    path = directory / MANIFEST
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"no {MANIFEST} in {directory}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed {path}: {exc}") from exc
    entries = doc.get("samples") if isinstance(doc, dict) else None
    if not isinstance(entries, list):
        raise DatasetError(f"{path}: 'samples' must be a list")
    if "count" in doc and doc["count"] != len(entries):
        raise DatasetError(f"{path}: count says {doc['count']} but {len(entries)} samples are listed")
    samples, seen = [], set()
    for entry in entries:
        try:
            sid = entry["id"]
            image_file, mask_file = entry["image_file"], entry["mask_file"]
        except (KeyError, TypeError):
            raise DatasetError(f"{path}: malformed sample entry {entry!r}") from None
        if sid in seen:
            raise DatasetError(f"{path}: duplicate sample id {sid!r}")
        seen.add(sid)
        prov = _check_provenance(sid, entry.get("provenance", {"kind": "clean"}))
        try:
            with Image.open(directory / image_file) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / np.float32(255)
            with Image.open(directory / mask_file) as im:
                mask = (np.asarray(im.convert("L")) >= 128).astype(np.float32)[None]
        except (OSError, ValueError) as exc:
            raise DatasetError(f"sample {sid!r}: cannot read payload: {exc}") from exc
        if image.shape[1:] != mask.shape[1:]:
            raise DatasetError(f"sample {sid!r}: image {image.shape[1:]} and mask {mask.shape[1:]} differ")
        samples.append(Sample(sid, np.ascontiguousarray(image), mask, prov))
    return Dataset(samples, directory, doc.get("meta", {}))
