"""Synthetic four-modality phantoms whose tumour is visible only after fusion.

Each sample draws two ellipses.  Ellipse A carries lesion contrast in the
T1 group (T1, T1ce), ellipse B in the T2 group (T2, Flair), and the tumour
mask is their intersection.  Neither group alone determines the mask.

Randomness comes from Philox4x64-10 keyed by ``(seed, index)``, so every
sample is reproducible on its own and generation order does not matter.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataFormatError, GenerationError
from .formats import read_tensor, write_tensor
from .model import MODALITIES, ModelVariant


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    a: float  # semi-axis along the rotated x direction
    b: float
    theta: float

    def contains(self, size: int) -> np.ndarray:
        """Boolean raster; a pixel is inside when its centre is."""
        coords = np.arange(size, dtype=np.float64) + 0.5
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        dy, dx = yy - self.cy, xx - self.cx
        ct, st = np.cos(self.theta), np.sin(self.theta)
        u = dx * ct + dy * st
        v = -dx * st + dy * ct
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


@dataclass(frozen=True)
class ModalityProfile:
    base: float
    gain: float
    noise: float


def _default_profiles() -> dict:
    # T2 group gets the higher lesion contrast-to-noise ratio
    return {
        "t1": ModalityProfile(0.55, -0.20, 0.10),
        "t1ce": ModalityProfile(0.40, 0.25, 0.10),
        "t2": ModalityProfile(0.35, 0.40, 0.08),
        "flair": ModalityProfile(0.40, 0.35, 0.08),
    }


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    center_range: tuple[float, float] = (22.0, 42.0)
    axis_range: tuple[float, float] = (10.0, 18.0)
    offset_range: tuple[float, float] = (7.0, 15.0)
    min_intersection: int = 120
    max_retries: int = 100
    profiles: dict = field(default_factory=_default_profiles)
    seed: int = 42
    fixed_a: Optional[Ellipse] = None  # test hook: pin ellipse A

    def __post_init__(self):
        if self.image_size <= 0:
            raise ConfigError("image_size must be positive")
        for name in ("center_range", "axis_range", "offset_range"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.axis_range[0] <= 0:
            raise ConfigError("semi-axes must be positive")
        if set(self.profiles) != set(MODALITIES):
            raise ConfigError(f"profiles must cover exactly {MODALITIES}")
        if self.min_intersection < 1 or self.max_retries < 1:
            raise ConfigError("min_intersection and max_retries must be at least 1")

    def replace(self, **changes) -> "PhantomSpec":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        d = {
            "image_size": self.image_size,
            "center_range": list(self.center_range),
            "axis_range": list(self.axis_range),
            "offset_range": list(self.offset_range),
            "min_intersection": self.min_intersection,
            "max_retries": self.max_retries,
            "profiles": {m: dataclasses.asdict(p) for m, p in self.profiles.items()},
            "seed": self.seed,
        }
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)} - {"fixed_a"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phantom spec keys: {sorted(unknown)}")
        for key in ("center_range", "axis_range", "offset_range"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        if "profiles" in d:
            profiles = _default_profiles()
            for m, p in d["profiles"].items():
                if m not in profiles:
                    raise ConfigError(f"unknown modality {m!r} in profiles")
                profiles[m] = ModalityProfile(**p)
            d["profiles"] = profiles
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class Sample:
    id: str
    t1: np.ndarray
    t1ce: np.ndarray
    t2: np.ndarray
    flair: np.ndarray
    mask: np.ndarray
    ellipse_a: Optional[Ellipse] = None
    ellipse_b: Optional[Ellipse] = None

    def modality(self, name: str) -> np.ndarray:
        return getattr(self, name)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), index]))


def _draw_ellipse(rng, spec: PhantomSpec, center=None) -> Ellipse:
    if center is None:
        cy, cx = rng.uniform(*spec.center_range, size=2)
    else:
        cy, cx = center
    a, b = rng.uniform(*spec.axis_range, size=2)
    theta = rng.uniform(0.0, np.pi)
    return Ellipse(float(cy), float(cx), float(a), float(b), float(theta))


def generate_sample(spec: PhantomSpec, index: int) -> Sample:
    rng = sample_rng(spec.seed, index)
    S = spec.image_size
    for _ in range(spec.max_retries):
        ea = spec.fixed_a if spec.fixed_a is not None else _draw_ellipse(rng, spec)
        r = rng.uniform(*spec.offset_range)
        phi = rng.uniform(0.0, 2 * np.pi)
        eb = _draw_ellipse(rng, spec, (ea.cy + r * np.sin(phi), ea.cx + r * np.cos(phi)))
        in_a, in_b = ea.contains(S), eb.contains(S)
        mask = in_a & in_b
        if mask.sum() >= spec.min_intersection:
            break
    else:
        raise GenerationError(
            f"sample {index}: no ellipse pair reached min_intersection={spec.min_intersection} "
            f"within max_retries={spec.max_retries}")
    images = {}
    for m in MODALITIES:
        prof = spec.profiles[m]
        region = in_a if m in ("t1", "t1ce") else in_b
        img = np.full((S, S), prof.base, dtype=np.float64) + prof.gain * region
        if prof.noise > 0:
            img = img + rng.normal(0.0, prof.noise, size=(S, S))
        images[m] = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(f"s{index:05d}", images["t1"], images["t1ce"], images["t2"], images["flair"],
                  mask.astype(np.float32), ea, eb)


MANIFEST_NAME = "manifest.json"


def build_dataset(spec: PhantomSpec, n_train: int, n_test: int, out_dir) -> Path:
    """Write every sample as MMRI tensors plus a JSON manifest; returns its path."""
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train and n_test must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples, train, test = [], [], []
    for index in range(n_train + n_test):
        s = generate_sample(spec, index)
        entry = {"id": s.id}
        for key in (*MODALITIES, "mask"):
            rel = f"{s.id}_{key}.mmri"
            write_tensor(out / rel, getattr(s, key))
            entry[key] = rel
        samples.append(entry)
        (train if index < n_train else test).append(s.id)
    manifest = {"image_size": spec.image_size, "samples": samples,
                "split": {"train": train, "test": test}}
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def dataset_checksum(manifest_path) -> str:
    """SHA-256 over the manifest and every referenced file, in manifest order."""
    path = Path(manifest_path)
    h = hashlib.sha256(path.read_bytes())
    for entry in json.loads(path.read_text())["samples"]:
        for key in (*MODALITIES, "mask"):
            h.update((path.parent / entry[key]).read_bytes())
    return h.hexdigest()


class Dataset:
    """Manifest-backed sample store; files are read once and cached."""

    def __init__(self, manifest_path):
        self.path = Path(manifest_path)
        try:
            doc = json.loads(self.path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"cannot read manifest {self.path}: {exc}") from None
        try:
            self.image_size = int(doc["image_size"])
            self.entries = {e["id"]: e for e in doc["samples"]}
            self.split = {k: list(v) for k, v in doc["split"].items()}
        except (KeyError, TypeError) as exc:
            raise DataFormatError(f"malformed manifest {self.path}: {exc}") from None
        self._cache: dict[str, dict[str, np.ndarray]] = {}

    def ids(self, split: str) -> list[str]:
        return list(self.split.get(split, []))

    def arrays(self, sample_id: str) -> dict[str, np.ndarray]:
        if sample_id not in self._cache:
            if sample_id not in self.entries:
                raise DataFormatError(f"sample {sample_id!r} not in manifest")
            e = self.entries[sample_id]
            self._cache[sample_id] = {
                key: read_tensor(self.path.parent / e[key]) for key in (*MODALITIES, "mask")}
        return self._cache[sample_id]


def load_batch(dataset, ids: Sequence[str], variant) -> tuple[tuple[np.ndarray, ...], np.ndarray]:
    """Group modalities for ``variant``; returns (inputs, masks[B, S, S])."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    if isinstance(variant, str):
        variant = ModelVariant.parse(variant)
    rows = [dataset.arrays(i) for i in ids]
    inputs = tuple(
        np.stack([np.stack([r[m] for m in group]) for r in rows]).astype(np.float32)
        for group in variant.input_groups)
    masks = np.stack([r["mask"] for r in rows]).astype(np.float32)
    return inputs, masks
