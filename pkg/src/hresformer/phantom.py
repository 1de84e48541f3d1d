"""Procedural ellipsoid phantoms, the HVOL volume format and dataset manifests.

All randomness comes from numpy's Philox generator (a 64-bit counter-based
bit generator) keyed by ``SeedSequence([spec.seed, case_seed])``, so a case
is fully determined by its spec and seed.

HVOL layout (little-endian)::

    b"HVOL" | version u32 | D u32 | H u32 | W u32 | K u32 | case seed u64
    D*H*W float32 intensities | D*H*W uint8 labels
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HVOL"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")


class VolumeFormatError(ValueError):
    pass


class PhantomError(RuntimeError):
    pass


def default_class_means(num_classes: int) -> tuple:
    """0 for background, then alternating signs of growing magnitude: -1.5, +1.5, -3, +3, ...

    Per-volume normalisation followed by LayerNorm keeps relative contrast
    but not absolute level, so classes are separated by sign as well as
    magnitude.
    """
    return (0.0,) + tuple((-1.0) ** c * 1.5 * ((c + 1) // 2) for c in range(1, num_classes))


@dataclass
class PhantomSpec:
    shape: tuple = (16, 64, 64)
    num_classes: int = 3
    organs_per_class: tuple = (1, 2)
    semi_axes_min: tuple = (3.0, 8.0, 8.0)
    semi_axes_max: tuple = (6.0, 16.0, 16.0)
    class_means: tuple = None  # default_class_means(num_classes)
    noise_sigma: float = 0.4
    centered: bool = False
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.class_means is None:
            self.class_means = default_class_means(self.num_classes)
        self.class_means = tuple(float(m) for m in self.class_means)
        if len(self.class_means) != self.num_classes:
            raise ValueError("need one intensity mean per class")
        if any(2 * a + 1 > n for a, n in zip(self.semi_axes_min, self.shape)):
            raise ValueError(f"organs of semi-axes {self.semi_axes_min} cannot fit in {self.shape}")


@dataclass
class LabeledVolume:
    intensity: np.ndarray  # (1, D, H, W) float32
    labels: np.ndarray  # (D, H, W) uint8
    num_classes: int
    case_seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def case_id(self) -> str:
        return f"case_{self.case_seed:06d}"

    def __post_init__(self):
        self.intensity = np.asarray(self.intensity, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.intensity.shape[1:] != self.labels.shape or self.intensity.shape[0] != 1:
            raise ValueError(f"intensity {self.intensity.shape} vs labels {self.labels.shape}")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label value out of range")


def case_rng(spec_seed: int, case_seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([spec_seed, case_seed])))


def ellipsoid_mask(shape, center, semi_axes) -> np.ndarray:
    """Voxels whose centres (integer coordinates) lie inside the ellipsoid."""
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi_axes))
    return r <= 1.0


def generate_phantom(spec: PhantomSpec, case_seed: int, max_tries: int = 1000) -> LabeledVolume:
    rng = case_rng(spec.seed, case_seed)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    lo, hi = np.asarray(spec.semi_axes_min, float), np.asarray(spec.semi_axes_max, float)
    for cls in range(1, spec.num_classes):
        n_organs = int(rng.integers(spec.organs_per_class[0], spec.organs_per_class[1] + 1))
        for _ in range(n_organs):
            for _attempt in range(max_tries):
                axes = rng.uniform(lo, hi)
                axes = np.minimum(axes, (np.asarray(spec.shape) - 1) / 2.0)
                if spec.centered:
                    center = (np.asarray(spec.shape) - 1) / 2.0
                else:
                    center = rng.uniform(axes, np.asarray(spec.shape) - 1 - axes)
                mask = ellipsoid_mask(spec.shape, center, axes)
                if not (labels[mask] != 0).any():
                    labels[mask] = cls
                    break
            else:
                raise PhantomError(f"could not place class {cls} organ after {max_tries} tries")
    means = np.asarray(spec.class_means, dtype=np.float64)
    intensity = means[labels]
    if spec.noise_sigma:
        intensity = intensity + spec.noise_sigma * rng.standard_normal(spec.shape)
    return LabeledVolume(intensity[None].astype(np.float32), labels, spec.num_classes, case_seed)


def normalize(intensity: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per volume."""
    x = np.asarray(intensity, dtype=np.float64)
    std = x.std()
    return ((x - x.mean()) / (std if std > 0 else 1.0)).astype(np.float32)


def augment(vol: np.ndarray, labels: np.ndarray, rng: np.random.Generator, noise: float = 0.1):
    """Random flips along each spatial axis plus additive Gaussian noise."""
    for ax in range(3):
        if rng.random() < 0.5:
            vol = np.flip(vol, axis=ax + 1)
            labels = np.flip(labels, axis=ax)
    vol = vol + noise * rng.standard_normal(vol.shape).astype(np.float32)
    return np.ascontiguousarray(vol, dtype=np.float32), np.ascontiguousarray(labels)


# -- file format -----------------------------------------------------------------
def save_volume(path, vol: LabeledVolume) -> None:
    D, H, W = vol.labels.shape
    header = _HEADER.pack(MAGIC, VERSION, D, H, W, vol.num_classes, vol.case_seed)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vol.intensity.astype("<f4").tobytes())
        fh.write(vol.labels.astype(np.uint8).tobytes())


def load_volume(path) -> LabeledVolume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, D, H, W, K, case_seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    n = D * H * W
    if len(raw) != _HEADER.size + 5 * n:
        raise VolumeFormatError(f"{path}: expected {_HEADER.size + 5 * n} bytes, got {len(raw)}")
    off = _HEADER.size
    intensity = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(1, D, H, W)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off + 4 * n).reshape(D, H, W).copy()
    if n and int(labels.max()) >= K:
        raise VolumeFormatError(f"{path}: label {int(labels.max())} >= K={K}")
    return LabeledVolume(intensity, labels, K, case_seed)


def volume_file_size(shape) -> int:
    return _HEADER.size + 5 * int(np.prod(shape))


# -- splits and manifests ----------------------------------------------------------
def make_split(spec: PhantomSpec, n_train: int, n_val: int, n_test: int, seed: int = 0) -> dict:
    """Distinct case seeds for each split, deterministic in ``seed``."""
    total = n_train + n_val + n_test
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5EED])))
    seeds = [int(s) for s in rng.choice(1_000_000, size=total, replace=False)]
    return {"train": seeds[:n_train], "val": seeds[n_train:n_train + n_val],
            "test": seeds[n_train + n_val:]}


def write_dataset(spec: PhantomSpec, split: dict, out_dir) -> Path:
    """Generate every case to ``out_dir`` and write ``manifest.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in ("train", "val", "test"):
        for s in split.get(name, []):
            vol = generate_phantom(spec, s)
            path = out_dir / f"{vol.case_id}.hvol"
            save_volume(path, vol)
            lines.append(f"{vol.case_id} {path.name} {name}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> dict:
    """``{split: [(case_id, absolute path), ...]}``; paths resolve against the manifest."""
    path = Path(path)
    out: dict = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        case_id, rel, split = line.split()
        p = Path(rel)
        out.setdefault(split, []).append((case_id, p if p.is_absolute() else path.parent / p))
    return out
