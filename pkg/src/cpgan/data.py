"""Synthetic lesion images and the on-disk dataset format.

Each grid file starts with an ASCII header line ``CPGD <H> <W> <kind>`` and is
followed by ``H*W`` little-endian float32 values in row-major order. A dataset
directory holds ``<id>.img``, optional ``<id>.msk`` and a ``manifest.txt``
with one ``<id> <split>`` line per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

SPLIT_PROPORTIONS = (139, 40, 60)  # train / val / test
MAX_LESION_FRACTION = 0.2


class DataFormatError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray | None
    id: str
    labeled: bool = True

    def __post_init__(self):
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")
            if not np.all((self.mask == 0) | (self.mask == 1)):
                raise ValueError(f"{self.id}: mask is not binary")
        if self.labeled and self.mask is None:
            raise ValueError(f"{self.id}: labeled sample without a mask")


@dataclass(frozen=True)
class SynthConfig:
    count: int = 200
    size: int = 64
    lesions: tuple[int, int] = (0, 3)
    radius: tuple[float, float] | None = None  # default [2, size / 6]
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.size <= 0 or self.size % 16:
            raise ValueError(f"size must be a positive multiple of 16, got {self.size}")
        lo, hi = self.lesions
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid lesion count range {self.lesions}")
        rlo, rhi = self.radius_range
        if rlo <= 0 or rhi < rlo:
            raise ValueError(f"invalid lesion radius range {self.radius_range}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    @property
    def radius_range(self) -> tuple[float, float]:
        return self.radius if self.radius is not None else (2.0, self.size / 6)


def brain_region(size: int, center, axes) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return ((yy - center[0]) / axes[0]) ** 2 + ((xx - center[1]) / axes[1]) ** 2 < 1.0


def _blob(size, rng, cy, cx, r):
    """Ellipse with a low-order angular perturbation of its radius."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    rad = np.hypot(dy * rng.uniform(0.8, 1.2), dx)
    wobble = 1.0
    for k in (2, 3):
        wobble = wobble + rng.uniform(-0.15, 0.15) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return rad < r * wobble


def _one_sample(cfg: SynthConfig, rng: np.random.Generator, idx: int) -> tuple[Sample, np.ndarray]:
    s = cfg.size
    center = (s / 2 + rng.uniform(-0.05, 0.05) * s, s / 2 + rng.uniform(-0.05, 0.05) * s)
    axes = (rng.uniform(0.36, 0.44) * s, rng.uniform(0.32, 0.42) * s)
    brain = brain_region(s, center, axes)
    # lesions stay clear of the brain boundary
    interior = ndimage.binary_erosion(brain, iterations=2)

    mask = np.zeros((s, s), dtype=bool)
    n_les = int(rng.integers(cfg.lesions[0], cfg.lesions[1] + 1))
    rlo, rhi = cfg.radius_range
    ys, xs = np.nonzero(interior)
    for _ in range(n_les):
        if len(ys) == 0:
            break
        for _attempt in range(20):
            j = int(rng.integers(len(ys)))
            blob = _blob(s, rng, ys[j] + 0.5, xs[j] + 0.5, rng.uniform(rlo, rhi)) & interior
            if blob.any() and (mask | blob).mean() <= MAX_LESION_FRACTION:
                mask |= blob
                break

    image = np.full((s, s), 0.05)
    image[brain] = rng.uniform(0.55, 0.7)
    image = ndimage.gaussian_filter(image, 0.7)
    fuzzy = ndimage.gaussian_filter(mask.astype(np.float64), rng.uniform(0.6, 1.2))
    image = image - rng.uniform(0.3, 0.4) * fuzzy
    image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    sample = Sample(image=image, mask=mask.astype(np.float32), id=f"s{idx:05d}", labeled=True)
    return sample, brain


def generate_synthetic(cfg: SynthConfig, return_brain: bool = False):
    """Deterministic list of synthetic samples; optionally also each brain mask."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    samples, brains = [], []
    for i in range(cfg.count):
        s, b = _one_sample(cfg, rng, i)
        samples.append(s)
        brains.append(b)
    return (samples, brains) if return_brain else samples


def rotate_sample(s: Sample) -> Sample:
    image = np.ascontiguousarray(s.image[::-1, ::-1])
    mask = None if s.mask is None else np.ascontiguousarray(s.mask[::-1, ::-1])
    return Sample(image=image, mask=mask, id=s.id + "+r180", labeled=s.labeled)


def split_counts(n: int) -> tuple[int, int, int]:
    total = sum(SPLIT_PROPORTIONS)
    n_train = int(round(n * SPLIT_PROPORTIONS[0] / total))
    n_val = int(round(n * SPLIT_PROPORTIONS[1] / total))
    return n_train, n_val, n - n_train - n_val


def split_dataset(samples: list[Sample], seed: int = 0) -> dict[str, list[Sample]]:
    """Disjoint train/val/test split in 139:40:60 proportion."""
    n_train, n_val, _ = split_counts(len(samples))
    perm = np.random.default_rng(seed).permutation(len(samples))
    parts = {"train": perm[:n_train], "val": perm[n_train : n_train + n_val], "test": perm[n_train + n_val :]}
    return {k: [samples[i] for i in sorted(v)] for k, v in parts.items()}


# ---------------------------------------------------------------------------
# persistence


def write_grid(path: Path, grid: np.ndarray, kind: str) -> None:
    h, w = grid.shape
    header = f"CPGD {h} {w} {kind}\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_grid(path: Path, kind: str | None = None) -> np.ndarray:
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    if nl < 0:
        raise DataFormatError(f"{path}: missing header line (byte offset {len(buf)})")
    parts = buf[:nl].split()
    if len(parts) != 4 or parts[0] != b"CPGD":
        raise DataFormatError(f"{path}: malformed header at byte offset 0")
    try:
        h, w = int(parts[1]), int(parts[2])
    except ValueError:
        raise DataFormatError(f"{path}: non-integer extents in header at byte offset 5") from None
    got_kind = parts[3].decode("ascii", "replace")
    if got_kind not in ("image", "mask") or (kind is not None and got_kind != kind):
        raise DataFormatError(f"{path}: unexpected kind {got_kind!r} at byte offset {buf.find(parts[3])}")
    start = nl + 1
    need = 4 * h * w
    have = len(buf) - start
    if have < need:
        raise DataFormatError(f"{path}: truncated payload, expected {need} bytes from offset {start}, "
                              f"data ends at byte offset {len(buf)}")
    if have > need:
        raise DataFormatError(f"{path}: {have - need} trailing bytes after payload at byte offset {start + need}")
    return np.frombuffer(buf, dtype="<f4", offset=start, count=h * w).reshape(h, w).astype(np.float32)


def save_dataset(samples: list[Sample], directory, splits: dict[str, str] | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        write_grid(d / f"{s.id}.img", s.image, "image")
        if s.mask is not None and s.labeled:
            write_grid(d / f"{s.id}.msk", s.mask, "mask")
        lines.append(f"{s.id} {(splits or {}).get(s.id, 'train')}\n")
    (d / "manifest.txt").write_text("".join(lines))


def read_manifest(directory) -> list[tuple[str, str]]:
    path = Path(directory) / "manifest.txt"
    rows = []
    offset = 0
    for line in path.read_bytes().splitlines(keepends=True):
        text = line.decode("utf-8").strip()
        if text:
            parts = text.split()
            if len(parts) != 2:
                raise DataFormatError(f"{path}: malformed manifest line at byte offset {offset}")
            rows.append((parts[0], parts[1]))
        offset += len(line)
    return rows


def load_dataset(directory) -> list[Sample]:
    """Samples in manifest order; ids without a mask file load as unlabeled."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    out = []
    for sid, _split in read_manifest(d):
        image = read_grid(d / f"{sid}.img", "image")
        mpath = d / f"{sid}.msk"
        mask = read_grid(mpath, "mask") if mpath.exists() else None
        if mask is not None and not np.all((mask == 0) | (mask == 1)):
            raise DataFormatError(f"{mpath}: mask values are not binary")
        out.append(Sample(image=image, mask=mask, id=sid, labeled=mask is not None))
    return out


def load_splits(directory) -> dict[str, list[Sample]]:
    samples = {s.id: s for s in load_dataset(directory)}
    out: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    for sid, split in read_manifest(directory):
        out.setdefault(split, []).append(samples[sid])
    return out


def hide_masks(samples: list[Sample]) -> list[Sample]:
    return [replace(s, labeled=False) for s in samples]
