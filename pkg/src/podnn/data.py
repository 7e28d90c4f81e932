"""Image sources, transformation mechanisms and the unpaired dataset split.

Training code only ever sees ``DatasetPair.d_p`` / ``d_q`` and minibatch
provenance ids. Which mechanism produced a transformed image, and the image it
came from, live in private attributes that only :mod:`podnn.evaluation`
reads.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

KINDS = ("translate", "noise", "contrast-invert")

# (row delta, column delta); rows grow downwards
DIRECTIONS = {
    "right": (0, 1),
    "left": (0, -1),
    "up": (-1, 0),
    "down": (1, 0),
    "right-up": (-1, 1),
    "right-down": (1, 1),
    "left-up": (-1, -1),
    "left-down": (1, -1),
}


@dataclass(frozen=True)
class MechanismSpec:
    kind: str
    direction: Optional[str] = None
    severity: int = 1
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mechanism kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "translate":
            if self.direction not in DIRECTIONS:
                raise ValueError(f"unknown translation direction {self.direction!r}")
            if int(self.severity) < 1:
                raise ValueError(f"translation severity must be >= 1, got {self.severity}")
        if self.kind == "noise" and not self.sigma > 0:
            raise ValueError(f"noise sigma must be > 0, got {self.sigma}")

    @property
    def name(self) -> str:
        if self.kind == "translate":
            return f"translate-{self.direction}-{self.severity}px"
        if self.kind == "noise":
            return f"noise-{self.sigma:g}"
        return "contrast-invert"

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "translate":
            d.update(direction=self.direction, severity=int(self.severity))
        elif self.kind == "noise":
            d.update(sigma=float(self.sigma), seed=int(self.seed))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MechanismSpec":
        allowed = {"kind", "direction", "severity", "sigma", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown mechanism keys: {sorted(unknown)}")
        return cls(**d)


def _shift(images: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Shift the last two axes by (dr, dc) with zero fill."""
    out = np.zeros_like(images)
    h, w = images.shape[-2:]
    src_r = slice(max(0, -dr), h - max(0, dr))
    dst_r = slice(max(0, dr), h - max(0, -dr))
    src_c = slice(max(0, -dc), w - max(0, dc))
    dst_c = slice(max(0, dc), w - max(0, -dc))
    out[..., dst_r, dst_c] = images[..., src_r, src_c]
    return out


def apply_mechanism(spec: MechanismSpec, images: np.ndarray) -> np.ndarray:
    """Transform a batch (N, C, H, W) of images with values in [0, 1]."""
    images = np.asarray(images)
    if spec.kind == "contrast-invert":
        return 1.0 - images
    if spec.kind == "noise":
        rng = np.random.default_rng(spec.seed)
        noise = rng.normal(0.0, spec.sigma, size=images.shape).astype(images.dtype)
        return np.clip(images + noise, 0.0, 1.0)
    h, w = images.shape[-2:]
    dr, dc = DIRECTIONS[spec.direction]
    s = int(spec.severity)
    if (dr and s >= h) or (dc and s >= w):
        raise ValueError(f"translation severity {s} must be smaller than the image size {h}x{w}")
    return _shift(images, dr * s, dc * s)


def ground_truth_inverse(spec: MechanismSpec, images: np.ndarray,
                         pre_images: Optional[np.ndarray] = None) -> np.ndarray:
    """Undo a mechanism. Noise has no pixel inverse; the stored pre-images are returned."""
    if spec.kind == "contrast-invert":
        return 1.0 - np.asarray(images)
    if spec.kind == "noise":
        if pre_images is None:
            raise ValueError("noise has no exact inverse; pass the stored pre-images")
        return np.asarray(pre_images)
    dr, dc = DIRECTIONS[spec.direction]
    s = int(spec.severity)
    return _shift(np.asarray(images), -dr * s, -dc * s)


def surviving_mask(spec: MechanismSpec, hw: tuple[int, int]) -> np.ndarray:
    """Boolean (H, W) mask of original pixels that survive apply-then-invert."""
    mask = np.ones(hw, dtype=bool)
    if spec.kind != "translate":
        return mask
    dr, dc = DIRECTIONS[spec.direction]
    s = int(spec.severity)
    # pixel (r, c) survives iff (r + dr*s, c + dc*s) is still on the canvas
    return _shift(mask, -dr * s, -dc * s)


# -------------------------------------------------------------------- IDX io

_IDX_DTYPES = {0x08: np.uint8}


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) into a uint8 array."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header at byte offset {len(raw)}")
    zero, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or dtype_code not in _IDX_DTYPES or ndim not in (1, 3):
        raise ValueError(f"{path}: bad IDX magic 0x{raw[:4].hex()} at byte offset 0")
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise ValueError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:need])
    count = int(np.prod(dims))
    if len(raw) < need + count:
        raise ValueError(f"{path}: truncated data at byte offset {len(raw)} (expected {need + count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=need).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise ValueError("write_idx handles uint8 arrays of rank 1 (labels) or 3 (images)")
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(path, dtype=np.float64) -> np.ndarray:
    """IDX image file -> (N, 1, H, W) float batch scaled to [0, 1]."""
    arr = read_idx(path)
    if arr.ndim != 3:
        raise ValueError(f"{path}: expected an image file (magic 0x00000803), got rank {arr.ndim}")
    return (arr.astype(dtype) / 255.0)[:, None, :, :]


# ------------------------------------------------------------ synthetic images


def synthetic_images(n: int, size: int = 16, seed: int = 0, dtype=np.float64) -> np.ndarray:
    """Centred glyphs made of axis-aligned bars and blobs on a black canvas.

    Content is confined to the central half of the canvas so translated
    copies are recognizably off-distribution, much like centred digits.
    """
    rng = np.random.default_rng(seed)
    out = np.zeros((n, 1, size, size), dtype=dtype)
    lo, hi = size // 4, size - size // 4  # content box [lo, hi)
    for k in range(n):
        img = out[k, 0]
        for _ in range(rng.integers(2, 4)):
            if rng.random() < 0.7:
                length = int(rng.integers(3, hi - lo + 1))
                thick = int(rng.integers(1, 3))
                if rng.random() < 0.5:
                    r = int(rng.integers(lo, hi - thick + 1))
                    c = int(rng.integers(lo, hi - length + 1))
                    img[r : r + thick, c : c + length] = 1.0
                else:
                    r = int(rng.integers(lo, hi - length + 1))
                    c = int(rng.integers(lo, hi - thick + 1))
                    img[r : r + length, c : c + thick] = 1.0
            else:
                b = int(rng.integers(2, 4))
                r = int(rng.integers(lo, hi - b + 1))
                c = int(rng.integers(lo, hi - b + 1))
                img[r : r + b, c : c + b] = 1.0
    return out


# ------------------------------------------------------------------- datasets


@dataclass
class DatasetPair:
    """Unpaired originals ``d_p`` and transformed images ``d_q``."""

    d_p: np.ndarray
    d_q: np.ndarray
    mechanism_names: list[str]
    _hidden_labels: np.ndarray = field(repr=False)
    _pre_images: np.ndarray = field(repr=False)

    @property
    def n_mechanisms(self) -> int:
        return len(self.mechanism_names)

    @property
    def image_hw(self) -> tuple[int, int]:
        return tuple(self.d_q.shape[2:])


def _stratified_counts(n: int, proportions: Sequence[float]) -> list[int]:
    raw = np.asarray(proportions, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    # largest remainder, ties to the lower index
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def build_dataset(base: np.ndarray, specs: Sequence[MechanismSpec],
                  proportions: Optional[Sequence[float]] = None, seed: int = 0,
                  n_points: Optional[int] = None) -> DatasetPair:
    """Split ``base`` into disjoint halves: originals and pre-images of D_Q.

    Mechanism counts follow ``proportions`` exactly (largest-remainder
    rounding), so a 3:1:1 weighting of 500 points gives 300/100/100.
    """
    if not specs:
        raise ValueError("build_dataset needs at least one mechanism")
    if proportions is None:
        proportions = [1.0 / len(specs)] * len(specs)
    proportions = [float(p) for p in proportions]
    if len(proportions) != len(specs):
        raise ValueError(f"{len(proportions)} proportions given for {len(specs)} mechanisms")
    if any(p < 0 for p in proportions) or abs(sum(proportions) - 1.0) > 1e-9:
        raise ValueError(f"proportions must be non-negative and sum to 1, got {proportions}")
    base = np.asarray(base)
    if base.ndim != 4:
        raise ValueError(f"base images must be (N, C, H, W), got {base.shape}")

    rng = np.random.default_rng([seed, 0xDA7A])
    perm = rng.permutation(len(base))
    half = len(base) // 2
    p_idx, q_idx = perm[:half], perm[half:]
    if n_points is None:
        n_points = len(q_idx)
    if n_points > len(q_idx):
        raise ValueError(f"n_points={n_points} exceeds the {len(q_idx)} images reserved for D_Q")
    q_idx = q_idx[:n_points]

    counts = _stratified_counts(n_points, proportions)
    labels = np.concatenate([np.full(c, m, dtype=np.int64) for m, c in enumerate(counts)])
    labels = labels[rng.permutation(n_points)]
    pre = base[q_idx]
    d_q = np.empty_like(pre)
    for m, spec in enumerate(specs):
        sel = labels == m
        if sel.any():
            d_q[sel] = apply_mechanism(spec, pre[sel])
    return DatasetPair(
        d_p=base[p_idx].copy(),
        d_q=d_q,
        mechanism_names=[s.name for s in specs],
        _hidden_labels=labels,
        _pre_images=pre,
    )


def sample_minibatch(pair: DatasetPair, batch_size: int, seed: int, iteration: int):
    """Return (x_P, x_Q, q_ids) for one iteration.

    Each stream walks a fresh seeded permutation per epoch, so draws within an
    epoch never repeat and the result depends only on (seed, iteration).
    """
    out = []
    for stream, n in enumerate((len(pair.d_p), len(pair.d_q))):
        if batch_size > n:
            raise ValueError(f"batch_size={batch_size} exceeds dataset size {n}")
        per_epoch = n // batch_size
        epoch, slot = divmod(iteration, per_epoch)
        perm = np.random.default_rng([seed, stream, epoch]).permutation(n)
        out.append(perm[slot * batch_size : (slot + 1) * batch_size])
    p_ids, q_ids = out
    return pair.d_p[p_ids], pair.d_q[q_ids], q_ids


def write_manifest(path, sources: dict, specs: Sequence[MechanismSpec], proportions, seed: int) -> None:
    doc = {
        "sources": sources,
        "mechanisms": [s.to_dict() for s in specs],
        "proportions": list(proportions) if proportions is not None else None,
        "seed": seed,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
