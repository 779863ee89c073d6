"""Synthetic occluded-pedestrian images with known attributes.

Each identity is a vector of attribute values. Images are painted as
vertical body bands (head, torso, legs, feet); every attribute owns one
rectangle of the layout and colours it according to its value. Camera
views shift brightness and hue, and an optional occluder replaces a
rectangle, preferably in the lower half, with uniform noise.

Ground-truth attributes are kept on each record for diagnostics only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .binio import FormatError, Reader, write_atomic

__all__ = [
    "AttributeSchema", "DatasetRecord", "Dataset", "CapacityError",
    "generate_identity_catalog", "render_image", "apply_occlusion",
    "generate_dataset", "write_dataset", "read_dataset", "REGIONS",
]

DATASET_MAGIC = b"AGRD"
DATASET_VERSION = 1
NOISE_SIGMA = 0.05
LOWER_HALF_BIAS = 0.7


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSchema:
    slots: tuple[tuple[str, int], ...] = (
        ("gender", 2), ("hair", 3), ("hat", 2), ("backpack", 2), ("handbag", 2),
        ("top_color", 6), ("top_style", 3), ("bottom_color", 6), ("bottom_style", 3),
        ("shoes", 4), ("build", 3),
    )

    @property
    def r(self) -> int:
        return len(self.slots)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.slots]

    @property
    def cardinalities(self) -> list[int]:
        return [c for _, c in self.slots]

    def validate(self, attrs: Sequence[int]) -> None:
        if len(attrs) != self.r:
            raise ValueError(f"expected {self.r} attribute values, got {len(attrs)}")
        for (name, card), v in zip(self.slots, attrs):
            if not 0 <= int(v) < card:
                raise ValueError(f"attribute {name}={v} outside 0..{card - 1}")


# (row0, row1, col0, col1) in pixels of the 32x16 reference layout; scaled for other sizes.
REGIONS: dict[str, tuple[int, int, int, int]] = {
    "hat": (0, 2, 0, 16),
    "hair": (2, 4, 0, 16),
    "gender": (4, 6, 0, 16),
    "backpack": (6, 16, 0, 3),
    "top": (6, 16, 3, 13),
    "handbag": (6, 16, 13, 16),
    "build": (16, 18, 0, 16),
    "bottom": (18, 28, 0, 16),
    "shoes": (28, 32, 0, 16),
}
_REF_H, _REF_W = 32, 16

_PALETTE = np.array([
    [0.85, 0.15, 0.15], [0.15, 0.70, 0.20], [0.15, 0.25, 0.85],
    [0.90, 0.85, 0.20], [0.92, 0.92, 0.92], [0.10, 0.10, 0.10],
])
_BINARY = {
    "gender": np.array([[0.80, 0.60, 0.50], [0.55, 0.35, 0.30]]),
    "hat": np.array([[0.60, 0.60, 0.60], [0.20, 0.10, 0.40]]),
    "backpack": np.array([[0.55, 0.55, 0.55], [0.45, 0.25, 0.05]]),
    "handbag": np.array([[0.55, 0.55, 0.55], [0.70, 0.10, 0.55]]),
}
_HAIR = np.array([[0.10, 0.08, 0.05], [0.55, 0.35, 0.10], [0.85, 0.80, 0.55]])
_SHOES = np.array([[0.05, 0.05, 0.05], [0.95, 0.95, 0.95], [0.50, 0.25, 0.10], [0.20, 0.40, 0.80]])
_BUILD = np.array([[0.30, 0.30, 0.30], [0.50, 0.50, 0.50], [0.70, 0.70, 0.70]])
_CAMERA_BRIGHTNESS = (0.0, 0.08, -0.08, 0.04, -0.04, 0.12)
_CAMERA_HUE = (
    (0.0, 0.0, 0.0), (0.03, -0.02, -0.03), (-0.03, 0.02, 0.03),
    (0.02, 0.03, -0.02), (-0.02, -0.03, 0.02), (0.03, 0.0, -0.03),
)


def camera_offset(camid: int) -> np.ndarray:
    c = camid % len(_CAMERA_BRIGHTNESS)
    return _CAMERA_BRIGHTNESS[c] + np.asarray(_CAMERA_HUE[c])


def _region_slice(name: str, H: int, W: int) -> tuple[slice, slice]:
    r0, r1, c0, c1 = REGIONS[name]
    return (slice(round(r0 * H / _REF_H), round(r1 * H / _REF_H)),
            slice(round(c0 * W / _REF_W), round(c1 * W / _REF_W)))


def _styled(base: np.ndarray, style: int, h: int, w: int) -> np.ndarray:
    patch = np.broadcast_to(base, (h, w, 3)).copy()
    if style == 1:
        patch[1::2] *= 0.6
    elif style == 2:
        patch[:, 1::2] *= 0.6
    return patch


def render_clean(attrs: Sequence[int], camid: int, image_size=(32, 16, 3),
                 schema: AttributeSchema | None = None) -> np.ndarray:
    """Noise-free rendering; :func:`render_image` adds sensor noise."""
    schema = schema or AttributeSchema()
    schema.validate(attrs)
    H, W, C = image_size
    if C != 3:
        raise ValueError("only 3-channel images are supported")
    a = dict(zip(schema.names, (int(v) for v in attrs)))
    img = np.zeros((H, W, 3))
    for name in ("gender", "hat", "backpack", "handbag"):
        img[_region_slice(name, H, W)] = _BINARY[name][a[name]]
    img[_region_slice("hair", H, W)] = _HAIR[a["hair"]]
    img[_region_slice("build", H, W)] = _BUILD[a["build"]]
    img[_region_slice("shoes", H, W)] = _SHOES[a["shoes"]]
    for region, color_key, style_key in (("top", "top_color", "top_style"),
                                         ("bottom", "bottom_color", "bottom_style")):
        rs, cs = _region_slice(region, H, W)
        h, w = rs.stop - rs.start, cs.stop - cs.start
        img[rs, cs] = _styled(_PALETTE[a[color_key]], a[style_key], h, w)
    return img + camera_offset(camid)


def render_image(attrs: Sequence[int], camid: int, rng: np.random.Generator,
                 image_size=(32, 16, 3), schema: AttributeSchema | None = None,
                 noise_sigma: float = NOISE_SIGMA) -> np.ndarray:
    img = render_clean(attrs, camid, image_size, schema)
    img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    # Stored as f32 on disk; round now so the in-memory copy survives a round trip.
    return img.astype(np.float32).astype(np.float64)


def _rect_dims(area: int, aspect: float, H: int, W: int) -> tuple[int, int]:
    """Smallest box near ``aspect`` (h / w) holding ``area`` pixels; the last row may be partial."""
    h = min(max(round(math.sqrt(area * aspect)), 1), H)
    w = min(math.ceil(area / h), W)
    h = min(math.ceil(area / w), H)
    return h, w


def apply_occlusion(image: np.ndarray, rng: np.random.Generator, p_occ: float,
                    area_range: tuple[float, float] = (0.2, 0.4)):
    """Replace a random rectangle with uniform noise with probability ``p_occ``.

    Returns ``(image, rect)`` where ``rect`` is ``(x, y, w, h)`` or ``None``.
    Exactly ``round(fraction * H * W)`` pixels are replaced: the box rows are
    filled top to bottom and the last one may be partial, so the box shape
    can follow the sampled aspect ratio.
    """
    if not 0.0 <= p_occ <= 1.0:
        raise ValueError(f"p_occ must be in [0, 1], got {p_occ}")
    lo, hi = area_range
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError(f"area_range must lie inside (0, 1), got {area_range}")
    if p_occ == 0.0 or rng.random() >= p_occ:
        return image, None
    H, W, C = image.shape
    frac = lo if lo == hi else rng.uniform(lo, hi)
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    area = round(frac * H * W)
    h, w = _rect_dims(area, aspect, H, W)
    x = int(rng.integers(0, W - w + 1))
    if rng.random() < LOWER_HALF_BIAS and H - h >= H // 2:
        y = int(rng.integers(H // 2, H - h + 1))
    else:
        y = int(rng.integers(0, H - h + 1))
    out = image.copy()
    box = out[y:y + h, x:x + w].reshape(h * w, C)
    box[:area] = rng.uniform(0.0, 1.0, size=(area, C)).astype(np.float32)
    out[y:y + h, x:x + w] = box.reshape(h, w, C)
    return out, (x, y, w, h)


def generate_identity_catalog(K: int, schema: AttributeSchema | None = None,
                              seed: int = 0) -> list[tuple[int, ...]]:
    """``K`` distinct attribute vectors sampled uniformly without replacement."""
    schema = schema or AttributeSchema()
    cards = schema.cardinalities
    capacity = math.prod(cards)
    if K > capacity:
        raise CapacityError(f"cannot draw {K} distinct identities from {capacity} combinations")
    rng = np.random.default_rng(seed)
    codes = rng.choice(capacity, size=K, replace=False)
    catalog = []
    for code in codes.tolist():
        vec = []
        for c in reversed(cards):
            code, v = divmod(code, c)
            vec.append(v)
        catalog.append(tuple(reversed(vec)))
    return catalog


@dataclass
class DatasetRecord:
    image: np.ndarray
    pid: int
    camid: int
    occluded: bool = False
    rect: tuple[int, int, int, int] = (0, 0, 0, 0)
    gt_attributes: tuple[int, ...] = ()


@dataclass
class Dataset:
    records: list[DatasetRecord]
    num_ids: int
    image_size: tuple[int, int, int] = (32, 16, 3)
    r: int = 11
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def images(self) -> np.ndarray:
        if "images" not in self._cache:
            self._cache["images"] = np.stack([rec.image for rec in self.records]) if self.records \
                else np.zeros((0,) + tuple(self.image_size))
        return self._cache["images"]

    @property
    def pids(self) -> np.ndarray:
        return np.array([rec.pid for rec in self.records], dtype=np.int64)

    @property
    def camids(self) -> np.ndarray:
        return np.array([rec.camid for rec in self.records], dtype=np.int64)

    def index_by_pid(self) -> dict[int, np.ndarray]:
        pids = self.pids
        return {k: np.flatnonzero(pids == k) for k in range(self.num_ids)}


SPLIT_CODES = {"train": 0, "test": 1}


def generate_dataset(num_ids: int = 32, images_per_id: int = 20, num_cams: int = 2,
                     split: str = "train", seed: int = 0, p_occ: float = 0.0,
                     area_range: tuple[float, float] = (0.2, 0.4),
                     image_size=(32, 16, 3), schema: AttributeSchema | None = None) -> Dataset:
    """Build one split. Train and test draw disjoint identities from one catalog."""
    schema = schema or AttributeSchema()
    if split not in SPLIT_CODES:
        raise ValueError(f"split must be one of {sorted(SPLIT_CODES)}")
    code = SPLIT_CODES[split]
    catalog = generate_identity_catalog(2 * num_ids, schema, seed)[code * num_ids:(code + 1) * num_ids]
    records = []
    for pid, attrs in enumerate(catalog):
        for j in range(images_per_id):
            rng = np.random.default_rng([seed, code, pid, j])
            camid = j % num_cams
            img = render_image(attrs, camid, rng, image_size, schema)
            img, rect = apply_occlusion(img, rng, p_occ, area_range)
            records.append(DatasetRecord(img, pid, camid, rect is not None,
                                         rect or (0, 0, 0, 0), tuple(attrs)))
    return Dataset(records, num_ids, tuple(image_size), schema.r)


# --------------------------------------------------------------------------
# AGRD file format
# --------------------------------------------------------------------------

def write_dataset(ds: Dataset, path) -> None:
    H, W, C = ds.image_size
    parts = [DATASET_MAGIC, np.array([DATASET_VERSION, ds.num_ids, len(ds), H, W, C, ds.r], "<u4").tobytes()]
    for rec in ds.records:
        if rec.image.shape != (H, W, C):
            raise ValueError(f"record image {rec.image.shape} does not match {(H, W, C)}")
        parts.append(rec.image.astype("<f4").tobytes())
        parts.append(np.array([rec.pid, rec.camid], "<u4").tobytes())
        parts.append(np.array([int(rec.occluded)], "<u1").tobytes())
        parts.append(np.array(rec.rect, "<u2").tobytes())
        attrs = rec.gt_attributes or (0,) * ds.r
        parts.append(np.array(attrs, "<u1").tobytes())
    write_atomic(path, b"".join(parts))


def read_dataset(path) -> Dataset:
    rd = Reader(Path(path).read_bytes(), f"dataset {path}")
    rd.header(DATASET_MAGIC, DATASET_VERSION)
    K, n, H, W, C, r = (int(v) for v in rd.unpack("6I"))
    records = []
    for _ in range(n):
        at = rd.pos
        img = rd.array("f4", H * W * C).astype(np.float64).reshape(H, W, C)
        pid, camid = (int(v) for v in rd.unpack("2I"))
        occluded = bool(rd.unpack("B"))
        rect = tuple(int(v) for v in rd.unpack("4H"))
        attrs = tuple(int(v) for v in rd.array("u1", r))
        if pid >= K:
            raise FormatError(f"dataset {path}: record at offset {at} has pid {pid} >= {K}")
        records.append(DatasetRecord(img, pid, camid, occluded, rect, attrs))
    rd.finish()
    return Dataset(records, K, (H, W, C), r)
