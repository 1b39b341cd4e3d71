"""Synthetic SAR-like chips, 16-bit PGM I/O and CSV dataset manifests."""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

logger = logging.getLogger(__name__)

MAXVAL = 65535
MANIFEST_COLUMNS = ["id", "file", "label", "split"]
SCATTERER_COLUMNS = ["id", "scatterer_index", "row", "col", "amplitude", "radius"]


class DataFormatError(ValueError):
    """Malformed image or manifest; names the file and offset."""

    def __init__(self, path, offset, reason: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} (offset {offset}): {reason}")


def quantize(img: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and snap to the 16-bit grid used on disk."""
    q = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * MAXVAL)
    return (q / MAXVAL).astype(np.float32)


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, img: np.ndarray) -> None:
    """Write a 2-D array in [0, 1] as a binary 16-bit PGM."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    h, w = img.shape
    raw = np.round(np.clip(img.astype(np.float64), 0.0, 1.0) * MAXVAL).astype(">u2")
    header = f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii")
    _atomic_write(path, header + raw.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (8- or 16-bit) as float32 in [0, 1], shape (H, W)."""
    blob = Path(path).read_bytes()
    pos = 0
    tokens: list[int] = []
    if blob[:2] != b"P5":
        raise DataFormatError(path, 0, "not a binary PGM (magic P5 expected)")
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataFormatError(path, pos, "malformed header")
        tokens.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise DataFormatError(path, pos, "malformed header")
    pos += 1
    w, h, maxval = tokens
    if w < 1 or h < 1 or not 0 < maxval <= MAXVAL:
        raise DataFormatError(path, pos, f"invalid header values width={w} height={h} maxval={maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(blob) - pos < need:
        raise DataFormatError(path, len(blob), f"truncated pixel payload: need {need} bytes after "
                              f"offset {pos}, have {len(blob) - pos}")
    px = np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return (px.astype(np.float64) / maxval).astype(np.float32)


def _atomic_write(path, payload: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload.encode("utf-8") if isinstance(payload, str) else payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class ChipDataset:
    images: np.ndarray  # (N, 1, H, W) float32
    labels: np.ndarray  # (N,) int64
    ids: list[str]
    split: str = "train"
    provenance: str = ""
    num_classes: int = 10
    # id -> list of (row, col, amplitude, radius); present on adversarial sets
    scatterers: dict[str, list[tuple[float, float, float, float]]] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be (N, 1, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("images, labels and ids differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("chip ids must be unique")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int, str]]:
        for img, lab, cid in zip(self.images, self.labels, self.ids):
            yield img, int(lab), cid

    @property
    def chip_shape(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, index) -> ChipDataset:
        index = np.asarray(index, dtype=np.int64)
        ids = [self.ids[i] for i in index]
        scat = None
        if self.scatterers is not None:
            scat = {i: self.scatterers[i] for i in ids if i in self.scatterers}
        return ChipDataset(self.images[index], self.labels[index], ids, self.split,
                           self.provenance, self.num_classes, scat)

    def equals(self, other: ChipDataset) -> bool:
        return (self.ids == other.ids and np.array_equal(self.labels, other.labels)
                and self.images.shape == other.images.shape
                and np.array_equal(self.images, other.images) and self.split == other.split)


def save_manifest(ds: ChipDataset, path, image_dir: str | None = None) -> None:
    """Write every chip as a PGM beside the manifest CSV, then the CSV atomically."""
    path = Path(path)
    image_dir = image_dir or f"{path.stem}_images"
    (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
    lines = [",".join(MANIFEST_COLUMNS)]
    for img, label, cid in ds:
        rel = f"{image_dir}/{cid}.pgm"
        write_pgm(path.parent / rel, img[0])
        lines.append(f"{cid},{rel},{label},{ds.split}")
    _atomic_write(path, "\n".join(lines) + "\n")
    if ds.scatterers is not None:
        save_scatterers(ds.scatterers, scatterer_path(path))


def scatterer_path(manifest_path) -> Path:
    p = Path(manifest_path)
    return p.with_name(p.stem + "_scatterers.csv")


def load_manifest(path, num_classes: int = 10, split: str | None = None) -> ChipDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != MANIFEST_COLUMNS:
        raise DataFormatError(path, "line 1", f"malformed header, expected {','.join(MANIFEST_COLUMNS)}")
    images, labels, ids, splits = [], [], [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise DataFormatError(path, f"line {lineno}", f"expected 4 columns, got {len(row)}")
        cid, rel, lab, sp = (c.strip() for c in row)
        if split is not None and sp != split:
            continue
        try:
            label = int(lab)
        except ValueError:
            raise DataFormatError(path, f"line {lineno}", f"label {lab!r} is not an integer") from None
        if not 0 <= label < num_classes:
            raise DataFormatError(path, f"line {lineno}", f"label {label} out of range [0, {num_classes})")
        img_path = path.parent / rel
        if not img_path.exists():
            raise FileNotFoundError(f"image for id {cid!r} missing: {img_path}")
        images.append(read_pgm(img_path))
        labels.append(label)
        ids.append(cid)
        splits.add(sp)
    if len(splits) > 1:
        raise DataFormatError(path, "split column", f"mixed splits {sorted(splits)}; pass split=")
    if images and len({im.shape for im in images}) > 1:
        raise DataFormatError(path, "images", "chips differ in size")
    if not images:
        raise DataFormatError(path, "rows", "manifest lists no chips")
    scat = None
    sp_path = scatterer_path(path)
    if sp_path.exists():
        scat = load_scatterers(sp_path)
    return ChipDataset(np.stack(images)[:, None], np.asarray(labels), ids,
                       splits.pop() if splits else (split or "train"), f"ingested({path})",
                       num_classes, scat)


def save_scatterers(scatterers: dict, path) -> None:
    lines = [",".join(SCATTERER_COLUMNS)]
    for cid, specs in scatterers.items():
        for i, (r, c, amp, rad) in enumerate(specs):
            lines.append(f"{cid},{i},{r:g},{c:g},{float(amp)!r},{float(rad)!r}")
    _atomic_write(path, "\n".join(lines) + "\n")


def load_scatterers(path) -> dict[str, list[tuple[float, float, float, float]]]:
    out: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCATTERER_COLUMNS:
            raise DataFormatError(path, "line 1", f"malformed header, expected {','.join(SCATTERER_COLUMNS)}")
        for row in reader:
            out.setdefault(row["id"], []).append(
                (float(row["row"]), float(row["col"]), float(row["amplitude"]), float(row["radius"])))
    return out


# ---------------------------------------------------------------------------
# Synthetic generator

# Templates are segment lists in unit coordinates (y, x), roughly within
# [-1, 1]; "points" entries are isolated bright blobs.
_TEMPLATES: list[dict] = [
    {"name": "bar", "segments": [((0, -1), (0, 1))], "width": 0.35},
    {"name": "twin-bars", "segments": [((-0.45, -0.9), (-0.45, 0.9)), ((0.45, -0.9), (0.45, 0.9))], "width": 0.25},
    {"name": "wedge", "polygon": [(-0.8, -0.9), (0.8, -0.9), (0.0, 0.9)]},
    {"name": "L", "segments": [((-0.9, -0.6), (0.9, -0.6)), ((0.9, -0.6), (0.9, 0.8))], "width": 0.3},
    {"name": "T", "segments": [((-0.9, -0.9), (-0.9, 0.9)), ((-0.9, 0.0), (0.9, 0.0))], "width": 0.3},
    {"name": "V", "segments": [((-0.9, -0.8), (0.8, 0.0)), ((0.8, 0.0), (-0.9, 0.8))], "width": 0.3},
    {"name": "cross", "segments": [((0, -0.9), (0, 0.9)), ((-0.9, 0), (0.9, 0))], "width": 0.3},
    {"name": "cluster", "points": [(-0.6, -0.6), (-0.6, 0.6), (0.6, -0.6), (0.6, 0.6), (0.0, 0.0)],
     "radius": 0.22},
    {"name": "box", "segments": [((-0.8, -0.8), (-0.8, 0.8)), ((-0.8, 0.8), (0.8, 0.8)),
                                 ((0.8, 0.8), (0.8, -0.8)), ((0.8, -0.8), (-0.8, -0.8))], "width": 0.22},
    {"name": "slab", "polygon": [(-0.45, -1.0), (-0.45, 1.0), (0.45, 1.0), (0.45, -1.0)]},
]


def _segment_distance(py, px, a, b):
    ay, ax = a
    by, bx = b
    dy, dx = by - ay, bx - ax
    denom = dy * dy + dx * dx
    t = np.clip(((py - ay) * dy + (px - ax) * dx) / denom, 0.0, 1.0)
    return np.hypot(py - (ay + t * dy), px - (ax + t * dx))


def _inside_polygon(py, px, poly):
    inside = np.zeros(py.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        y1, x1 = poly[i]
        y2, x2 = poly[(i + 1) % n]
        cond = (y1 > py) != (y2 > py)
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1 + 1e-300)
        inside ^= cond & (px < xint)
    return inside


def template_mask(label: int, size: int, angle: float, shift: tuple[float, float],
                  extent: float) -> np.ndarray:
    """Binary footprint of template ``label`` on a size x size grid."""
    tpl = _TEMPLATES[label % len(_TEMPLATES)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = (size - 1) / 2 + shift[0]
    cx = (size - 1) / 2 + shift[1]
    ry, rx = (yy - cy) / extent, (xx - cx) / extent
    ca, sa = math.cos(angle), math.sin(angle)
    py = ca * ry + sa * rx
    px = -sa * ry + ca * rx
    if "segments" in tpl:
        d = np.min([_segment_distance(py, px, a, b) for a, b in tpl["segments"]], axis=0)
        return d <= tpl["width"] / 2
    if "polygon" in tpl:
        return _inside_polygon(py, px, tpl["polygon"])
    d = np.min([np.hypot(py - y, px - x) for y, x in tpl["points"]], axis=0)
    return d <= tpl["radius"]


def generate_synthetic(num_classes: int = 10, per_class: int = 200, chip_size: int = 64,
                       seed: int = 0, split: str = "train", background: float = 0.05,
                       target: float = 0.45, max_shift: float = 4.0,
                       max_rotation: float = math.pi) -> ChipDataset:
    """Bright geometric targets on a dark background with exponential speckle.

    Class ``c`` uses template ``c`` (bar, twin bars, wedge, L, T, V, cross,
    point cluster, box outline, slab), randomly rotated by up to
    ``max_rotation`` radians and shifted by up to ``max_shift`` pixels.
    """
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    if chip_size < 32:
        raise ValueError("chip_size must be at least 32")
    if not 1 <= num_classes <= len(_TEMPLATES):
        raise ValueError(f"num_classes must lie in [1, {len(_TEMPLATES)}]")
    rng = np.random.default_rng(seed)
    extent = chip_size * 0.19
    n = num_classes * per_class
    images = np.empty((n, 1, chip_size, chip_size), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    ids = []
    for i, label in enumerate(labels):
        angle = rng.uniform(-max_rotation, max_rotation)
        shift = tuple(rng.uniform(-max_shift, max_shift, size=2))
        mask = template_mask(int(label), chip_size, angle, shift, extent)
        gain = rng.uniform(0.85, 1.15)
        clean = background + target * gain * mask
        speckle = rng.exponential(1.0, size=(chip_size, chip_size))
        img = quantize(clean * speckle)
        # Resample speckle in the (vanishingly rare) case the postcondition fails.
        while img[mask].mean() <= img[~mask].mean():
            img = quantize(clean * rng.exponential(1.0, size=(chip_size, chip_size)))
        images[i, 0] = img
        ids.append(f"{split}_{i:05d}")
    return ChipDataset(images, labels, ids, split, f"synthetic({seed})", num_classes)


# ---------------------------------------------------------------------------
# Preprocessing


@dataclass(frozen=True)
class PreprocessSpec:
    train_patch: tuple[int, int] = (48, 48)
    test_center_crop: tuple[int, int] = (48, 48)
    augment_count: int = 1


def center_crop(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = images.shape[-2:]
    ph, pw = size
    if ph > h or pw > w:
        raise ValueError(f"crop {ph}x{pw} larger than chip {h}x{w}")
    top, left = (h - ph) // 2, (w - pw) // 2
    return images[..., top:top + ph, left:left + pw]


def augment_and_crop(ds: ChipDataset, spec: PreprocessSpec, seed: int = 0) -> ChipDataset:
    """Random training patches or a central test/validation crop."""
    h, w = ds.chip_shape
    if ds.split == "train":
        ph, pw = spec.train_patch
        if ph > h or pw > w:
            raise ValueError(f"patch {ph}x{pw} larger than chip {h}x{w}")
        if spec.augment_count == 0:
            warnings.warn("augment_count=0 yields an empty training split", stacklevel=2)
            return ChipDataset(np.zeros((0, 1, ph, pw), np.float32), np.zeros(0, np.int64), [],
                               ds.split, ds.provenance, ds.num_classes)
        rng = np.random.default_rng(seed)
        k = spec.augment_count
        out = np.empty((len(ds) * k, 1, ph, pw), dtype=np.float32)
        labels = np.repeat(ds.labels, k)
        ids = []
        for i, (img, _, cid) in enumerate(ds):
            for j in range(k):
                top = int(rng.integers(0, h - ph + 1))
                left = int(rng.integers(0, w - pw + 1))
                out[i * k + j] = img[:, top:top + ph, left:left + pw]
                ids.append(f"{cid}_p{j}")
        return ChipDataset(out, labels, ids, ds.split, ds.provenance, ds.num_classes)
    cropped = np.ascontiguousarray(center_crop(ds.images, spec.test_center_crop))
    return ChipDataset(cropped, ds.labels.copy(), list(ds.ids), ds.split, ds.provenance, ds.num_classes,
                       ds.scatterers)
