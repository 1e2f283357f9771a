"""Synthetic segmentation data and the on-disk dataset layout.

Images are 64x64-ish RGB fields with randomly placed rectangles, disks, and
striped windows over a textured background; labels are the exact rasterized
shape masks and boundary masks derive deterministically from them. Pixel
values are quantized to 8 bits at generation time so the PPM round trip is
exact. Directory layout:

    images/NNNN.ppm  labels/NNNN.pgm  boundaries/NNNN.pbm  manifest
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .boundary import BoundaryMask, make_boundary_mask
from .errors import ConfigurationError, DataError

SHAPE_KINDS = ("rect", "disk", "stripe")


@dataclass
class SegSample:
    image: np.ndarray            # (3, H, W) float32 in [0, 1]
    labels: np.ndarray           # (H, W) int64 class ids
    boundary: BoundaryMask
    shapes: list[tuple] = field(default_factory=list)  # (kind, cls, params) as placed


def class_color(c: int) -> np.ndarray:
    """Fixed, distinguishable base color per class."""
    palette = np.array([
        [0.20, 0.55, 0.35],
        [0.85, 0.30, 0.25],
        [0.25, 0.40, 0.85],
        [0.90, 0.80, 0.20],
        [0.70, 0.30, 0.75],
        [0.95, 0.60, 0.20],
    ])
    return palette[c % len(palette)]


def paint_disk(labels: np.ndarray, cy: int, cx: int, r: int, cls: int) -> None:
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls


def paint_rect(labels: np.ndarray, y0: int, y1: int, x0: int, x1: int, cls: int) -> None:
    labels[y0:y1, x0:x1] = cls


def paint_stripes(labels: np.ndarray, y0: int, y1: int, x0: int, x1: int,
                  width: int, phase: int, cls: int) -> None:
    """Alternating vertical bands of the class inside a window."""
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    band = ((xx + phase) // width) % 2 == 0
    box = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
    labels[band & box] = cls


def _place_shape(rng: np.random.Generator, labels: np.ndarray, kind: str, cls: int) -> tuple:
    size = labels.shape[0]
    if kind == "disk":
        r = int(rng.integers(size // 6, size // 3))
        cy = int(rng.integers(r, size - r))
        cx = int(rng.integers(r, size - r))
        paint_disk(labels, cy, cx, r, cls)
        return ("disk", cls, (cy, cx, r))
    if kind == "rect":
        hh = int(rng.integers(size // 4, size // 2))
        ww = int(rng.integers(size // 4, size // 2))
        y0 = int(rng.integers(0, size - hh))
        x0 = int(rng.integers(0, size - ww))
        paint_rect(labels, y0, y0 + hh, x0, x0 + ww, cls)
        return ("rect", cls, (y0, y0 + hh, x0, x0 + ww))
    if kind == "stripe":
        hh = int(rng.integers(size // 3, size // 2))
        ww = int(rng.integers(size // 2, (3 * size) // 4))
        y0 = int(rng.integers(0, size - hh))
        x0 = int(rng.integers(0, size - ww))
        width = int(rng.integers(size // 8, size // 5))
        phase = int(rng.integers(0, 2 * width))
        paint_stripes(labels, y0, y0 + hh, x0, x0 + ww, width, phase, cls)
        return ("stripe", cls, (y0, y0 + hh, x0, x0 + ww, width, phase))
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def _render(rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    """Class base colors plus a low-frequency background wash and pixel noise."""
    h, w = labels.shape
    img = class_color(0)[:, None, None] * np.ones((3, h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    wash = 0.06 * np.sin(2 * np.pi * (xx / w + rng.uniform(0, 1))) \
        * np.cos(2 * np.pi * (yy / h + rng.uniform(0, 1)))
    img += wash[None, :, :]
    for cls in np.unique(labels):
        if cls == 0:
            continue
        img[:, labels == cls] = class_color(int(cls))[:, None]
    img += rng.normal(0.0, 0.04, size=img.shape)
    quantized = np.clip(np.round(np.clip(img, 0.0, 1.0) * 255.0), 0, 255)
    return (quantized / 255.0).astype(np.float32)


def gen_synthetic(seed: int, n: int, size: int, num_classes: int,
                  boundary_radius: int = 1,
                  shape_kinds: tuple[str, ...] = SHAPE_KINDS,
                  shapes_per_image: tuple[int, int] = (2, 3)) -> list[SegSample]:
    """Deterministic toy dataset; same seed gives bit-identical samples."""
    if size <= 0:
        raise ConfigurationError(f"image size must be positive, got {size}")
    if n < 0:
        raise ConfigurationError(f"sample count must be >= 0, got {n}")
    if num_classes < 2:
        raise ConfigurationError("need at least 2 classes (background + one)")
    for kind in shape_kinds:
        if kind not in SHAPE_KINDS:
            raise ConfigurationError(f"unknown shape kind {kind!r}")
    rng = np.random.default_rng(seed)
    samples = []
    lo, hi = shapes_per_image
    for _ in range(n):
        labels = np.zeros((size, size), dtype=np.int64)
        placed = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            kind = shape_kinds[int(rng.integers(len(shape_kinds)))]
            cls = 1 + int(rng.integers(num_classes - 1))
            placed.append(_place_shape(rng, labels, kind, cls))
        image = _render(rng, labels)
        boundary = make_boundary_mask(labels, boundary_radius)
        samples.append(SegSample(image=image, labels=labels, boundary=boundary, shapes=placed))
    return samples


# ---------------------------------------------------------------------------
# portable bitmap family I/O
# ---------------------------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    """rgb: (H, W, 3) uint8."""
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def write_pbm(path, bits: np.ndarray) -> None:
    """bits: (H, W) in {0, 1}; packed 8 pixels per byte, MSB first."""
    h, w = bits.shape
    packed = np.packbits(bits.astype(np.uint8), axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{w} {h}\n".encode("ascii"))
        fh.write(packed.tobytes())


def _read_pnm_header(fh, magic: bytes, fields: int):
    if fh.read(2) != magic:
        raise DataError(f"expected {magic.decode()} file")
    values = []
    while len(values) < fields:
        token = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":
            fh.readline()
            continue
        while ch and not ch.isspace():
            token += ch
            ch = fh.read(1)
        values.append(int(token))
    return values


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h, maxval = _read_pnm_header(fh, b"P6", 3)
        if maxval != 255:
            raise DataError("only 8-bit PPM supported")
        return np.frombuffer(fh.read(h * w * 3), dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h, maxval = _read_pnm_header(fh, b"P5", 3)
        if maxval != 255:
            raise DataError("only 8-bit PGM supported")
        return np.frombuffer(fh.read(h * w), dtype=np.uint8).reshape(h, w).copy()


def read_pbm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P4", 2)
        row_bytes = (w + 7) // 8
        raw = np.frombuffer(fh.read(h * row_bytes), dtype=np.uint8).reshape(h, row_bytes)
        return np.unpackbits(raw, axis=1)[:, :w].copy()


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def image_to_u8(image: np.ndarray) -> np.ndarray:
    return np.round(image.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def image_from_u8(rgb: np.ndarray) -> np.ndarray:
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)


def save_dataset(root, samples: list[SegSample], seed: int, num_classes: int,
                 boundary_radius: int, class_names: list[str] | None = None) -> None:
    root = os.fspath(root)
    for sub in ("images", "labels", "boundaries"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:04d}"
        write_ppm(os.path.join(root, "images", stem + ".ppm"), image_to_u8(s.image))
        write_pgm(os.path.join(root, "labels", stem + ".pgm"), s.labels.astype(np.uint8))
        write_pbm(os.path.join(root, "boundaries", stem + ".pbm"), s.boundary.mask)
    size = samples[0].labels.shape[0] if samples else 0
    names = class_names or ["background"] + [f"class{i}" for i in range(1, num_classes)]
    lines = [
        f"count: {len(samples)}",
        f"size: {size}",
        f"num_classes: {num_classes}",
        f"classes: {','.join(names)}",
        f"generator_seed: {seed}",
        f"boundary_radius: {boundary_radius}",
    ]
    with open(os.path.join(root, "manifest"), "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(root) -> dict[str, str]:
    path = os.path.join(os.fspath(root), "manifest")
    if not os.path.exists(path):
        raise DataError(f"no manifest in dataset directory {root}")
    out: dict[str, str] = {}
    with open(path, encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, _, value = line.partition(":")
                out[key.strip()] = value.strip()
    return out


def load_dataset(root) -> tuple[list[SegSample], dict[str, str]]:
    root = os.fspath(root)
    manifest = load_manifest(root)
    count = int(manifest["count"])
    num_classes = int(manifest["num_classes"])
    radius = int(manifest.get("boundary_radius", "1"))
    samples = []
    for i in range(count):
        stem = f"{i:04d}"
        image = image_from_u8(read_ppm(os.path.join(root, "images", stem + ".ppm")))
        labels = read_pgm(os.path.join(root, "labels", stem + ".pgm")).astype(np.int64)
        if labels.max(initial=0) >= num_classes:
            raise DataError(f"sample {stem}: label {labels.max()} >= num_classes {num_classes}")
        mask = read_pbm(os.path.join(root, "boundaries", stem + ".pbm"))
        boundary = BoundaryMask(mask=mask.astype(np.uint8), dilation_radius=radius)
        samples.append(SegSample(image=image, labels=labels, boundary=boundary))
    return samples, manifest
