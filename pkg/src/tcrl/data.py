"""Synthetic identity data, image-folder ingestion and occlusion masks."""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image as PILImage

MIN_SIDE = 8
NUM_CAMERAS = 4
RANDOM_AREA = (0.2, 0.4)
BLOCK_AREA = 0.3
GRID_RATIO = 0.5
PAD = 4
BASE_SPREAD = 0.15
STRIPE_AMPLITUDE = 0.35
CAMERA_GAIN = 0.05

FILENAME_RE = re.compile(r"^(\d+)_(\d+)_(\d+)\.(png|ppm)$", re.IGNORECASE)
MANIFEST_VERSION = 1


class DataError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class Dataset:
    """A split of images with their (evaluation-only) identities and cameras.

    `images` is an ``(N, H, W, C)`` float array in ``[0, 1]``.
    """

    images: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) == 0:
            raise DataError(f"expected a non-empty (N, H, W, C) array, got {self.images.shape}")
        n, h, w, _ = self.images.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise DataError(f"images must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
        if len(self.identities) != n or len(self.cameras) != n:
            raise DataError("identities/cameras must align with images")
        if self.split not in ("train", "query", "gallery"):
            raise DataError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_identities(self) -> int:
        return len(np.unique(self.identities))


class SyntheticData(NamedTuple):
    train: Dataset
    query: Dataset
    gallery: Dataset


@dataclass
class MaskedImage:
    pixels: np.ndarray
    mask: np.ndarray  # (H, W) bool, True where zeroed
    regions: list[tuple[int, int, int, int]] = field(default_factory=list)  # (top, left, h, w)


# ---------------------------------------------------------------------------
# synthetic identities
# ---------------------------------------------------------------------------

def _identity_layout(rng: np.random.Generator, components: int, max_freq: int) -> dict:
    base = rng.uniform(0.5 - BASE_SPREAD, 0.5 + BASE_SPREAD, 3)
    waves = []
    for _ in range(components):
        ky = kx = 0
        while ky == 0 and kx == 0:
            ky, kx = (int(v) for v in rng.integers(-max_freq, max_freq + 1, 2))
        waves.append((ky, kx, rng.uniform(0.0, 2.0 * np.pi), rng.normal(size=3)))
    return {"base": base, "waves": waves}


def _render(layout: dict, h: int, w: int, dx: float) -> np.ndarray:
    """Base colour plus the identity's stripe components, shifted right by `dx` pixels (wrapping)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = np.zeros((h, w, 3))
    for ky, kx, phase, color in layout["waves"]:
        tex += np.cos(2.0 * np.pi * (ky * yy / h + kx * (xx - dx) / w) + phase)[:, :, None] * color
    return layout["base"] + tex * (STRIPE_AMPLITUDE / math.sqrt(len(layout["waves"])))


def gen_synthetic(
    num_ids: int,
    imgs_per_id: int,
    height: int = 32,
    width: int = 32,
    seed: int = 0,
    channels: int = 3,
    noise: float = 0.02,
    max_shift: float | None = None,
    brightness: tuple[float, float] = (0.9, 1.1),
    components: int = 6,
    max_freq: int = 2,
) -> SyntheticData:
    """Render a procedural identity dataset.

    Each identity is a base colour plus a fixed layout of coloured periodic
    stripes (`components` plane waves with up to `max_freq` cycles per
    image). Every image of it is re-rendered with a random horizontal
    translation (uniform in +-`max_shift` pixels, default ``width // 4``),
    a camera colour cast, a brightness change and Gaussian noise. The train
    split holds ``num_ids * imgs_per_id`` images; an evaluation set of the
    same size is drawn from fresh renderings of the same identities and
    split into one query per identity (camera 0) and a gallery (cameras
    1..3).
    """
    if num_ids < 2 or imgs_per_id < 2:
        raise DataError("need num_ids >= 2 and imgs_per_id >= 2")
    if height < MIN_SIDE or width < MIN_SIDE:
        raise DataError(f"images must be at least {MIN_SIDE}x{MIN_SIDE}")
    if channels not in (1, 3):
        raise DataError("only 1 or 3 channels are supported")
    if components < 1 or max_freq < 1:
        raise DataError("need components >= 1 and max_freq >= 1")
    rng = np.random.default_rng(seed)
    layouts = [_identity_layout(rng, components, max_freq) for _ in range(num_ids)]
    cam_gain = rng.uniform(1.0 - CAMERA_GAIN, 1.0 + CAMERA_GAIN, (NUM_CAMERAS, 3))
    shift = width / 4 if max_shift is None else float(max_shift)

    def draw(identity: int, camera: int) -> np.ndarray:
        dx = rng.uniform(-shift, shift)
        img = _render(layouts[identity], height, width, dx)
        img = img * cam_gain[camera] * rng.uniform(*brightness)
        img = img + rng.normal(0.0, noise, img.shape)
        img = np.clip(img, 0.0, 1.0)
        if channels == 1:
            img = img.mean(axis=2, keepdims=True)
        return img

    train_imgs, train_ids, train_cams = [], [], []
    for pid in range(num_ids):
        for j in range(imgs_per_id):
            cam = int(rng.integers(0, NUM_CAMERAS))
            train_imgs.append(draw(pid, cam))
            train_ids.append(pid)
            train_cams.append(cam)

    q_imgs, q_ids, q_cams = [], [], []
    g_imgs, g_ids, g_cams = [], [], []
    for pid in range(num_ids):
        q_imgs.append(draw(pid, 0))
        q_ids.append(pid)
        q_cams.append(0)
        for j in range(imgs_per_id - 1):
            cam = 1 + j % (NUM_CAMERAS - 1)
            g_imgs.append(draw(pid, cam))
            g_ids.append(pid)
            g_cams.append(cam)

    return SyntheticData(
        Dataset(np.stack(train_imgs), train_ids, train_cams, "train"),
        Dataset(np.stack(q_imgs), q_ids, q_cams, "query"),
        Dataset(np.stack(g_imgs), g_ids, g_cams, "gallery"),
    )


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def _check_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DataError(f"expected an (H, W, C) image, got shape {arr.shape}")
    return arr


def _apply(img: np.ndarray, mask: np.ndarray, regions) -> MaskedImage:
    out = img.copy()
    out[mask] = 0.0
    return MaskedImage(out, mask, list(regions))


def _square_hole(img: np.ndarray, side: int, rng: np.random.Generator) -> MaskedImage:
    h, w = img.shape[:2]
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    mask = np.zeros((h, w), dtype=bool)
    mask[top:top + side, left:left + side] = True
    return _apply(img, mask, [(top, left, side, side)])


def square_side(area_fraction: float, h: int, w: int) -> int:
    return round_half_up(math.sqrt(area_fraction * h * w))


def mask_random(img, rng: np.random.Generator, area: float | None = None) -> MaskedImage:
    """Zero a square covering 20-40% of the image at a uniform position."""
    img = _check_image(img)
    h, w = img.shape[:2]
    if square_side(RANDOM_AREA[0], h, w) > min(h, w):
        raise DataError(f"{h}x{w} image cannot host the minimum mask")
    if area is None:
        area = rng.uniform(*RANDOM_AREA)
    side = min(max(square_side(area, h, w), 1), h, w)
    return _square_hole(img, side, rng)


def mask_block(img, rng: np.random.Generator) -> MaskedImage:
    """Zero a square of exactly 30% area (up to rounding of its side)."""
    img = _check_image(img)
    h, w = img.shape[:2]
    side = square_side(BLOCK_AREA, h, w)
    if side > min(h, w):
        raise DataError(f"{h}x{w} image cannot host a {side}px block")
    return _square_hole(img, side, rng)


def mask_grid(
    img,
    rng: np.random.Generator,
    unit: int | None = None,
    ratio: float = GRID_RATIO,
    offset: tuple[int, int] | None = None,
) -> MaskedImage:
    """Zero a periodic grid of square holes.

    Holes have side ``round(ratio * unit)`` and repeat every `unit` pixels
    in both directions, starting from a random phase unless `offset` is
    given. `unit` defaults to a uniform draw from ``[H/8, H/2]``.
    """
    img = _check_image(img)
    h, w = img.shape[:2]
    if not 0.0 <= ratio < 1.0:
        raise DataError("ratio must lie in [0, 1)")
    if unit is None:
        lo = max(2, h // 8)
        hi = max(lo, h // 2)
        unit = int(rng.integers(lo, hi + 1))
    if unit < 2:
        raise DataError("grid unit must be >= 2")
    side = round_half_up(ratio * unit)
    if offset is None:
        offset = (int(rng.integers(0, unit)), int(rng.integers(0, unit)))
    dy, dx = offset
    rows = ((np.arange(h) - dy) % unit) < side
    cols = ((np.arange(w) - dx) % unit) < side
    mask = rows[:, None] & cols[None, :]
    regions = []
    if side > 0:
        for t in range(dy % unit - unit, h, unit):
            for l in range(dx % unit - unit, w, unit):
                y1, x1 = max(t, 0), max(l, 0)
                y2, x2 = min(t + side, h), min(l + side, w)
                if y2 > y1 and x2 > x1:
                    regions.append((y1, x1, y2 - y1, x2 - x1))
    return _apply(img, mask, regions)


MASKERS = {"random": mask_random, "grid": mask_grid, "block": mask_block}


def augment(img, rng: np.random.Generator, p_flip: float = 0.5, p_crop: float = 0.5) -> np.ndarray:
    """Random horizontal flip and pad-then-crop, each applied with its own probability."""
    img = _check_image(img)
    if rng.random() < p_flip:
        img = img[:, ::-1]
    if rng.random() < p_crop:
        h, w = img.shape[:2]
        padded = np.pad(img, ((PAD, PAD), (PAD, PAD), (0, 0)))
        top = int(rng.integers(0, 2 * PAD + 1))
        left = int(rng.integers(0, 2 * PAD + 1))
        img = padded[top:top + h, left:left + w]
    return np.ascontiguousarray(img)


# ---------------------------------------------------------------------------
# image folders
# ---------------------------------------------------------------------------

def parse_filename(name: str) -> tuple[int, int, int]:
    m = FILENAME_RE.match(name)
    if m is None:
        raise DataError(f"cannot parse label from filename {name!r}; expected <identity>_<camera>_<index>.png|ppm")
    return int(m.group(1)), int(m.group(2)), int(m.group(3))


def load_folder(path, split: str = "train") -> Dataset:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    files = sorted(p for p in path.iterdir() if p.is_file() and not p.name.startswith("."))
    files = [p for p in files if p.suffix.lower() in (".png", ".ppm") or FILENAME_RE.match(p.name)]
    if not files:
        raise DataError(f"no images found in {path}")
    images, ids, cams = [], [], []
    for p in files:
        pid, cam, _ = parse_filename(p.name)
        try:
            with PILImage.open(p) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read image {p}: {exc}") from exc
        if images and arr.shape != images[0].shape:
            raise DataError(f"{p.name} has shape {arr.shape}, expected {images[0].shape}")
        images.append(arr)
        ids.append(pid)
        cams.append(cam)
    return Dataset(np.stack(images), ids, cams, split)


def to_uint8(img: np.ndarray) -> np.ndarray:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    return arr


def _png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_dataset(root, data: SyntheticData, generator: dict | None = None) -> Path:
    """Write each split as a folder of PNGs plus a JSON manifest; returns the manifest path."""
    root = Path(root)
    manifest = {
        "version": MANIFEST_VERSION,
        "image_shape": list(data.train.shape),
        "generator": generator or {},
        "splits": {},
    }
    for ds in data:
        folder = root / ds.split
        folder.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (img, pid, cam) in enumerate(zip(ds.images, ds.identities, ds.cameras)):
            name = f"{int(pid):04d}_{int(cam)}_{i:05d}.png"
            blob = _png_bytes(img)
            (folder / name).write_bytes(blob)
            entries.append({
                "file": f"{ds.split}/{name}",
                "identity": int(pid),
                "camera": int(cam),
                "sha256": hashlib.sha256(blob).hexdigest(),
            })
        manifest["splits"][ds.split] = {
            "count": len(entries),
            "identities": sorted({e["identity"] for e in entries}),
            "samples": entries,
        }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset_dir(root) -> SyntheticData:
    root = Path(root)
    missing = [s for s in ("train", "query", "gallery") if not (root / s).is_dir()]
    if missing:
        raise DataError(f"{root} is missing split folder(s): {', '.join(missing)}")
    return SyntheticData(*(load_folder(root / s, s) for s in ("train", "query", "gallery")))


def file_sha256(path: os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
