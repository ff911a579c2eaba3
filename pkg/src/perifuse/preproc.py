"""Periocular image preparation.

Pipeline: grayscale conversion, geometric normalization to a fixed sclera
radius, then local contrast equalization.  The normalized frame is a square of
side 6*R + 1 pixels centered on the sclera center, so every downstream block
grid sees the eye region at one canonical scale regardless of capture distance
or sensor resolution.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import CircleAnnotation, SampleKey
from .errors import DataError

SCLERA_RADIUS = 145
FRAME_SIDE = 6 * SCLERA_RADIUS + 1  # 871

SCALE_MIN = 0.05
SCALE_MAX = 20.0

# Rec.601 luma weights
_GRAY_W = (0.299, 0.587, 0.114)


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit image file as a uint8 array, grayscale or 3-channel."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode in ("RGB", "L"):
                arr = np.asarray(im)
            elif im.mode in ("RGBA", "P", "LA", "1"):
                arr = np.asarray(im.convert("RGB"))
            else:
                raise DataError(f"unsupported image mode {im.mode!r} in {path}")
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.size == 0:
        raise DataError(f"zero-sized image {path}")
    return arr


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """Convert an 8-bit RGB array to float grayscale in [0, 1].

    Uses the Rec.601 weights 0.299/0.587/0.114 applied to channels scaled
    by 1/255, so a pure red pixel maps to exactly 0.299.
    """
    arr = np.asarray(rgb)
    if arr.size == 0:
        raise DataError("zero-sized image")
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise DataError(f"expected 8-bit 3-channel image, got shape {arr.shape} dtype {arr.dtype}")
    chans = arr.astype(np.float64) / 255.0
    return _GRAY_W[0] * chans[..., 0] + _GRAY_W[1] * chans[..., 1] + _GRAY_W[2] * chans[..., 2]


def gray_from_any(img: np.ndarray) -> np.ndarray:
    """Grayscale [0, 1] from either an 8-bit gray or 8-bit RGB array."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        if arr.dtype != np.uint8:
            raise DataError(f"expected 8-bit image, got dtype {arr.dtype}")
        return arr.astype(np.float64) / 255.0
    return to_gray(arr)


def _resize_bicubic(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    im = Image.fromarray(img.astype(np.float32), mode="F")
    out = im.resize((out_w, out_h), Image.Resampling.BICUBIC)
    return np.asarray(out, dtype=np.float64)


def normalize_geometry(
    img: np.ndarray,
    ann: CircleAnnotation,
    radius: int = SCLERA_RADIUS,
    side: int | None = None,
) -> np.ndarray:
    """Rescale so the sclera radius equals ``radius`` and crop the eye frame.

    The image is scaled by ``radius / ann.sclera_r`` with bicubic
    interpolation, then a ``side`` x ``side`` window centered on the scaled
    sclera center is extracted; regions outside the scaled image are filled
    by edge replication.  Values are clipped back to [0, 1] since bicubic
    interpolation can overshoot.

    Raises:
        DataError: scale factor outside [0.05, 20] (degenerate annotation).
    """
    if side is None:
        side = 6 * radius + 1
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise DataError(f"expected non-empty 2-D grayscale image, got shape {img.shape}")
    scale = radius / ann.sclera_r
    if not (SCALE_MIN <= scale <= SCALE_MAX):
        raise DataError(
            f"scale factor {scale:.4g} outside [{SCALE_MIN}, {SCALE_MAX}] "
            f"for sample {ann.key} (degenerate annotation)"
        )

    # Work on a source crop large enough to cover the output window plus the
    # bicubic support, so huge inputs never get rescaled wholesale.
    h, w = img.shape
    half = (side - 1) // 2
    half_src = int(np.ceil((half + 4) / scale)) + 4
    cxs = int(round(ann.sclera_cx))
    cys = int(round(ann.sclera_cy))
    x0 = min(max(cxs - half_src, 0), w - 1)
    x1 = min(max(cxs + half_src, 0), w - 1)
    y0 = min(max(cys - half_src, 0), h - 1)
    y1 = min(max(cys + half_src, 0), h - 1)
    crop = img[y0:y1 + 1, x0:x1 + 1]

    ch, cw = crop.shape
    out_w = max(1, round(cw * scale))
    out_h = max(1, round(ch * scale))
    scaled = np.clip(_resize_bicubic(crop, out_w, out_h), 0.0, 1.0)

    # Pixel-center mapping of the sclera center into the scaled crop.
    fx = out_w / cw
    fy = out_h / ch
    sx = int(round((ann.sclera_cx - x0 + 0.5) * fx - 0.5))
    sy = int(round((ann.sclera_cy - y0 + 0.5) * fy - 0.5))

    wx0 = sx - half
    wy0 = sy - half
    pad_l = max(0, -wx0)
    pad_t = max(0, -wy0)
    pad_r = max(0, wx0 + side - out_w)
    pad_b = max(0, wy0 + side - out_h)
    if pad_l or pad_t or pad_r or pad_b:
        scaled = np.pad(scaled, ((pad_t, pad_b), (pad_l, pad_r)), mode="edge")
    out = scaled[wy0 + pad_t:wy0 + pad_t + side, wx0 + pad_l:wx0 + pad_l + side]
    return np.ascontiguousarray(out)


def clahe(
    img: np.ndarray,
    tiles: int = 8,
    clip_factor: float = 4.0,
    bins: int = 256,
) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization over a tile grid.

    Each tile gets a ``bins``-bin histogram clipped at ``clip_factor`` times
    the mean bin count, with the clipped mass redistributed uniformly; the
    tile mapping is its cumulative distribution, and per-pixel output is the
    bilinear blend of the four surrounding tile mappings.  Output stays in
    [0, 1] and a constant input maps to a constant output.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected non-empty 2-D image, got shape {img.shape}")
    if tiles < 1 or tiles > min(img.shape):
        raise ValueError(f"tile count {tiles} invalid for image shape {img.shape}")
    if bins < 2 or clip_factor <= 0:
        raise ValueError("bins must be >= 2 and clip_factor > 0")

    h, w = img.shape
    q = np.minimum((img * bins).astype(np.int64), bins - 1)
    ey = [int(round(t * h / tiles)) for t in range(tiles + 1)]
    ex = [int(round(t * w / tiles)) for t in range(tiles + 1)]

    luts = np.empty((tiles, tiles, bins))
    for ty in range(tiles):
        for tx in range(tiles):
            block = q[ey[ty]:ey[ty + 1], ex[tx]:ex[tx + 1]]
            hist = np.bincount(block.ravel(), minlength=bins).astype(np.float64)
            npx = block.size
            clip = clip_factor * npx / bins
            excess = np.maximum(hist - clip, 0.0).sum()
            hist = np.minimum(hist, clip) + excess / bins
            luts[ty, tx] = np.cumsum(hist) / npx

    def axis_weights(edges: list[int], n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        centers = np.array([(edges[t] + edges[t + 1] - 1) / 2.0 for t in range(tiles)])
        pos = np.arange(n, dtype=np.float64)
        j = np.searchsorted(centers, pos, side="right") - 1
        j0 = np.clip(j, 0, tiles - 1)
        j1 = np.clip(j + 1, 0, tiles - 1)
        denom = centers[j1] - centers[j0]
        wgt = np.where(denom > 0, (pos - centers[j0]) / np.where(denom > 0, denom, 1.0), 0.0)
        return j0, j1, np.clip(wgt, 0.0, 1.0)

    ry0, ry1, wy = axis_weights(ey, h)
    cx0, cx1, wx = axis_weights(ex, w)

    top = (1.0 - wx[None, :]) * luts[ry0[:, None], cx0[None, :], q] \
        + wx[None, :] * luts[ry0[:, None], cx1[None, :], q]
    bot = (1.0 - wx[None, :]) * luts[ry1[:, None], cx0[None, :], q] \
        + wx[None, :] * luts[ry1[:, None], cx1[None, :], q]
    return (1.0 - wy[:, None]) * top + wy[:, None] * bot


# ---------------------------------------------------------------------------
# Normalized frame I/O: 16-bit PNG plus a JSON sidecar
# ---------------------------------------------------------------------------


def prepare_digest(source_bytes: bytes, params: tuple) -> str:
    """Content hash tying a normalized output to its source bytes and settings."""
    h = hashlib.sha256()
    h.update(b"perifuse-prepare-v1\n")
    h.update(source_bytes)
    h.update(repr(params).encode())
    return h.hexdigest()


def save_normalized(
    img: np.ndarray,
    path: str | Path,
    scale_factor: float,
    sample_key: SampleKey,
    input_digest: str | None = None,
) -> None:
    """Write a normalized frame as 16-bit grayscale PNG with its sidecar."""
    path = Path(path)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-D image, got shape {arr.shape}")
    q = np.clip(np.round(arr * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")
    sidecar = {
        "scale_factor": float(scale_factor),
        "source_sample_key": {
            "subject_id": sample_key.subject_id,
            "eye": sample_key.eye,
            "sensor_id": sample_key.sensor_id,
            "sample_idx": sample_key.sample_idx,
        },
    }
    if input_digest is not None:
        sidecar["input_digest"] = input_digest
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_normalized(path: str | Path) -> np.ndarray:
    """Read a normalized frame back to float [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except Exception as exc:
        raise DataError(f"cannot read normalized image {path}: {exc}") from exc
    if arr.dtype != np.uint16:
        raise DataError(f"{path}: expected 16-bit grayscale PNG, got dtype {arr.dtype}")
    return arr.astype(np.float64) / 65535.0


def load_sidecar(path: str | Path) -> dict:
    png = Path(path)
    sidecar = png.with_suffix(".json")
    if not sidecar.is_file():
        raise DataError(f"missing sidecar {sidecar}")
    with open(sidecar) as fh:
        return json.load(fh)
