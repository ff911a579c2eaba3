"""Block-based texture descriptors over the normalized eye frame.

The frame is divided into a square grid; the four corner blocks and the
central 2x2 (dominated by frame padding and by the iris/pupil area) are
discarded, and each retained block contributes one local descriptor.  Three
descriptor families are provided: Gabor filter magnitudes sampled at block
centers, local binary pattern histograms, and gradient orientation
histograms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import SampleKey
from .errors import DataError

GABOR = "gabor"
LBP = "lbp"
HOG = "hog"
COMPUTED_COMPARATORS = (GABOR, LBP, HOG)

LBP_BINS = 8
HOG_BINS = 8

# Neighbor offsets (dy, dx) clockwise starting from east; bit k of the LBP
# code corresponds to offset k.
_LBP_OFFSETS = (
    (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1),
)

# Key used when a template is built outside any manifest (tests, ad hoc runs).
ANON_KEY = SampleKey("unkeyed", "left", "unkeyed", 1)


@dataclass(frozen=True)
class BlockGrid:
    """Placement of retained analysis blocks inside a square frame."""

    image_side: int
    grid_n: int
    block_px: int
    offset: int
    retained: tuple[tuple[int, int], ...]

    def block_bounds(self, row: int, col: int) -> tuple[int, int, int, int]:
        """(y0, y1, x0, x1) pixel bounds of one block, y1/x1 exclusive."""
        y0 = self.offset + row * self.block_px
        x0 = self.offset + col * self.block_px
        return y0, y0 + self.block_px, x0, x0 + self.block_px

    def block_center(self, row: int, col: int) -> tuple[int, int]:
        y0, _, x0, _ = self.block_bounds(row, col)
        return y0 + self.block_px // 2, x0 + self.block_px // 2


def make_grid(image_side: int, grid_n: int = 8) -> BlockGrid:
    """Build the retained-block grid for a square frame.

    Discards the 4 corner blocks and the central 2x2 block, leaving
    ``grid_n**2 - 8`` blocks in row-major order.

    Raises:
        ValueError: ``grid_n`` odd or below 4, or frame smaller than the grid.
    """
    if grid_n % 2 != 0 or grid_n < 4:
        raise ValueError(f"grid_n must be even and >= 4, got {grid_n}")
    if image_side < grid_n:
        raise ValueError(f"image side {image_side} smaller than grid_n {grid_n}")
    block_px = image_side // grid_n
    offset = (image_side - grid_n * block_px) // 2
    corners = {(0, 0), (0, grid_n - 1), (grid_n - 1, 0), (grid_n - 1, grid_n - 1)}
    mid = grid_n // 2
    center = {(r, c) for r in (mid - 1, mid) for c in (mid - 1, mid)}
    dropped = corners | center
    retained = tuple(
        (r, c)
        for r in range(grid_n)
        for c in range(grid_n)
        if (r, c) not in dropped
    )
    return BlockGrid(image_side, grid_n, block_px, offset, retained)


@dataclass(eq=False)
class Template:
    """Feature vector of one sample under one comparator."""

    comparator_id: str
    sample_key: SampleKey
    vector: np.ndarray
    meta: dict = field(default_factory=dict)


def _check_frame(img: np.ndarray, grid: BlockGrid) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape != (grid.image_side, grid.image_side):
        raise ValueError(
            f"image shape {arr.shape} does not match grid frame "
            f"({grid.image_side}, {grid.image_side})"
        )
    if not np.isfinite(arr).all():
        raise DataError("image contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# Gabor
# ---------------------------------------------------------------------------


def gabor_bank(
    wavelength_min: float = 8.0,
    wavelength_max: float = 64.0,
    n_wavelengths: int = 5,
    n_orientations: int = 6,
) -> tuple[list[np.ndarray], tuple[float, ...], tuple[float, ...]]:
    """Complex Gabor kernels: wavelengths in geometric progression spanning
    [wavelength_min, wavelength_max], orientations in even steps over 180
    degrees, one-octave frequency bandwidth, isotropic envelope.

    Each kernel has its discrete mean subtracted (exactly zero response to
    constant input) and unit L2 norm.  Kernel list is wavelength-major.
    """
    if not (0 < wavelength_min <= wavelength_max):
        raise ValueError("wavelengths must satisfy 0 < min <= max")
    if n_wavelengths < 1 or n_orientations < 1:
        raise ValueError("need at least one wavelength and one orientation")
    if n_wavelengths == 1:
        wavelengths = (float(wavelength_min),)
    else:
        span = wavelength_max / wavelength_min
        wavelengths = tuple(
            float(wavelength_min * span ** (i / (n_wavelengths - 1)))
            for i in range(n_wavelengths)
        )
    orientations = tuple(180.0 * i / n_orientations for i in range(n_orientations))

    # One-octave bandwidth fixes the envelope width relative to wavelength.
    bw = (2.0 ** 1 + 1) / (2.0 ** 1 - 1)
    kernels: list[np.ndarray] = []
    for wl in wavelengths:
        sigma = wl * np.sqrt(np.log(2.0) / 2.0) / np.pi * bw
        half = int(np.ceil(3.0 * sigma))
        ys, xs = np.mgrid[-half:half + 1, -half:half + 1]
        env = np.exp(-(xs ** 2 + ys ** 2) / (2.0 * sigma ** 2))
        for theta_deg in orientations:
            theta = np.deg2rad(theta_deg)
            xr = xs * np.cos(theta) + ys * np.sin(theta)
            kern = env * np.exp(1j * 2.0 * np.pi * xr / wl)
            kern = kern - kern.mean()
            kern = kern / np.linalg.norm(kern)
            kernels.append(kern)
    return kernels, wavelengths, orientations


def extract_gabor(
    img: np.ndarray,
    grid: BlockGrid,
    wavelength_min: float = 8.0,
    wavelength_max: float = 64.0,
    n_wavelengths: int = 5,
    n_orientations: int = 6,
    sample_key: SampleKey | None = None,
) -> Template:
    """Gabor magnitude vector: each kernel evaluated by direct spatial inner
    product at every retained block center (no full-image transform).

    Windows reaching past the frame are filled by edge replication.  The
    vector is block-major, then wavelength-major within each block, length
    ``len(retained) * n_wavelengths * n_orientations``.
    """
    arr = _check_frame(img, grid)
    kernels, wavelengths, orientations = gabor_bank(
        wavelength_min, wavelength_max, n_wavelengths, n_orientations
    )
    pad = max(k.shape[0] // 2 for k in kernels)
    padded = np.pad(arr, pad, mode="edge")

    mags = np.empty((len(grid.retained), len(kernels)))
    for bi, (r, c) in enumerate(grid.retained):
        cy, cx = grid.block_center(r, c)
        for ki, kern in enumerate(kernels):
            hk = kern.shape[0] // 2
            win = padded[cy + pad - hk:cy + pad + hk + 1, cx + pad - hk:cx + pad + hk + 1]
            mags[bi, ki] = abs(np.vdot(win, kern))

    meta = {
        "grid_n": grid.grid_n,
        "image_side": grid.image_side,
        "wavelengths": list(wavelengths),
        "orientations_deg": list(orientations),
    }
    return Template(GABOR, sample_key or ANON_KEY, mags.ravel(), meta)


# ---------------------------------------------------------------------------
# LBP
# ---------------------------------------------------------------------------


def lbp_codes(img: np.ndarray) -> np.ndarray:
    """Per-pixel 8-neighbor LBP codes, bit k set when the k-th clockwise
    neighbor starting from east is >= the center.  Borders use edge
    replication, so a constant image codes to 255 everywhere."""
    h, w = img.shape
    padded = np.pad(img, 1, mode="edge")
    code = np.zeros((h, w), dtype=np.uint8)
    for bit, (dy, dx) in enumerate(_LBP_OFFSETS):
        nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        code |= (nb >= img).astype(np.uint8) << bit
    return code


def extract_lbp(
    img: np.ndarray, grid: BlockGrid, sample_key: SampleKey | None = None
) -> Template:
    """Per-block L1-normalized histogram of LBP codes folded into 8 bins
    (code // 32).  Vector is block-major, length ``len(retained) * 8``."""
    arr = _check_frame(img, grid)
    bins = lbp_codes(arr) >> 5
    out = np.empty((len(grid.retained), LBP_BINS))
    for bi, (r, c) in enumerate(grid.retained):
        y0, y1, x0, x1 = grid.block_bounds(r, c)
        hist = np.bincount(bins[y0:y1, x0:x1].ravel(), minlength=LBP_BINS)
        out[bi] = hist / hist.sum()
    meta = {"grid_n": grid.grid_n, "image_side": grid.image_side, "bins": LBP_BINS}
    return Template(LBP, sample_key or ANON_KEY, out.ravel(), meta)


# ---------------------------------------------------------------------------
# HOG
# ---------------------------------------------------------------------------


def extract_hog(
    img: np.ndarray, grid: BlockGrid, sample_key: SampleKey | None = None
) -> Template:
    """Per-block magnitude-weighted histogram of unsigned gradient
    orientations.

    Gradients are central differences (edge-replicated borders), the
    orientation range [0, 180) degrees is quantized into 8 equal bins, and
    each block histogram is L1-normalized; an all-zero-gradient block yields
    the uniform histogram.
    """
    arr = _check_frame(img, grid)
    padded = np.pad(arr, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    binned = np.minimum((ang * (HOG_BINS / np.pi)).astype(np.int64), HOG_BINS - 1)

    out = np.empty((len(grid.retained), HOG_BINS))
    for bi, (r, c) in enumerate(grid.retained):
        y0, y1, x0, x1 = grid.block_bounds(r, c)
        hist = np.bincount(
            binned[y0:y1, x0:x1].ravel(),
            weights=mag[y0:y1, x0:x1].ravel(),
            minlength=HOG_BINS,
        )
        total = hist.sum()
        out[bi] = hist / total if total > 0 else np.full(HOG_BINS, 1.0 / HOG_BINS)
    meta = {"grid_n": grid.grid_n, "image_side": grid.image_side, "bins": HOG_BINS}
    return Template(HOG, sample_key or ANON_KEY, out.ravel(), meta)


# ---------------------------------------------------------------------------
# Template I/O
# ---------------------------------------------------------------------------


def save_template(template: Template, path: str | Path, source_digest: str | None = None) -> None:
    payload = {
        "comparator_id": template.comparator_id,
        "sample_key": {
            "subject_id": template.sample_key.subject_id,
            "eye": template.sample_key.eye,
            "sensor_id": template.sample_key.sensor_id,
            "sample_idx": template.sample_key.sample_idx,
        },
        "meta": template.meta,
        "vector": [float(v) for v in template.vector],
    }
    if source_digest is not None:
        payload["source_digest"] = source_digest
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_template(path: str | Path) -> Template:
    path = Path(path)
    try:
        with open(path) as fh:
            payload = json.load(fh)
        key = payload["sample_key"]
        return Template(
            comparator_id=payload["comparator_id"],
            sample_key=SampleKey(
                key["subject_id"], key["eye"], key["sensor_id"], int(key["sample_idx"])
            ),
            vector=np.asarray(payload["vector"], dtype=np.float64),
            meta=payload["meta"],
        )
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DataError(f"cannot read template {path}: {exc}") from exc


def template_digest(path: str | Path) -> str | None:
    """source_digest stored in a template file, if any (used for skip logic)."""
    try:
        with open(path) as fh:
            return json.load(fh).get("source_digest")
    except Exception:
        return None
