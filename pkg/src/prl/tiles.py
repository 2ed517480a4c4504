"""Tiling, tissue detection and Reinhard stain normalization.

Images are plain 8-bit RGB rasters; pyramidal slide formats are not read
here.  Colour transfer works in the l-alpha-beta space of Reinhard et al.
(2001) with the published RGB->LMS matrix; the reverse transform uses the
exact numerical inverse so that a round trip is lossless up to 8-bit
quantization.
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import PreconditionError, ValidationError
from .ingest import TileRecord

TILE_PX = 224
TARGET_MPP = 2.016
MIN_TISSUE = 0.60

# allowed upsampling before we call it a precondition violation
_MAX_UPSAMPLE = 1.05

_RGB2LMS = np.array(
    [
        [0.3811, 0.5783, 0.0402],
        [0.1967, 0.7244, 0.0782],
        [0.0241, 0.1288, 0.8444],
    ]
)
_LMS2RGB = np.linalg.inv(_RGB2LMS)
_LOG2LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]]
)
_LAB2LOG = np.linalg.inv(_LOG2LAB)

# log of zero is undefined; black pixels are lifted to one quantization step
_FLOOR = 1.0 / 255.0


@dataclass
class RasterImage:
    pixels: np.ndarray  # H x W x 3, uint8
    microns_per_pixel: float = TARGET_MPP

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"expected an RGB image (H x W x 3), got shape {px.shape}")
        if px.dtype != np.uint8:
            px = np.clip(np.rint(px), 0, 255).astype(np.uint8)
        self.pixels = px
        if not self.microns_per_pixel > 0:
            raise ValidationError("microns_per_pixel must be positive")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class StainReference:
    means: tuple  # l, alpha, beta
    stds: tuple

    def __post_init__(self):
        if len(self.means) != 3 or len(self.stds) != 3:
            raise ValidationError("stain reference needs 3 means and 3 stds")
        if any(not s > 0 for s in self.stds):
            raise ValidationError("stain reference standard deviations must be positive")


@dataclass(frozen=True)
class TissueRule:
    max_luminance: float = 0.86
    max_saturation: float = 0.08


def load_raster(path, microns_per_pixel):
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P"):
            raise ValidationError(f"{path}: unsupported image mode {im.mode}")
        arr = np.asarray(im.convert("RGB"))
    return RasterImage(arr.copy(), microns_per_pixel)


def save_png(img, path):
    Image.fromarray(img.pixels, mode="RGB").save(path, format="PNG")


def resample_to_mpp(img, target_mpp=TARGET_MPP):
    """Resample so one pixel covers ``target_mpp`` microns.

    Box (area-average) filtering when shrinking, bilinear for the small
    upsampling we tolerate.
    """
    scale = img.microns_per_pixel / target_mpp
    if scale > _MAX_UPSAMPLE:
        raise PreconditionError(
            f"image at {img.microns_per_pixel} mpp is coarser than target {target_mpp} mpp"
        )
    if abs(scale - 1.0) < 1e-9:
        return RasterImage(img.pixels.copy(), target_mpp)
    w = max(1, int(round(img.width * scale)))
    h = max(1, int(round(img.height * scale)))
    resample = Image.BOX if scale < 1 else Image.BILINEAR
    out = Image.fromarray(img.pixels, mode="RGB").resize((w, h), resample=resample)
    return RasterImage(np.asarray(out).copy(), target_mpp)


def tissue_mask(pixels, rule=TissueRule()):
    rgb = np.asarray(pixels, dtype=float) / 255.0
    lum = rgb @ np.array([0.299, 0.587, 0.114])
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    sat = np.where(mx > 0, (mx - mn) / np.where(mx > 0, mx, 1.0), 0.0)
    background = (lum > rule.max_luminance) & (sat < rule.max_saturation)
    return ~background


def tissue_fraction(tile, rule=TissueRule()):
    """Fraction of pixels that are not bright, unsaturated background."""
    pixels = tile.pixels if isinstance(tile, RasterImage) else tile
    return float(tissue_mask(pixels, rule).mean())


def tile_image(img, slide_id="slide", tile_px=TILE_PX, target_mpp=TARGET_MPP, rule=TissueRule()):
    """Cut an image into non-overlapping ``tile_px`` squares at ``target_mpp``.

    Partial tiles on the right/bottom border are dropped.  Returns a list of
    ``(TileRecord, RasterImage)`` in row-major grid order; no tissue filter is
    applied here (see :func:`filter_tissue`).
    """
    if img.pixels.shape[2] != 3:
        raise ValidationError("unsupported channel count")
    res = resample_to_mpp(img, target_mpp)
    rows, cols = res.height // tile_px, res.width // tile_px
    if rows == 0 or cols == 0:
        raise PreconditionError(
            f"image is {res.width}x{res.height} px at {target_mpp} mpp, smaller than one {tile_px}px tile"
        )
    out = []
    for r in range(rows):
        for c in range(cols):
            px = res.pixels[r * tile_px:(r + 1) * tile_px, c * tile_px:(c + 1) * tile_px].copy()
            tile = RasterImage(px, target_mpp)
            rec = TileRecord(f"{slide_id}_r{r}_c{c}", slide_id, r, c, tissue_fraction(tile, rule))
            out.append((rec, tile))
    return out


def filter_tissue(tiles, min_fraction=MIN_TISSUE):
    return [(rec, t) for rec, t in tiles if rec.tissue_fraction >= min_fraction]


# -- Reinhard --------------------------------------------------------------


def rgb_to_lab(pixels):
    rgb = np.maximum(np.asarray(pixels, dtype=float) / 255.0, _FLOOR)
    lms = rgb @ _RGB2LMS.T
    return np.log10(np.maximum(lms, 1e-12)) @ _LOG2LAB.T


def lab_to_rgb(lab):
    lms = 10.0 ** (np.asarray(lab) @ _LAB2LOG.T)
    rgb = lms @ _LMS2RGB.T
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def lab_stats(pixels):
    lab = rgb_to_lab(pixels).reshape(-1, 3)
    return lab.mean(axis=0), lab.std(axis=0)


def reference_from_image(pixels):
    means, stds = lab_stats(pixels)
    return StainReference(tuple(float(m) for m in means), tuple(float(max(s, 1e-6)) for s in stds))


# H&E-like palette: haematoxylin purples, eosin pinks, pale stroma
_HE_PALETTE = np.array(
    [
        [88, 52, 128],
        [120, 78, 160],
        [150, 96, 170],
        [200, 110, 170],
        [222, 140, 190],
        [236, 172, 206],
        [214, 128, 176],
        [176, 104, 168],
    ],
    dtype=np.uint8,
)


def default_stain_reference():
    """Reference statistics of a fixed synthetic H&E palette."""
    return reference_from_image(_HE_PALETTE.reshape(1, -1, 3))


def reinhard_normalize(tile, ref=None):
    """Match per-channel l-alpha-beta mean/std of ``tile`` to ``ref``.

    Channels with zero variance are shifted onto the reference mean.
    """
    if ref is None:
        ref = default_stain_reference()
    pixels = tile.pixels if isinstance(tile, RasterImage) else np.asarray(tile)
    lab = rgb_to_lab(pixels)
    flat = lab.reshape(-1, 3)
    mu = flat.mean(axis=0)
    sd = flat.std(axis=0)
    out = np.empty_like(flat)
    for ch in range(3):
        if sd[ch] < 1e-9:
            out[:, ch] = ref.means[ch]
        else:
            out[:, ch] = (flat[:, ch] - mu[ch]) / sd[ch] * ref.stds[ch] + ref.means[ch]
    rgb = lab_to_rgb(out.reshape(lab.shape))
    mpp = tile.microns_per_pixel if isinstance(tile, RasterImage) else TARGET_MPP
    return RasterImage(rgb, mpp)


def write_tiles(tiles, out_dir, normalize=None):
    """Write tiles as PNG; returns TileRecords with their file paths set."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for rec, t in tiles:
        if normalize is not None:
            t = reinhard_normalize(t, normalize)
        path = os.path.join(out_dir, f"{rec.tile_id}.png")
        save_png(t, path)
        records.append(TileRecord(rec.tile_id, rec.slide_id, rec.row, rec.col, rec.tissue_fraction, path))
    return records
