"""Closed-form forgery indicators over facial regions, and their robust normalization.

Five artifact dimensions are measured. The four "interior" regions get blur,
color, structure and texture; jawline and boundary only get the boundary
(edge-gradient) indicator. That gives 18 channels, always enumerated in
region-major, dimension-minor order (:data:`CHANNELS`).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import imgstat
from .errors import (ArtifactError, ChannelError, EmptyRegion, InsufficientCalibration,
                     InvalidInput, NoAdjacentPairs)

DIMENSIONS = ("blur", "color", "structure", "texture", "boundary")
REGIONS = ("eyes", "nose", "cheeks", "mouth", "jawline", "boundary")
SKIN = "skin"
MASK_NAMES = REGIONS + (SKIN,)

_INTERIOR = ("eyes", "nose", "cheeks", "mouth")
CHANNELS: tuple[tuple[str, str], ...] = tuple(
    (r, d) for r in REGIONS for d in DIMENSIONS
    if (r in _INTERIOR and d != "boundary") or (r not in _INTERIOR and d == "boundary")
)
CHANNEL_INDEX = {ch: i for i, ch in enumerate(CHANNELS)}

# anomaly = polarity * z: low sharpness and low structural similarity are suspicious
POLARITY = {"blur": -1.0, "color": 1.0, "structure": -1.0, "texture": 1.0, "boundary": 1.0}

SSIM_SIZE = 32
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
GLCM_LEVELS = 64
_QUANT_SCALE = GLCM_LEVELS - 1e-9
MAD_FLOOR = 1e-9


def is_valid_channel(region: str, dimension: str) -> bool:
    return (region, dimension) in CHANNEL_INDEX


# --- individual indicators -------------------------------------------------

def _nonempty(mask, shape) -> np.ndarray:
    m = imgstat.as_mask(mask, shape)
    if not m.any():
        raise EmptyRegion("region mask is empty")
    return m


def blur_indicator(img, mask) -> float:
    """Population variance of the 4-neighbour Laplacian over the masked gray pixels."""
    gray = imgstat.to_gray(img)
    m = _nonempty(mask, gray.shape)
    return imgstat.masked_moments(imgstat.convolve2d(gray, imgstat.LAPLACIAN_4), m)[1]


def color_indicator(img, region, skin) -> float:
    """Absolute difference of mean CIELAB lightness between region and skin."""
    arr = imgstat.as_image(img)
    rgb = arr if arr.ndim == 3 else np.repeat(arr[..., None], 3, axis=2)
    light = imgstat.rgb_to_lab(rgb)[..., 0]
    r = _nonempty(region, light.shape)
    s = _nonempty(skin, light.shape)
    return abs(light[r].mean() - light[s].mean())


def normalized_patch(gray: np.ndarray, mask) -> np.ndarray:
    """Bounding-box crop, bilinear resize to 32x32, min-max scaled to [0, 1]."""
    rows, cols = imgstat.bounding_box(mask)
    patch = imgstat.resize_bilinear(gray[rows, cols], SSIM_SIZE, SSIM_SIZE)
    lo, hi = patch.min(), patch.max()
    if hi - lo <= 0.0:
        return np.full_like(patch, 0.5)
    return (patch - lo) / (hi - lo)


def global_ssim(a: np.ndarray, b: np.ndarray) -> float:
    mu_a, mu_b = a.mean(), b.mean()
    var_a = np.mean((a - mu_a) ** 2)
    var_b = np.mean((b - mu_b) ** 2)
    cov = np.mean((a - mu_a) * (b - mu_b))
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(num / den)


def structural_indicator(img, region, skin) -> float:
    gray = imgstat.to_gray(img)
    r = _nonempty(region, gray.shape)
    s = _nonempty(skin, gray.shape)
    return global_ssim(normalized_patch(gray, r), normalized_patch(gray, s))


def quantize(gray: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(gray) * _QUANT_SCALE).astype(np.int64)


def texture_indicator(img, mask) -> float:
    """GLCM contrast at offset (dx=1, dy=0), symmetric, in-mask pairs, 64 levels."""
    gray = imgstat.to_gray(img)
    m = _nonempty(mask, gray.shape)
    pairs = m[:, :-1] & m[:, 1:]
    if not pairs.any():
        raise NoAdjacentPairs("mask has no horizontally adjacent pixel pair")
    q = quantize(gray)
    left, right = q[:, :-1][pairs], q[:, 1:][pairs]
    glcm = np.bincount(left * GLCM_LEVELS + right, minlength=GLCM_LEVELS ** 2)
    glcm = glcm.reshape(GLCM_LEVELS, GLCM_LEVELS).astype(np.float64)
    glcm = glcm + glcm.T
    glcm /= glcm.sum()
    i, j = np.indices(glcm.shape)
    return float(np.sum(glcm * (i - j) ** 2))


def gradient_magnitude(gray: np.ndarray) -> np.ndarray:
    gx = imgstat.convolve2d(gray, imgstat.SOBEL_X)
    gy = imgstat.convolve2d(gray, imgstat.SOBEL_Y)
    return np.sqrt(gx ** 2 + gy ** 2)


def boundary_indicator(img, mask) -> float:
    """Mean Sobel gradient magnitude over the masked pixels."""
    gray = imgstat.to_gray(img)
    m = _nonempty(mask, gray.shape)
    return imgstat.masked_moments(gradient_magnitude(gray), m)[0]


# --- matrices ---------------------------------------------------------------

@dataclass
class IndicatorMatrix:
    """Raw (and optionally normalized) scores for the 18 channels in :data:`CHANNELS` order."""

    raw: np.ndarray
    anomaly: np.ndarray | None = None
    image_id: str = ""

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.shape != (len(CHANNELS),):
            raise InvalidInput(f"expected {len(CHANNELS)} raw scores, got {self.raw.shape}")
        if self.anomaly is not None:
            self.anomaly = np.asarray(self.anomaly, dtype=np.float64)

    def raw_of(self, region: str, dimension: str) -> float:
        return float(self.raw[CHANNEL_INDEX[(region, dimension)]])

    def anomaly_of(self, region: str, dimension: str) -> float:
        if self.anomaly is None:
            raise InvalidInput("anomaly scores not computed")
        return float(self.anomaly[CHANNEL_INDEX[(region, dimension)]])

    def as_dict(self) -> dict[tuple[str, str], float]:
        return {ch: float(v) for ch, v in zip(CHANNELS, self.raw)}


def validate_masks(masks: Mapping[str, np.ndarray], shape) -> dict[str, np.ndarray]:
    missing = [name for name in MASK_NAMES if name not in masks]
    if missing:
        raise InvalidInput(f"mask set is missing {missing}")
    out = {}
    for name in MASK_NAMES:
        m = imgstat.as_mask(masks[name], shape)
        if not m.any():
            raise EmptyRegion(f"mask {name!r} is empty")
        out[name] = m
    return out


def compute_indicator_matrix(img, masks: Mapping[str, np.ndarray], image_id: str = "") -> IndicatorMatrix:
    """Evaluate every channel in the region/indicator table for one image."""
    arr = imgstat.as_image(img)
    gray = imgstat.to_gray(arr)
    masks = validate_masks(masks, gray.shape)
    rgb = arr if arr.ndim == 3 else np.repeat(arr[..., None], 3, axis=2)
    # shared full-image fields; per-channel work is then just masking
    lap = imgstat.convolve2d(gray, imgstat.LAPLACIAN_4)
    grad = gradient_magnitude(gray)
    light = imgstat.rgb_to_lab(rgb)[..., 0]
    skin = masks[SKIN]
    skin_light = light[skin].mean()
    skin_patch = normalized_patch(gray, skin)

    raw = np.empty(len(CHANNELS))
    for k, (region, dim) in enumerate(CHANNELS):
        m = masks[region]
        try:
            if dim == "blur":
                raw[k] = imgstat.masked_moments(lap, m)[1]
            elif dim == "color":
                raw[k] = abs(light[m].mean() - skin_light)
            elif dim == "structure":
                raw[k] = global_ssim(normalized_patch(gray, m), skin_patch)
            elif dim == "texture":
                raw[k] = texture_indicator(gray, m)
            else:
                raw[k] = grad[m].mean()
        except ArtifactError as exc:
            raise ChannelError((region, dim), exc) from exc
    return IndicatorMatrix(raw=raw, image_id=image_id)


@dataclass(frozen=True)
class ChannelNormalizer:
    median: np.ndarray
    mad: np.ndarray
    polarity: np.ndarray = field(
        default_factory=lambda: np.array([POLARITY[d] for _, d in CHANNELS]))

    def z(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.median) / self.mad


def fit_normalizer(calibration: Sequence[IndicatorMatrix]) -> ChannelNormalizer:
    """Per-channel median and MAD, with the MAD floored at 1e-9."""
    if len(calibration) < 2:
        raise InsufficientCalibration(f"need at least 2 calibration matrices, got {len(calibration)}")
    stack = np.stack([m.raw for m in calibration])
    med = np.median(stack, axis=0)
    mad = np.maximum(np.median(np.abs(stack - med), axis=0), MAD_FLOOR)
    return ChannelNormalizer(median=med, mad=mad)


def anomaly_scores(mtx: IndicatorMatrix, norm: ChannelNormalizer) -> IndicatorMatrix:
    anomaly = norm.polarity * norm.z(mtx.raw)
    return IndicatorMatrix(raw=mtx.raw.copy(), anomaly=anomaly, image_id=mtx.image_id)


# --- file interfaces --------------------------------------------------------

def read_mask_manifest(path) -> dict[str, np.ndarray]:
    """Load masks listed as ``region=path`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    masks = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidInput(f"{path}:{lineno}: expected region=path")
        key = key.strip()
        if key not in MASK_NAMES:
            raise InvalidInput(f"{path}:{lineno}: unknown region {key!r}")
        mask_path = Path(value.strip())
        if not mask_path.is_absolute():
            mask_path = path.parent / mask_path
        masks[key] = imgstat.load_mask(mask_path)
    return masks


def write_mask_manifest(path, mask_paths: Mapping[str, str]) -> None:
    Path(path).write_text("".join(f"{name}={mask_paths[name]}\n" for name in MASK_NAMES))


CSV_HEADER = ("image_id", "region", "dimension", "raw", "anomaly")


def write_indicator_csv(path, matrices: Sequence[IndicatorMatrix]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for mtx in matrices:
            for k, (region, dim) in enumerate(CHANNELS):
                anomaly = "" if mtx.anomaly is None else f"{mtx.anomaly[k]:.6f}"
                writer.writerow([mtx.image_id, region, dim, f"{mtx.raw[k]:.6f}", anomaly])


def read_indicator_csv(path) -> list[IndicatorMatrix]:
    rows: dict[str, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise InvalidInput(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            key = (row["region"], row["dimension"])
            if key not in CHANNEL_INDEX:
                raise InvalidInput(f"{path}: channel {key} is not in the indicator table")
            entry = rows.setdefault(row["image_id"], {"raw": {}, "anomaly": {}})
            entry["raw"][key] = float(row["raw"])
            if row["anomaly"]:
                entry["anomaly"][key] = float(row["anomaly"])
    out = []
    for image_id, entry in rows.items():
        if len(entry["raw"]) != len(CHANNELS):
            raise InvalidInput(f"{path}: image {image_id!r} has {len(entry['raw'])} channels")
        raw = [entry["raw"][ch] for ch in CHANNELS]
        anomaly = [entry["anomaly"][ch] for ch in CHANNELS] if len(entry["anomaly"]) == len(CHANNELS) else None
        out.append(IndicatorMatrix(raw=raw, anomaly=anomaly, image_id=image_id))
    return out
