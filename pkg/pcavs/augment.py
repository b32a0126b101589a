"""Target-frame augmentation for the non-identity encoder.

Colour transfer, the least-squares projection between a source quad and a
symmetrically shifted target quad, and a centred crop resized back to the
input size. Everything here is a pure function of its arguments.
"""

import logging

import cv2
import numpy as np

from pcavs.config import AugmentConfig
from pcavs.errors import InvalidArgumentError, SingularConfigurationError
from pcavs.models import AugmentParams, Homography, PointQuad

logger = logging.getLogger("pcavs.augment")

RIDGE = 1e-12
# Ratio of smallest to largest singular value of [P_s, e] below which the quad is degenerate
_RANK_TOL = 1e-10


def augment_point_pairs(width: float, height: float, r_s: float, r_t: float) -> tuple[PointQuad, PointQuad]:
    """Source quad pushed out by r_s, and the target quad with its TL/BR corners moved by r_t along x."""
    if width <= 0 or height <= 0:
        raise InvalidArgumentError(f"image dimensions must be positive, got {width}x{height}")
    if r_s < 0:
        raise InvalidArgumentError(f"r_s must be >= 0, got {r_s}")
    w, h = float(width), float(height)
    source = PointQuad([[-r_s, -r_s], [w + r_s, -r_s], [-r_s, h + r_s], [w + r_s, h + r_s]])
    target = PointQuad([[-r_s + r_t, -r_s], [w + r_s, -r_s], [-r_s, h + r_s], [w + r_s + r_t, h + r_s]])
    return source, target


def solve_projection(source: PointQuad, target: PointQuad) -> Homography:
    """Least-squares M with [P_t, e] ~ [P_s, e] M, solved through ridge-stabilised normal equations."""
    x = source.homogeneous()
    t = target.homogeneous()
    sv = np.linalg.svd(x, compute_uv=False)
    if sv[-1] <= _RANK_TOL * sv[0]:
        raise SingularConfigurationError("source quad is degenerate: [P_s, e] is rank deficient")
    m = np.linalg.solve(x.T @ x + RIDGE * np.eye(3), x.T @ t)
    residual = float(np.linalg.norm(x @ m - t, ord="fro"))
    return Homography(m=m, source=source, target=target, residual=residual)


def projective_transform(source: PointQuad, target: PointQuad) -> np.ndarray:
    """Exact 4-point projective map (column-vector convention) taking source onto target."""
    try:
        return cv2.getPerspectiveTransform(
            source.points.astype(np.float32), target.points.astype(np.float32)
        ).astype(np.float64)
    except cv2.error as exc:
        raise SingularConfigurationError(f"no projective map between quads: {exc}") from exc


def warp_matrix(width: int, height: int, params: AugmentParams) -> np.ndarray | None:
    """Column-vector 3x3 matrix for cv2, or None when the warp is the identity."""
    if params.r_t == 0:
        return None
    source, target = augment_point_pairs(width, height, params.r_s, params.r_t)
    if params.warp_mode == "projective":
        return projective_transform(source, target)
    if params.warp_mode != "symmetric":
        raise InvalidArgumentError(f"unknown warp_mode {params.warp_mode!r}")
    # [x', y', 1] = [x, y, 1] M  is  p' = M^T p
    return solve_projection(source, target).m.T


def color_transfer(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    gains = np.asarray(params.color_gains, dtype=np.float32)
    shifts = np.asarray(params.color_shifts, dtype=np.float32)
    return image * gains + shifts


def perspective_warp(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    h, w = image.shape[:2]
    mat = warp_matrix(w, h, params)
    if mat is None:
        return image
    return cv2.warpPerspective(
        image, mat, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
    )


def center_crop(image: np.ndarray, crop_fraction: float) -> np.ndarray:
    if crop_fraction >= 1.0:
        return image
    h, w = image.shape[:2]
    ch = max(1, int(round(h * crop_fraction)))
    cw = max(1, int(round(w * crop_fraction)))
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    crop = np.ascontiguousarray(image[y0:y0 + ch, x0:x0 + cw])
    return cv2.resize(crop, (w, h), interpolation=cv2.INTER_LINEAR)


def _check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise InvalidArgumentError(f"expected a non-empty HxWx3 image, got shape {img.shape}")
    return np.ascontiguousarray(img, dtype=np.float32)


def apply_augmentation(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Colour, then warp, then centred crop; float32 output clamped to [0, 1]."""
    img = _check_image(image)
    img = color_transfer(img, params)
    img = perspective_warp(img, params)
    img = center_crop(img, params.crop_fraction)
    return np.clip(img, 0.0, 1.0).astype(np.float32, copy=False)


def preview_panels(image: np.ndarray, params: AugmentParams) -> list[tuple[str, np.ndarray]]:
    """The cumulative pipeline stages, for the augment-preview grid."""
    img = _check_image(image)
    colored = np.clip(color_transfer(img, params), 0.0, 1.0)
    warped = np.clip(perspective_warp(color_transfer(img, params), params), 0.0, 1.0)
    cropped = apply_augmentation(img, params)
    return [("original", img), ("color", colored), ("warped", warped), ("cropped", cropped)]


def sample_augment_params(cfg: AugmentConfig, width: int, rng: np.random.Generator) -> AugmentParams:
    """Draw one parameter set; a disabled config yields the neutral set."""
    seed = int(rng.integers(0, 2**31 - 1))
    if not cfg.enabled:
        return AugmentParams(rng_seed=seed, warp_mode=cfg.warp_mode)
    r_s = int(rng.integers(0, int(cfg.rs_fraction * width) + 1))
    r_t = int(rng.integers(-r_s, r_s + 1))
    gains = tuple(float(g) for g in rng.uniform(cfg.gain_min, cfg.gain_max, size=3))
    shifts = tuple(float(s) for s in rng.uniform(cfg.shift_min, cfg.shift_max, size=3))
    crop = float(rng.uniform(cfg.crop_min, cfg.crop_max))
    return AugmentParams(
        r_s=r_s,
        r_t=r_t,
        color_gains=gains,
        color_shifts=shifts,
        crop_fraction=min(1.0, max(crop, 1e-3)),
        rng_seed=seed,
        warp_mode=cfg.warp_mode,
    )

