"""Stochastic training-time and deterministic test-time slice augmentation.

A slice is (3,H,W) float32. Every geometric transform builds one spatial
coordinate map and samples all three channels through it (bilinear,
out-of-bounds filled with zero), so the channels always move together.
Transforms are applied independently with their configured probabilities
in the fixed order given by ``PIPELINE_ORDER``; the test-time pipeline is
histogram stretch followed by a deterministic crop, nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

PIPELINE_ORDER = ("histogram_stretch", "hflip", "vflip", "brightness_contrast",
                  "gamma", "grid_distortion", "shift_scale_rotate", "crop")


@dataclass
class AugmentConfig:
    mode: str = "train"                    # train | test
    crop_mode: str = "full"                # full | bbox
    crop_size: int = 64
    p_histogram_stretch: float = 1.0
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_brightness_contrast: float = 0.7
    p_gamma: float = 0.3
    p_grid_distortion: float = 0.25
    p_shift_scale_rotate: float = 0.5
    p_crop: float = 1.0
    brightness_limit: float = 0.2          # delta in [-l, l]
    contrast_limit: float = 0.2            # alpha in [1-l, 1+l]
    gamma_range: tuple = (0.8, 1.25)
    shift_limit: float = 0.0625            # fraction of the side
    scale_limit: float = 0.1               # scale in [1-l, 1+l]
    rotate_limit: float = 15.0             # degrees
    grid_steps: int = 5
    grid_distort_limit: float = 0.3
    bbox_pad: float = 0.1                  # bbox crop margin per side

    def validate(self):
        if self.mode not in ("train", "test"):
            raise ValueError(f"mode must be train or test, got {self.mode!r}")
        if self.crop_mode not in ("full", "bbox"):
            raise ValueError(f"crop_mode must be full or bbox, got {self.crop_mode!r}")
        for name in PIPELINE_ORDER:
            p = getattr(self, f"p_{name}")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"p_{name}={p} outside [0,1]")
        if self.p_crop != 1.0:
            raise ValueError("crop probability must be 1 (output shape contract)")
        return self


# ---------------------------------------------------------------------------
# individual transforms
# ---------------------------------------------------------------------------

def histogram_stretch(img: np.ndarray) -> np.ndarray:
    """Per channel: clip to the [p1, p99] percentiles, then map to [0,1].
    A (near-)constant channel maps to all zeros."""
    out = np.empty_like(img, dtype=np.float32)
    for c in range(img.shape[0]):
        lo, hi = np.percentile(img[c], (1.0, 99.0))
        if hi - lo < 1e-12:
            out[c] = 0.0
        else:
            out[c] = (np.clip(img[c], lo, hi) - lo) / (hi - lo)
    return out


def _warp(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    out = np.empty((img.shape[0],) + rows.shape, dtype=img.dtype)
    for c in range(img.shape[0]):
        out[c] = map_coordinates(img[c], [rows, cols], order=1, mode="constant", cval=0.0)
    return out


def shift_scale_rotate(img, shift_r, shift_c, scale, angle_deg):
    """Inverse-map warp: output(r,c) samples the input at
    center + R(-angle) (out - center - shift) / scale."""
    h, w = img.shape[1:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    ry = rr - cy - shift_r
    cx_ = cc - cx - shift_c
    th = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(th), np.sin(th)
    rows = (cos_t * ry + sin_t * cx_) / scale + cy
    cols = (-sin_t * ry + cos_t * cx_) / scale + cx
    return _warp(img, rows, cols)


def grid_distortion(img, row_factors, col_factors):
    """Separable piecewise-linear coordinate remap. ``*_factors`` scale the
    widths of the uniform grid segments; endpoints stay fixed."""
    h, w = img.shape[1:]

    def axis_map(size, factors):
        steps = len(factors)
        src_knots = np.linspace(0.0, size - 1.0, steps + 1)
        widths = (size - 1.0) / steps * np.asarray(factors, dtype=np.float64)
        dst_knots = np.concatenate([[0.0], np.cumsum(widths)])
        dst_knots *= (size - 1.0) / dst_knots[-1]
        dst_knots[-1] = size - 1.0
        # invert the monotone map: where does each output coordinate come from
        return np.interp(np.arange(size, dtype=np.float64), dst_knots, src_knots)

    rows = axis_map(h, row_factors)[:, None] * np.ones((1, w))
    cols = np.ones((h, 1)) * axis_map(w, col_factors)[None, :]
    return _warp(img, rows, cols)


def brightness_contrast(img, alpha, delta):
    return np.clip(alpha * img + delta, 0.0, 1.0).astype(img.dtype)


def apply_gamma(img, gamma):
    return np.power(np.clip(img, 0.0, 1.0), gamma).astype(img.dtype)


def crop(img, cfg: AugmentConfig, rng, bbox=None, deterministic=False):
    """Full mode: crop a crop_size window (random offset while training,
    centered otherwise). Bbox mode: crop the bounding box padded by
    ``bbox_pad`` per side, then resize to crop_size (bilinear)."""
    h, w = img.shape[1:]
    t = cfg.crop_size
    if cfg.crop_mode == "full":
        if t > h or t > w:
            raise ValueError(f"crop size {t} exceeds image {h}x{w}")
        if deterministic:
            r0, c0 = (h - t) // 2, (w - t) // 2
        else:
            r0 = int(rng.integers(0, h - t + 1))
            c0 = int(rng.integers(0, w - t + 1))
        return np.ascontiguousarray(img[:, r0:r0 + t, c0:c0 + t])
    if bbox is None:
        raise ValueError("bbox crop requested but no bbox given")
    r0, c0, rows, cols = bbox
    if r0 < 0 or c0 < 0 or r0 + rows > h or c0 + cols > w:
        raise ValueError(f"bbox {bbox} outside image {h}x{w}")
    pr, pc = cfg.bbox_pad * rows, cfg.bbox_pad * cols
    top = max(0.0, r0 - pr)
    left = max(0.0, c0 - pc)
    bottom = min(h - 1.0, r0 + rows - 1 + pr)
    right = min(w - 1.0, c0 + cols - 1 + pc)
    rr = np.linspace(top, bottom, t)
    cc = np.linspace(left, right, t)
    rows_m = rr[:, None] * np.ones((1, t))
    cols_m = np.ones((t, 1)) * cc[None, :]
    return _warp(img, rows_m, cols_m)


def geometric(img, kind, rng, cfg: AugmentConfig):
    """Dispatch one geometric transform, drawing its magnitudes from rng."""
    if kind == "hflip":
        return img[:, :, ::-1].copy()
    if kind == "vflip":
        return img[:, ::-1, :].copy()
    if kind == "shift_scale_rotate":
        h, w = img.shape[1:]
        shift_r = rng.uniform(-cfg.shift_limit, cfg.shift_limit) * h
        shift_c = rng.uniform(-cfg.shift_limit, cfg.shift_limit) * w
        scale = 1.0 + rng.uniform(-cfg.scale_limit, cfg.scale_limit)
        angle = rng.uniform(-cfg.rotate_limit, cfg.rotate_limit)
        return shift_scale_rotate(img, shift_r, shift_c, scale, angle)
    if kind == "grid_distortion":
        lim = cfg.grid_distort_limit
        rf = 1.0 + rng.uniform(-lim, lim, size=cfg.grid_steps)
        cf = 1.0 + rng.uniform(-lim, lim, size=cfg.grid_steps)
        return grid_distortion(img, rf, cf)
    raise ValueError(f"unknown geometric transform {kind!r}")


def photometric(img, kind, rng, cfg: AugmentConfig):
    if kind == "brightness_contrast":
        alpha = 1.0 + rng.uniform(-cfg.contrast_limit, cfg.contrast_limit)
        delta = rng.uniform(-cfg.brightness_limit, cfg.brightness_limit)
        return brightness_contrast(img, alpha, delta)
    if kind == "gamma":
        g = rng.uniform(*cfg.gamma_range)
        return apply_gamma(img, g)
    raise ValueError(f"unknown photometric transform {kind!r}")


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def apply_pipeline(img, cfg: AugmentConfig, rng, bbox=None, log=None):
    """Run the configured pipeline on one slice. Same seed, same output."""
    cfg.validate()
    if cfg.mode == "test":
        out = histogram_stretch(img)
        out = crop(out, cfg, rng, bbox=bbox, deterministic=True)
        if log is not None:
            log.extend(["histogram_stretch", "crop"])
        return out
    out = img
    for name in PIPELINE_ORDER:
        p = getattr(cfg, f"p_{name}")
        if p < 1.0 and rng.random() >= p:
            continue
        if name == "histogram_stretch":
            out = histogram_stretch(out)
        elif name in ("hflip", "vflip", "grid_distortion", "shift_scale_rotate"):
            out = geometric(out, name, rng, cfg)
        elif name in ("brightness_contrast", "gamma"):
            out = photometric(out, name, rng, cfg)
        else:
            out = crop(out, cfg, rng, bbox=bbox, deterministic=False)
        if log is not None:
            log.append(name)
    return out
