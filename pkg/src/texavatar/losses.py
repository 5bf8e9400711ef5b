"""Image and regularization losses, with their gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossWeights:
    lambda_rgb: float = 1.0
    lambda_m: float = 0.1
    lambda_vol: float = 0.01
    lambda_ms: float = 0.0  # multi-scale L1 stand-in for a perceptual term; not part of the original objective

    def __post_init__(self):
        for name in ("lambda_rgb", "lambda_m", "lambda_vol", "lambda_ms"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative")


def _check(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _pixel_mask(mask, shape):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    return np.broadcast_to(m.reshape(m.shape + (1,) * (len(shape) - m.ndim)), shape)


def loss_rgb(render, target, mask=None, grad=False):
    """Mean squared error over (masked) pixels and channels."""
    r, t = _check(render, target)
    diff = r - t
    m = _pixel_mask(mask, diff.shape)
    n = diff.size if m is None else int(m.sum())
    if n == 0:
        return (0.0, np.zeros_like(diff)) if grad else 0.0
    if m is not None:
        diff = np.where(m, diff, 0.0)
    value = float((diff * diff).sum() / n)
    return (value, 2.0 * diff / n) if grad else value


def loss_mask(render_alpha, silhouette, grad=False):
    """Mean absolute error over pixels."""
    a, s = _check(render_alpha, silhouette)
    diff = a - s
    value = float(np.abs(diff).mean()) if diff.size else 0.0
    return (value, np.sign(diff) / max(diff.size, 1)) if grad else value


def box_volumes(scales):
    return np.prod(2.0 * np.asarray(scales, dtype=np.float64), axis=1)


def loss_vol(prims, grad=False):
    """Mean box volume prod(2 s_k) over primitives."""
    s = np.asarray(prims.scales if hasattr(prims, "scales") else prims, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    if len(s) == 0:
        return (0.0, np.zeros_like(s)) if grad else 0.0
    vol = box_volumes(s)
    value = float(vol.mean())
    return (value, vol[:, None] / s / len(s)) if grad else value


def _downsample2(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _upsample2_adjoint(g, shape):
    out = np.zeros(shape)
    q = 0.25 * g
    h, w = 2 * g.shape[0], 2 * g.shape[1]
    for dy in (0, 1):
        for dx in (0, 1):
            out[dy:h:2, dx:w:2] += q
    return out


def loss_multiscale_l1(render, target, levels=3, grad=False):
    """Mean L1 averaged over a 2x box pyramid."""
    r, t = _check(render, target)
    pyr_r, pyr_t = [r], [t]
    for _ in range(levels - 1):
        if min(pyr_r[-1].shape[:2]) < 2:
            break
        pyr_r.append(_downsample2(pyr_r[-1]))
        pyr_t.append(_downsample2(pyr_t[-1]))
    n = len(pyr_r)
    value = sum(float(np.abs(a - b).mean()) for a, b in zip(pyr_r, pyr_t)) / n
    if not grad:
        return value
    g = np.zeros_like(r)
    for level in range(n - 1, -1, -1):
        d = pyr_r[level] - pyr_t[level]
        gl = np.sign(d) / (d.size * n)
        for finer in range(level - 1, -1, -1):
            gl = _upsample2_adjoint(gl, pyr_r[finer].shape)
        g += gl
    return value, g


def composite_loss(renders, targets, silhouettes, prims, weights, grad=False):
    """Weighted sum of the terms, image terms averaged over the batch of views.

    ``renders`` is a list of RenderOutput. With ``grad`` also returns per-view
    gradients w.r.t. rgb and alpha images and the gradient w.r.t. primitive scales.
    """
    if not (len(renders) == len(targets) == len(silhouettes)) or not renders:
        raise ValueError("need one target and silhouette per render")
    n = len(renders)
    terms = {"rgb": 0.0, "mask": 0.0, "vol": 0.0, "ms": 0.0}
    g_rgb, g_alpha = [], []
    for out, tgt, sil in zip(renders, targets, silhouettes):
        l_rgb, d_rgb = loss_rgb(out.rgb, tgt, grad=True)
        l_m, d_a = loss_mask(out.alpha, sil, grad=True)
        terms["rgb"] += l_rgb / n
        terms["mask"] += l_m / n
        d_rgb = weights.lambda_rgb * d_rgb / n
        if weights.lambda_ms > 0:
            l_ms, d_ms = loss_multiscale_l1(out.rgb, tgt, grad=True)
            terms["ms"] += l_ms / n
            d_rgb = d_rgb + weights.lambda_ms * d_ms / n
        g_rgb.append(d_rgb)
        g_alpha.append(weights.lambda_m * d_a / n)
    l_vol, d_scale = loss_vol(prims, grad=True)
    terms["vol"] = l_vol
    total = (weights.lambda_rgb * terms["rgb"] + weights.lambda_m * terms["mask"]
             + weights.lambda_vol * terms["vol"] + weights.lambda_ms * terms["ms"])
    result = {"total": float(total), "terms": terms}
    if grad:
        result["grad_rgb"] = g_rgb
        result["grad_alpha"] = g_alpha
        result["grad_scale"] = weights.lambda_vol * d_scale
    return result


def psnr(image_a, image_b, peak=1.0):
    """10 log10(peak^2 / MSE); identical images give +inf."""
    a, b = _check(image_a, image_b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)
