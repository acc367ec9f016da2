"""Reconstruction-quality metrics and gradient-similarity analysis.

All image metrics operate on de-normalized images clamped to [0, 1],
shaped (C, H, W) per image or (B, C, H, W) per batch.
"""

from __future__ import annotations

import numpy as np

from . import fl, models

PSNR_CAP = 100.0
_MSE_FLOOR = 1e-10
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_SIGMA = 1.5


def _check_pair(x, y, op):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"{op}: shape mismatch {x.shape} vs {y.shape}")
    return x, y


def psnr(x, x_hat) -> float:
    """10*log10(1/MSE) for [0,1] images, capped at 100 dB for exact matches."""
    x, x_hat = _check_pair(x, x_hat, "psnr")
    m = float(np.mean((x - x_hat) ** 2))
    if m < _MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / m))


def ssim_window(h: int, w: int) -> int:
    """11x11 like the reference definition; shrinks to min(side, 7) on
    desk-scale images smaller than 11."""
    side = min(h, w)
    return 11 if side >= 11 else min(side, 7)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(ax**2) / (2 * sigma**2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _windows(img: np.ndarray, size: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(img, (size, size))


def ssim(x, x_hat) -> float:
    """Mean local SSIM, Gaussian window sigma=1.5, channel-averaged."""
    x, x_hat = _check_pair(x, x_hat, "ssim")
    if x.ndim == 2:
        x, x_hat = x[None], x_hat[None]
    if x.ndim != 3:
        raise ValueError(f"ssim: expected one image (C,H,W), got shape {x.shape}")
    size = ssim_window(x.shape[1], x.shape[2])
    kern = _gaussian_kernel(size, SSIM_SIGMA)
    vals = []
    for c in range(x.shape[0]):
        wa = _windows(x[c], size)
        wb = _windows(x_hat[c], size)
        mu_a = np.einsum("hwij,ij->hw", wa, kern)
        mu_b = np.einsum("hwij,ij->hw", wb, kern)
        e_aa = np.einsum("hwij,ij->hw", wa * wa, kern)
        e_bb = np.einsum("hwij,ij->hw", wb * wb, kern)
        e_ab = np.einsum("hwij,ij->hw", wa * wb, kern)
        var_a = e_aa - mu_a**2
        var_b = e_bb - mu_b**2
        cov = e_ab - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def jaccard(x, x_hat) -> float:
    """Jaccard index of the foreground sets after binarizing each image at
    its own median intensity (invariant to monotone rescaling)."""
    x, x_hat = _check_pair(x, x_hat, "jaccard")
    fa = x > np.median(x)
    fb = x_hat > np.median(x_hat)
    union = np.logical_or(fa, fb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(fa, fb).sum() / union)


def rdlv(x, x_hat, x_init) -> float:
    """Leakage relative to the attack's own starting point:
    (SSIM(x, x_hat) - SSIM(x, x_init)) / SSIM(x, x_init)."""
    s0 = ssim(x, x_init)
    if s0 == 0.0:
        raise ZeroDivisionError("rdlv: SSIM(x, x_init) is zero")
    return (ssim(x, x_hat) - s0) / s0


def evaluate_batch(x, x_hat, x_init=None) -> dict:
    """Per-image and batch-mean metrics for reconstructed batches."""
    x, x_hat = _check_pair(x, x_hat, "evaluate_batch")
    per_image = []
    for i in range(x.shape[0]):
        row = {
            "psnr": psnr(x[i], x_hat[i]),
            "ssim": ssim(x[i], x_hat[i]),
            "jaccard": jaccard(x[i], x_hat[i]),
        }
        if x_init is not None:
            row["rdlv"] = rdlv(x[i], x_hat[i], x_init[i])
        per_image.append(row)
    mean = {
        k: float(np.mean([r[k] for r in per_image])) for k in per_image[0]
    }
    return {"per_image": per_image, "mean": mean}


def flatten_update(tensors: dict) -> np.ndarray:
    """Deterministic flattening: concatenate by sorted tensor name."""
    return np.concatenate([np.ravel(tensors[k]) for k in sorted(tensors)])


def cosine_flat(a: dict, b: dict) -> float:
    """Cosine similarity between two named-tensor sets."""
    if sorted(a) != sorted(b):
        raise ValueError("cosine_flat: tensor name sets differ")
    fa, fb = flatten_update(a), flatten_update(b)
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0 or nb == 0:
        raise ZeroDivisionError("cosine_flat: zero-norm input")
    return float(fa @ fb / (na * nb))


def gradient_cosine_matrix(spec, params, images, labels) -> np.ndarray:
    """Pairwise cosine similarity of per-sample gradients.

    ``images`` are already normalized model inputs; raises if any sample
    produces a zero gradient.
    """
    n = images.shape[0]
    if n < 2:
        raise ValueError("gradient_cosine_matrix: need at least 2 samples")
    flats = []
    for i in range(n):
        _, grads = models.loss_and_grads(
            spec, params, images[i : i + 1], labels[i : i + 1]
        )
        v = flatten_update(grads)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise ZeroDivisionError(f"gradient_cosine_matrix: sample {i} has zero gradient")
        flats.append(v / norm)
    flat = np.stack(flats)
    return flat @ flat.T


def mean_offdiag(mat: np.ndarray) -> float:
    n = mat.shape[0]
    mask = ~np.eye(n, dtype=bool)
    return float(mat[mask].mean())
