"""Rendering and geometry metrics restricted to the building masks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .loss import ssim
from .scene_io import TriangleMesh


@dataclass
class RenderScore:
    psnr: float
    ssim: float
    masked_pixel_count: int

    def to_dict(self):
        return asdict(self)


@dataclass
class MeshScore:
    accuracy: float
    completeness: float
    f1: float
    threshold: float
    n_pred: int
    n_gt: int

    def to_dict(self):
        return asdict(self)


def _check_mask(rendered, target, mask):
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {t.shape}")
    if m.shape != r.shape[:2]:
        raise ValueError(f"mask {m.shape} does not match image {r.shape[:2]}")
    if not m.any():
        raise ValueError("empty mask")
    return r, t, m


def psnr_from_mse(mse, max_val=1.0):
    if mse <= 0:
        return float("inf")
    return float(10.0 * np.log10(max_val ** 2 / mse))


def masked_psnr(rendered, target, mask, max_val=1.0):
    """PSNR over the masked pixels only; ``inf`` for identical masked content."""
    r, t, m = _check_mask(rendered, target, mask)
    mse = float(np.mean((r[m] - t[m]) ** 2))
    return psnr_from_mse(mse, max_val)


def masked_ssim(rendered, target, mask):
    """Full-frame SSIM after zeroing everything outside the mask."""
    r, t, m = _check_mask(rendered, target, mask)
    mb = m[..., None] if r.ndim == 3 else m
    return ssim(np.where(mb, r, 0.0), np.where(mb, t, 0.0))


def score_render(rendered, target, mask) -> RenderScore:
    return RenderScore(masked_psnr(rendered, target, mask), masked_ssim(rendered, target, mask),
                       int(np.count_nonzero(mask)))


def sample_mesh(mesh: TriangleMesh, n, seed=0):
    """``n`` points uniformly distributed over the mesh surface (area-weighted)."""
    if len(mesh.triangles) == 0:
        raise ValueError("sample_mesh: empty mesh")
    areas = mesh.areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("sample_mesh: mesh has zero area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=int(n), p=areas / total)
    u1, u2 = rng.random(int(n)), rng.random(int(n))
    su = np.sqrt(u1)
    bary = np.stack([1.0 - su, su * (1.0 - u2), su * u2], axis=1)
    v = mesh.vertices[mesh.triangles[tri]]
    return np.einsum("nk,nkj->nj", bary, v)


def nearest_distances(query, ref):
    """Exact Euclidean distance from each query point to its nearest reference point."""
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    if len(ref) == 0 or len(query) == 0:
        raise ValueError("nearest_distances: empty point cloud")
    d, _ = cKDTree(ref).query(query, k=1, eps=0.0)
    return d


def f1_score(accuracy, completeness):
    s = accuracy + completeness
    return 0.0 if s <= 0 else 2.0 * accuracy * completeness / s


def mesh_score(pred, gt, threshold) -> MeshScore:
    """Accuracy / completeness / F1 (percent) between two point clouds."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("mesh_score: empty point cloud")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    acc = 100.0 * float(np.mean(nearest_distances(pred, gt) < threshold))
    comp = 100.0 * float(np.mean(nearest_distances(gt, pred) < threshold))
    return MeshScore(acc, comp, f1_score(acc, comp), float(threshold), len(pred), len(gt))
