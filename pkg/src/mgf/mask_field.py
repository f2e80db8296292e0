"""Root/child image selection, point masking by projection, and boundary weights."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .scene_io import CameraModel, PosedImage, SparsePoint

DEPTH_EPS = 1e-6
W_EDGE = 10.0

LAPLACIAN = np.array([[0, -1, 0], [-1, 4, -1], [0, -1, 0]], dtype=np.float64)


@dataclass
class MaskPyramid:
    labels: np.ndarray
    boundary: np.ndarray
    weights: np.ndarray
    w_edge: float = W_EDGE

    @classmethod
    def from_labels(cls, labels, w_edge=W_EDGE, kernel="laplacian"):
        labels = np.asarray(labels, dtype=np.uint8)
        bd = boundary_map(labels, kernel)
        return cls(labels, bd, weight_map(labels, bd, w_edge), float(w_edge))

    @property
    def shape(self):
        return self.labels.shape

    @property
    def inside(self):
        return self.labels != 0


class View(NamedTuple):
    camera: CameraModel
    image: PosedImage
    pyramid: MaskPyramid | None = None


@dataclass
class RootSelection:
    root_ids: set
    child_ids: set
    ratio: float


def select_roots(images, ratio=0.2, mode="uniform"):
    """Pick ``ceil(ratio * N)`` root images.

    ``uniform`` walks the images in id order taking index ``floor(i / ratio)``
    (every fifth image for ratio 1/5); ``farthest-point`` greedily spreads the
    picks over camera centers starting from the lowest id.
    """
    images = sorted(images, key=lambda im: im.image_id)
    if not images:
        raise ValueError("select_roots: empty image list")
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    n = len(images)
    frac = Fraction(ratio).limit_denominator(10**6)
    count = min(n, math.ceil(frac * n))
    ids = [im.image_id for im in images]
    if mode == "uniform":
        roots = {ids[math.floor(i / frac)] for i in range(count)}
    elif mode == "farthest-point":
        centers = np.stack([im.center for im in images])
        chosen = [0]
        dist = np.linalg.norm(centers - centers[0], axis=1)
        while len(chosen) < count:
            # argmax returns the first maximum, i.e. the lower image id on ties
            nxt = int(np.argmax(dist))
            chosen.append(nxt)
            dist = np.minimum(dist, np.linalg.norm(centers - centers[nxt], axis=1))
        roots = {ids[i] for i in chosen}
    else:
        raise ValueError(f"unknown root selection mode {mode!r}")
    return RootSelection(roots, set(ids) - roots, float(ratio))


def project_points(P, cam: CameraModel, pose: PosedImage):
    """Vectorized pinhole projection: returns (uv (N, 2), valid (N,))."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    Xc = P @ pose.R.T + pose.tvec
    z = Xc[:, 2]
    ok = z > DEPTH_EPS
    zs = np.where(ok, z, 1.0)
    u = cam.fx * Xc[:, 0] / zs + cam.cx
    v = cam.fy * Xc[:, 1] / zs + cam.cy
    ok &= (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=1), ok


def project_point(P, cam: CameraModel, pose: PosedImage):
    """Project one world point; ``None`` when behind the camera or off-image."""
    uv, ok = project_points(P, cam, pose)
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def pixel_index(uv):
    """Continuous image coordinates -> integer pixel (pixel centers at +0.5)."""
    return np.floor(np.asarray(uv)).astype(np.int64)


def inside_all_visible(P, views):
    """Keep flags for points that land on a nonzero label in every root that sees them.

    A point must be visible from at least one root; roots whose frustum
    misses the point do not vote.
    """
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    if not views:
        raise ValueError("no root views given")
    seen = np.zeros(len(P), dtype=bool)
    keep = np.ones(len(P), dtype=bool)
    for view in views:
        labels = view.pyramid.labels if isinstance(view.pyramid, MaskPyramid) else np.asarray(view.pyramid)
        uv, ok = project_points(P, view.camera, view.image)
        px = pixel_index(uv[ok])
        hit = np.zeros(len(P), dtype=bool)
        hit[ok] = labels[px[:, 1], px[:, 0]] != 0
        seen |= ok
        keep &= ~ok | hit
    return keep & seen


def masked_points(points, roots):
    """Sparse points whose projections fall inside the building mask of every visible root."""
    if not roots:
        raise ValueError("masked_points: no roots")
    points = list(points)
    if not points:
        return []
    keep = inside_all_visible(np.stack([p.position for p in points]), roots)
    return [p for p, k in zip(points, keep) if k]


def export_child_prompts(masked_pts, child: View):
    """Integer prompt pixels (u, v) of the masked points seen by a child image."""
    if not masked_pts:
        return []
    P = np.stack([p.position if isinstance(p, SparsePoint) else np.asarray(p) for p in masked_pts])
    uv, ok = project_points(P, child.camera, child.image)
    seen = set()
    out = []
    for u, v in pixel_index(uv[ok]):
        key = (int(u), int(v))
        if key not in seen:
            seen.add(key)
            out.append(key)
    return out


def write_prompts(path, pixels):
    with open(path, "w", encoding="ascii") as fh:
        for u, v in pixels:
            fh.write(f"{u} {v}\n")


def read_prompts(path):
    out = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        if line.strip():
            u, v = line.split()
            out.append((int(u), int(v)))
    return out


def prompt_filename(image_name):
    return f"{Path(image_name).name}.prompts.txt"


def _edge_response(indicator, kernel):
    if isinstance(kernel, str):
        if kernel == "laplacian":
            return ndimage.convolve(indicator, LAPLACIAN, mode="nearest")
        if kernel == "sobel":
            gx = ndimage.sobel(indicator, axis=1, mode="nearest")
            gy = ndimage.sobel(indicator, axis=0, mode="nearest")
            return np.hypot(gx, gy)
        raise ValueError(f"unknown kernel {kernel!r}")
    return ndimage.convolve(indicator, np.asarray(kernel, dtype=np.float64), mode="nearest")


def boundary_map(labels, kernel="laplacian"):
    """In-mask pixels where the edge kernel responds to a label transition.

    The kernel runs over the indicator image of each label separately so the
    result depends only on the partition, never on the numeric label values.
    """
    labels = np.asarray(labels)
    response = np.zeros(labels.shape, dtype=bool)
    for lab in np.unique(labels):
        r = _edge_response((labels == lab).astype(np.float64), kernel)
        response |= np.abs(r) > 1e-12
    return response & (labels != 0)


def weight_map(labels, boundary, w_edge=W_EDGE):
    if w_edge <= 0:
        raise ValueError(f"w_edge must be positive, got {w_edge}")
    labels = np.asarray(labels)
    w = np.where(labels != 0, 1.0, 0.0)
    w[(labels != 0) & np.asarray(boundary, dtype=bool)] = w_edge
    return w
