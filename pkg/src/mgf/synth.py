"""Self-contained synthetic scenes: analytic geometry, orbit cameras, masks,
targets rendered by the field renderer, and a ground-truth mesh."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sh
from .extract import _ray_opacity_many
from .gaussians import GaussianField, logit, save_checkpoint
from .mask_field import MaskPyramid, View
from .render import make_rays, render_rays
from .scene_io import (CameraModel, PosedImage, SparsePoint, TriangleMesh, rotmat_to_qvec,
                       save_image, save_label_mask, write_colmap_text, write_mesh)

KINDS = ("sphere", "two-box", "steel-frame-toy")
GT_OPACITY = 0.99
THICKNESS = 0.01
OVERLAP = 0.7
CALIBRATION_ROUNDS = 3


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation (x right, y down, z forward) and translation."""
    c = np.asarray(center, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - c
    f /= np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    if abs(f @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    return R, -R @ c


def frame_quats(normals):
    """Quaternions whose rotation maps local z onto each normal."""
    out = np.zeros((len(normals), 4))
    for i, n in enumerate(normals):
        a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        t1 = np.cross(n, a)
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)
        out[i] = rotmat_to_qvec(np.stack([t1, t2, n], axis=1))
    return out


def texture(p):
    """Smooth RGB pattern in [0.2, 0.8]."""
    p = np.asarray(p, dtype=np.float64)
    return 0.5 + 0.3 * np.stack([np.sin(2.5 * p[:, 0] + 0.5), np.sin(2.5 * p[:, 1] + 1.7),
                                 np.sin(2.5 * p[:, 2] + 2.9)], axis=1)


def icosphere(level=4, radius=1.0):
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nxt += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = nxt
    return TriangleMesh(radius * np.array(verts), np.array(faces, dtype=np.int64))


# ---------------------------------------------------------------- shapes

class _Sphere:
    radius = 1.0

    def surface(self, n):
        p = fibonacci_sphere(n)
        return p, p.copy(), self.radius * np.sqrt(4 * np.pi / n)

    def hit(self, o, d):
        b = np.sum(o * d, axis=1)
        disc = b * b - (np.sum(o * o, axis=1) - self.radius ** 2)
        t = -b - np.sqrt(np.maximum(disc, 0.0))
        hit = (disc > 0) & (t > 0)
        return np.where(hit, 1, 0).astype(np.uint8)

    def mesh(self):
        return icosphere(4, self.radius)


class _Boxes:
    def __init__(self, boxes):
        self.boxes = [(np.asarray(lo, float), np.asarray(hi, float), int(lab)) for lo, hi, lab in boxes]
        lo = np.min([b[0] for b in self.boxes], axis=0)
        hi = np.max([b[1] for b in self.boxes], axis=0)
        self.radius = float(np.linalg.norm(hi - lo) / 2)

    def surface(self, n):
        area = sum(2 * ((h - l)[0] * (h - l)[1] + (h - l)[1] * (h - l)[2] + (h - l)[0] * (h - l)[2])
                   for l, h, _ in self.boxes)
        step = np.sqrt(area / n)
        pts, nrm = [], []
        for lo, hi, _ in self.boxes:
            for ax in range(3):
                u, v = [a for a in range(3) if a != ax]
                nu = max(1, int(round((hi[u] - lo[u]) / step)))
                nv = max(1, int(round((hi[v] - lo[v]) / step)))
                gu = lo[u] + (np.arange(nu) + 0.5) * (hi[u] - lo[u]) / nu
                gv = lo[v] + (np.arange(nv) + 0.5) * (hi[v] - lo[v]) / nv
                U, V = np.meshgrid(gu, gv, indexing="ij")
                for side, val in ((-1.0, lo[ax]), (1.0, hi[ax])):
                    p = np.zeros((U.size, 3))
                    p[:, u], p[:, v], p[:, ax] = U.ravel(), V.ravel(), val
                    nn = np.zeros(3)
                    nn[ax] = side
                    pts.append(p)
                    nrm.append(np.repeat(nn[None], len(p), axis=0))
        return np.concatenate(pts), np.concatenate(nrm), step

    def hit(self, o, d):
        best = np.full(len(o), np.inf)
        label = np.zeros(len(o), dtype=np.uint8)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            for lo, hi, lab in self.boxes:
                t0 = (lo - o) * inv
                t1 = (hi - o) * inv
                tn = np.nanmax(np.minimum(t0, t1), axis=1)
                tf = np.nanmin(np.maximum(t0, t1), axis=1)
                hit = (tn <= tf) & (tf > 0) & (tn < best)
                best = np.where(hit, tn, best)
                label = np.where(hit, lab, label).astype(np.uint8)
        return label

    def mesh(self):
        verts, tris = [], []
        quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
        for lo, hi, _ in self.boxes:
            base = len(verts)
            for i in range(8):
                verts.append([hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]])
            for a, b, c, d in quads:
                tris += [[base + a, base + b, base + c], [base + a, base + c, base + d]]
        return TriangleMesh(np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64))


def _shape(kind):
    if kind == "sphere":
        return _Sphere()
    if kind == "two-box":
        return _Boxes([((-1.0, -0.5, -0.5), (-0.1, 0.5, 0.5), 1), ((0.1, -0.4, -0.5), (0.9, 0.4, 0.3), 2)])
    if kind == "steel-frame-toy":
        w, h = 0.08, 0.8
        beams = []
        for sx in (-1, 1):
            for sy in (-1, 1):
                c = np.array([sx * (h - w), sy * (h - w)])
                beams.append(((c[0] - w, c[1] - w, -h), (c[0] + w, c[1] + w, h), 1))
        for z in (-h + w, h - w):
            for s in (-1, 1):
                beams.append(((-h + 2 * w, s * (h - w) - w, z - w), (h - 2 * w, s * (h - w) + w, z + w), 1))
                beams.append(((s * (h - w) - w, -h + 2 * w, z - w), (s * (h - w) + w, h - 2 * w, z + w), 1))
        return _Boxes(beams)
    raise ValueError(f"unknown synthetic scene {kind!r}; choose from {KINDS}")


# ----------------------------------------------------------------- scene

@dataclass
class SynthScene:
    kind: str
    seed: int
    cameras: list
    images: list
    points: list
    labels: list
    targets: list
    gt_field: GaussianField
    gt_mesh: TriangleMesh
    heldout: set
    radius: float

    def views(self, split="train"):
        out = []
        for im, lab in zip(self.images, self.labels):
            held = im.image_id in self.heldout
            if split == "all" or (split == "train") != held:
                out.append(View(self.cameras[0], im, MaskPyramid.from_labels(lab)))
        return out

    def target_images(self, split="train"):
        return [t for im, t in zip(self.images, self.targets)
                if split == "all" or (split == "train") != (im.image_id in self.heldout)]


def _level_offset(fld, pts, nrm, reach):
    """Median outward distance from the samples to where the field's opacity,
    accumulated along inward normal rays, reaches one half.  ``reach`` must
    stay below the gap between separate parts or the rays start inside one."""
    o = pts + reach * nrm
    lo, hi = np.zeros(len(pts)), np.full(len(pts), 2.0 * reach)
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        above = _ray_opacity_many(fld, o, -nrm, mid) >= 0.5
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return float(np.median(reach - 0.5 * (lo + hi)))


def gt_field(kind, n_gaussians=300, overlap=OVERLAP, calibrate=CALIBRATION_ROUNDS):
    """Flat, nearly opaque Gaussians tangent to the surface; ``overlap`` is the
    tangential std as a fraction of the sample spacing.

    Overlapping flat disks build a shell whose half-opacity surface sits
    outside the analytic one, so the centers are pulled inward along the
    normals until the two agree on average.
    """
    shape = _shape(kind)
    pts, nrm, spacing = shape.surface(n_gaussians)
    n = len(pts)
    scales = np.column_stack([np.full(n, overlap * spacing), np.full(n, overlap * spacing),
                              np.full(n, THICKNESS)])
    coeffs = sh.rgb_to_dc(texture(pts))[:, None, :]
    quats = frame_quats(nrm)
    shift = 0.0
    fld = GaussianField(pts, quats, np.log(scales), np.full(n, logit(GT_OPACITY)), coeffs)
    for _ in range(calibrate):
        shift += _level_offset(fld, pts, nrm, 10 * THICKNESS)
        fld = GaussianField(pts - shift * nrm, quats, np.log(scales), np.full(n, logit(GT_OPACITY)), coeffs)
    return fld


def perturb(fld: GaussianField, rel=0.05, scale=None, seed=0) -> GaussianField:
    """Relative noise of ``rel`` on every parameter group.

    Positions move by ``rel * scale`` (per-axis std); ``scale=None`` uses each
    Gaussian's own largest standard deviation.  Scales and opacities
    are multiplied by ``exp(rel * N)``, colors shift by ``rel * N``, and
    quaternions get ``rel * N`` before renormalization.
    """
    rng = np.random.default_rng(seed)
    n = len(fld)
    step = np.max(fld.scales, axis=1) if scale is None else np.full(n, float(scale))
    q = fld.quats + rel * rng.standard_normal((n, 4))
    op = np.clip(fld.opacities * np.exp(rel * rng.standard_normal(n)), 1e-4, 1 - 1e-4)
    coeffs = fld.sh_coeffs.copy()
    coeffs[:, 0] += rel * rng.standard_normal((n, 3)) / sh.C0
    return GaussianField(
        fld.positions + rel * step[:, None] * rng.standard_normal((n, 3)),
        q / np.linalg.norm(q, axis=1, keepdims=True),
        fld.log_scales + rel * rng.standard_normal((n, 3)),
        logit(op),
        coeffs,
    )


def synth_scene(kind="sphere", seed=0, n_views=12, n_heldout=4, size=64, n_gaussians=300,
                camera_distance=4.0, n_points=400, n_clutter=100) -> SynthScene:
    """Build a deterministic synthetic scene; image ids 1..n_views train, the rest are held out.

    ``size`` is the side of a square image or a ``(width, height)`` pair.
    """
    rng = np.random.default_rng(seed)
    shape = _shape(kind)
    W, H = (size, size) if np.isscalar(size) else (int(size[0]), int(size[1]))
    focal = 1.25 * min(W, H)
    cam = CameraModel(1, "PINHOLE", W, H, focal, focal, W / 2, H / 2)
    total = n_views + n_heldout
    dirs = fibonacci_sphere(total)
    order = np.concatenate([[i for i in range(total) if i % 4 != 3 or i // 4 >= n_heldout],
                            [i for i in range(total) if i % 4 == 3 and i // 4 < n_heldout]])
    dist = camera_distance * shape.radius
    fld = gt_field(kind, n_gaussians)

    images, labels, targets = [], [], []
    for k, i in enumerate(order.astype(int)):
        R, t = look_at(dist * dirs[i])
        im = PosedImage(k + 1, 1, rotmat_to_qvec(R), t, f"view_{k + 1:03d}.png")
        rays = make_rays(cam, im)
        lab = shape.hit(rays.origins, rays.dirs).reshape(H, W)
        pyr = MaskPyramid.from_labels(lab)
        color, *_ = render_rays(fld, make_rays(cam, im, pyr.weights))
        # targets go through 8-bit quantization so on-disk and in-memory scenes agree
        img = np.clip(np.round(color.reshape(H, W, 3) * 255.0), 0, 255) / 255.0
        images.append(im)
        labels.append(lab)
        targets.append(img)

    # sparse points: surface samples plus clutter on a ground plane below the object
    sp, sn, _ = shape.surface(n_points)
    sp = sp + 0.002 * shape.radius * rng.standard_normal(sp.shape)
    ground = np.column_stack([rng.uniform(-2, 2, (n_clutter, 2)) * shape.radius,
                              np.full(n_clutter, -1.5 * shape.radius)])
    allp = np.concatenate([sp, ground])
    normals = np.concatenate([sn, np.tile([0.0, 0.0, 1.0], (n_clutter, 1))])
    colors = np.concatenate([texture(sp), np.full((n_clutter, 3), 0.4)])
    tracks = [[] for _ in allp]
    for im in images:
        Xc = allp @ im.R.T + im.tvec
        z = Xc[:, 2]
        u = focal * Xc[:, 0] / z + W / 2
        v = focal * Xc[:, 1] / z + H / 2
        facing = np.sum(normals * (im.center - allp), axis=1) > 0
        ok = (z > 0) & facing & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        idx = np.nonzero(ok)[0]
        im.points2d = np.column_stack([u[idx], v[idx]])
        im.point3d_ids = idx.astype(np.int64) + 1
        for j, pid in enumerate(idx):
            tracks[pid].append((im.image_id, j))
    points = [SparsePoint(i + 1, allp[i], colors[i], tracks[i], 0.5) for i in range(len(allp))]
    heldout = {im.image_id for im in images[n_views:]}
    return SynthScene(kind, seed, [cam], images, points, labels, targets, fld, shape.mesh(),
                      heldout, shape.radius)


def write_scene(scene: SynthScene, workdir, init_noise=0.05):
    """Lay the scene out in the workdir contract (COLMAP text, PNGs, masks, metadata)."""
    wd = Path(workdir)
    for sub in ("colmap", "images", "masks", "checkpoints"):
        (wd / sub).mkdir(parents=True, exist_ok=True)
    write_colmap_text(wd / "colmap", scene.cameras, scene.images, scene.points)
    for im, lab, img in zip(scene.images, scene.labels, scene.targets):
        save_image(wd / "images" / im.name, img)
        save_label_mask(wd / "masks" / im.name, lab)
    write_mesh(scene.gt_mesh, wd / "gt_mesh.obj")
    save_checkpoint(scene.gt_field, wd / "gt_field.mgf")
    save_checkpoint(perturb(scene.gt_field, init_noise, None, scene.seed), wd / "init.mgf")
    meta = {
        "kind": scene.kind,
        "seed": scene.seed,
        "radius": scene.radius,
        "init_noise": init_noise,
        "heldout": sorted(im.name for im in scene.images if im.image_id in scene.heldout),
    }
    (wd / "synth.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


__all__ = ["KINDS", "SynthScene", "synth_scene", "write_scene", "gt_field", "perturb",
           "fibonacci_sphere", "look_at", "icosphere", "texture"]
