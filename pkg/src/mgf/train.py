"""Optimization of a Gaussian field against the masked multi-term objective."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import loss as L
from .gaussians import GaussianField, save_checkpoint
from .mask_field import MaskPyramid, View, weight_map
from .render import RenderGrads, backward as render_backward, make_rays, render_rays

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15


@dataclass
class TrainConfig:
    iterations: int = 7000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    densify_interval: int = 100
    densify_from: int = 500
    densify_until_frac: float = 0.6
    grad_threshold: float = 2e-4
    prune_opacity: float = 5e-3
    split_scale_frac: float = 0.01
    max_gaussians: int = 500
    w_edge: float = 10.0
    lambdas: tuple = L.LAMBDAS
    alpha_l1: float = L.ALPHA_L1
    beta_ssim: float = L.BETA_SSIM
    distortion_near: float = 0.2
    distortion_far: float = 100.0
    distortion_from: int = 3000
    normal_from: int = 7000
    checkpoint_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("grad_threshold", "prune_opacity", "w_edge", "densify_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(self.lambdas) != 4:
            raise ValueError("lambdas needs four entries")

    @property
    def densify_until(self):
        return int(self.densify_until_frac * self.iterations)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)

    def active_lambdas(self, iteration=None):
        """Loss weights at ``iteration``: the depth and normal terms only switch
        on after their warm-up, and ``None`` means fully switched on."""
        l1, l2, l3, l4 = self.lambdas
        if iteration is not None:
            l3 = l3 if iteration > self.distortion_from else 0.0
            l4 = l4 if iteration > self.normal_from else 0.0
        return (l1, l2, l3, l4)

    def to_dict(self):
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    extent: float = 1.0
    grad_accum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_count: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def for_field(cls, fld: GaussianField, extent=1.0):
        p = fld.params()
        return cls({k: np.zeros_like(a) for k, a in p.items()},
                   {k: np.zeros_like(a) for k, a in p.items()},
                   0, float(extent), np.zeros(len(fld)), np.zeros(len(fld)))

    def select(self, index):
        """Keep optimizer rows for the surviving / duplicated Gaussians."""
        self.m = {k: a[index] for k, a in self.m.items()}
        self.v = {k: a[index] for k, a in self.v.items()}
        self.grad_accum = self.grad_accum[index]
        self.grad_count = self.grad_count[index]

    def reset_new(self, rows):
        for d in (self.m, self.v):
            for a in d.values():
                a[rows] = 0.0
        self.grad_accum[rows] = 0.0
        self.grad_count[rows] = 0.0


def position_lr(cfg: TrainConfig, step, extent=1.0):
    """Log-linear decay from the initial to the final position rate."""
    if cfg.iterations <= 1:
        return cfg.lr_position * extent
    t = min(max(step / cfg.iterations, 0.0), 1.0)
    lr = math.exp((1 - t) * math.log(cfg.lr_position) + t * math.log(cfg.lr_position_final))
    return lr * extent


def learning_rates(cfg: TrainConfig, state: OptimizerState):
    return {
        "positions": position_lr(cfg, state.step, state.extent),
        "quats": cfg.lr_rotation,
        "log_scales": cfg.lr_scale,
        "opacity_logits": cfg.lr_opacity,
        "sh_coeffs": cfg.lr_color,
    }


def scene_extent(views):
    """Radius of the camera-center cloud, padded by 10%."""
    centers = np.stack([v.image.center for v in views])
    return 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))


def ndc_depth(t, near, far):
    """Normalized depth ``far/(far-near) * (1 - near/t)`` and its derivative.

    Depth distortion is measured on this scale (zero padding stays zero).
    """
    t = np.asarray(t, dtype=np.float64)
    pos = t > 0
    ts = np.where(pos, t, 1.0)
    k = far / (far - near)
    m = np.where(pos, k * (1.0 - near / ts), 0.0)
    return m, np.where(pos, k * near / (ts * ts), 0.0)


def view_objective(fld: GaussianField, view: View, target, cfg: TrainConfig | None = None,
                   need_grad=True, iteration=None):
    """Total loss on one view and, optionally, its gradient per parameter.

    ``iteration`` applies the regularizer warm-up; ``None`` weighs every term.
    Returns ``(LossReport, grads | None)``.
    """
    cfg = cfg or TrainConfig()
    lam = cfg.active_lambdas(iteration)
    pyr = view.pyramid
    if pyr is None:
        raise ValueError("view has no mask pyramid")
    target = np.asarray(target, dtype=np.float64)
    rays = make_rays(view.camera, view.image, pyr.weights)
    H, W = rays.shape
    color, alpha, depth, normal, cache = render_rays(fld, rays)
    img = color.reshape(H, W, 3)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", L.ScaleFallbackWarning)
        mlpm, g_mlpm, per_mask = L._mlpm_grad(img, target, pyr.labels, cfg.alpha_l1, cfg.beta_ssim)
    bnd, g_bnd, (l1_term, dssim_term) = L._boundary_grad(img, target, pyr.weights,
                                                         cfg.alpha_l1, cfg.beta_ssim)
    m, dm_dt = ndc_depth(cache.tstar, cfg.distortion_near, cfg.distortion_far)
    dd, g_w, g_m = L._distortion_grad(cache.w, m)
    g_t = g_m * dm_dt
    N, nvalid, ncache = L.depth_normals(depth.reshape(H, W), rays.origins.reshape(H, W, 3),
                                        rays.dirs.reshape(H, W, 3), rays.chi.reshape(H, W))
    nc, g_n, g_N, g_a = L._normal_grad(normal.reshape(H, W, 3), N, alpha.reshape(H, W), nvalid)

    report = L.total_loss(mlpm, bnd, dd, nc, lambdas=lam, l1=l1_term, ssim=1.0 - 2.0 * dssim_term,
                          per_mask=[(t.label, t.delta, t.value) for t in per_mask])
    if not need_grad:
        return report, None
    g_depth = lam[3] * L.depth_normals_backward(g_N, ncache)
    up = RenderGrads(
        color=(lam[0] * g_mlpm + lam[1] * g_bnd).reshape(-1, 3),
        alpha=(lam[3] * g_a).reshape(-1),
        depth=g_depth.reshape(-1),
        normal=(lam[3] * g_n).reshape(-1, 3),
        w=lam[2] * g_w,
        t=lam[2] * g_t,
    )
    return report, render_backward(fld, cache, up)


def step(fld: GaussianField, grads, state: OptimizerState, lrs) -> GaussianField:
    """One Adam update; quaternions are renormalized afterwards."""
    b1, b2 = ADAM_BETAS
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = {}
    for name, p in fld.params().items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        new[name] = p - lrs[name] * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    q = new["quats"]
    new["quats"] = q / np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianField(**new)


def densify_and_prune(fld: GaussianField, state: OptimizerState, cfg: TrainConfig, rng) -> GaussianField:
    """Clone small / split large high-gradient Gaussians, then drop faint ones."""
    n = len(fld)
    avg = np.where(state.grad_count > 0, state.grad_accum / np.maximum(state.grad_count, 1), 0.0)
    hot = avg > cfg.grad_threshold
    room = max(cfg.max_gaussians - n, 0)
    if hot.sum() > room:
        # keep the strongest candidates; ties go to the lower index
        order = np.lexsort((np.arange(n), -avg))
        keep_hot = np.zeros(n, dtype=bool)
        keep_hot[order[:room]] = True
        hot &= keep_hot
    big = fld.scales.max(axis=1) > cfg.split_scale_frac * state.extent
    clone = np.nonzero(hot & ~big)[0]
    split = np.nonzero(hot & big)[0]

    parts = [fld]
    rows = [np.arange(n)]
    if len(clone):
        parts.append(fld.subset(clone))
        rows.append(clone)
    if len(split):
        kids = []
        for _ in range(2):
            c = fld.subset(split).copy()
            noise = rng.standard_normal((len(split), 3)) * c.scales
            c.positions = c.positions + np.einsum("nij,nj->ni", c.rotmats, noise)
            c.log_scales = c.log_scales - math.log(1.6)
            kids.append(c)
        parts.extend(kids)
        rows.extend([split, split])
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    index = np.concatenate(rows)
    state.select(index)
    fresh = np.arange(n, len(out))
    state.reset_new(fresh)

    alive = np.ones(len(out), dtype=bool)
    if len(split):
        alive[split] = False  # parents are replaced by their two children
    alive &= out.opacities >= cfg.prune_opacity
    if not alive.any():
        raise RuntimeError(f"densify_and_prune: every Gaussian fell below opacity {cfg.prune_opacity}")
    keep = np.nonzero(alive)[0]
    out = out.subset(keep)
    state.select(keep)
    state.grad_accum[:] = 0.0
    state.grad_count[:] = 0.0
    return out


def knn_scale(points, k=3):
    """Mean distance to the ``k`` nearest other points."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return np.full(len(points), 0.01)
    kk = min(k, len(points) - 1)
    d, _ = cKDTree(points).query(points, kk + 1)
    return np.maximum(d[:, 1:].mean(axis=1), 1e-6)


def init_from_points(points, sh_degree=0, opacity=0.1):
    """Field seeded from masked sparse points (isotropic kNN scale)."""
    pos = np.stack([p.position for p in points])
    col = np.stack([p.color for p in points])
    return GaussianField.from_points(pos, col, knn_scale(pos), opacity=opacity, sh_degree=sh_degree)


@dataclass
class FitResult:
    field: GaussianField
    history: list
    state: OptimizerState


def fit(views, targets, cfg: TrainConfig, init: GaussianField, log_path=None,
        checkpoint_dir=None, callback=None) -> FitResult:
    """Train ``init`` against ``targets`` (one image per view).

    Views are sampled uniformly at random from a generator seeded by
    ``cfg.seed``.  ``history`` holds one ``LossReport`` per iteration.
    """
    if len(views) != len(targets):
        raise ValueError("need one target image per view")
    if not views:
        raise ValueError("fit: no training views")
    if any(v.pyramid is None for v in views):
        raise ValueError("every training view needs a mask pyramid")
    views = [v if v.pyramid.w_edge == cfg.w_edge else v._replace(pyramid=MaskPyramid(
        v.pyramid.labels, v.pyramid.boundary,
        weight_map(v.pyramid.labels, v.pyramid.boundary, cfg.w_edge), cfg.w_edge))
        for v in views]
    rng = np.random.default_rng(cfg.seed)
    fld = init.copy()
    state = OptimizerState.for_field(fld, scene_extent(views))
    history = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="", encoding="ascii")
        writer = csv.writer(fh)
        writer.writerow(("iter",) + L.LossReport.CSV_FIELDS)
    try:
        for it in range(1, cfg.iterations + 1):
            vi = int(rng.integers(len(views)))
            report, grads = view_objective(fld, views[vi], targets[vi], cfg, iteration=it)
            history.append(report)
            if writer:
                writer.writerow([it] + [repr(float(x)) for x in report.csv_row()])
            gnorm = np.linalg.norm(grads["positions"], axis=1)
            touched = gnorm > 0
            state.grad_accum += gnorm
            state.grad_count += touched
            fld = step(fld, grads, state, learning_rates(cfg, state))
            if (cfg.densify_from <= it <= cfg.densify_until and it % cfg.densify_interval == 0):
                fld = densify_and_prune(fld, state, cfg, rng)
            if checkpoint_dir is not None and cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
                save_checkpoint(fld, Path(checkpoint_dir) / f"iter_{it:06d}.mgf")
            if callback is not None:
                callback(it, fld, report)
    finally:
        if fh is not None:
            fh.close()
    return FitResult(fld, history, state)
