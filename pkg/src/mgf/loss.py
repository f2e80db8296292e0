"""Training losses and their gradients w.r.t. the rendered quantities.

Each loss has a public value function and a private ``_*_grad`` twin that
returns ``(value, gradient)``; the trainer uses the twins to seed
``render.backward``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

WINDOW = 11
WINDOW_SIGMA = 1.5
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
LAMBDAS = (0.5, 0.5, 100.0, 0.05)
ALPHA_L1 = 0.8
BETA_SSIM = 0.2
GRAD_FLOOR = 1e-3


class ScaleFallbackWarning(UserWarning):
    """MS-SSIM input too small for the requested scales."""


def _gauss_kernel(size=WINDOW, sigma=WINDOW_SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


_KERNEL = _gauss_kernel()
_R = WINDOW // 2


def _as3(x):
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 2 else x


def _pad(x):
    return np.pad(x, ((_R, _R), (_R, _R), (0, 0)), mode="edge")


def _pad_adjoint(g, H, W):
    """Adjoint of edge-replication padding by ``_R`` on both spatial axes."""
    r = _R
    rows = np.zeros((H,) + g.shape[1:])
    rows[0] += g[:r + 1].sum(axis=0)
    rows[1:H - 1] += g[r + 1:r + H - 1]
    rows[H - 1] += g[r + H - 1:].sum(axis=0)
    out = np.zeros((H, W) + g.shape[2:])
    out[:, 0] += rows[:, :r + 1].sum(axis=1)
    out[:, 1:W - 1] += rows[:, r + 1:r + W - 1]
    out[:, W - 1] += rows[:, r + W - 1:].sum(axis=1)
    return out


def _blur(xp):
    y = ndimage.correlate1d(xp, _KERNEL, axis=0, mode="constant")
    return ndimage.correlate1d(y, _KERNEL, axis=1, mode="constant")


def _window_mean(x):
    """Gaussian-window mean with edge replication; output matches input size."""
    H, W = x.shape[:2]
    return _blur(_pad(x))[_R:_R + H, _R:_R + W]


def _window_mean_adjoint(g):
    H, W = g.shape[:2]
    gp = np.zeros((H + 2 * _R, W + 2 * _R) + g.shape[2:])
    gp[_R:_R + H, _R:_R + W] = g
    return _pad_adjoint(_blur(gp), H, W)


class _SSIMStats:
    """Windowed SSIM statistics of two (H, W, C) images."""

    def __init__(self, x, y, c1, c2):
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
        if x.shape[0] < WINDOW or x.shape[1] < WINDOW:
            raise ValueError(f"image {x.shape[:2]} smaller than the {WINDOW}x{WINDOW} window")
        self.x, self.y = x, y
        self.mx, self.my = _window_mean(x), _window_mean(y)
        self.sxx = _window_mean(x * x) - self.mx ** 2
        self.syy = _window_mean(y * y) - self.my ** 2
        self.sxy = _window_mean(x * y) - self.mx * self.my
        self.A1 = 2 * self.mx * self.my + c1
        self.A2 = 2 * self.sxy + c2
        self.B1 = self.mx ** 2 + self.my ** 2 + c1
        self.B2 = self.sxx + self.syy + c2
        self.cs = self.A2 / self.B2
        self.ssim = self.A1 * self.A2 / (self.B1 * self.B2)

    def backward(self, g_map, which="ssim"):
        """Gradient w.r.t. ``x`` of sum(g_map * map)."""
        if which == "ssim":
            S = self.ssim
            d_mx = S * (2 * self.my / self.A1 - 2 * self.mx / self.B1)
        else:
            S = self.cs
            d_mx = 0.0
        d_sxy = 2 * S / self.A2
        d_sxx = -S / self.B2
        g_mx = g_map * (d_mx - 2 * self.mx * d_sxx - self.my * d_sxy)
        g_mxx = g_map * d_sxx
        g_mxy = g_map * d_sxy
        return (_window_mean_adjoint(g_mx) + 2 * self.x * _window_mean_adjoint(g_mxx)
                + self.y * _window_mean_adjoint(g_mxy))


def _consts(max_val):
    return (0.01 * max_val) ** 2, (0.03 * max_val) ** 2


def ssim_map(a, b, max_val=1.0):
    """Per-pixel SSIM averaged over channels, shape (H, W)."""
    c1, c2 = _consts(max_val)
    return _SSIMStats(_as3(a), _as3(b), c1, c2).ssim.mean(axis=2)


def ssim(a, b, max_val=1.0):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    return float(ssim_map(a, b, max_val).mean())


def _ssim_grad(a, b, max_val=1.0):
    c1, c2 = _consts(max_val)
    x = _as3(a)
    st = _SSIMStats(x, _as3(b), c1, c2)
    g = st.backward(np.full(x.shape, 1.0 / x.size))
    return float(st.ssim.mean()), g.reshape(np.shape(a))


def _downsample(x):
    H, W = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:H, :W]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _downsample_adjoint(g, shape):
    out = np.zeros(shape)
    q = 0.25 * g
    for di in (0, 1):
        for dj in (0, 1):
            out[di:2 * g.shape[0]:2, dj:2 * g.shape[1]:2] += q
    return out


def _ms_ssim_grad(a, b, scales=5, max_val=1.0, need_grad=True):
    x, y = _as3(a), _as3(b)
    min_side = 2 ** (scales - 1) * WINDOW
    if min(x.shape[:2]) < min_side:
        warnings.warn(f"image {x.shape[:2]} too small for {scales}-scale MS-SSIM "
                      f"(needs {min_side}); falling back to single-scale SSIM", ScaleFallbackWarning, stacklevel=3)
        scales = 1
    weights = np.array(MS_WEIGHTS[:scales]) if scales > 1 else np.ones(1)
    weights = weights / weights.sum()
    c1, c2 = _consts(max_val)
    C = x.shape[2]
    stats, shapes = [], []
    xs, ys = x, y
    for s in range(scales):
        shapes.append(xs.shape)
        stats.append(_SSIMStats(xs, ys, c1, c2))
        if s < scales - 1:
            xs, ys = _downsample(xs), _downsample(ys)
    terms = np.stack([
        (st.cs if s < scales - 1 else st.ssim).reshape(-1, C).mean(axis=0)
        for s, st in enumerate(stats)
    ])  # (scales, C)
    pos = np.maximum(terms, 0.0)
    per_channel = np.prod(pos ** weights[:, None], axis=0)
    value = float(per_channel.mean())
    if not need_grad:
        return value, None
    g = np.zeros(shapes[-1])
    for s in reversed(range(scales)):
        st = stats[s]
        n_pix = shapes[s][0] * shapes[s][1]
        dterm = np.where(terms[s] > 0, per_channel * weights[s] / np.where(terms[s] > 0, terms[s], 1.0), 0.0)
        dterm = dterm / C
        g_map = np.broadcast_to(dterm / n_pix, shapes[s])
        g_here = st.backward(g_map, "cs" if s < scales - 1 else "ssim")
        if s == scales - 1:
            g = g_here
        else:
            g = g_here + _downsample_adjoint(g, shapes[s])
    return value, g.reshape(np.shape(a))


def ms_ssim(a, b, scales=5, max_val=1.0):
    """Multi-scale SSIM; falls back to single-scale SSIM (with a warning) on small images."""
    return _ms_ssim_grad(a, b, scales, max_val, need_grad=False)[0]


def _l1_grad(a, b, pixel_weights=None):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    C = a.shape[2] if a.ndim == 3 else 1
    if pixel_weights is None:
        return float(np.abs(diff).mean()), np.sign(diff) / diff.size
    w = np.asarray(pixel_weights, dtype=np.float64)
    if w.shape != a.shape[:2]:
        raise ValueError(f"weight map {w.shape} does not match image {a.shape[:2]}")
    total = w.sum()
    if total <= 0:
        raise ValueError("pixel weights are all zero")
    wb = w[..., None] if a.ndim == 3 else w
    return float((wb * np.abs(diff)).sum() / (total * C)), wb * np.sign(diff) / (total * C)


def l1_loss(a, b, pixel_weights=None):
    """Mean absolute difference, weighted per pixel when weights are given."""
    return _l1_grad(a, b, pixel_weights)[0]


def _boundary_grad(rendered, target, weights, alpha=ALPHA_L1, beta=BETA_SSIM, max_val=1.0):
    r, t = _as3(rendered), _as3(target)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != r.shape[:2]:
        raise ValueError(f"weight map {w.shape} does not match image {r.shape[:2]}")
    total = w.sum()
    if total <= 0:
        raise ValueError("boundary_loss: all-zero weights")
    C = r.shape[2]
    diff = r - t
    l1_term = float((w * np.abs(diff).mean(axis=2)).sum() / total)
    c1, c2 = _consts(max_val)
    st = _SSIMStats(r, t, c1, c2)
    dssim = (1.0 - st.ssim.mean(axis=2)) / 2.0
    ssim_term = float((w * dssim).sum() / total)
    g = alpha * (w / (total * C))[..., None] * np.sign(diff)
    g_map = np.broadcast_to((-beta * w / (2.0 * total * C))[..., None], r.shape)
    g = g + st.backward(g_map)
    return alpha * l1_term + beta * ssim_term, g.reshape(np.shape(rendered)), (l1_term, ssim_term)


def boundary_loss(rendered, target, weights, alpha=ALPHA_L1, beta=BETA_SSIM):
    """Weight-map-weighted L1 + D-SSIM, normalized by the total weight."""
    return _boundary_grad(rendered, target, weights, alpha, beta)[0]


def sobel_magnitude(img):
    gray = np.asarray(img, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def _crop_gather(mask):
    """Bounding-box crop (at least one SSIM window) of ``mask`` whose
    off-mask pixels point at their nearest in-mask pixel."""
    H, W = mask.shape
    ys, xs = np.nonzero(mask)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1

    def widen(lo, hi, n):
        need = WINDOW - (hi - lo)
        if need > 0:
            lo = max(0, lo - (need + 1) // 2)
            hi = min(n, lo + WINDOW)
            lo = max(0, hi - WINDOW)
        return lo, hi

    y0, y1 = widen(y0, y1, H)
    x0, x1 = widen(x0, x1, W)
    sub = mask[y0:y1, x0:x1]
    _, (iy, ix) = ndimage.distance_transform_edt(~sub, return_indices=True)
    return iy + y0, ix + x0


@dataclass
class MaskTerm:
    label: int
    delta: float
    value: float


def _mlpm_grad(rendered, target, labels, alpha=ALPHA_L1, beta=BETA_SSIM,
               grad_floor=GRAD_FLOOR, scales=5):
    r, t = _as3(rendered), _as3(target)
    labels = np.asarray(labels)
    ids = [int(v) for v in np.unique(labels) if v != 0]
    if not ids:
        raise ValueError("mlpm_loss: no masked pixels")
    C = r.shape[2]
    mag = sobel_magnitude(t)
    g = np.zeros(r.shape)
    details = []
    num = 0.0
    den = 0.0
    parts = []
    for lab in ids:
        mask = labels == lab
        delta = 1.0 / max(float(mag[mask].mean()), grad_floor)
        n = mask.sum()
        diff = r[mask] - t[mask]
        l1 = float(np.abs(diff).mean())
        gy, gx = _crop_gather(mask)
        ms, g_ms = _ms_ssim_grad(r[gy, gx], t[gy, gx], scales)
        value = alpha * l1 + beta * (1.0 - ms)
        details.append(MaskTerm(lab, delta, value))
        num += delta * value
        den += delta
        parts.append((mask, n, diff, gy, gx, g_ms, delta))
    for mask, n, diff, gy, gx, g_ms, delta in parts:
        s = delta / den
        g[mask] += s * alpha * np.sign(diff) / (n * C)
        np.add.at(g, (gy, gx), -s * beta * g_ms)
    return num / den, g.reshape(np.shape(rendered)), details


def mlpm_loss(rendered, target, labels, alpha=ALPHA_L1, beta=BETA_SSIM, grad_floor=GRAD_FLOOR):
    """Multi-level perceptual mask loss: per-label L1 + MS-SSIM, weighted by the
    inverse mean Sobel gradient of the target inside each label.

    Returns ``(value, [MaskTerm(label, delta, value), ...])``.
    """
    value, _, details = _mlpm_grad(rendered, target, labels, alpha, beta, grad_floor)
    return value, details


def _distortion_grad(weights, depths):
    """Mean over rays of sum_ij w_i w_j |t_i - t_j| for rows sorted by depth."""
    w = np.asarray(weights, dtype=np.float64)
    t = np.asarray(depths, dtype=np.float64)
    if w.ndim == 1:
        w, t = w[None], t[None]
    P = w.shape[0]
    if P == 0 or w.shape[1] == 0:
        return 0.0, np.zeros_like(w), np.zeros_like(t)
    order = np.argsort(t, axis=1, kind="stable")
    ws = np.take_along_axis(w, order, axis=1)
    ts = np.take_along_axis(t, order, axis=1)
    W_before = np.cumsum(ws, axis=1) - ws
    WT_before = np.cumsum(ws * ts, axis=1) - ws * ts
    W_after = ws.sum(axis=1, keepdims=True) - W_before - ws
    WT_after = (ws * ts).sum(axis=1, keepdims=True) - WT_before - ws * ts
    per_ray = 2.0 * np.sum(ws * (ts * W_before - WT_before), axis=1)
    gw_s = 2.0 * (ts * W_before - WT_before + WT_after - ts * W_after) / P
    gt_s = 2.0 * ws * (W_before - W_after) / P
    gw = np.empty_like(w)
    gt = np.empty_like(t)
    np.put_along_axis(gw, order, gw_s, axis=1)
    np.put_along_axis(gt, order, gt_s, axis=1)
    return float(per_ray.mean()), gw, gt


def depth_distortion(weights, depths):
    """Depth distortion over per-ray intersection lists.

    ``weights`` and ``depths`` are (rays, K) arrays of compositing weights
    ``a_k T_k`` and depths ``t*_k`` (zero-weight padding is harmless).
    """
    return _distortion_grad(weights, depths)[0]


def _normal_grad(rendered_normal, depth_normal, alpha, valid):
    n = np.asarray(rendered_normal, dtype=np.float64)
    N = np.asarray(depth_normal, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    cnt = int(valid.sum())
    zero = (np.zeros_like(n), np.zeros_like(N), np.zeros_like(a))
    if cnt == 0:
        return 0.0, *zero
    dot = np.sum(n * N, axis=-1)
    per = np.where(valid, a * (1.0 - dot), 0.0)
    scale = np.where(valid, 1.0 / cnt, 0.0)
    g_n = -(scale * a)[..., None] * N
    g_N = -(scale * a)[..., None] * n
    g_a = scale * (1.0 - dot)
    return float(per.sum() / cnt), g_n, g_N, g_a


def normal_consistency(rendered_normal, depth_normal, alpha, valid=None):
    """Mean over valid pixels of alpha * (1 - n . N)."""
    if valid is None:
        valid = np.asarray(alpha) > 0
    return _normal_grad(rendered_normal, depth_normal, alpha, valid)[0]


def depth_normals(depth, origins, dirs, chi):
    """Surface normals from central differences of the back-projected depth.

    ``origins``/``dirs``/``chi`` are (H, W, ...) ray grids.  Returns
    ``(normals, valid, cache)``; a pixel is valid when it and its four
    neighbours are all in the mask.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    X = origins + depth[..., None] * dirs
    chi = np.asarray(chi, dtype=bool)
    valid = np.zeros((H, W), dtype=bool)
    valid[1:-1, 1:-1] = (chi[1:-1, 1:-1] & chi[:-2, 1:-1] & chi[2:, 1:-1]
                         & chi[1:-1, :-2] & chi[1:-1, 2:])
    dy = np.zeros((H, W, 3))
    dx = np.zeros((H, W, 3))
    dy[1:-1, 1:-1] = X[2:, 1:-1] - X[:-2, 1:-1]
    dx[1:-1, 1:-1] = X[1:-1, 2:] - X[1:-1, :-2]
    c = np.cross(dy, dx)
    norm = np.linalg.norm(c, axis=-1)
    valid &= norm > 1e-12
    N = np.where(valid[..., None], c / np.where(norm > 1e-12, norm, 1.0)[..., None], 0.0)
    return N, valid, (dirs, dy, dx, N, norm, valid)


def depth_normals_backward(g_N, cache):
    dirs, dy, dx, N, norm, valid = cache
    H, W = valid.shape
    g_N = np.where(valid[..., None], g_N, 0.0)
    g_c = (g_N - N * np.sum(N * g_N, axis=-1, keepdims=True)) / np.where(valid, norm, 1.0)[..., None]
    g_dy = np.cross(dx, g_c)
    g_dx = np.cross(g_c, dy)
    g_X = np.zeros((H, W, 3))
    g_X[2:, 1:-1] += g_dy[1:-1, 1:-1]
    g_X[:-2, 1:-1] -= g_dy[1:-1, 1:-1]
    g_X[1:-1, 2:] += g_dx[1:-1, 1:-1]
    g_X[1:-1, :-2] -= g_dx[1:-1, 1:-1]
    return np.sum(g_X * dirs, axis=-1)


@dataclass
class LossReport:
    l1: float = 0.0
    ssim: float = 0.0
    boundary: float = 0.0
    mlpm: float = 0.0
    depth_distortion: float = 0.0
    normal_consistency: float = 0.0
    total: float = 0.0
    per_mask: list = field(default_factory=list)

    CSV_FIELDS = ("l1", "ssim", "boundary", "mlpm", "depth_dist", "normal", "total")

    def csv_row(self):
        return [self.l1, self.ssim, self.boundary, self.mlpm, self.depth_distortion,
                self.normal_consistency, self.total]


def total_loss(mlpm=0.0, boundary=0.0, depth_distortion=0.0, normal_consistency=0.0,
               lambdas=LAMBDAS, **extra) -> LossReport:
    """Weighted sum of the four training terms, packaged with its parts."""
    parts = (mlpm, boundary, depth_distortion, normal_consistency)
    for name, v in zip(("mlpm", "boundary", "depth_distortion", "normal_consistency"), parts):
        if not np.isfinite(v) or v < 0:
            raise ValueError(f"loss component {name} = {v} is not finite and non-negative")
    total = sum(l * v for l, v in zip(lambdas, parts))
    return LossReport(mlpm=mlpm, boundary=boundary, depth_distortion=depth_distortion,
                      normal_consistency=normal_consistency, total=total, **extra)
