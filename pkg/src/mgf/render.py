"""Boundary-weighted, mask-gated volume rendering of a Gaussian field.

Every pixel casts one ray.  Rays whose weight is zero (outside the
building mask) are never evaluated and render as exact zeros.  Along an
evaluated ray each Gaussian contributes its peak value ``E`` at ``t*``;
the effective opacity is ``clamp(alpha * w * E, 0, 1 - eps)`` and the
contributions are composited front to back in ``t*`` order.

``backward`` pulls gradients on the rendered color/alpha/depth/normal and
on the per-intersection compositing weights back to the field parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sh
from .gaussians import GaussianField, rotmat_grad_to_quat

OPACITY_EPS = 1e-4
T_MIN = 1e-4
CULL_MAHALANOBIS2 = 9.0
RAY_CHUNK = 256
PREVIEW_BACKGROUND = (180, 238, 180)


@dataclass
class RayBundle:
    origins: np.ndarray
    dirs: np.ndarray
    weights: np.ndarray
    chi: np.ndarray
    shape: tuple

    def __len__(self):
        return len(self.dirs)


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    cache: "RenderCache | None" = None


def make_rays(cam, pose, weights=None) -> RayBundle:
    """One ray per pixel through the pixel center; ``chi`` = weight > 0."""
    H, W = cam.height, cam.width
    if weights is None:
        weights = np.ones((H, W))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (H, W):
        raise ValueError(f"weight map {weights.shape} does not match camera {(H, W)}")
    u, v = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    R = pose.R
    d = d_cam.reshape(-1, 3) @ R
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.center, d.shape).copy()
    w = weights.reshape(-1)
    return RayBundle(origins, d, w, w > 0, (H, W))


def _rt_apply(R, v):
    """``R^T v`` written out elementwise so results never depend on batch shape."""
    return np.stack([
        R[..., 0, j] * v[..., 0] + R[..., 1, j] * v[..., 1] + R[..., 2, j] * v[..., 2]
        for j in range(3)
    ], axis=-1)


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


@dataclass
class RenderCache:
    """Dense (rays x intersections) state of a forward pass, sorted by t*."""

    ray_index: np.ndarray     # (P,) index into the full bundle
    origins: np.ndarray       # (P, 3)
    dirs: np.ndarray          # (P, 3)
    weights: np.ndarray       # (P,)
    gid: np.ndarray           # (P, K) Gaussian index, -1 for padding
    valid: np.ndarray         # (P, K) evaluated (not padding, before early exit)
    a: np.ndarray             # (P, K) effective opacity
    clamped: np.ndarray       # (P, K) opacity hit the 1 - eps ceiling
    T: np.ndarray             # (P, K) transmittance before the intersection
    w: np.ndarray             # (P, K) compositing weight a * T
    E: np.ndarray             # (P, K)
    tstar: np.ndarray         # (P, K)
    x_star: np.ndarray        # (P, K, 3) local point of closest approach
    o_g: np.ndarray           # (P, K, 3)
    r_g: np.ndarray           # (P, K, 3)
    view_dir: np.ndarray      # (P, K, 3) unit direction camera -> Gaussian center
    view_dist: np.ndarray     # (P, K)
    color: np.ndarray         # (P, K, 3) clamped SH color
    color_live: np.ndarray    # (P, K, 3) not clamped at zero
    normal_axis: np.ndarray   # (P, K) local axis used as the normal
    normal_sign: np.ndarray   # (P, K) +-1 so the normal faces the camera
    normal: np.ndarray        # (P, K, 3)
    alpha: np.ndarray         # (P,)
    depth_num: np.ndarray     # (P,)
    normal_sum: np.ndarray    # (P, 3)
    n_gaussians: int
    shape: tuple


def _intersections(fld, origins, dirs):
    """Culled, t*-sorted (ray, gaussian) pairs for rays given in world space."""
    R = fld.rotmats
    inv_s = 1.0 / fld.scales
    pos = fld.positions
    # Euclidean pre-cull: a pair inside the Mahalanobis bound lies within
    # 3 * max scale of the center, so the exact test only runs on survivors
    reach2 = CULL_MAHALANOBIS2 * np.max(fld.scales, axis=1) ** 2 * (1.0 + 1e-6) + 1e-12
    pp = np.sum(pos * pos, axis=1)
    rays, gids, ts, xs, ogs, rgs = [], [], [], [], [], []
    for start in range(0, len(dirs), RAY_CHUNK):
        o = origins[start:start + RAY_CHUNK]
        r = dirs[start:start + RAY_CHUNK]
        rr = np.sum(r * r, axis=1)[:, None]
        if np.all(o == o[0]):
            # one shared center: compare squared projections per Gaussian
            d0 = pos - o[0]
            dd = np.sum(d0 * d0, axis=1)
            along = r @ d0.T
            near = along * along >= (dd - reach2 - 1e-9 * (dd + 1.0))[None] * rr
        else:
            oo = np.sum(o * o, axis=1)[:, None]
            along = r @ pos.T - np.sum(o * r, axis=1)[:, None]
            perp2 = pp[None] - 2.0 * (o @ pos.T) + oo - along * along / rr
            near = perp2 <= reach2[None] + 1e-9 * (pp[None] + oo)
        ri, gi = np.nonzero(near)
        o_g = _rt_apply(R[gi], o[ri] - pos[gi]) * inv_s[gi]
        r_g = _rt_apply(R[gi], r[ri]) * inv_s[gi]
        t = -_dot(r_g, o_g) / _dot(r_g, r_g)
        x = o_g + t[..., None] * r_g
        d2 = _dot(x, x)
        keep = (d2 <= CULL_MAHALANOBIS2) & (t > 0)
        rays.append(ri[keep] + start)
        gids.append(gi[keep])
        ts.append(t[keep])
        xs.append(x[keep])
        ogs.append(o_g[keep])
        rgs.append(r_g[keep])
    cat = np.concatenate
    ray_i, g_i, t = cat(rays), cat(gids), cat(ts)
    order = np.lexsort((g_i, t, ray_i))
    return ray_i[order], g_i[order], t[order], cat(xs)[order], cat(ogs)[order], cat(rgs)[order]


def render_rays(fld: GaussianField, rays: RayBundle):
    """Render the rays with chi = 1; returns flat outputs plus the cache."""
    P_all = len(rays)
    color = np.zeros((P_all, 3))
    alpha = np.zeros(P_all)
    depth = np.zeros(P_all)
    normal = np.zeros((P_all, 3))
    ray_index = np.nonzero(rays.chi)[0]
    P = len(ray_index)
    origins = rays.origins[ray_index]
    dirs = rays.dirs[ray_index]
    weights = rays.weights[ray_index]

    if len(fld) and P:
        ray_i, g_i, tstar, x_star, o_g, r_g = _intersections(fld, origins, dirs)
    else:
        ray_i = g_i = np.zeros(0, dtype=np.int64)
        tstar = np.zeros(0)
        x_star = o_g = r_g = np.zeros((0, 3))
    counts = np.bincount(ray_i, minlength=P) if P else np.zeros(0, dtype=np.int64)
    K = int(counts.max()) if len(ray_i) else 0
    starts = np.cumsum(counts) - counts
    col = np.arange(len(ray_i)) - starts[ray_i] if len(ray_i) else np.zeros(0, dtype=np.int64)

    def dense(vals, fill=0.0, dtype=np.float64):
        out = np.full((P, K) + vals.shape[1:], fill, dtype=dtype)
        out[ray_i, col] = vals
        return out

    present = dense(np.ones(len(ray_i), dtype=bool), False, bool)
    gid = dense(g_i, -1, np.int64)
    E_flat = np.exp(-0.5 * _dot(x_star, x_star))
    op = fld.opacities[g_i] * weights[ray_i] * E_flat
    ceiling = 1.0 - OPACITY_EPS
    clamped_flat = op > ceiling
    a_raw = dense(np.minimum(op, ceiling))

    # view-dependent color and shortest-axis normal per intersection
    vd = fld.positions[g_i] - origins[ray_i]
    dist = np.sqrt(_dot(vd, vd))
    vdir = vd / dist[:, None]
    coeffs = fld.sh_coeffs[g_i]
    basis = sh.basis(vdir, fld.sh_degree)
    raw = np.full((len(g_i), 3), 0.5)
    for j in range(basis.shape[1]):
        raw += basis[:, j, None] * coeffs[:, j]
    axis = np.argmin(fld.log_scales, axis=1)[g_i]
    Rg = fld.rotmats[g_i]
    n_k = Rg[np.arange(len(g_i)), :, axis]
    sign = np.where(_dot(n_k, dirs[ray_i]) > 0, -1.0, 1.0)
    n_k = n_k * sign[:, None]

    T = np.ones(P)
    Tk = np.zeros((P, K))
    w = np.zeros((P, K))
    a = np.zeros((P, K))
    valid = np.zeros((P, K), dtype=bool)
    for k in range(K):
        live = present[:, k] & (T >= T_MIN)
        ak = np.where(live, a_raw[:, k], 0.0)
        Tk[:, k] = T
        a[:, k] = ak
        w[:, k] = ak * T
        valid[:, k] = live
        T = T * (1.0 - ak)

    c_dense = dense(np.maximum(raw, 0.0))
    t_dense = dense(tstar)
    n_dense = dense(n_k)
    C = np.zeros((P, 3))
    A = np.zeros(P)
    Dn = np.zeros(P)
    Nv = np.zeros((P, 3))
    for k in range(K):
        wk = w[:, k]
        C += wk[:, None] * c_dense[:, k]
        A += wk
        Dn += wk * t_dense[:, k]
        Nv += wk[:, None] * n_dense[:, k]

    nn = np.sqrt(_dot(Nv, Nv))
    n_unit = np.where(nn[:, None] > 1e-12, Nv / np.maximum(nn, 1e-12)[:, None], 0.0)
    color[ray_index] = C
    alpha[ray_index] = A
    depth[ray_index] = Dn / np.maximum(A, OPACITY_EPS)
    normal[ray_index] = n_unit

    cache = RenderCache(
        ray_index=ray_index, origins=origins, dirs=dirs, weights=weights,
        gid=gid, valid=valid, a=a, clamped=dense(clamped_flat, False, bool), T=Tk, w=w,
        E=dense(E_flat), tstar=t_dense, x_star=dense(x_star), o_g=dense(o_g), r_g=dense(r_g),
        view_dir=dense(vdir), view_dist=dense(dist, 1.0), color=c_dense,
        color_live=dense(raw > 0, False, bool), normal_axis=dense(axis, 0, np.int64),
        normal_sign=dense(sign, 1.0), normal=n_dense, alpha=A, depth_num=Dn, normal_sum=Nv,
        n_gaussians=len(fld), shape=rays.shape,
    )
    return color, alpha, depth, normal, cache


def render_image(fld: GaussianField, view, pyramid=None) -> RenderOutput:
    """Render a full view; ``view`` is a (camera, image[, pyramid]) tuple."""
    cam, pose = view[0], view[1]
    if pyramid is None and len(view) > 2:
        pyramid = view[2]
    weights = None if pyramid is None else pyramid.weights
    rays = make_rays(cam, pose, weights)
    color, alpha, depth, normal, cache = render_rays(fld, rays)
    H, W = rays.shape
    return RenderOutput(color.reshape(H, W, 3), alpha.reshape(H, W), depth.reshape(H, W),
                        normal.reshape(H, W, 3), cache)


def render_normals(fld: GaussianField, view) -> np.ndarray:
    return render_image(fld, view).normal


def render_pixel(gaussians, o, r, w=1.0, chi=1):
    """Composite one ray over Gaussians already sorted by t* along it.

    Returns (color, alpha, depth).  Uses the same kernel as ``render_image``
    so the two agree bit for bit.
    """
    if not isinstance(gaussians, GaussianField):
        gaussians = GaussianField.from_primitives(list(gaussians))
    o = np.asarray(o, dtype=np.float64).reshape(1, 3)
    r = np.asarray(r, dtype=np.float64).reshape(1, 3)
    if __debug__ and len(gaussians):
        o_g = _rt_apply(gaussians.rotmats, o - gaussians.positions) / gaussians.scales
        r_g = _rt_apply(gaussians.rotmats, np.broadcast_to(r, o_g.shape)) / gaussians.scales
        ts = -_dot(r_g, o_g) / _dot(r_g, r_g)
        assert np.all(np.diff(ts) >= 0), "render_pixel expects Gaussians sorted by t*"
    weight = float(w) if chi else 0.0
    rays = RayBundle(o, r, np.array([weight]), np.array([bool(chi) and weight > 0]), (1, 1))
    color, alpha, depth, _, _ = render_rays(gaussians, rays)
    return color[0], float(alpha[0]), float(depth[0])


def to_uint8(rgb, mask=None, preview=False):
    """Quantize a render; preview mode paints non-mask pixels light green."""
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    if preview and mask is not None:
        img[~np.asarray(mask, dtype=bool)] = PREVIEW_BACKGROUND
    return img


@dataclass
class RenderGrads:
    """Upstream gradients for ``backward``; flat per-ray arrays over the full bundle
    except ``w`` and ``t`` which follow the cache's dense layout."""

    color: np.ndarray | None = None
    alpha: np.ndarray | None = None
    depth: np.ndarray | None = None
    normal: np.ndarray | None = None
    w: np.ndarray | None = None
    t: np.ndarray | None = None


def backward(fld: GaussianField, cache: RenderCache, up: RenderGrads):
    """Gradients of a scalar loss w.r.t. every field parameter."""
    G = len(fld)
    grads = {
        "positions": np.zeros((G, 3)),
        "quats": np.zeros((G, 4)),
        "log_scales": np.zeros((G, 3)),
        "opacity_logits": np.zeros(G),
        "sh_coeffs": np.zeros_like(fld.sh_coeffs),
    }
    P, K = cache.gid.shape
    if P == 0 or K == 0:
        return grads
    idx = cache.ray_index

    def pick(arr, shape):
        if arr is None:
            return np.zeros((P,) + shape)
        return np.asarray(arr).reshape((-1,) + shape)[idx]

    gC = pick(up.color, (3,))
    gA = pick(up.alpha, ())
    gD = pick(up.depth, ())
    gN = pick(up.normal, (3,))

    A = cache.alpha
    Aeps = np.maximum(A, OPACITY_EPS)
    g_Dn = gD / Aeps
    gA = gA - np.where(A > OPACITY_EPS, gD * cache.depth_num / (Aeps * Aeps), 0.0)
    Nv = cache.normal_sum
    nn = np.sqrt(_dot(Nv, Nv))
    safe = nn > 1e-12
    n_unit = np.where(safe[:, None], Nv / np.maximum(nn, 1e-12)[:, None], 0.0)
    g_Nv = np.where(safe[:, None],
                    (gN - n_unit * _dot(n_unit, gN)[:, None]) / np.maximum(nn, 1e-12)[:, None], 0.0)

    gw = (_dot(gC[:, None, :], cache.color) + gA[:, None] + g_Dn[:, None] * cache.tstar
          + _dot(g_Nv[:, None, :], cache.normal))
    if up.w is not None:
        gw = gw + up.w
    gw = np.where(cache.valid, gw, 0.0)
    g_color = gC[:, None, :] * cache.w[..., None]
    g_t = g_Dn[:, None] * cache.w
    if up.t is not None:
        g_t = g_t + up.t
    g_t = np.where(cache.valid, g_t, 0.0)
    g_n = g_Nv[:, None, :] * cache.w[..., None]

    # w_i = a_i prod_{j<i}(1 - a_j)
    contrib = gw * cache.w
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    g_a = gw * cache.T - suffix / (1.0 - cache.a)
    g_a = np.where(cache.valid & ~cache.clamped, g_a, 0.0)

    m = cache.valid
    gid = cache.gid[m]
    opac = fld.opacities[gid]
    wr = np.broadcast_to(cache.weights[:, None], (P, K))[m]
    E = cache.E[m]
    ga = g_a[m]
    g_logit = ga * wr * E * opac * (1.0 - opac)
    g_E = ga * opac * wr
    g_d2 = -0.5 * E * g_E
    x = cache.x_star[m]
    tstar = cache.tstar[m]
    o_g = cache.o_g[m]
    r_g = cache.r_g[m]
    C2 = _dot(r_g, r_g)
    Bv = _dot(r_g, o_g)
    gt = g_t[m]
    # d2 = |o_g + t* r_g|^2 is stationary in t*, so only explicit terms remain
    g_og = 2.0 * g_d2[:, None] * x - (gt / C2)[:, None] * r_g
    g_rg = (2.0 * g_d2 * tstar)[:, None] * x + gt[:, None] * (-o_g / C2[:, None]
                                                             + (2.0 * Bv / (C2 * C2))[:, None] * r_g)
    s = fld.scales[gid]
    R = fld.rotmats[gid]
    g_logs = -(g_og * o_g + g_rg * r_g)
    gu = g_og / s
    gv = g_rg / s
    d = cache.origins[np.nonzero(m)[0]] - fld.positions[gid]
    r = cache.dirs[np.nonzero(m)[0]]
    g_pos = -np.einsum("nij,nj->ni", R, gu)
    gR = d[:, :, None] * gu[:, None, :] + r[:, :, None] * gv[:, None, :]

    # color through the SH basis and the view direction
    gc = g_color[m] * cache.color_live[m]
    vdir = cache.view_dir[m]
    basis = sh.basis(vdir, fld.sh_degree)
    g_coeffs = basis[:, :, None] * gc[:, None, :]
    if fld.sh_degree > 0:
        J = sh.basis_jacobian(vdir, fld.sh_degree)
        coeffs = fld.sh_coeffs[gid]
        g_b = np.einsum("nkc,nc->nk", coeffs, gc)
        g_dir = np.einsum("nk,nkj->nj", g_b, J)
        g_pos += (g_dir - vdir * _dot(vdir, g_dir)[:, None]) / cache.view_dist[m][:, None]

    # shortest-axis normal is a signed column of R
    gn = g_n[m] * cache.normal_sign[m][:, None]
    ax = cache.normal_axis[m]
    gR[np.arange(len(gid)), :, ax] += gn

    def acc(vals):
        flat = vals.reshape(len(gid), -1)
        out = np.stack([np.bincount(gid, weights=flat[:, j], minlength=G)
                        for j in range(flat.shape[1])], axis=1)
        return out.reshape((G,) + vals.shape[1:])

    grads["positions"] = acc(g_pos)
    grads["log_scales"] = acc(g_logs)
    grads["opacity_logits"] = np.bincount(gid, weights=g_logit, minlength=G)
    grads["sh_coeffs"] = acc(g_coeffs)
    grads["quats"] = rotmat_grad_to_quat(fld.quats, acc(gR))
    # log-scales below the floor are clamped in the forward pass
    grads["log_scales"][np.exp(fld.log_scales) < fld.scales] = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = np.unique(np.nonzero(~np.isfinite(g))[0])
            raise FloatingPointError(f"non-finite gradient for {name} at Gaussians {bad[:10].tolist()}")
    return grads
