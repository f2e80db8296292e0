"""Incremental Bowyer-Watson Delaunay tetrahedralization.

Predicates run in floating point with a conservative error filter and fall
back to exact rational arithmetic when the sign is uncertain, so
cospherical inputs (box corners) are handled consistently.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy.spatial import ConvexHull, QhullError

# relative bound on the float error of the 4x4 insphere expansion
_INSPHERE_ERR = 1e-12
_ORIENT_ERR = 1e-13


class DegenerateInput(ValueError):
    """Point set spans no volume (all points coplanar, collinear, or coincident)."""


def _det3(m):
    return (m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
            - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
            + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]))


def _det3_abs(m):
    m = np.abs(m)
    return (m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] + m[..., 1, 2] * m[..., 2, 1])
            + m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] + m[..., 1, 2] * m[..., 2, 0])
            + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] + m[..., 1, 1] * m[..., 2, 0]))


def _exact_det3(m):
    return (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))


def orient3d_exact(a, b, c, d):
    a = [Fraction(float(x)) for x in a]
    rows = [[Fraction(float(v[i])) - a[i] for i in range(3)] for v in (b, c, d)]
    return _exact_det3(rows)


def _insphere_rows(pts, e):
    rows = []
    for v in pts:
        r = [v[i] - e[i] for i in range(3)]
        rows.append(r + [r[0] * r[0] + r[1] * r[1] + r[2] * r[2]])
    det = Fraction(0)
    for j in range(4):
        minor = [[rows[i][k] for k in range(4) if k != j] for i in range(1, 4)]
        det += (-1) ** j * rows[0][j] * _exact_det3(minor)
    # with our orientation convention the raw determinant is negative inside
    return -det


def insphere_exact(a, b, c, d, e):
    """Sign-carrying insphere determinant; > 0 means ``e`` is inside the
    circumsphere of the positively oriented tet ``abcd``."""
    pts = [[Fraction(float(x)) for x in v] for v in (a, b, c, d)]
    return _insphere_rows(pts, [Fraction(float(x)) for x in e])


def incircle_exact(a, b, c, e):
    """> 0 when ``e``, coplanar with triangle ``abc``, lies strictly inside its
    circumcircle.  The sphere through abc and a + (b-a)x(c-a) cuts the plane
    in exactly that circle."""
    a, b, c = ([Fraction(float(x)) for x in v] for v in (a, b, c))
    u = [b[i] - a[i] for i in range(3)]
    w = [c[i] - a[i] for i in range(3)]
    n = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]]
    d = [a[i] + n[i] for i in range(3)]
    return _insphere_rows([a, b, c, d], [Fraction(float(x)) for x in e])


def orient3d(a, b, c, d):
    """Six times the signed volume of ``abcd`` (exact sign)."""
    m = np.stack([b - a, c - a, d - a], axis=-2)
    det = _det3(m)
    bound = _ORIENT_ERR * _det3_abs(m)
    if np.ndim(det) == 0:
        if abs(det) > bound:
            return float(det)
        return float(orient3d_exact(a, b, c, d))
    out = det.copy()
    unsure = np.abs(det) <= bound
    for i in np.nonzero(unsure)[0]:
        out[i] = float(orient3d_exact(a[i], b[i], c[i], d[i]))
    return out


def _insphere_batch(P, tets, e):
    """Insphere sign for every tet against point ``e``."""
    V = P[tets] - e  # (T, 4, 3)
    L = np.sum(V * V, axis=2)
    M = np.concatenate([V, L[..., None]], axis=2)  # (T, 4, 4)
    det = np.zeros(len(tets))
    perm = np.zeros(len(tets))
    for j in range(4):
        cols = [k for k in range(4) if k != j]
        minor = M[:, 1:, :][:, :, cols]
        sgn = 1.0 if j % 2 == 0 else -1.0
        det += sgn * M[:, 0, j] * _det3(minor)
        perm += np.abs(M[:, 0, j]) * _det3_abs(minor)
    out = -det
    unsure = np.abs(det) <= _INSPHERE_ERR * perm
    for i in np.nonzero(unsure)[0]:
        a, b, c, d = P[tets[i]]
        out[i] = float(np.sign(insphere_exact(a, b, c, d, e)))
    return out


_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def _circumspheres(P, tets):
    """Float circumcenters and squared radii; ill-conditioned tets get r2 = inf
    so the exact predicate always sees them."""
    a = P[tets[:, 0]]
    A = P[tets[:, 1:]] - a[:, None, :]
    rhs = 0.5 * np.sum(A * A, axis=2)
    det = _det3(A)
    scale = _det3_abs(A)
    ok = np.abs(det) > 1e-8 * np.maximum(scale, 1e-300)
    cc = np.zeros((len(tets), 3))
    r2 = np.full(len(tets), np.inf)
    if ok.any():
        x = np.linalg.solve(A[ok], rhs[ok][..., None])[..., 0]
        cc[ok] = a[ok] + x
        r2[ok] = np.sum(x * x, axis=1)
    return cc, r2


def _first_simplex(P, order):
    """Move four affinely independent points to the front of ``order``."""
    first = order[0]
    picks = [first]
    for k in range(1, len(order)):
        q = P[order[k]]
        if len(picks) == 1 and np.any(q != P[first]):
            picks.append(order[k])
        elif len(picks) == 2 and np.any(np.cross(P[picks[1]] - P[first], q - P[first]) != 0):
            picks.append(order[k])
        elif len(picks) == 3 and orient3d(P[picks[0]], P[picks[1]], P[picks[2]], q) != 0:
            picks.append(order[k])
            break
    if len(picks) < 4:
        raise DegenerateInput("all points are coplanar")
    rest = [i for i in order if i not in set(picks)]
    return picks, rest


def _ghost_conflicts(P, ghosts, inf, p):
    """Ghost tet (three hull vertices and the vertex at infinity) conflicts
    with ``p`` when p sees the hull face from outside, or lies in its plane
    inside the face's circumcircle."""
    at_inf = ghosts == inf
    V = P[np.where(at_inf, 0, ghosts)]
    V[at_inf] = p
    s = orient3d(V[:, 0], V[:, 1], V[:, 2], V[:, 3])
    out = s > 0
    for i in np.nonzero(s == 0)[0]:
        a, b, c = P[ghosts[i][~at_inf[i]]]
        out[i] = incircle_exact(a, b, c, p) > 0
    return out


def _triangulate(P, order):
    """Bowyer-Watson with the unbounded side closed by ghost tets.

    Ghost tets carry the index ``len(P)`` in place of one vertex and are
    oriented as if that vertex sat at infinity beyond their hull face, so
    the cavity bookkeeping treats both kinds alike.
    """
    inf = len(P)
    (i0, i1, i2, i3), rest = _first_simplex(P, order)
    t0 = [i0, i1, i2, i3] if orient3d(*P[[i0, i1, i2, i3]]) > 0 else [i1, i0, i2, i3]
    start = [t0]
    for k in range(4):
        g = list(t0)
        g[k] = inf
        j, l = [m for m in range(4) if m != k][:2]
        g[j], g[l] = g[l], g[j]
        start.append(g)
    cap = 64
    tets = np.zeros((cap, 4), dtype=np.int64)
    cc = np.zeros((cap, 3))
    r2 = np.full(cap, -1.0)
    ghost = np.zeros(cap, dtype=bool)
    count = len(start)
    tets[:count] = start
    ghost[1:count] = True
    cc[:1], r2[:1] = _circumspheres(P, tets[:1])
    r2[1:count] = np.inf
    for pi in rest:
        p = P[pi]
        c = cc[:count]
        d2 = (c[:, 0] - p[0]) ** 2 + (c[:, 1] - p[1]) ** 2 + (c[:, 2] - p[2]) ** 2
        # generous float prefilter (dead tets have r2 = -1); the filtered/exact predicate decides
        cand = np.nonzero(d2 <= r2[:count] * (1 + 1e-6) + 1e-9)[0]
        g = ghost[cand]
        real = cand[~g]
        bad = [real[_insphere_batch(P, tets[real], p) > 0]]
        if g.any():
            gh = cand[g]
            bad.append(gh[_ghost_conflicts(P, tets[gh], inf, p)])
        bad = np.concatenate(bad)
        if len(bad) == 0:
            raise DegenerateInput(f"point {pi} conflicts with no tetrahedron")
        faces = tets[bad][:, _FACES].reshape(-1, 3)   # oriented as seen from inside
        key = np.sort(faces, axis=1)
        _, inv, cnt = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        bf = faces[cnt[inv.reshape(-1)] == 1]
        new = np.column_stack([np.full(len(bf), pi), bf])
        new_ghost = np.any(bf == inf, axis=1)
        nr = new[~new_ghost]
        vol = orient3d(P[nr[:, 0]], P[nr[:, 1]], P[nr[:, 2]], P[nr[:, 3]])
        if np.any(vol <= 0):
            raise DegenerateInput(f"cavity of point {pi} is not star-shaped")
        r2[bad] = -1.0
        need = count + len(new)
        if need > cap:
            while cap < need:
                cap *= 2
            grow = cap - len(tets)
            tets = np.concatenate([tets, np.zeros((grow, 4), dtype=np.int64)])
            cc = np.concatenate([cc, np.zeros((grow, 3))])
            r2 = np.concatenate([r2, np.full(grow, -1.0)])
            ghost = np.concatenate([ghost, np.zeros(grow, dtype=bool)])
        tets[count:need] = new
        ghost[count:need] = new_ghost
        cc[count:need][~new_ghost], r2[count:need][~new_ghost] = _circumspheres(P, nr)
        cc[count:need][new_ghost] = 0.0
        r2[count:need][new_ghost] = np.inf
        count = need
        alive = r2[:count] != -1.0
        if count > 2 * alive.sum() + 512:
            keep = np.nonzero(alive)[0]
            k = len(keep)
            tets[:k], cc[:k], r2[:k], ghost[:k] = tets[keep], cc[keep], r2[keep], ghost[keep]
            r2[k:] = -1.0
            count = k
    live = (r2[:count] != -1.0) & ~ghost[:count]
    return tets[:count][live]


def _hull_volume(points):
    try:
        return ConvexHull(points).volume
    except QhullError as exc:
        raise DegenerateInput(str(exc)) from exc


def delaunay(points, seed=0, jitter=1e-9):
    """Delaunay tetrahedra (positively oriented, (M, 4) int) of distinct ``points``.

    Points are inserted in a seeded random order.  On a degenerate
    configuration the coordinates get a seeded ``jitter`` perturbation and
    the triangulation is retried once; the returned indices always refer to
    the original points.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise DegenerateInput(f"need at least 4 points in 3D, got shape {pts.shape}")
    if len(np.unique(pts, axis=0)) != len(pts):
        raise ValueError("delaunay: duplicate input points")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(pts)))
    attempts = [pts, pts + jitter * rng.standard_normal(pts.shape)]
    last = None
    for work in attempts:
        try:
            target = _hull_volume(work)
            tets = _triangulate(work, order)
            vol = orient3d(work[tets[:, 0]], work[tets[:, 1]], work[tets[:, 2]], work[tets[:, 3]]).sum() / 6
            if abs(vol - target) <= 1e-9 * target:
                return tets
            last = DegenerateInput("triangulation does not cover the convex hull")
        except DegenerateInput as exc:
            last = exc
    raise DegenerateInput(f"delaunay failed after jitter retry: {last}")
