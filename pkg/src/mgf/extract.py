"""Surface extraction from a trained field.

Gaussians are screened against the root masks, an opacity field is built
as the minimum over views of the accumulated opacity along the camera ray
through each point, and the 0.5 level set is meshed with marching
tetrahedra over either a Delaunay tetrahedralization of the Gaussian
centers and 3-sigma box corners or a body-centered-cubic lattice.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .delaunay import delaunay, orient3d
from .gaussians import GaussianField
from .mask_field import inside_all_visible, project_points
from .scene_io import TriangleMesh

log = logging.getLogger(__name__)

DEDUP_GRID = 1e-6
POINT_CHUNK = 2048
BCC_CELLS_PER_DIAGONAL = 40


@dataclass
class TetGrid:
    vertices: np.ndarray      # (V, 3)
    tets: np.ndarray          # (T, 4) positively oriented
    sdf: np.ndarray | None = None

    def volumes(self):
        v = self.vertices[self.tets]
        return orient3d(v[:, 0], v[:, 1], v[:, 2], v[:, 3]) / 6.0


@dataclass
class OpacitySample:
    point: np.ndarray
    opacity: float

    @property
    def sdf(self):
        return self.opacity - 0.5


def screen_gaussians(fld: GaussianField, roots):
    """Keep Gaussians whose centers land on a building label in every root view
    that sees them (and are seen by at least one).  Returns ``(field, keep)``."""
    if not roots:
        raise ValueError("screen_gaussians: no root views")
    if len(fld) == 0:
        return fld, np.zeros(0, dtype=bool)
    keep = inside_all_visible(fld.positions, roots)
    if not keep.any():
        warnings.warn("screen_gaussians: every Gaussian was screened out", stacklevel=2)
    return fld.subset(np.nonzero(keep)[0]), keep


def _local_maps(fld):
    """Matrices taking world origins/directions to every Gaussian's unit frame.

    ``x @ A`` gives ``R_g^T x / s_g`` for all Gaussians at once as (M, G*3);
    ``c`` is the same map applied to the centers.
    """
    G = len(fld)
    A = (fld.rotmats / fld.scales[:, None, :]).transpose(1, 0, 2).reshape(3, G * 3)
    c = np.einsum("gj,gji->gi", fld.positions, fld.rotmats) / fld.scales
    return A, c


def _ray_opacity_many(fld, o, r, t):
    """Accumulated opacity at parameter ``t`` for M rays: arrays (M, 3), (M, 3), (M,)."""
    out = np.zeros(len(t))
    G = len(fld)
    if G == 0:
        return out
    alpha = fld.opacities
    A, c = _local_maps(fld)
    for s in range(0, len(t), POINT_CHUNK):
        sl = slice(s, s + POINT_CHUNK)
        o_g = (o[sl] @ A).reshape(-1, G, 3) - c
        r_g = (r[sl] @ A).reshape(-1, G, 3)
        rr = np.sum(r_g * r_g, axis=2)
        ro = np.sum(r_g * o_g, axis=2)
        oo = np.sum(o_g * o_g, axis=2)
        # each Gaussian's profile rises until t* and then stays at its peak
        tt = np.minimum(t[sl, None], -ro / rr)
        d2 = np.maximum(oo + tt * (2.0 * ro + tt * rr), 0.0)
        out[sl] = 1.0 - np.prod(1.0 - alpha * np.exp(-0.5 * d2), axis=1)
    return out


def ray_opacity(fld: GaussianField, o, r, t):
    """Accumulated opacity along the ray ``o + t r`` (``t`` scalar or array).

    Each Gaussian contributes ``alpha_k O_k(t)`` with ``O_k`` its 1D profile
    clamped at the peak, composited front to back over every Gaussian:
    ``sum_k alpha_k O_k prod_{j<k} (1 - alpha_j O_j) = 1 - prod_k (1 - alpha_k O_k)``.
    """
    if not isinstance(fld, GaussianField):
        fld = GaussianField.from_primitives(list(fld))
    o = np.asarray(o, dtype=np.float64).reshape(3)
    r = np.asarray(r, dtype=np.float64).reshape(3)
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    M = len(t_arr)
    val = _ray_opacity_many(fld, np.broadcast_to(o, (M, 3)), np.broadcast_to(r, (M, 3)), t_arr)
    return float(val[0]) if np.ndim(t) == 0 else val


def point_opacity(x, fld: GaussianField, views):
    """Minimum over views of the ray opacity where each camera ray reaches ``x``.

    Views that do not see ``x`` are skipped; a point no view sees gets 0.
    Accepts one point (3,) or many (N, 3).
    """
    if not views:
        raise ValueError("point_opacity: no views")
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = X.reshape(-1, 3)
    best = np.full(len(X), np.inf)
    for view in views:
        _, ok = project_points(X, view[0], view[1])
        if not ok.any():
            continue
        idx = np.nonzero(ok)[0]
        c = view[1].center
        d = X[idx] - c
        t = np.linalg.norm(d, axis=1)
        r = d / t[:, None]
        val = _ray_opacity_many(fld, np.broadcast_to(c, d.shape), r, t)
        best[idx] = np.minimum(best[idx], val)
    best[~np.isfinite(best)] = 0.0
    return float(best[0]) if single else best


def sdf_from_opacity(O):
    """Signed distance proxy, positive inside."""
    return np.asarray(O, dtype=np.float64) - 0.5


def _dedup(points, grid=DEDUP_GRID):
    key = np.round(points / grid).astype(np.int64)
    _, first = np.unique(key, axis=0, return_index=True)
    first = np.sort(first)
    return points[first]


def grid_points(fld: GaussianField):
    """Gaussian centers followed by the 8 corners of each 3-sigma box, deduplicated."""
    if len(fld) == 0:
        raise ValueError("build_tet_grid: empty field")
    box = fld.aabb_3sigma()
    corners = [np.stack([box[:, i & 1, 0], box[:, (i >> 1) & 1, 1], box[:, (i >> 2) & 1, 2]], axis=1)
               for i in range(8)]
    return _dedup(np.concatenate([fld.positions] + corners))


def bcc_lattice(lo, hi, cell):
    """Body-centered-cubic tetrahedra filling the box [lo, hi] (grown to whole cells)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if cell <= 0:
        raise ValueError("cell size must be positive")
    n = np.maximum(np.ceil((hi - lo) / cell - 1e-9).astype(int), 1)
    nx, ny, nz = n
    gx, gy, gz = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij")
    corners = lo + cell * np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    cx, cy, cz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    centers = lo + cell * (np.stack([cx, cy, cz], axis=-1).reshape(-1, 3) + 0.5)
    n_corner = len(corners)
    verts = np.concatenate([corners, centers])

    def cid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    def ctr(i, j, k):
        return n_corner + (i * ny + j) * nz + k

    tets = []
    for axis in range(3):
        # faces perpendicular to ``axis`` at lattice index a, spanning cells (a-1, a)
        u, v = [d for d in range(3) if d != axis]
        for a in range(n[axis] + 1):
            for iu in range(n[u]):
                for iv in range(n[v]):
                    def corner(du, dv):
                        idx = [0, 0, 0]
                        idx[axis], idx[u], idx[v] = a, iu + du, iv + dv
                        return cid(*idx)

                    def center(off):
                        idx = [0, 0, 0]
                        idx[axis], idx[u], idx[v] = a + off, iu, iv
                        return ctr(*idx)

                    ring = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)]
                    sides = []
                    if a > 0:
                        sides.append(center(-1))
                    if a < n[axis]:
                        sides.append(center(0))
                    if len(sides) == 2:
                        for e in range(4):
                            tets.append([sides[0], sides[1], ring[e], ring[(e + 1) % 4]])
                    else:
                        c = sides[0]
                        tets.append([c, ring[0], ring[1], ring[2]])
                        tets.append([c, ring[0], ring[2], ring[3]])
    tets = np.array(tets, dtype=np.int64)
    v = verts[tets]
    flip = orient3d(v[:, 0], v[:, 1], v[:, 2], v[:, 3]) < 0
    tets[flip] = tets[flip][:, [1, 0, 2, 3]]
    return verts, tets


def build_tet_grid(screened: GaussianField, mode="delaunay", cell=None, seed=0, margin=0.0) -> TetGrid:
    """Tetrahedral grid for extraction.

    ``delaunay``: Bowyer-Watson over Gaussian centers and 3-sigma box corners.
    ``bcc``: a body-centered-cubic lattice of spacing ``cell`` over the union
    of the 3-sigma boxes (grown by ``margin``); without ``cell`` the spacing
    is the box diagonal over ``BCC_CELLS_PER_DIAGONAL``.
    """
    pts = grid_points(screened)
    if mode == "delaunay":
        tets = delaunay(pts, seed=seed)
        used = np.unique(tets)
        if len(used) != len(pts):
            # coplanar leftovers (rare) would be unreferenced; drop them and reindex
            remap = np.full(len(pts), -1, dtype=np.int64)
            remap[used] = np.arange(len(used))
            pts, tets = pts[used], remap[tets]
        return TetGrid(pts, tets)
    if mode == "bcc":
        lo, hi = pts.min(axis=0) - margin, pts.max(axis=0) + margin
        if cell is None:
            cell = float(np.linalg.norm(hi - lo)) / BCC_CELLS_PER_DIAGONAL
        verts, tets = bcc_lattice(lo, hi, cell)
        return TetGrid(verts, tets)
    raise ValueError(f"unknown grid mode {mode!r} (use 'delaunay' or 'bcc')")


# case table: for each 4-bit inside pattern, triangles as lists of tet-edge indices
_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


def _edge_id(a, b):
    for k, (i, j) in enumerate(_EDGES):
        if {i, j} == {a, b}:
            return k
    raise KeyError((a, b))


def _build_table():
    table = {}
    for mask in range(16):
        inside = [v for v in range(4) if mask >> v & 1]
        outside = [v for v in range(4) if not mask >> v & 1]
        if len(inside) in (0, 4):
            table[mask] = []
        elif len(inside) in (1, 3):
            lone = inside[0] if len(inside) == 1 else outside[0]
            others = [v for v in range(4) if v != lone]
            table[mask] = [[_edge_id(lone, o) for o in others]]
        else:
            a, b = inside
            c, d = outside
            # quad a-c, a-d, b-d, b-c split along one diagonal
            q = [_edge_id(a, c), _edge_id(a, d), _edge_id(b, d), _edge_id(b, c)]
            table[mask] = [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
    return table


CASE_TABLE = _build_table()


def refine_crossings(pa, pb, fa, fb, sdf_fn, iters=8):
    """Locate the zero of ``sdf_fn`` on segments ``pa -> pb`` with ``fa > 0 >= fb``.

    The first probe is the linear-interpolation point, later probes bisect
    the remaining bracket; the probe with the smallest |SDF| is returned,
    so the residual never grows between iterations.
    """
    lo = np.zeros(len(pa))
    hi = np.ones(len(pa))
    denom = fa - fb
    s = np.where(denom > 0, fa / np.where(denom > 0, denom, 1.0), 0.5)
    best_s = s.copy()
    best_f = np.full(len(pa), np.inf)
    if sdf_fn is None or iters <= 0:
        return pa + best_s[:, None] * (pb - pa), best_s, None
    history = []
    for _ in range(iters):
        f = np.asarray(sdf_fn(pa + s[:, None] * (pb - pa)), dtype=np.float64)
        better = np.abs(f) < best_f
        best_s = np.where(better, s, best_s)
        best_f = np.where(better, np.abs(f), best_f)
        history.append(best_f.copy())
        # inside (positive) side is at s = 0
        lo = np.where(f > 0, s, lo)
        hi = np.where(f > 0, hi, s)
        s = 0.5 * (lo + hi)
    return pa + best_s[:, None] * (pb - pa), best_s, history


def marching_tetrahedra(grid: TetGrid, sdf_fn=None, refine_iters=8) -> TriangleMesh:
    """Extract the SDF = 0 surface of ``grid`` (``grid.sdf`` must be filled).

    A vertex counts as inside when its SDF is > 0.  Crossing points are
    welded by sorted edge key and refined against ``sdf_fn`` when given.
    Triangles face the negative (outside) side.  Crossings that land on a
    grid vertex can yield zero-area triangles; they are kept so the surface
    stays closed.
    """
    if grid.sdf is None:
        raise ValueError("marching_tetrahedra: grid has no SDF values")
    sdf = np.asarray(grid.sdf, dtype=np.float64)
    V = grid.vertices
    T = grid.tets
    inside = sdf > 0
    code = (inside[T] * np.array([1, 2, 4, 8])).sum(axis=1)
    active = np.nonzero((code != 0) & (code != 15))[0]
    if len(active) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    tri_tet, tri_edges = [], []
    for c in range(1, 15):
        sel = active[code[active] == c]
        if len(sel) == 0:
            continue
        for tri in CASE_TABLE[c]:
            tri_tet.append(sel)
            tri_edges.append(np.broadcast_to(np.array(tri), (len(sel), 3)))
    tri_tet = np.concatenate(tri_tet)
    tri_edges = np.concatenate(tri_edges)
    # keep output order independent of case grouping
    order = np.lexsort((tri_edges[:, 2], tri_edges[:, 1], tri_edges[:, 0], tri_tet))
    tri_tet, tri_edges = tri_tet[order], tri_edges[order]

    va = T[tri_tet[:, None], _EDGES[tri_edges, 0]]
    vb = T[tri_tet[:, None], _EDGES[tri_edges, 1]]
    # orient every crossing edge inside -> outside
    a_in = inside[va]
    ins = np.where(a_in, va, vb)
    out = np.where(a_in, vb, va)
    keys = np.stack([ins.reshape(-1), out.reshape(-1)], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1, 3)
    pa, pb = V[uniq[:, 0]], V[uniq[:, 1]]
    verts, _, _ = refine_crossings(pa, pb, sdf[uniq[:, 0]], sdf[uniq[:, 1]], sdf_fn, refine_iters)

    tris = inv.copy()
    # orient on the edge midpoints: never degenerate, and topologically the same
    # surface as the refined one even when refined crossings coincide
    mid = 0.5 * (pa + pb)[tris]
    n = np.cross(mid[:, 1] - mid[:, 0], mid[:, 2] - mid[:, 0])
    tv = V[T[tri_tet]]
    w_in = inside[T[tri_tet]]
    c_in = (tv * w_in[..., None]).sum(axis=1) / w_in.sum(axis=1, keepdims=True)
    c_out = (tv * ~w_in[..., None]).sum(axis=1) / (~w_in).sum(axis=1, keepdims=True)
    flip = np.sum(n * (c_out - c_in), axis=1) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    used = np.unique(tris)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(verts[used], remap[tris])


def extract_mesh(fld: GaussianField, views, mode="delaunay", cell=None, refine_iters=8, seed=0):
    """Grid construction, SDF evaluation and marching tetrahedra in one call."""
    grid = build_tet_grid(fld, mode=mode, cell=cell, seed=seed)

    def sdf_fn(P):
        return sdf_from_opacity(point_opacity(P, fld, views))

    grid.sdf = sdf_fn(grid.vertices)
    return marching_tetrahedra(grid, sdf_fn, refine_iters), grid


def edge_manifold_report(mesh: TriangleMesh):
    """(closed, consistently_oriented): every undirected edge used exactly twice,
    every directed edge exactly once."""
    t = mesh.triangles
    if len(t) == 0:
        return False, False
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    _, cu = np.unique(und, axis=0, return_counts=True)
    _, cd = np.unique(directed, axis=0, return_counts=True)
    return bool(np.all(cu == 2)), bool(np.all(cd == 1))
