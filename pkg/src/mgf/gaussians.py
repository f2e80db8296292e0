"""Gaussian primitives, fields and the ray-local Gaussian math.

A primitive stores its rotation as a (w, x, y, z) quaternion whose matrix
``R`` maps local axes to world axes, so ``cov = R S S^T R^T``.  The
local-frame transform of a ray therefore applies ``R^T`` before dividing
by the scales.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sh

SCALE_FLOOR = 1e-6
CHECKPOINT_MAGIC = b"MGFG"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def quat_to_rotmat(q):
    """Rotation matrices for (..., 4) quaternions; input need not be unit."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q, gR):
    """Pull a gradient on ``quat_to_rotmat(q)`` back to the raw quaternion."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    g = gR
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    gu = np.stack([gw, gx, gy, gz], axis=-1)
    return (gu - u * np.sum(u * gu, axis=-1, keepdims=True)) / n


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic Gaussian.

    ``log_scale`` and ``opacity_logit`` are the stored parameters; ``scale``
    and ``opacity`` are the realized values.
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))

    @classmethod
    def create(cls, position, rotation=(1.0, 0.0, 0.0, 0.0), scale=(1.0, 1.0, 1.0),
               opacity=0.5, color=(0.5, 0.5, 0.5), sh_degree=0):
        scale = np.asarray(scale, dtype=np.float64)
        if np.any(scale < SCALE_FLOOR):
            raise ValueError(f"scale {scale} below floor {SCALE_FLOOR}")
        q = np.asarray(rotation, dtype=np.float64)
        coeffs = np.zeros((sh.num_coeffs(sh_degree), 3))
        coeffs[0] = sh.rgb_to_dc(color)
        return cls(
            position=np.asarray(position, dtype=np.float64),
            rotation=q / np.linalg.norm(q),
            log_scale=np.log(scale),
            opacity_logit=float(logit(opacity)),
            sh_coeffs=coeffs,
        )

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def rotmat(self):
        return quat_to_rotmat(self.rotation)

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh_coeffs.shape[0]))) - 1


@dataclass(frozen=True)
class LocalRay:
    """A ray expressed in a Gaussian's whitened local frame."""

    o_g: np.ndarray
    r_g: np.ndarray


def covariance(g: GaussianPrimitive) -> np.ndarray:
    s = g.scale
    if np.any(s < SCALE_FLOOR):
        raise ValueError(f"scale {s} below floor {SCALE_FLOOR}")
    R = g.rotmat
    M = R * s
    return M @ M.T


def eval_gaussian(g: GaussianPrimitive, x) -> np.ndarray:
    """Unnormalized 3D Gaussian density at world points ``x`` (..., 3)."""
    d = np.asarray(x, dtype=np.float64) - g.position
    cinv = np.linalg.inv(covariance(g))
    m = np.einsum("...i,ij,...j->...", d, cinv, d)
    return np.exp(-0.5 * m)


def to_local(g: GaussianPrimitive, o, r) -> LocalRay:
    R = g.rotmat
    s = g.scale
    o_g = (R.T @ (np.asarray(o, dtype=np.float64) - g.position)) / s
    r_g = (R.T @ np.asarray(r, dtype=np.float64)) / s
    return LocalRay(o_g, r_g)


def t_star(lr: LocalRay) -> float:
    return float(-(lr.r_g @ lr.o_g) / (lr.r_g @ lr.r_g))


def gaussian_1d(lr: LocalRay, t):
    t = np.asarray(t, dtype=np.float64)
    x = lr.o_g + t[..., None] * lr.r_g
    return np.exp(-0.5 * np.sum(x * x, axis=-1))


def contribution(g: GaussianPrimitive, o, r) -> float:
    lr = to_local(g, o, r)
    return float(gaussian_1d(lr, t_star(lr)))


class GaussianField:
    """Struct-of-arrays collection of Gaussians (the trainable parameters)."""

    def __init__(self, positions, quats, log_scales, opacity_logits, sh_coeffs):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.quats = np.asarray(quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
        sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
        self.sh_coeffs = sh_coeffs.reshape(n, sh_coeffs.shape[-2], 3)
        self.sh_degree = int(round(np.sqrt(self.sh_coeffs.shape[1]))) - 1
        sh.num_coeffs(self.sh_degree)

    PARAMS = ("positions", "quats", "log_scales", "opacity_logits", "sh_coeffs")

    @classmethod
    def empty(cls, sh_degree=0):
        k = sh.num_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, k, 3)))

    @classmethod
    def from_primitives(cls, prims, sh_degree=None):
        prims = list(prims)
        if not prims:
            return cls.empty(sh_degree or 0)
        deg = max(p.sh_degree for p in prims) if sh_degree is None else sh_degree
        k = sh.num_coeffs(deg)
        coeffs = np.zeros((len(prims), k, 3))
        for i, p in enumerate(prims):
            m = min(k, p.sh_coeffs.shape[0])
            coeffs[i, :m] = p.sh_coeffs[:m]
        return cls(
            np.stack([p.position for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            coeffs,
        )

    @classmethod
    def from_points(cls, points, colors, scales, opacity=0.1, sh_degree=0):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        log_scales = np.repeat(np.log(np.maximum(np.asarray(scales, dtype=np.float64),
                                                 SCALE_FLOOR)).reshape(n, 1), 3, axis=1)
        coeffs = np.zeros((n, sh.num_coeffs(sh_degree), 3))
        coeffs[:, 0] = sh.rgb_to_dc(np.asarray(colors, dtype=np.float64).reshape(n, 3))
        return cls(points, quats, log_scales, np.full(n, float(logit(opacity))), coeffs)

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.positions[i].copy(), self.quats[i] / np.linalg.norm(self.quats[i]),
            self.log_scales[i].copy(), float(self.opacity_logits[i]),
            self.sh_coeffs[i].copy(),
        )

    @property
    def scales(self):
        return np.maximum(np.exp(self.log_scales), SCALE_FLOOR)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def rotmats(self):
        return quat_to_rotmat(self.quats)

    def params(self):
        return {name: getattr(self, name) for name in self.PARAMS}

    def copy(self):
        return GaussianField(*(getattr(self, n).copy() for n in self.PARAMS))

    def subset(self, index):
        return GaussianField(*(getattr(self, n)[index] for n in self.PARAMS))

    def concat(self, other):
        return GaussianField(*(np.concatenate([getattr(self, n), getattr(other, n)])
                               for n in self.PARAMS))

    def aabb_3sigma(self):
        """World-axis bounding boxes of the rotated 3-sigma ellipsoids: (N, 2, 3)."""
        half = 3.0 * np.sqrt(np.sum((self.rotmats * self.scales[:, None, :]) ** 2, axis=2))
        return np.stack([self.positions - half, self.positions + half], axis=1)


def save_checkpoint(fld: GaussianField, path) -> None:
    """Write the versioned little-endian field checkpoint."""
    n = len(fld)
    k = sh.num_coeffs(fld.sh_degree)
    rows = np.concatenate([
        fld.positions, fld.quats, fld.log_scales, fld.opacity_logits[:, None],
        fld.sh_coeffs.reshape(n, k * 3),
    ], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, n, fld.sh_degree))
        fh.write(rows.tobytes())


def load_checkpoint(path) -> GaussianField:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, n, degree = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    k = sh.num_coeffs(degree)
    width = 11 + 3 * k
    body = data[_HEADER.size:]
    if len(body) != n * width * 4:
        raise ValueError(f"{path}: expected {n * width * 4} payload bytes, found {len(body)}")
    rows = np.frombuffer(body, dtype="<f4").reshape(n, width).astype(np.float64)
    return GaussianField(rows[:, 0:3], rows[:, 3:7], rows[:, 7:10], rows[:, 10],
                         rows[:, 11:].reshape(n, k, 3))
