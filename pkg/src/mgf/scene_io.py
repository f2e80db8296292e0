"""COLMAP sparse models, photos, label masks and triangle meshes on disk."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CAMERA_KINDS = {"SIMPLE_PINHOLE": (0, 3), "PINHOLE": (1, 4), "SIMPLE_RADIAL": (2, 4)}
_KIND_BY_ID = {mid: (name, n) for name, (mid, n) in CAMERA_KINDS.items()}
MAX_RADIAL_K1 = 1e-6


class ColmapFormatError(ValueError):
    """Malformed or unsupported COLMAP model content."""


@dataclass
class CameraModel:
    camera_id: int
    kind: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0

    def __post_init__(self):
        if self.kind not in CAMERA_KINDS:
            raise ColmapFormatError(f"unsupported camera model {self.kind!r}")
        if self.width <= 0 or self.height <= 0:
            raise ColmapFormatError(f"camera {self.camera_id}: non-positive size")
        if self.fx <= 0 or self.fy <= 0:
            raise ColmapFormatError(f"camera {self.camera_id}: non-positive focal length")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ColmapFormatError(f"camera {self.camera_id}: principal point outside image")
        if self.kind == "SIMPLE_RADIAL" and abs(self.k1) >= MAX_RADIAL_K1:
            raise ColmapFormatError(
                f"camera {self.camera_id}: distortion unsupported (k1={self.k1}), undistort upstream")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def params(self):
        if self.kind == "SIMPLE_PINHOLE":
            return [self.fx, self.cx, self.cy]
        if self.kind == "PINHOLE":
            return [self.fx, self.fy, self.cx, self.cy]
        return [self.fx, self.cx, self.cy, self.k1]

    @classmethod
    def from_params(cls, camera_id, kind, width, height, params):
        if kind not in CAMERA_KINDS:
            raise ColmapFormatError(f"unsupported camera model {kind!r}")
        expected = CAMERA_KINDS[kind][1]
        if len(params) != expected:
            raise ColmapFormatError(f"{kind} expects {expected} params, got {len(params)}")
        if kind == "SIMPLE_PINHOLE":
            f, cx, cy = params
            return cls(camera_id, kind, width, height, f, f, cx, cy)
        if kind == "PINHOLE":
            fx, fy, cx, cy = params
            return cls(camera_id, kind, width, height, fx, fy, cx, cy)
        f, cx, cy, k1 = params
        return cls(camera_id, kind, width, height, f, f, cx, cy, k1)


def qvec_to_rotmat(q):
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_qvec(R):
    R = np.asarray(R, dtype=np.float64)
    # Symmetric 4x4 eigen-formulation, robust for all rotations.
    Rxx, Ryx, Rzx, Rxy, Ryy, Rzy, Rxz, Ryz, Rzz = R.flat
    K = np.array([
        [Rxx - Ryy - Rzz, 0, 0, 0],
        [Ryx + Rxy, Ryy - Rxx - Rzz, 0, 0],
        [Rzx + Rxz, Rzy + Ryz, Rzz - Rxx - Ryy, 0],
        [Ryz - Rzy, Rzx - Rxz, Rxy - Ryx, Rxx + Ryy + Rzz],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(K)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    return q if q[0] >= 0 else -q


@dataclass
class PosedImage:
    """A registered photo; ``qvec``/``tvec`` map world to camera coordinates."""

    image_id: int
    camera_id: int
    qvec: np.ndarray
    tvec: np.ndarray
    name: str
    points2d: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pixels: np.ndarray | None = None

    def __post_init__(self):
        q = np.asarray(self.qvec, dtype=np.float64)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm < 1e-3:
            raise ColmapFormatError(f"image {self.image_id}: invalid quaternion {q}")
        if abs(norm - 1.0) > 1e-9:
            q = q / norm
        self.qvec = q
        self.tvec = np.asarray(self.tvec, dtype=np.float64)

    @property
    def R(self):
        return qvec_to_rotmat(self.qvec)

    @property
    def center(self):
        return -self.R.T @ self.tvec


@dataclass
class SparsePoint:
    point_id: int
    position: np.ndarray
    color: np.ndarray
    track: list = field(default_factory=list)
    error: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if not np.all(np.isfinite(self.position)):
            raise ColmapFormatError(f"point {self.point_id}: non-finite position")


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles):
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValueError("triangle index out of range")
            t = self.triangles
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise ValueError("degenerate triangle (repeated index)")

    def areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


# --------------------------------------------------------------------- text

def _data_lines(path):
    """Yield (lineno, stripped line) for non-comment lines, keeping blanks."""
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("#"):
                continue
            yield lineno, line


def _require(dir_path, name):
    p = Path(dir_path) / name
    if not p.is_file():
        raise FileNotFoundError(f"missing COLMAP file {p}")
    return p


def _parse_cameras_txt(path):
    cams = []
    for lineno, line in _data_lines(path):
        if not line:
            continue
        tok = line.split()
        try:
            cam_id, kind, width, height = int(tok[0]), tok[1], int(tok[2]), int(tok[3])
            params = [float(v) for v in tok[4:]]
        except (IndexError, ValueError) as exc:
            raise ColmapFormatError(f"{path}:{lineno}: malformed camera row ({exc})") from None
        try:
            cams.append(CameraModel.from_params(cam_id, kind, width, height, params))
        except ColmapFormatError as exc:
            raise ColmapFormatError(f"{path}:{lineno}: {exc}") from None
    return cams


def _parse_images_txt(path):
    lines = list(_data_lines(path))
    while lines and not lines[-1][1]:
        lines.pop()
    images = []
    i = 0
    while i < len(lines):
        lineno, line = lines[i]
        if not line:
            i += 1
            continue
        tok = line.split()
        try:
            image_id = int(tok[0])
            q = [float(v) for v in tok[1:5]]
            t = [float(v) for v in tok[5:8]]
            cam_id = int(tok[8])
            name = " ".join(tok[9:])
            if len(q) != 4 or len(t) != 3 or not name:
                raise ValueError("expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")
        except (IndexError, ValueError) as exc:
            raise ColmapFormatError(f"{path}:{lineno}: malformed image row ({exc})") from None
        xys, ids = np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
        if i + 1 < len(lines):
            plineno, pline = lines[i + 1]
            vals = pline.split()
            if len(vals) % 3:
                raise ColmapFormatError(f"{path}:{plineno}: 2D point row length not a multiple of 3")
            try:
                arr = np.array([float(v) for v in vals]).reshape(-1, 3)
            except ValueError as exc:
                raise ColmapFormatError(f"{path}:{plineno}: malformed 2D point row ({exc})") from None
            xys, ids = arr[:, :2], arr[:, 2].astype(np.int64)
        try:
            images.append(PosedImage(image_id, cam_id, q, t, name, xys, ids))
        except ColmapFormatError as exc:
            raise ColmapFormatError(f"{path}:{lineno}: {exc}") from None
        i += 2
    return images


def _parse_points_txt(path):
    pts = []
    for lineno, line in _data_lines(path):
        if not line:
            continue
        tok = line.split()
        try:
            pid = int(tok[0])
            xyz = [float(v) for v in tok[1:4]]
            rgb = [int(v) for v in tok[4:7]]
            err = float(tok[7])
            rest = [int(v) for v in tok[8:]]
            if len(xyz) != 3 or len(rgb) != 3 or len(rest) % 2 or not rest:
                raise ValueError("expected POINT3D_ID X Y Z R G B ERROR and a nonempty track")
        except (IndexError, ValueError) as exc:
            raise ColmapFormatError(f"{path}:{lineno}: malformed point row ({exc})") from None
        track = list(zip(rest[0::2], rest[1::2]))
        pts.append(SparsePoint(pid, xyz, np.array(rgb) / 255.0, track, err))
    return pts


def _validate(cams, images, points):
    cam_ids = {c.camera_id for c in cams}
    for im in images:
        if im.camera_id not in cam_ids:
            raise ColmapFormatError(f"image {im.image_id} references unknown camera {im.camera_id}")
    image_ids = {im.image_id for im in images}
    for p in points:
        for image_id, _ in p.track:
            if image_id not in image_ids:
                raise ColmapFormatError(f"point {p.point_id} track references unknown image {image_id}")


def parse_colmap_text(dir_path):
    """Read cameras.txt, images.txt and points3D.txt from ``dir_path``."""
    cams = _parse_cameras_txt(_require(dir_path, "cameras.txt"))
    images = _parse_images_txt(_require(dir_path, "images.txt"))
    points = _parse_points_txt(_require(dir_path, "points3D.txt"))
    _validate(cams, images, points)
    return cams, images, points


def write_colmap_text(dir_path, cams, images, points):
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.txt", "w", encoding="utf-8") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for c in cams:
            fh.write(" ".join([str(c.camera_id), c.kind, str(c.width), str(c.height)]
                              + [repr(float(v)) for v in c.params]) + "\n")
    with open(d / "images.txt", "w", encoding="utf-8") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for im in images:
            head = [str(im.image_id)] + [repr(float(v)) for v in im.qvec] \
                + [repr(float(v)) for v in im.tvec] + [str(im.camera_id), im.name]
            fh.write(" ".join(head) + "\n")
            fh.write(" ".join(f"{float(x)!r} {float(y)!r} {int(pid)}"
                              for (x, y), pid in zip(im.points2d, im.point3d_ids)) + "\n")
    with open(d / "points3D.txt", "w", encoding="utf-8") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for p in points:
            rgb = np.clip(np.round(p.color * 255), 0, 255).astype(int)
            row = [str(p.point_id)] + [repr(float(v)) for v in p.position] \
                + [str(v) for v in rgb] + [repr(float(p.error))] \
                + [f"{a} {b}" for a, b in p.track]
            fh.write(" ".join(row) + "\n")


# ------------------------------------------------------------------- binary

class _Reader:
    def __init__(self, path):
        self.path = path
        self.buf = Path(path).read_bytes()
        self.pos = 0

    def read(self, fmt):
        size = struct.calcsize("<" + fmt)
        if self.pos + size > len(self.buf):
            raise ColmapFormatError(
                f"{self.path}: truncated at offset {self.pos} (need {size} bytes, "
                f"{len(self.buf) - self.pos} left)")
        vals = struct.unpack_from("<" + fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def read_cstr(self):
        end = self.buf.find(b"\x00", self.pos)
        if end < 0:
            raise ColmapFormatError(f"{self.path}: truncated at offset {self.pos} (unterminated name)")
        s = self.buf[self.pos:end].decode("utf-8")
        self.pos = end + 1
        return s

    def finish(self):
        if self.pos != len(self.buf):
            raise ColmapFormatError(
                f"{self.path}: record count mismatch, {len(self.buf) - self.pos} trailing bytes "
                f"at offset {self.pos}")


def parse_colmap_binary(dir_path):
    """Read cameras.bin, images.bin and points3D.bin (little-endian)."""
    rd = _Reader(_require(dir_path, "cameras.bin"))
    cams = []
    (n,) = rd.read("Q")
    for _ in range(n):
        offset = rd.pos
        cam_id, model_id, width, height = rd.read("iiQQ")
        if model_id not in _KIND_BY_ID:
            raise ColmapFormatError(f"{rd.path}: unsupported camera model id {model_id} at offset {offset}")
        kind, nparams = _KIND_BY_ID[model_id]
        params = list(rd.read("d" * nparams))
        try:
            cams.append(CameraModel.from_params(cam_id, kind, width, height, params))
        except ColmapFormatError as exc:
            raise ColmapFormatError(f"{rd.path}: offset {offset}: {exc}") from None
    rd.finish()

    rd = _Reader(_require(dir_path, "images.bin"))
    images = []
    (n,) = rd.read("Q")
    for _ in range(n):
        vals = rd.read("idddddddi")
        name = rd.read_cstr()
        (npts,) = rd.read("Q")
        if npts * 24 > len(rd.buf) - rd.pos:
            raise ColmapFormatError(f"{rd.path}: truncated at offset {rd.pos} ({npts} 2D points declared)")
        raw = np.frombuffer(rd.buf, dtype=np.dtype([("x", "<f8"), ("y", "<f8"), ("id", "<i8")]),
                            count=npts, offset=rd.pos)
        rd.pos += npts * 24
        xys = np.stack([raw["x"], raw["y"]], axis=1).astype(np.float64) if npts else np.zeros((0, 2))
        ids = raw["id"].astype(np.int64)
        images.append(PosedImage(vals[0], vals[8], vals[1:5], vals[5:8], name, xys, ids))
    rd.finish()

    rd = _Reader(_require(dir_path, "points3D.bin"))
    points = []
    (n,) = rd.read("Q")
    for _ in range(n):
        offset = rd.pos
        pid, x, y, z, r, g, b, err, tlen = rd.read("QdddBBBdQ")
        if tlen == 0:
            raise ColmapFormatError(f"{rd.path}: point {pid} at offset {offset} has empty track")
        flat = rd.read("ii" * tlen)
        track = list(zip(flat[0::2], flat[1::2]))
        points.append(SparsePoint(pid, (x, y, z), np.array([r, g, b]) / 255.0, track, err))
    rd.finish()
    _validate(cams, images, points)
    return cams, images, points


def write_colmap_binary(dir_path, cams, images, points):
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(cams)))
        for c in cams:
            mid, nparams = CAMERA_KINDS[c.kind]
            fh.write(struct.pack("<iiQQ", c.camera_id, mid, c.width, c.height))
            fh.write(struct.pack("<" + "d" * nparams, *c.params))
    with open(d / "images.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(images)))
        for im in images:
            fh.write(struct.pack("<idddddddi", im.image_id, *im.qvec, *im.tvec, im.camera_id))
            fh.write(im.name.encode("utf-8") + b"\x00")
            fh.write(struct.pack("<Q", len(im.point3d_ids)))
            for (x, y), pid in zip(im.points2d, im.point3d_ids):
                fh.write(struct.pack("<ddq", x, y, pid))
    with open(d / "points3D.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(points)))
        for p in points:
            rgb = np.clip(np.round(p.color * 255), 0, 255).astype(int)
            fh.write(struct.pack("<QdddBBBdQ", p.point_id, *p.position, *rgb, p.error, len(p.track)))
            for a, b in p.track:
                fh.write(struct.pack("<ii", a, b))


def read_colmap_model(dir_path):
    """Parse whichever variant (binary preferred) is present in ``dir_path``."""
    d = Path(dir_path)
    if (d / "cameras.bin").is_file():
        return parse_colmap_binary(d)
    if (d / "cameras.txt").is_file():
        return parse_colmap_text(d)
    raise FileNotFoundError(f"no COLMAP model (cameras.bin or cameras.txt) in {d}")


# ------------------------------------------------------------ images/masks

def load_image(path):
    """Load a PNG/PPM photo as float RGB in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L"):
            raise ValueError(f"{path}: unsupported image mode {im.mode}")
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, pixels):
    arr = np.clip(np.round(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_label_mask(path, shape=None):
    """Load an 8-bit grayscale label map (0 = background, 1..255 = building).

    ``shape`` is the (H, W) of the paired photo, checked when given.
    """
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: label mask must be 8-bit grayscale, got mode {im.mode}")
        labels = np.array(im, dtype=np.uint8)
    if shape is not None and tuple(labels.shape) != tuple(shape[:2]):
        raise ValueError(f"{path}: mask is {labels.shape[1]}x{labels.shape[0]} but photo is "
                         f"{shape[1]}x{shape[0]}")
    return labels


def save_label_mask(path, labels):
    labels = np.asarray(labels)
    if labels.dtype != np.uint8:
        if labels.min() < 0 or labels.max() > 255:
            raise ValueError("labels must fit in 8 bits")
        labels = labels.astype(np.uint8)
    Image.fromarray(labels, mode="L").save(path)


# -------------------------------------------------------------------- mesh

def write_mesh(mesh: TriangleMesh, path):
    """Write ASCII OBJ or binary little-endian PLY, chosen by extension."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".obj":
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"# mgf mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} faces\n")
            for v in mesh.vertices:
                fh.write("v %r %r %r\n" % tuple(float(x) for x in v))
            for t in mesh.triangles + 1:
                fh.write("f %d %d %d\n" % tuple(t))
    elif ext == ".ply":
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(mesh.vertices)}\n"
            "property double x\nproperty double y\nproperty double z\n"
            f"element face {len(mesh.triangles)}\n"
            "property list uchar int vertex_indices\nend_header\n"
        )
        faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        faces["n"] = 3
        faces["idx"] = mesh.triangles
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(mesh.vertices.astype("<f8").tobytes())
            fh.write(faces.tobytes())
    else:
        raise ValueError(f"unsupported mesh extension {ext!r} (use .obj or .ply)")


def read_mesh(path) -> TriangleMesh:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".obj":
        verts, faces = [], []
        with open(path, encoding="ascii") as fh:
            for line in fh:
                tok = line.split()
                if not tok:
                    continue
                if tok[0] == "v":
                    verts.append([float(v) for v in tok[1:4]])
                elif tok[0] == "f":
                    idx = [int(v.split("/")[0]) - 1 for v in tok[1:]]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
        return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    if ext == ".ply":
        data = path.read_bytes()
        end = data.index(b"end_header\n") + len(b"end_header\n")
        header = data[:end].decode("ascii").splitlines()
        if "format binary_little_endian 1.0" not in header:
            raise ValueError(f"{path}: only binary little-endian PLY written by write_mesh is supported")
        nv = nf = 0
        for line in header:
            if line.startswith("element vertex"):
                nv = int(line.split()[-1])
            elif line.startswith("element face"):
                nf = int(line.split()[-1])
        verts = np.frombuffer(data, dtype="<f8", count=nv * 3, offset=end).reshape(nv, 3)
        faces = np.frombuffer(data, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=nf,
                              offset=end + nv * 24)
        return TriangleMesh(verts.astype(np.float64), faces["idx"].astype(np.int64))
    raise ValueError(f"unsupported mesh extension {ext!r}")
