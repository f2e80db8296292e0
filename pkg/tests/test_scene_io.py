import numpy as np
import pytest

from mgf.scene_io import (CameraModel, ColmapFormatError, PosedImage, SparsePoint, TriangleMesh,
                          load_label_mask, parse_colmap_binary, parse_colmap_text,
                          qvec_to_rotmat, read_colmap_model, read_mesh, rotmat_to_qvec,
                          save_label_mask, write_colmap_binary, write_colmap_text, write_mesh)


CAMERAS_TXT = """# Camera list with one line of data per camera:
#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]
1 PINHOLE 750 500 600 600 375 250
2 SIMPLE_PINHOLE 640 480 500 320 240
3 SIMPLE_RADIAL 640 480 510 320 240 0
"""

IMAGES_TXT = """# Image list with two lines of data per image:
1 1 0 0 0 1 2 3 1 a.png
10.5 20.5 1 30.25 40.75 -1
2 0.7071067811865476 0.7071067811865476 0 0 0 0 4 2 b c.png

"""

POINTS_TXT = """# 3D point list
1 0.5 0.25 4 255 128 0 0.75 1 0
2 -1 0 5 0 0 0 1.5 1 0 2 0
"""


def _write_fixture(d):
    (d / "cameras.txt").write_text(CAMERAS_TXT)
    (d / "images.txt").write_text(IMAGES_TXT)
    (d / "points3D.txt").write_text(POINTS_TXT)


def _same_model(a, b):
    ca, ia, pa = a
    cb, ib, pb = b
    assert ca == cb
    assert len(ia) == len(ib) and len(pa) == len(pb)
    for x, y in zip(ia, ib):
        assert (x.image_id, x.camera_id, x.name) == (y.image_id, y.camera_id, y.name)
        np.testing.assert_array_equal(x.qvec, y.qvec)
        np.testing.assert_array_equal(x.tvec, y.tvec)
        np.testing.assert_array_equal(x.points2d, y.points2d)
        np.testing.assert_array_equal(x.point3d_ids, y.point3d_ids)
    for x, y in zip(pa, pb):
        assert x.point_id == y.point_id and x.track == y.track and x.error == y.error
        np.testing.assert_array_equal(x.position, y.position)
        np.testing.assert_array_equal(x.color, y.color)


def test_pinhole_row(tmp_path):
    _write_fixture(tmp_path)
    cams, images, points = parse_colmap_text(tmp_path)
    assert cams[0] == CameraModel(1, "PINHOLE", 750, 500, 600.0, 600.0, 375.0, 250.0)
    assert cams[1].fx == cams[1].fy == 500
    assert [im.name for im in images] == ["a.png", "b c.png"]
    assert images[0].points2d.shape == (2, 2)
    assert list(images[0].point3d_ids) == [1, -1]
    assert len(images[1].points2d) == 0
    assert points[1].track == [(1, 0), (2, 0)]


def test_comment_only_files_are_empty(tmp_path):
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        (tmp_path / name).write_text("# nothing here\n# still nothing\n")
    assert parse_colmap_text(tmp_path) == ([], [], [])


def test_unsupported_model_names_file_and_line(tmp_path):
    _write_fixture(tmp_path)
    (tmp_path / "cameras.txt").write_text("# header\n1 FISHEYE 10 10 5 5 5 5\n")
    with pytest.raises(ColmapFormatError, match=r"cameras\.txt:2: unsupported camera model"):
        parse_colmap_text(tmp_path)


def test_radial_distortion_rejected(tmp_path):
    _write_fixture(tmp_path)
    (tmp_path / "cameras.txt").write_text("1 SIMPLE_RADIAL 640 480 500 320 240 0.1\n")
    with pytest.raises(ColmapFormatError, match="undistort upstream"):
        parse_colmap_text(tmp_path)


def test_malformed_image_row_names_line(tmp_path):
    _write_fixture(tmp_path)
    (tmp_path / "images.txt").write_text("# c\n\n1 1 0 0 0 1 2 x 1 a.png\n\n")
    with pytest.raises(ColmapFormatError, match=r"images\.txt:3: malformed image row"):
        parse_colmap_text(tmp_path)


def test_text_binary_round_trip(tmp_path):
    _write_fixture(tmp_path)
    model = parse_colmap_text(tmp_path)
    bdir = tmp_path / "bin"
    write_colmap_binary(bdir, *model)
    _same_model(model, parse_colmap_binary(bdir))
    tdir = tmp_path / "txt"
    write_colmap_text(tdir, *parse_colmap_binary(bdir))
    _same_model(model, parse_colmap_text(tdir))
    # binary is preferred when both exist
    write_colmap_text(bdir, *model)
    _same_model(model, read_colmap_model(bdir))


def test_empty_binary_files(tmp_path):
    write_colmap_binary(tmp_path, [], [], [])
    assert parse_colmap_binary(tmp_path) == ([], [], [])


def test_truncated_binary_names_offset(tmp_path):
    _write_fixture(tmp_path)
    write_colmap_binary(tmp_path / "b", *parse_colmap_text(tmp_path))
    p = tmp_path / "b" / "images.bin"
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(ColmapFormatError, match=r"images\.bin: truncated at offset \d+"):
        parse_colmap_binary(tmp_path / "b")


def test_trailing_bytes_detected(tmp_path):
    write_colmap_binary(tmp_path, [CameraModel(1, "PINHOLE", 4, 4, 2, 2, 2, 2)], [], [])
    p = tmp_path / "cameras.bin"
    p.write_bytes(p.read_bytes() + b"\x00\x01")
    with pytest.raises(ColmapFormatError, match="trailing bytes"):
        parse_colmap_binary(tmp_path)


def test_quaternion_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(50):
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        q *= np.sign(q[0])
        R = qvec_to_rotmat(q)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(rotmat_to_qvec(R), q, atol=1e-12)


def test_image_center():
    im = PosedImage(1, 1, [1, 0, 0, 0], [1, 2, 3], "x.png")
    np.testing.assert_allclose(im.center, [-1, -2, -3])


def test_label_masks(tmp_path):
    zeros = np.zeros((4, 4), dtype=np.uint8)
    save_label_mask(tmp_path / "z.png", zeros)
    assert not load_label_mask(tmp_path / "z.png").any()
    lab = np.random.default_rng(0).integers(0, 3, (5, 7)).astype(np.uint8)
    save_label_mask(tmp_path / "l.png", lab)
    np.testing.assert_array_equal(load_label_mask(tmp_path / "l.png", (5, 7)), lab)
    big = np.zeros((500, 750), dtype=np.uint8)
    save_label_mask(tmp_path / "b.png", big)
    with pytest.raises(ValueError, match="750x500 but photo is 640x480"):
        load_label_mask(tmp_path / "b.png", (480, 640))


def test_obj_unit_triangle(tmp_path):
    mesh = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
    write_mesh(mesh, tmp_path / "t.obj")
    lines = [ln for ln in (tmp_path / "t.obj").read_text().splitlines() if not ln.startswith("#")]
    assert [ln.split()[0] for ln in lines] == ["v", "v", "v", "f"]
    assert lines[-1] == "f 1 2 3"


def test_empty_mesh_is_header_only(tmp_path):
    write_mesh(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), tmp_path / "e.obj")
    assert all(ln.startswith("#") for ln in (tmp_path / "e.obj").read_text().splitlines())
    back = read_mesh(tmp_path / "e.obj")
    assert len(back.vertices) == 0 and len(back.triangles) == 0


@pytest.mark.parametrize("ext", [".obj", ".ply"])
def test_mesh_round_trip_10k(tmp_path, ext):
    rng = np.random.default_rng(1)
    V = rng.standard_normal((6000, 3))
    T = np.stack([rng.permutation(6000)[:3] for _ in range(10000)])
    write_mesh(TriangleMesh(V, T), tmp_path / ("m" + ext))
    back = read_mesh(tmp_path / ("m" + ext))
    np.testing.assert_array_equal(back.triangles, T)
    np.testing.assert_array_equal(back.vertices, V)


def test_sparse_point_fields():
    p = SparsePoint(7, [1, 2, 3], [0.5, 0.5, 0.5], [(1, 0)], 0.1)
    assert p.position.shape == (3,) and p.track == [(1, 0)]
