import math

import numpy as np
import pytest

from mgf.mask_field import (MaskPyramid, View, boundary_map, export_child_prompts, masked_points,
                            project_point, read_prompts, select_roots, weight_map, write_prompts)
from mgf.scene_io import CameraModel, PosedImage, SparsePoint

CAM = CameraModel(1, "PINHOLE", 100, 100, 100.0, 100.0, 50.0, 50.0)
IDENT = PosedImage(1, 1, np.array([1.0, 0, 0, 0]), np.zeros(3), "a.png")


def _images(n):
    return [PosedImage(i, 1, np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, float(i)]), f"{i}.png")
            for i in range(n)]


def test_roots_by_stride():
    assert select_roots(_images(10), 1 / 5).root_ids == {0, 5}
    sel = select_roots(_images(1), 0.37)
    assert sel.root_ids == {0} and sel.child_ids == set()


def test_roots_count_146():
    sel = select_roots(_images(146), 0.2)
    assert len(sel.root_ids) == 30 == math.ceil(146 / 5)
    assert len(sel.child_ids) == 116


def test_roots_farthest_point_spread():
    sel = select_roots(_images(10), 0.2, mode="farthest-point")
    assert sel.root_ids == {0, 9}


@pytest.mark.parametrize("bad", [0.0, 1.5])
def test_roots_bad_ratio(bad):
    with pytest.raises(ValueError):
        select_roots(_images(3), bad)


def test_project_point_examples():
    # a 200-pixel frame so that v = 100 is still on the image
    cam = CameraModel(1, "PINHOLE", 200, 200, 100.0, 100.0, 50.0, 50.0)
    assert project_point([0, 0, 4], cam, IDENT) == (50.0, 50.0)
    assert project_point([1, 2, 4], cam, IDENT) == (75.0, 100.0)
    assert project_point([0, 0, -1], cam, IDENT) is None


def test_project_point_off_image():
    assert project_point([1, 2, 4], CAM, IDENT) is None


def _root(labels, pose=IDENT, cam=CAM):
    return View(cam, pose, MaskPyramid.from_labels(labels))


def test_masked_point_kept_and_dropped():
    lab = np.ones((100, 100), dtype=np.uint8)
    p_in = SparsePoint(1, [0, 0, 4], [0, 0, 0])
    assert masked_points([p_in], [_root(lab)]) == [p_in]
    lab2 = lab.copy()
    lab2[50, 50] = 0
    assert masked_points([p_in], [_root(lab), _root(lab2)]) == []


def _brute_keep(P, roots):
    seen = False
    for view in roots:
        uv = project_point(P, view.camera, view.image)
        if uv is None:
            continue
        seen = True
        if view.pyramid.labels[int(math.floor(uv[1])), int(math.floor(uv[0]))] == 0:
            return False
    return seen


def test_masked_points_vs_loop_oracle():
    rng = np.random.default_rng(5)
    poses = [PosedImage(1, 1, np.array([1.0, 0, 0, 0]), np.array([0.3 * k, -0.2 * k, 0.0]), "r.png")
             for k in range(3)]
    roots = [_root(rng.integers(0, 2, (100, 100)).astype(np.uint8), pose) for pose in poses]
    pts = [SparsePoint(i, rng.uniform([-2, -2, -1], [2, 2, 5]), [0, 0, 0]) for i in range(50)]
    got = {p.point_id for p in masked_points(pts, roots)}
    want = {p.point_id for p in pts if _brute_keep(p.position, roots)}
    assert got == want


def test_child_prompts():
    p = SparsePoint(1, [0, 0, 4], [0, 0, 0])
    assert export_child_prompts([p], View(CAM, IDENT)) == [(50, 50)]
    behind = SparsePoint(2, [0, 0, -4], [0, 0, 0])
    assert export_child_prompts([behind], View(CAM, IDENT)) == []


def test_prompt_file_round_trip(tmp_path):
    write_prompts(tmp_path / "p.txt", [(1, 2), (30, 4)])
    assert read_prompts(tmp_path / "p.txt") == [(1, 2), (30, 4)]


def test_uniform_labels_have_no_boundary():
    assert not boundary_map(np.full((6, 6), 3, dtype=np.uint8)).any()


def test_step_edge_boundary():
    lab = np.array([[1, 1, 2, 2]] * 4, dtype=np.uint8)
    want = np.zeros((4, 4), dtype=bool)
    want[:, 1:3] = True
    np.testing.assert_array_equal(boundary_map(lab), want)


def test_boundary_vs_neighbor_oracle():
    rng = np.random.default_rng(2)
    for _ in range(5):
        lab = rng.integers(0, 4, (12, 9)).astype(np.uint8)
        want = np.zeros(lab.shape, dtype=bool)
        H, W = lab.shape
        for y in range(H):
            for x in range(W):
                if lab[y, x] == 0:
                    continue
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < H and 0 <= xx < W and lab[yy, xx] != lab[y, x]:
                        want[y, x] = True
        np.testing.assert_array_equal(boundary_map(lab), want)


def test_weight_values():
    lab = np.array([[0, 1, 1, 1, 1]] * 3, dtype=np.uint8)
    w = weight_map(lab, boundary_map(lab))
    assert w[1, 0] == 0.0
    assert w[1, 1] == 10.0
    assert w[1, 3] == 1.0


def test_weight_rejects_nonpositive():
    with pytest.raises(ValueError):
        weight_map(np.ones((2, 2)), np.zeros((2, 2)), w_edge=0)
