import numpy as np
import pytest

from mgf import sh
from mgf.gaussians import GaussianField, GaussianPrimitive, to_local, t_star, gaussian_1d
from mgf.mask_field import MaskPyramid, View
from mgf.render import (OPACITY_EPS, T_MIN, make_rays, render_image, render_normals, render_pixel,
                        render_rays, to_uint8)
from mgf.scene_io import CameraModel, PosedImage

CAM = CameraModel(1, "PINHOLE", 24, 20, 20.0, 20.0, 12.0, 10.0)
# camera at z = -5 looking down +z
POSE = PosedImage(1, 1, np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 5.0]), "v.png")


def _opaque(position, color, scale=(0.5, 0.5, 0.5), opacity=1.0 - 1e-9, rotation=(1, 0, 0, 0)):
    return GaussianPrimitive.create(position, rotation, scale, opacity, color)


def straight_loop(prims, o, r, w=1.0):
    """Reference compositor written independently of the vectorized renderer."""
    hits = []
    for k, g in enumerate(prims):
        lr = to_local(g, o, r)
        t = t_star(lr)
        x = lr.o_g + t * lr.r_g
        if x @ x > 9.0 or t <= 0:
            continue
        hits.append((t, k, float(gaussian_1d(lr, t))))
    hits.sort()
    C = np.zeros(3)
    A = 0.0
    D = 0.0
    T = 1.0
    for t, k, E in hits:
        if T < T_MIN:
            break
        g = prims[k]
        a = min(g.opacity * w * E, 1.0 - OPACITY_EPS)
        c = np.maximum(sh.C0 * g.sh_coeffs[0] + 0.5, 0.0)
        C += T * a * c
        A += T * a
        D += T * a * t
        T *= 1.0 - a
    return C, A, D / max(A, OPACITY_EPS)


def test_principal_ray_is_forward_axis():
    cam = CameraModel(1, "PINHOLE", 24, 20, 20.0, 20.0, 12.5, 10.5)
    rays = make_rays(cam, POSE)
    # the center of pixel (12, 10) is (cx, cy) = (12.5, 10.5)
    d = rays.dirs.reshape(20, 24, 3)[10, 12]
    np.testing.assert_allclose(d, POSE.R[2], atol=1e-15)


def test_zero_weights_disable_every_ray():
    rays = make_rays(CAM, POSE, np.zeros((20, 24)))
    assert not rays.chi.any()
    fld = GaussianField.from_primitives([_opaque([0, 0, 0], (1, 1, 1))])
    color, alpha, _, _, cache = render_rays(fld, rays)
    assert not color.any() and not alpha.any()
    assert cache.gid.size == 0


def test_weight_map_shape_checked():
    with pytest.raises(ValueError):
        make_rays(CAM, POSE, np.ones((3, 3)))


def test_single_opaque_gaussian():
    g = _opaque([0, 0, 0], (0.2, 0.6, 0.9))
    c, a, d = render_pixel([g], [0, 0, -5], [0, 0, 1])
    np.testing.assert_allclose(c, np.array([0.2, 0.6, 0.9]) * (1 - OPACITY_EPS), atol=1e-12)
    assert a == pytest.approx(1.0, abs=2e-4)
    assert d == pytest.approx(5.0)


def test_masked_out_ray_is_black():
    g = _opaque([0, 0, 0], (0.2, 0.6, 0.9))
    c, a, d = render_pixel([g], [0, 0, -5], [0, 0, 1], w=1.0, chi=0)
    assert not np.any(c) and a == 0.0 and d == 0.0


def test_two_layer_compositing():
    g1 = _opaque([0, 0, 0], (1, 0, 0), opacity=0.5)
    g2 = _opaque([0, 0, 2], (0, 0, 1))
    c, a, _ = render_pixel([g1, g2], [0, 0, -5], [0, 0, 1])
    np.testing.assert_allclose(c, [0.5, 0, 0.5 * (1 - OPACITY_EPS)], atol=1e-12)
    assert a == pytest.approx(1.0, abs=1e-4)


def test_random_ray_matches_straight_loop():
    rng = np.random.default_rng(7)
    for trial in range(10):
        prims = []
        for k in range(20):
            p = np.array([0, 0, 0.0]) + rng.normal(0, 0.5, 3) + [0, 0, rng.uniform(-2, 2)]
            prims.append(GaussianPrimitive.create(p, rng.standard_normal(4), rng.uniform(0.2, 0.8, 3),
                                                  rng.uniform(0.05, 0.95), rng.uniform(0, 1, 3)))
        o = np.array([0.1, -0.1, -6.0])
        r = np.array([0.02, 0.01, 1.0])
        r /= np.linalg.norm(r)
        w = rng.uniform(0.5, 2.0)
        prims.sort(key=lambda g: t_star(to_local(g, o, r)))
        c, a, d = render_pixel(prims, o, r, w=w)
        C, A, D = straight_loop(prims, o, r, w)
        np.testing.assert_allclose(c, C, atol=1e-10, rtol=0)
        assert a == pytest.approx(A, abs=1e-10)
        assert d == pytest.approx(D, abs=1e-10)


def test_unsorted_input_rejected():
    g1 = _opaque([0, 0, 0], (1, 0, 0))
    g2 = _opaque([0, 0, 2], (0, 0, 1))
    with pytest.raises(AssertionError):
        render_pixel([g2, g1], [0, 0, -5], [0, 0, 1])


def test_empty_field_renders_black():
    out = render_image(GaussianField.empty(), (CAM, POSE))
    assert not out.color.any() and not out.alpha.any()
    assert not render_normals(GaussianField.empty(), (CAM, POSE)).any()


def test_blob_at_principal_point():
    fld = GaussianField.from_primitives([_opaque([0, 0, 0], (1, 1, 1), scale=(0.6, 0.6, 0.6))])
    lab = np.zeros((20, 24), dtype=np.uint8)
    lab[4:16, 5:19] = 1
    out = render_image(fld, View(CAM, POSE, MaskPyramid.from_labels(lab)))
    lum = out.color.sum(axis=2)
    iy, ix = np.unravel_index(np.argmax(lum), lum.shape)
    assert (iy, ix) in {(9, 11), (9, 12), (10, 11), (10, 12)}
    assert not out.color[lab == 0].any()
    assert out.alpha[lab == 0].max() == 0.0


def test_flat_gaussian_normal_faces_camera():
    g = GaussianPrimitive.create([0, 0, 0], scale=(1.0, 1.0, 1e-3), opacity=0.9)
    n = render_normals(GaussianField.from_primitives([g]), (CAM, POSE))
    rays = make_rays(CAM, POSE)
    footprint = render_image(GaussianField.from_primitives([g]), (CAM, POSE)).alpha > 0.05
    d = rays.dirs.reshape(20, 24, 3)
    cosines = np.sum(n * -d, axis=2)[footprint]
    assert footprint.sum() > 20
    np.testing.assert_allclose(n[footprint], np.broadcast_to([0, 0, -1.0], n[footprint].shape))
    assert cosines.min() > 0.9


def test_transparent_gaussian_changes_nothing():
    rng = np.random.default_rng(9)
    prims = [GaussianPrimitive.create(rng.normal(0, 0.6, 3), rng.standard_normal(4), rng.uniform(0.2, 0.7, 3),
                                      rng.uniform(0.1, 0.9), rng.uniform(0, 1, 3)) for _ in range(6)]
    fld = GaussianField.from_primitives(prims)
    ghost = GaussianField.from_primitives([GaussianPrimitive.create([0.1, 0, 0.2], opacity=0.5)])
    ghost.opacity_logits[:] = -np.inf
    a = render_image(fld, (CAM, POSE))
    b = render_image(fld.concat(ghost), (CAM, POSE))
    np.testing.assert_allclose(b.color, a.color, atol=1e-12)
    np.testing.assert_allclose(b.alpha, a.alpha, atol=1e-12)


def test_preview_background():
    rgb = np.full((2, 2, 3), 0.5)
    mask = np.array([[True, False], [False, True]])
    img = to_uint8(rgb, mask, preview=True)
    assert tuple(img[0, 1]) == (180, 238, 180) and tuple(img[0, 0]) == (128, 128, 128)
