import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voldis.errors import InputError
from voldis.geometry import (CameraIntrinsics, Pose, SimilarityTransform, apply_similarity, camera_rays,
                             generate_rays, invert_similarity, pixel_grid, rotation_about_axis)

from oracles import pinhole_direction

finite = st.floats(-5, 5, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)


@st.composite
def similarities(draw):
    axis = np.array(draw(vec3)) + np.array([0.0, 0.0, 1e-3])
    angle = draw(st.floats(-np.pi, np.pi))
    scale = draw(st.floats(0.1, 10.0))
    return SimilarityTransform(scale, rotation_about_axis(axis, angle), np.array(draw(vec3)))


def test_principal_point_ray_looks_down_minus_z():
    k = CameraIntrinsics(5, 5, 3.0)
    ray = generate_rays(k, Pose.identity(), [(2, 2)]).ray(0)
    np.testing.assert_array_equal(ray.origin, [0, 0, 0])
    np.testing.assert_allclose(ray.direction, [0, 0, -1], atol=0)


def test_pinhole_direction_matches_independent_formula():
    k = CameraIntrinsics(4, 4, 2.0, (1.5, 1.5))
    d = generate_rays(k, Pose.identity(), [(0, 3)]).directions[0]
    expected = np.array([0.75, 0.75, -1.0]) / np.linalg.norm([0.75, 0.75, -1.0])
    np.testing.assert_allclose(d, expected, rtol=0, atol=1e-15)


def test_rotated_pose_directions_match_oracle():
    rot = rotation_about_axis([0.3, 1.0, -0.2], 0.7)
    pose = Pose(rot, [1.0, 2.0, 3.0])
    k = CameraIntrinsics(7, 5, 4.5)
    rays = generate_rays(k, pose)
    for (r, c), d, o in zip(pixel_grid(k), rays.directions, rays.origins):
        np.testing.assert_allclose(d, pinhole_direction(r, c, 4.5, k.cx, k.cy, rot), atol=1e-14)
        np.testing.assert_array_equal(o, [1.0, 2.0, 3.0])


def test_directions_unit_norm_and_generation_deterministic():
    k = CameraIntrinsics(9, 6, 5.0)
    pose = Pose.look_at([1, 2, 4], [0, 0, 0])
    a, b = generate_rays(k, pose), generate_rays(k, pose)
    np.testing.assert_allclose(np.linalg.norm(a.directions, axis=1), 1.0, atol=1e-15)
    # rays for two volumes built from the same camera are bitwise identical
    assert np.array_equal(a.directions, b.directions) and np.array_equal(a.origins, b.origins)
    assert np.array_equal(a.ray_ids, b.ray_ids)


@pytest.mark.parametrize("px", [(-1, 0), (0, 4), (3, 0), (0, -2)])
def test_out_of_bounds_pixel_rejected(px):
    with pytest.raises(InputError, match="outside"):
        generate_rays(CameraIntrinsics(4, 3, 2.0), Pose.identity(), [px])


def test_camera_rays_accept_fractional_pixels():
    k = CameraIntrinsics(4, 4, 2.0)
    r = camera_rays(k, Pose.identity(), [1.5], [1.5])
    np.testing.assert_allclose(r.directions[0], [0, 0, -1])


def test_invalid_intrinsics_and_poses():
    with pytest.raises(InputError):
        CameraIntrinsics(0, 4, 1.0)
    with pytest.raises(InputError):
        CameraIntrinsics(4, 4, -1.0)
    with pytest.raises(InputError, match="rotation"):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InputError):
        Pose.from_matrix(np.zeros(5))
    with pytest.raises(InputError):
        Pose.look_at([0, 0, 0], [0, 0, 0])


def test_pose_matrix_round_trip():
    pose = Pose.look_at([0.5, -1, 3], [0, 0.2, 0])
    back = Pose.from_matrix(pose.matrix().reshape(-1))
    np.testing.assert_array_equal(back.rotation, pose.rotation)
    np.testing.assert_array_equal(back.translation, pose.translation)


def test_resized_intrinsics_keep_the_image_plane():
    k = CameraIntrinsics(64, 48, 50.0)
    half = k.resized(32, 24)
    assert half.focal == 25.0
    assert (half.cx, half.cy) == ((31.5 + 0.5) / 2 - 0.5, (23.5 + 0.5) / 2 - 0.5)
    assert k.with_focal_scale(2.0).focal == 100.0


def test_similarity_examples():
    assert np.array_equal(apply_similarity(SimilarityTransform.identity(), [1, 2, 3]), [1, 2, 3])
    t = SimilarityTransform(2.0, np.eye(3), [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(apply_similarity(t, [1, 1, 1]), [3, 2, 2])
    inv = invert_similarity(t)
    assert inv.scale == 0.5
    np.testing.assert_array_equal(inv.translation, [-0.5, 0, 0])


@pytest.mark.parametrize("scale", [0.0, -1.0, float("nan")])
def test_nonpositive_scale_rejected(scale):
    with pytest.raises(InputError):
        SimilarityTransform(scale)


@settings(max_examples=60, deadline=None)
@given(similarities(), vec3)
def test_inverse_round_trip(t, p):
    back = apply_similarity(invert_similarity(t), apply_similarity(t, p))
    np.testing.assert_allclose(back, p, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(similarities(), similarities(), vec3)
def test_composition_equals_sequential_application(a, b, p):
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-9, rtol=1e-9)
