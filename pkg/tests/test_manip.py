import numpy as np
import pytest
import torch

from voldis.errors import InputError, ScorerError
from voldis.geometry import CameraIntrinsics, Pose, SimilarityTransform
from voldis.manip import (COLOR_SWATCHES, Camera, ColorOverrideField, HistogramScorer, ManipConfig, ViewMask,
                          camouflage, camouflage_objective, freeze_view, make_residual_field, nonnegative_composite,
                          nonnegative_inpaint, opacity_mask, recolored, recolored_render, remove_object,
                          residual_render, scorer_input, semantic_manipulate, transform_foreground)
from voldis.render import RenderResult, SamplingConfig, render_disentangled, render_view
from voldis.scenes import AnalyticScene, Box, Primitive, Sphere, analytic_model, generate_dataset, render_oracle
from voldis.train import psnr

CAM = CameraIntrinsics(20, 20, 30.0)
POSE = Pose.look_at([0.0, 0.2, 3.0], [0.0, 0.0, 0.0])
S = SamplingConfig(48, 0)


def _scene():
    return AnalyticScene((
        Primitive(Sphere((-0.35, 0.0, 0.3), 0.25), 40.0, (0.9, 0.3, 0.1), "foreground"),
        Primitive(Box((-0.1, -0.4, -0.5), (0.6, 0.4, -0.2)), 40.0, (0.2, 0.4, 0.8), "background"),
    ))


@pytest.fixture(scope="module")
def fields():
    sc = _scene()
    return analytic_model(sc, "all"), analytic_model(sc, "background")


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(_scene(), n_views=3, resolution=(20, 20), supersample=1, n_steps=128).dataset


def test_override_starts_as_identity_and_round_trips(tmp_path, fields):
    ov = ColorOverrideField((4, 4, 4))
    view = freeze_view(*fields, Camera(CAM, POSE), S, 1.5, 4.5)
    assert torch.allclose(recolored(view, ov), view.full_color, atol=1e-6)
    with torch.no_grad():
        ov.offset.normal_()
    ov.save(tmp_path / "o.vdsf")
    back = ColorOverrideField.load(tmp_path / "o.vdsf")
    assert torch.equal(back.offset, ov.offset) and back.resolution == (4, 4, 4)


def test_remove_object_is_background_render(fields):
    a = remove_object(fields[1], CAM, POSE, S, 1.5, 4.5)
    b = render_view(fields[1], CAM, POSE, S, 1.5, 4.5)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.depth, b.depth)


def test_removal_matches_oracle_background_without_holes():
    sc = AnalyticScene((
        Primitive(Sphere((0.2, 0.0, 0.3), 0.2), 40.0, (0.9, 0.3, 0.1), "foreground"),
        Primitive(Box((-0.4, -0.4, -0.5), (0.8, 0.4, -0.2)), 40.0, (0.2, 0.4, 0.8), "background"),
    ))
    bg = analytic_model(sc, "background")
    out = remove_object(bg, CAM, POSE, SamplingConfig(128, 0), 1.5, 4.5)
    oracle = render_oracle(sc, CAM, POSE, 1.5, 4.5)
    assert psnr(out.color, oracle["background"].color) >= 25
    fg_px = oracle["foreground"].opacity > 0.5
    behind = fg_px & (oracle["background"].opacity > 0.5)
    assert behind.any()
    assert abs(out.opacity[behind].mean() - out.opacity[~fg_px & (oracle["background"].opacity > 0.5)].mean()) < 0.1


def test_transform_identity_equals_plain_composite(fields):
    a = transform_foreground(*fields, CAM, POSE, S, 1.5, 4.5, precedence=None).composite
    b = render_disentangled(*fields, CAM, POSE, S, 1.5, 4.5).composite
    assert np.abs(a.color - b.color).max() <= 1e-6


def test_transform_rejects_bad_inputs(fields):
    with pytest.raises(InputError):
        transform_foreground(*fields, CAM, POSE, S, 1.5, 4.5, focal_scale=0.0)
    with pytest.raises(InputError):
        transform_foreground(*fields, CAM, POSE, S, 1.5, 4.5, transform="up")
    with pytest.raises(InputError):
        SimilarityTransform(scale=0.0)


def test_scaled_object_grows(fields):
    a = transform_foreground(*fields, CAM, POSE, S, 1.5, 4.5).foreground.opacity
    t = SimilarityTransform(1.5, np.eye(3), np.array([-0.35, 0.0, 0.3]) * (1 - 1.5))
    b = transform_foreground(*fields, CAM, POSE, S, 1.5, 4.5, transform=t).foreground.opacity
    assert (b > 0.5).sum() > 1.8 * (a > 0.5).sum()


def test_camouflage_on_empty_foreground_is_a_no_op(small_ds):
    bg = analytic_model(_scene(), "background")
    res = camouflage(bg, bg, small_ds, ManipConfig(iterations=5, grid_resolution=(4, 4, 4)))
    assert res.initial == 0.0 and res.final == 0.0
    assert torch.all(res.field.offset == 0)


def test_camouflage_keeps_depth_and_reduces_loss(fields, small_ds):
    res = camouflage(*fields, small_ds, ManipConfig(iterations=60, grid_resolution=(16, 16, 16)))
    assert res.final < 0.5 * res.initial
    for v in res.extra["views"]:
        before = recolored_render(v, ColorOverrideField((16, 16, 16)))
        after = recolored_render(v, res.field)
        assert np.array_equal(before.depth, after.depth) and np.array_equal(before.disparity, after.disparity)
    assert camouflage_objective(res.extra["views"], res.field) == res.final
    assert [r["iter"] for r in res.trace] == list(range(1, 61))


def test_residual_renders_are_nonnegative_for_any_parameters():
    cfg = ManipConfig(grid_resolution=(6, 6, 6))
    res = make_residual_field(cfg)
    with torch.no_grad():
        res.coarse.grid.normal_(0, 5)
    out = residual_render(res, Camera(CAM, POSE), cfg, 1.5, 4.5)
    assert out.color.min() >= 0.0


def test_nonnegative_with_matching_volumes_does_not_get_worse(small_ds):
    bg = analytic_model(_scene(), "background")
    res = nonnegative_inpaint(bg, bg, small_ds, ManipConfig(iterations=20, grid_resolution=(8, 8, 8)))
    assert res.final <= res.initial


def test_nonnegative_composite_clips_for_display():
    full = RenderResult(np.full((2, 2, 3), 0.8), *(np.zeros((2, 2)),) * 3)
    res = RenderResult(np.full((2, 2, 3), 0.5), *(np.zeros((2, 2)),) * 3)
    assert np.all(nonnegative_composite(full, res) == 1.0)


def test_opacity_mask_thresholds_positive_foreground(fields):
    view = freeze_view(*fields, Camera(CAM, POSE), S, 1.5, 4.5)
    m = opacity_mask(view, 0.05)
    assert m.source == "opacity" and m.mask.shape == (20, 20)
    oracle = render_oracle(_scene(), CAM, POSE, 1.5, 4.5)["foreground"].opacity > 0.5
    assert (m.mask.astype(bool) ^ oracle).sum() <= 0.1 * oracle.sum()
    with pytest.raises(InputError):
        ViewMask(np.full((2, 2), 0.5), "dataset")


def test_scorer_self_similarity_and_target_direction():
    sc = HistogramScorer()
    img = torch.rand(16, 16, 3)
    assert abs(sc(img, img).item() - 1.0) < 1e-9
    red = torch.zeros(16, 16, 3)
    red[..., 0] = 1
    assert sc(red, "red").item() > 0.99 > sc(red, "blue").item()
    assert set(COLOR_SWATCHES) >= {"red", "green", "blue"}
    assert sc.features(img).numel() == 64
    with pytest.raises(InputError):
        sc(img, "ultraviolet")


def test_scorer_input_grid_then_upsample():
    img = torch.rand(189, 252, 3)
    out = scorer_input(img)
    assert tuple(out.shape) == (224, 224, 3)
    # the lattice spans the image: corners are preserved exactly
    assert torch.allclose(out[0, 0], img[0, 0], atol=1e-5) and torch.allclose(out[-1, -1], img[-1, -1], atol=1e-5)
    assert torch.all(scorer_input(img * 3) <= 1.0)


class _ConstantScorer:
    def __call__(self, image, target):
        return image.sum() * 0 + 0.5


class _BrokenScorer:
    def __call__(self, image, target):
        raise RuntimeError("model offline")


def test_constant_scorer_only_constrains_the_background(fields, small_ds):
    cfg = ManipConfig(iterations=10, grid_resolution=(8, 8, 8), semantic_resolution=(20, 20))
    res = semantic_manipulate(*fields, small_ds, _ConstantScorer(), "red", cfg)
    for v, m in zip(res.extra["views"], res.extra["masks"]):
        out = torch.from_numpy(m.mask.reshape(-1) == 0)
        with torch.no_grad():
            diff = (recolored(v, res.field) - v.bg_color)[out].abs().max()
        assert diff <= 0.05
    assert res.final <= res.initial


def test_scorer_failure_names_the_view(fields, small_ds):
    cfg = ManipConfig(iterations=1, grid_resolution=(4, 4, 4), semantic_resolution=(20, 20))
    with pytest.raises(ScorerError, match="view 0"):
        semantic_manipulate(*fields, small_ds, _BrokenScorer(), "red", cfg)


def test_semantic_moves_masked_colour_toward_target(fields, small_ds):
    cfg = ManipConfig(iterations=40, lr_start=0.1, lr_end=0.01, grid_resolution=(16, 16, 16),
                      semantic_resolution=(20, 20), mask_dilation=1)
    res = semantic_manipulate(*fields, small_ds, HistogramScorer(), "green", cfg)
    assert res.extra["similarity_final"] > res.extra["similarity_initial"]
    v, m = res.extra["views"][0], res.extra["masks"][0]
    sel = torch.from_numpy(m.mask.reshape(-1) == 1)
    with torch.no_grad():
        before, after = v.full_color[sel].mean(0), recolored(v, res.field)[sel].clamp(0, 1).mean(0)
    assert after[1] - after[0] > before[1] - before[0]


def test_semantic_mask_shape_checked(fields, small_ds):
    view = freeze_view(*fields, Camera(CAM, POSE), S, 1.5, 4.5)
    with pytest.raises(InputError):
        semantic_manipulate(*fields, small_ds, HistogramScorer(), "red", ManipConfig(iterations=1),
                            views=[view], masks=[ViewMask(np.zeros((3, 3), np.uint8), "dataset")])
