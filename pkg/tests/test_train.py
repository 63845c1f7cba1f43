import math

import numpy as np
import pytest
import torch

from voldis.errors import CorruptedStateError, InputError
from voldis.field import VoxelGridField
from voldis.render import RadianceModel, render_view
from voldis.scenes import AnalyticScene, Primitive, Sphere, generate_dataset
from voldis.train import (AdamState, TrainConfig, adam_step, dilate_masks, fit_field, load_adam, load_model,
                          loss_full, loss_masked_bg, lr_at, make_model, prepare_dataset, psnr, read_metrics,
                          save_adam, split_views)

from oracles import fd_check


# --- losses ----------------------------------------------------------------------

def test_full_loss_examples():
    x = torch.tensor([[1.0, 0.0, 0.0]])
    lv = loss_full(x, torch.zeros(1, 3))
    assert lv.value.item() == 1.0 and torch.equal(lv.adjoint, torch.tensor([[2.0, 0.0, 0.0]]))
    assert loss_full(x, x).value.item() == 0.0
    a, b = torch.rand(10, 3), torch.rand(10, 3)
    perm = torch.randperm(10)
    assert torch.isclose(loss_full(a, b).value, loss_full(a[perm], b[perm]).value)
    with pytest.raises(InputError):
        loss_full(torch.zeros(2, 3), torch.zeros(3, 3))


def test_masked_loss_examples():
    pred = torch.tensor([[1.0, 1.0, 1.0], [0.5, 0.0, 0.0]])
    lv = loss_masked_bg(pred, torch.zeros(2, 3), torch.tensor([1, 0]))
    assert lv.value.item() == 0.25
    assert torch.all(lv.adjoint[0] == 0)
    a, b = torch.rand(8, 3), torch.rand(8, 3)
    assert loss_masked_bg(a, b, torch.ones(8)).value.item() == 0.0
    assert torch.equal(loss_masked_bg(a, b, torch.zeros(8)).value, loss_full(a, b).value)
    with pytest.raises(InputError, match="binary"):
        loss_masked_bg(a, b, torch.full((8,), 0.5))


def test_adjoints_match_autograd():
    pred = torch.rand(6, 3, dtype=torch.float64, requires_grad=True)
    tgt, mask = torch.rand(6, 3, dtype=torch.float64), torch.tensor([0, 1, 0, 0, 1, 1])
    for lv in (loss_full(pred, tgt), loss_masked_bg(pred, tgt, mask)):
        (g,) = torch.autograd.grad(lv.value, pred)
        assert torch.allclose(g, lv.adjoint)


def _tiny_pipeline(masked):
    """2x2 pixels, 4 samples each, through a voxel field (float64)."""
    from voldis.geometry import CameraIntrinsics, Pose, generate_rays
    from voldis.render import SamplingConfig, render_rays
    f = VoxelGridField((4, 4, 4)).double()
    with torch.no_grad():
        f.grid.normal_(generator=torch.Generator().manual_seed(2))
    rays = generate_rays(CameraIntrinsics(2, 2, 2.0), Pose.look_at([0, 0, 2], [0, 0, 0]), t_near=1.0, t_far=3.0)
    tgt = torch.rand(4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    mask = torch.tensor([0, 1, 0, 0]) if masked else None
    model = RadianceModel(f)

    def fn():
        pred = render_rays(model, rays, SamplingConfig(4, 0)).final.color()
        return (loss_masked_bg(pred, tgt, mask) if masked else loss_full(pred, tgt)).value

    return fn, f


@pytest.mark.parametrize("masked", [False, True])
def test_loss_gradients_through_render_match_finite_differences(masked):
    fn, f = _tiny_pipeline(masked)
    worst, n = fd_check(fn, [f.grid], 100, np.random.default_rng(0))
    assert n >= 50 and worst <= 1e-3


def test_masked_pixels_do_not_propagate():
    from voldis.geometry import CameraIntrinsics, Pose, generate_rays
    from voldis.render import SamplingConfig, render_rays
    f = VoxelGridField((4, 4, 4)).double()
    rays = generate_rays(CameraIntrinsics(2, 2, 2.0), Pose.look_at([0, 0, 2], [0, 0, 0]), t_near=1.0, t_far=3.0)
    pred = render_rays(RadianceModel(f), rays, SamplingConfig(8, 0)).final.color()
    tgt = torch.rand(4, 3, dtype=torch.float64)
    mask = torch.tensor([1, 1, 1, 1])
    (g,) = torch.autograd.grad(loss_masked_bg(pred, tgt, mask).value, f.grid)
    assert torch.all(g == 0)


# --- optimizer ------------------------------------------------------------------

def test_adam_first_step_and_zero_gradient():
    p = torch.zeros(3)
    st = AdamState.zeros_like([p])
    adam_step([p], [torch.zeros(3)], st, 0.1)
    assert torch.all(p == 0) and st.step == 1
    q = torch.zeros(1, dtype=torch.float64)
    adam_step([q], [torch.ones(1, dtype=torch.float64)], AdamState.zeros_like([q]), 0.1)
    assert abs(q.item() + 0.1) < 1e-8


def test_adam_matches_torch_reference():
    torch.manual_seed(0)
    p = torch.randn(5, dtype=torch.float64)
    ref = p.clone().requires_grad_()
    opt = torch.optim.Adam([ref], lr=0.01, betas=(0.9, 0.999), eps=1e-8)
    st = AdamState.zeros_like([p])
    for _ in range(20):
        g = torch.randn(5, dtype=torch.float64)
        adam_step([p], [g], st, 0.01)
        ref.grad = g.clone()
        opt.step()
    assert torch.allclose(p, ref.detach(), rtol=1e-12, atol=1e-14)


def test_adam_rejects_nan_and_misalignment():
    p = torch.zeros(2)
    st = AdamState.zeros_like([p])
    with pytest.raises(CorruptedStateError):
        adam_step([p], [torch.tensor([1.0, float("nan")])], st, 0.1)
    with pytest.raises(InputError):
        adam_step([p], [torch.zeros(3)], st, 0.1)


def test_lr_schedule():
    cfg = TrainConfig(iterations=1000)
    assert lr_at(0, cfg) == 5e-4 and lr_at(1000, cfg) == 5e-5
    vals = [lr_at(k, cfg) for k in range(0, 1001, 100)]
    ratios = np.array(vals[1:]) / np.array(vals[:-1])
    assert np.allclose(ratios, ratios[0], rtol=1e-12)


def test_config_validation():
    with pytest.raises(InputError):
        TrainConfig(lr_start=1e-5, lr_end=1e-4)
    with pytest.raises(InputError):
        TrainConfig(rays_per_batch=0)
    with pytest.raises(InputError):
        TrainConfig(iterations=-1)


def test_adam_state_round_trip(tmp_path):
    params = [torch.randn(3, 4), torch.randn(7)]
    st = AdamState.zeros_like(params)
    for _ in range(3):
        adam_step(params, [torch.randn_like(p) for p in params], st, 0.01)
    save_adam(st, tmp_path / "a.vdsf")
    back = load_adam(tmp_path / "a.vdsf", params)
    assert back.step == 3
    assert all(torch.equal(a, b) for a, b in zip(st.m + st.v, back.m + back.v))
    with pytest.raises(InputError):
        load_adam(tmp_path / "a.vdsf", [torch.zeros(2)])


# --- metrics ---------------------------------------------------------------------

def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert math.isclose(psnr(a, a + 0.1), 20.0, rel_tol=1e-12)
    assert psnr(a, a) == math.inf
    gen = np.random.default_rng(0)
    x, y = gen.random((8, 8, 3)), gen.random((8, 8, 3))
    mse = sum((float(u) - float(v)) ** 2 for u, v in zip(x.ravel(), y.ravel())) / x.size
    assert abs(psnr(x, y) - 10 * math.log10(1 / mse)) < 1e-9
    with pytest.raises(InputError):
        psnr(a, np.zeros((4, 3, 3)))


# --- fitting ---------------------------------------------------------------------

def test_split_and_mask_dilation():
    train, held = split_views(20, 8)
    assert held == [0, 8, 16] and len(train) == 17
    assert split_views(5, 0) == ([0, 1, 2, 3, 4], [])
    m = np.zeros((1, 7, 7), np.uint8)
    m[0, 3, 3] = 1
    d = dilate_masks(m, 1)
    assert d.sum() == 5 and d[0, 2, 3] == 1 and d[0, 2, 2] == 0
    assert dilate_masks(m, 0) is m


@pytest.fixture(scope="module")
def sphere_data():
    scene = AnalyticScene((Primitive(Sphere((0.0, 0.0, 0.0), 0.4), 30.0, (0.8, 0.5, 0.2), "foreground"),
                           Primitive(Sphere((0.3, 0.3, -0.5), 0.3), 30.0, (0.2, 0.6, 0.9), "background")))
    return generate_dataset(scene, n_views=6, resolution=(24, 24), supersample=1, n_steps=128).dataset


def test_zero_iterations_leave_parameters(sphere_data):
    model = make_model("voxel", fine=True, resolution=(8, 8, 8))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    fit_field(sphere_data, model, "full", TrainConfig(iterations=0))
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def _mse(model, ds, cfg):
    return np.mean([np.mean((render_view(model, ds.intrinsics[i], ds.poses[i], cfg.sampling(), ds.t_near,
                                         ds.t_far).color - ds.images[i]) ** 2) for i in range(len(ds))])


@pytest.mark.slow
def test_sphere_fit_reduces_loss_tenfold(sphere_data, tmp_path):
    cfg = TrainConfig(iterations=2000, rays_per_batch=256, n_coarse=32, n_fine=0, fine_pass=False,
                      lr_start=0.1, lr_end=0.01, eval_every=500, checkpoint_every=1000, holdout_stride=0)
    model = make_model("voxel", fine=False, resolution=(24, 24, 24))
    initial = _mse(model, sphere_data, cfg)
    res = fit_field(sphere_data, model, "full", cfg, run_dir=tmp_path)
    final = _mse(model, sphere_data, cfg)
    assert final < initial / 10
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r["iter"] for r in rows] == [500, 1000, 1500, 2000] and rows == res.trace
    reloaded = load_model(tmp_path)
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), reloaded.state_dict().values()))


def test_fit_is_deterministic_with_fine_pass(sphere_data):
    cfg = TrainConfig(iterations=15, rays_per_batch=64, n_coarse=8, n_fine=8, lr_start=0.1, lr_end=0.01,
                      seed=4, eval_every=5)
    a, b = (make_model("voxel", fine=True, resolution=(6, 6, 6)) for _ in range(2))
    ra, rb = fit_field(sphere_data, a, "masked_bg", cfg), fit_field(sphere_data, b, "masked_bg", cfg)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    assert ra.trace == rb.trace and len(ra.states) == 2
    assert not torch.equal(a.fine.grid, make_model("voxel", fine=True, resolution=(6, 6, 6)).fine.grid)


def test_masked_fit_ignores_masked_pixels(sphere_data):
    """Changing only masked pixels of the targets leaves a masked fit bit-identical."""
    altered = sphere_data.subset(range(len(sphere_data)))
    altered.images = altered.images.copy()
    altered.images[altered.masks == 1] = 1.0
    cfg = TrainConfig(iterations=10, rays_per_batch=64, n_coarse=8, n_fine=0, fine_pass=False, eval_every=10)
    a, b = (make_model("voxel", fine=False, resolution=(6, 6, 6)) for _ in range(2))
    fit_field(sphere_data, a, "masked_bg", cfg)
    fit_field(altered, b, "masked_bg", cfg)
    assert torch.equal(a.coarse.grid, b.coarse.grid)


def test_fit_rejects_unknown_loss(sphere_data):
    with pytest.raises(InputError):
        fit_field(sphere_data, make_model(fine=False, resolution=(4, 4, 4)), "perceptual", TrainConfig(iterations=1))


def test_large_datasets_are_downsampled_to_the_training_cap(sphere_data):
    big = sphere_data.resized(48, 36)
    out = prepare_dataset(big, TrainConfig(max_resolution=(24, 18)))
    assert out.resolution == (24, 18)
    assert prepare_dataset(sphere_data, TrainConfig()).resolution == (24, 24)
