import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from voldis.errors import CorruptedStateError, InputError
from voldis.field import (MLPField, FourierEncoding, VoxelGridField, backward, encode, eval_field, load_field,
                          parameter_layout, read_container, save_field, softplus_inverse, trilinear_corners)

from oracles import fd_check, softplus, trilinear_raw


def test_encoding_at_origin():
    enc = FourierEncoding(5, 3.0)
    out = encode(enc, torch.zeros(1, 3))
    assert out.shape == (1, 10)
    assert torch.all(out[:, :5] == 1) and torch.all(out[:, 5:] == 0)


def test_encoding_quarter_turn():
    enc = FourierEncoding(1, 1.0, matrix=torch.tensor([[0.25, 0.0, 0.0]]))
    out = encode(enc, torch.tensor([[1.0, 0.0, 0.0]])).double()
    assert abs(out[0, 0].item()) < 1e-7 and abs(out[0, 1].item() - 1) < 1e-7


def test_encoding_is_frozen_and_seeded():
    a, b = FourierEncoding(8, 2.0, seed=3), FourierEncoding(8, 2.0, seed=3)
    assert torch.equal(a.B, b.B)
    assert list(a.parameters()) == []
    assert abs(a.B.std().item() - 2.0) < 1.5  # drawn at the requested scale


def test_mlp_output_invariants():
    f = MLPField(pos_features=16, dir_features=4, depth=2, width=32)
    p = torch.randn(200, 3) * 3
    d = torch.nn.functional.normalize(torch.randn(200, 3), dim=-1)
    out = eval_field(f, p, d)
    assert out.colors.shape == (200, 3) and out.densities.shape == (200,)
    assert torch.all((out.colors >= 0) & (out.colors <= 1)) and torch.all(out.densities >= 0)
    again = eval_field(f, p, d)
    assert torch.equal(out.colors, again.colors) and torch.equal(out.densities, again.densities)


def test_voxel_vertex_query_returns_squashed_raw():
    f = VoxelGridField((3, 3, 3))
    with torch.no_grad():
        f.grid[1, 2, 0] = torch.tensor([0.7, -1.0, 0.0, 2.0])
    out = eval_field(f, [[0.0, 1.0, -1.0]], [[0.0, 0.0, 1.0]])
    assert math.isclose(out.densities.item(), softplus(0.7), rel_tol=1e-6)
    np.testing.assert_allclose(out.colors[0].detach().numpy(), 1 / (1 + np.exp(-np.array([-1.0, 0.0, 2.0]))), rtol=1e-6)


def test_voxel_constant_grid_is_constant_and_ignores_direction():
    f = VoxelGridField((4, 4, 4))
    p = torch.rand(50, 3) * 1.8 - 0.9
    a = eval_field(f, p, torch.tensor([[0.0, 0.0, 1.0]]).expand(50, 3))
    b = eval_field(f, p, torch.tensor([[1.0, 0.0, 0.0]]).expand(50, 3))
    assert torch.allclose(a.densities, torch.full((50,), 0.1), atol=1e-6)
    assert torch.equal(a.colors, b.colors)


def test_voxel_midpoint_interpolates_raw_before_squashing():
    f = VoxelGridField((2, 2, 2)).double()
    with torch.no_grad():
        f.grid[..., 0] = softplus_inverse(1.0)
        f.grid[0, :, :, 0] = -50.0  # softplus^-1(0) in the limit
    out = eval_field(f, [[0.0, 0.3, -0.2]], [[0.0, 0.0, 1.0]])
    expected = softplus(0.5 * (-50.0 + softplus_inverse(1.0)))
    assert math.isclose(out.densities.item(), expected, rel_tol=1e-12)


def test_voxel_matches_brute_force_trilinear():
    f = VoxelGridField((4, 3, 5), (-1, -0.5, 0), (1, 0.5, 2)).double()
    with torch.no_grad():
        f.grid.normal_()
    grid = f.grid.detach().numpy()
    gen = np.random.default_rng(0)
    for p in gen.uniform([-1, -0.5, 0], [1, 0.5, 2], (20, 3)):
        raw = trilinear_raw(grid, np.array([-1, -0.5, 0]), np.array([1, 0.5, 2]), p)
        c, s = f(torch.from_numpy(p[None]), torch.tensor([[0.0, 0.0, 1.0]]))
        assert math.isclose(s.item(), softplus(raw[0]), rel_tol=1e-12)
        np.testing.assert_allclose(c[0].detach().numpy(), 1 / (1 + np.exp(-raw[1:])), rtol=1e-12)


def test_voxel_outside_box_is_empty():
    f = VoxelGridField((4, 4, 4))
    out = eval_field(f, [[1.5, 0, 0], [0, -1.01, 0]], [[0, 0, 1.0]] * 2)
    assert torch.all(out.densities == 0) and torch.all(out.colors == 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3))
def test_trilinear_partition_of_unity(p):
    _, wts, inside = trilinear_corners(torch.tensor([p], dtype=torch.float64), (-1, -1, -1), (1, 1, 1), (5, 6, 7))
    assert abs(wts.sum().item() - 1.0) <= 1e-12
    assert bool(inside) == all(-1 <= x <= 1 for x in p)


def test_nan_parameters_raise_corrupted_state():
    f = VoxelGridField((2, 2, 2))
    with torch.no_grad():
        f.grid[0, 0, 0, 0] = float("nan")
    with pytest.raises(CorruptedStateError):
        eval_field(f, [[0, 0, 0]], [[0, 0, 1.0]])


def test_eval_shape_mismatch_rejected():
    with pytest.raises(InputError):
        eval_field(VoxelGridField((2, 2, 2)), torch.zeros(3, 3), torch.zeros(2, 3))


def test_backward_linearity_and_layout():
    f = MLPField(pos_features=8, dir_features=4, depth=2, width=16)
    p = torch.randn(10, 3)
    d = torch.nn.functional.normalize(torch.randn(10, 3), dim=-1)
    ca, da = torch.randn(10, 3), torch.randn(10)
    g = backward(f, p, d, ca, da)
    assert list(g) == [name for name, _ in parameter_layout(f)]
    zero = backward(f, p, d, torch.zeros(10, 3), torch.zeros(10))
    assert all(torch.all(v == 0) for v in zero.values())
    g2 = backward(f, p, d, 2 * ca, 2 * da)
    assert all(torch.allclose(g2[k], 2 * g[k], rtol=1e-5, atol=1e-7) for k in g)
    with pytest.raises(InputError):
        backward(f, p, d, torch.zeros(9, 3), torch.zeros(10))


@pytest.mark.parametrize("kind", ["mlp", "voxel"])
def test_backward_matches_finite_differences(kind):
    torch.manual_seed(0)
    if kind == "mlp":
        f = MLPField(pos_features=8, pos_sigma=1.0, dir_features=4, dir_sigma=1.0, depth=2, width=16).double()
    else:
        f = VoxelGridField((5, 5, 5), view_dependent=True, dir_features=4).double()
        with torch.no_grad():
            f.grid.normal_()
            f.dir_head.weight.normal_(0, 0.3)
    p = torch.rand(25, 3, dtype=torch.float64) * 1.6 - 0.8
    d = torch.nn.functional.normalize(torch.randn(25, 3, dtype=torch.float64), dim=-1)
    ca, da = torch.randn(25, 3, dtype=torch.float64), torch.randn(25, dtype=torch.float64)
    grads = backward(f, p, d, ca, da)
    params = list(f.parameters())

    def fn():
        c, s = f(p, d)
        return (c * ca).sum() + (s * da).sum()

    worst, n = fd_check(fn, params, 100, np.random.default_rng(1))
    assert n == 100 and worst <= 1e-3
    # the public backward agrees with autograd through the same function
    ref = torch.autograd.grad(fn(), params)
    for (name, g), r in zip(grads.items(), ref):
        assert torch.allclose(g, r, rtol=1e-12, atol=1e-14), name


@pytest.mark.parametrize("make", [
    lambda: MLPField(pos_features=8, dir_features=4, depth=2, width=16, seed=5),
    lambda: VoxelGridField((3, 4, 5), (-2, -1, 0), (2, 1, 3)),
    lambda: VoxelGridField((3, 3, 3), view_dependent=True, dir_features=2, seed=9),
])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, make):
    f = make()
    with torch.no_grad():
        for prm in f.parameters():
            prm.normal_()
    path = tmp_path / "f.vdsf"
    save_field(f, path)
    g = load_field(path)
    assert type(g) is type(f)
    for (ka, a), (kb, b) in zip(f.state_dict().items(), g.state_dict().items()):
        assert ka == kb and torch.equal(a, b)
    with open(path, "rb") as fh:
        assert fh.read(4) == b"VDSF"
    tag, _, values = read_container(path)
    assert tag == f.tag and values.dtype == np.dtype("<f4")


def test_corrupt_container_rejected(tmp_path):
    bad = tmp_path / "bad.vdsf"
    bad.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(InputError):
        load_field(bad)
    f = VoxelGridField((2, 2, 2))
    good = tmp_path / "good.vdsf"
    save_field(f, good)
    good.write_bytes(good.read_bytes()[:-4])
    with pytest.raises(InputError):
        load_field(good)
