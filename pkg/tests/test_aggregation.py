import itertools

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from atvsnet.aggregation import AAM, ATVSNet, AttSets, atvsnet_forward, make_aggregator, mean_pool_aggregate
from atvsnet.geometry import CameraPair, disparity_planes
from atvsnet.networks import NetworkConfig, TwoViewNet
from conftest import camera, rotation

SIZE = 32


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def _vols(n, c=2, shape=(4, 3, 3), dtype=torch.float64):
    return [torch.randn(1, c, *shape, dtype=dtype) for _ in range(n)]


def _randomize(module):
    for p in module.parameters():
        torch.nn.init.normal_(p, std=0.3)
    return module


# ---- mean pooling ---------------------------------------------------------


def test_mean_pool_examples():
    v = _vols(1)
    assert torch.equal(mean_pool_aggregate(v), v[0])
    z = torch.zeros(1, 2, 3, 3, 3)
    assert torch.equal(mean_pool_aggregate([z, z + 2]), torch.ones_like(z))


def test_mean_pool_loop_oracle():
    v = _vols(3, shape=(2, 2, 2))
    out = mean_pool_aggregate(v)
    for idx in itertools.product(range(2), range(2), range(2), range(2)):
        c, d, y, x = idx
        assert out[0, c, d, y, x].item() == pytest.approx(sum(t[0, c, d, y, x].item() for t in v) / 3, abs=1e-12)


def test_empty_and_mismatched_sets():
    for agg in (mean_pool_aggregate, AAM(2), AttSets(2)):
        with pytest.raises(ValueError):
            agg([])
        with pytest.raises(ValueError):
            agg([torch.zeros(1, 2, 3, 3, 3), torch.zeros(1, 2, 3, 3, 4)])
    with pytest.raises(ValueError):
        make_aggregator("max", 2)


# ---- AttSets --------------------------------------------------------------


def test_attsets_singleton_and_identical():
    agg = _randomize(AttSets(2).double())
    v = _vols(1)
    assert torch.allclose(agg(v), v[0], atol=1e-12)
    assert torch.allclose(agg([v[0]] * 3), v[0], atol=1e-12)


def test_attsets_weighted_sum_oracle():
    agg = _randomize(AttSets(2).double())
    v = _vols(3)
    scores = [F.conv3d(t, agg.conv.weight, agg.conv.bias, padding=1) for t in v]
    w = torch.softmax(torch.stack(scores), dim=0)
    expected = sum(w[n] * v[n] for n in range(3))
    assert torch.allclose(agg(v), expected, atol=1e-12)


# ---- AAM ------------------------------------------------------------------


def test_aam_tied_weights_identical_activations():
    agg = _randomize(AAM(2).double())
    agg.w_others.load_state_dict(agg.w_self.state_dict())
    act = agg.activate(_vols(3))
    for n in range(1, 3):
        assert torch.allclose(act[n], act[0], atol=1e-12)


def test_aam_singleton():
    agg = _randomize(AAM(2).double())
    v = _vols(1)
    act = agg.activate(v)
    assert torch.allclose(act[0], F.conv3d(v[0], agg.w_self.weight, agg.w_self.bias, padding=1), atol=1e-12)
    assert torch.equal(agg(v), v[0])


def test_aam_two_volume_explicit_convolution():
    agg = AAM(1).double()
    with torch.no_grad():
        agg.w_self.weight.zero_()
        agg.w_others.weight.zero_()
        agg.w_self.weight[0, 0, 1, 1, 1] = 2.0  # pointwise scale by 2
        agg.w_others.weight[0, 0, 1, 1, 1] = -1.0
        agg.w_self.bias.fill_(0.5)
        agg.w_others.bias.fill_(0.25)
    c1, c2 = _vols(2, c=1)
    act = agg.activate([c1, c2])
    assert torch.allclose(act[0], 2 * c1 + 0.5 - c2 + 0.25, atol=1e-12)
    assert torch.allclose(act[1], 2 * c2 + 0.5 - c1 + 0.25, atol=1e-12)


def _aam_oracle(agg, v):
    own = [F.conv3d(t, agg.w_self.weight, agg.w_self.bias, padding=1) for t in v]
    cross = [F.conv3d(t, agg.w_others.weight, agg.w_others.bias, padding=1) for t in v]
    act = [own[n] + sum(cross[m] for m in range(len(v)) if m != n) for n in range(len(v))]
    a = torch.stack(act)
    w = torch.exp(a - a.max(dim=0).values) / torch.exp(a - a.max(dim=0).values).sum(dim=0)
    return sum(w[n] * v[n] for n in range(len(v)))


def test_aam_matches_oracle_and_permutations():
    agg = _randomize(AAM(2).double())
    v = _vols(3)
    expected = _aam_oracle(agg, v)
    for perm in itertools.permutations(range(3)):
        out = agg([v[i] for i in perm])
        assert torch.allclose(out, expected, atol=1e-12)


def test_aam_tied_equals_mean_pool():
    agg = _randomize(AAM(2).double())
    agg.w_others.load_state_dict(agg.w_self.state_dict())
    v = _vols(4)
    assert torch.allclose(agg(v), mean_pool_aggregate(v), atol=1e-12)


def test_aam_weights_sum_to_one():
    agg = _randomize(AAM(2).double())
    act = agg.activate(_vols(4))
    w = torch.softmax(act, dim=0)
    assert (w.sum(0) - 1).abs().max() < 1e-6


def test_aam_zero_init_is_mean_pool():
    agg = make_aggregator("aam", 2)
    v = _vols(3, dtype=torch.float32)
    assert torch.allclose(agg(v), mean_pool_aggregate(v), atol=1e-6)


# ---- full multi-view network ----------------------------------------------


def _camera(i):
    if i == 0:
        R, t = None, (0.0, 0.0, 0.0)
    else:
        R, t = rotation(0.01 * i, -0.04 * i, 0.0), (-0.3 * i, 0.05 * i, 0.0)
    return camera(R, t, size=(SIZE, SIZE), f=0.9 * SIZE, cx=(SIZE - 1) / 2, cy=(SIZE - 1) / 2)


def _inputs(n):
    images = torch.randn(1, n + 1, 3, SIZE, SIZE)
    K = torch.stack([torch.from_numpy(_camera(i).intrinsics).float() for i in range(n + 1)])[None]
    E = torch.stack([torch.from_numpy(_camera(i).world_to_cam).float() for i in range(n + 1)])[None]
    return images, K, E


def _randomized_model(aam1="aam", aam2="aam", **kw):
    model = ATVSNet(NetworkConfig(), aam1=aam1, aam2=aam2, two_view=TwoViewNet(zero_init=False), **kw)
    for agg in (model.aam1, model.aam2):
        if agg is not None:
            for p in agg.parameters():
                torch.nn.init.normal_(p, std=0.05)
    return model.eval()


def test_single_source_equals_two_view():
    planes = disparity_planes(0.1, 0.025, 16)
    model = _randomized_model()
    images, K, E = _inputs(1)
    with torch.no_grad():
        multi = model(images, K, E, planes)["refined"]
        two = model.two_view(images[:, 0], images[:, 1], CameraPair(K[:, 0], E[:, 0], K[:, 1], E[:, 1]), planes)["refined"]
    assert torch.allclose(multi, two, atol=1e-5)


def test_batched_branches_match_sequential():
    planes = disparity_planes(0.1, 0.025, 16)
    model = _randomized_model()
    images, K, E = _inputs(3)
    with torch.no_grad():
        seq = model(images, K, E, planes)["refined"]
        model.branch_mode = "batched"
        bat = model(images, K, E, planes)["refined"]
    assert torch.allclose(seq, bat, rtol=1e-5, atol=1e-6)


def test_source_permutation_invariance():
    planes = disparity_planes(0.1, 0.025, 16)
    model = _randomized_model()
    images, K, E = _inputs(3)
    ref = (K[:, 0], E[:, 0])
    sources = [(images[:, i], (K[:, i], E[:, i])) for i in range(1, 4)]
    with torch.no_grad():
        base = atvsnet_forward(model, images[:, 0], sources, ref, planes)
        for perm in itertools.permutations(range(3)):
            out = atvsnet_forward(model, images[:, 0], [sources[i] for i in perm], ref, planes)
            assert torch.allclose(out, base, rtol=1e-5, atol=0)


def test_output_range_and_keys():
    planes = disparity_planes(0.1, 0.025, 16)
    model = _randomized_model(aam1="none", aam2="mean")
    images, K, E = _inputs(2)
    with torch.no_grad():
        out = model(images, K, E, planes)
    d = out["refined"]
    assert d.shape == (1, SIZE // 4, SIZE // 4)
    assert (d >= planes.lowest - 1e-6).all() and (d <= planes.highest + 1e-6).all()
    assert len(out["refined_volumes"]) == 2 and out["fused_filtered"] is None
    assert np.isfinite(d.numpy()).all()


def test_invalid_configurations():
    with pytest.raises(ValueError):
        ATVSNet(aam2="none")
    with pytest.raises(ValueError):
        ATVSNet(branch_mode="threads")
    model = _randomized_model()
    images, K, E = _inputs(1)
    with pytest.raises(ValueError):
        model(images[:, :1], K[:, :1], E[:, :1], disparity_planes(0.1, 0.025, 16))
    with pytest.raises(ValueError):
        atvsnet_forward(model, images[:, 0], [], (K[:, 0], E[:, 0]), disparity_planes(0.1, 0.025, 16))
