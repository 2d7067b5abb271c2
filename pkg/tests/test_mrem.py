import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from recsm.datamodel import ConfigError, DisparityMap, FeaturePyramid, NumericError, ShapeError, rescale_disparity
from recsm.mrem import (
    MREM,
    CostAggregation,
    ResidualCostVolume,
    TemporalAttention,
    TemporalAttentionHead,
    aggregate_costs,
    apply_temporal_attention,
    build_residual_cost_volume,
    compute_temporal_attention,
    mrem_forward,
    soft_argmin_residual,
    warp_features,
)

G = torch.Generator().manual_seed


# ---------------------------------------------------------------- oracles

def sample_row_oracle(row: np.ndarray, pos: float) -> float:
    """Linear interpolation of a 1-D row at ``pos`` with zeros outside the row."""
    def at(i):
        return row[i] if 0 <= i < len(row) else 0.0
    x0 = math.floor(pos)
    t = pos - x0
    return (1 - t) * at(x0) + t * at(x0 + 1)


def cost_volume_oracle(left, right, prior, r):
    c, h, w = left.shape
    out = np.zeros((2 * c, 2 * r + 1, h, w))
    for k, off in enumerate(range(-r, r + 1)):
        for y in range(h):
            for x in range(w):
                out[:c, k, y, x] = left[:, y, x]
                for ch in range(c):
                    out[c + ch, k, y, x] = sample_row_oracle(right[ch, y], x - prior[y, x] - off)
    return out


def conv3d_oracle(x, weight, bias):
    """'same' 3x3x3 convolution with zero padding, by explicit loops."""
    cin, d, h, w = x.shape
    cout = weight.shape[0]
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((cout, d, h, w))
    for o in range(cout):
        for k in range(d):
            for y in range(h):
                for xx in range(w):
                    out[o, k, y, xx] = bias[o] + np.sum(weight[o] * pad[:, k:k + 3, y:y + 3, xx:xx + 3])
    return out


def soft_argmin_oracle(column):
    r = len(column) // 2
    e = [math.exp(-s) for s in column]
    z = sum(e)
    return sum((k - r) * ek / z for k, ek in enumerate(e))


# ---------------------------------------------------------------- warping

def test_zero_disparity_warp_is_identity():
    f = torch.rand(4, 5, 7)
    assert torch.equal(warp_features(f, DisparityMap(torch.zeros(5, 7), 4), 4), f)


def test_unit_disparity_shifts_one_column():
    f = torch.rand(2, 3, 6)
    out = warp_features(f, torch.ones(3, 6))
    assert torch.equal(out[..., 1:], f[..., :-1])
    assert torch.equal(out[..., 0], torch.zeros(2, 3))


def test_half_disparity_averages_neighbours():
    f = torch.rand(2, 3, 6, dtype=torch.float64, generator=G(1))
    out = warp_features(f, torch.full((3, 6), 0.5, dtype=torch.float64)).numpy()
    fn = f.numpy()
    for c in range(2):
        for y in range(3):
            for x in range(6):
                left_nb = fn[c, y, x - 1] if x > 0 else 0.0
                assert out[c, y, x] == pytest.approx(0.5 * (left_nb + fn[c, y, x]), abs=1e-12)


@given(st.integers(0, 10_000))
def test_warp_matches_row_oracle(seed):
    g = G(seed)
    f = torch.rand(1, 2, 5, dtype=torch.float64, generator=g)
    d = torch.rand(2, 5, dtype=torch.float64, generator=g) * 8 - 2
    out = warp_features(f, d).numpy()
    for y in range(2):
        for x in range(5):
            assert out[0, y, x] == pytest.approx(sample_row_oracle(f[0, y].numpy(), x - d[y, x].item()), abs=1e-12)


def test_warp_stride_mismatch():
    with pytest.raises(ShapeError):
        warp_features(torch.rand(2, 4, 4), DisparityMap(torch.zeros(4, 4), 8), 4)


# ---------------------------------------------------------------- cost volume

def test_offset_axis_length():
    v = build_residual_cost_volume(torch.rand(1, 2, 3, 4), torch.rand(1, 2, 3, 4), torch.zeros(1, 3, 4), 1)
    assert v.costs.shape == (1, 4, 3, 3, 4)
    assert v.offsets.tolist() == [-1, 0, 1]
    with pytest.raises(ConfigError):
        build_residual_cost_volume(torch.rand(1, 2, 3, 4), torch.rand(1, 2, 3, 4), torch.zeros(1, 3, 4), 0)


def test_identical_features_zero_prior():
    f = torch.rand(1, 3, 4, 6)
    v = build_residual_cost_volume(f, f, torch.zeros(1, 4, 6), 2).costs
    assert torch.equal(v[:, :3, 2], v[:, 3:, 2])


def test_volume_matches_loop_oracle():
    g = G(5)
    left = torch.rand(1, 2, 3, 7, dtype=torch.float64, generator=g)
    right = torch.rand(1, 2, 3, 7, dtype=torch.float64, generator=g)
    prior = torch.rand(1, 3, 7, dtype=torch.float64, generator=g) * 3
    v = build_residual_cost_volume(left, right, prior, 2).costs[0].numpy()
    np.testing.assert_allclose(v, cost_volume_oracle(left[0].numpy(), right[0].numpy(), prior[0].numpy(), 2), atol=1e-12)


def test_true_disparity_minimises_feature_distance():
    g = G(7)
    d_star, r, w = 3, 2, 16
    right = torch.rand(1, 4, 5, w, dtype=torch.float64, generator=g)
    left = torch.zeros_like(right)
    left[..., d_star:] = right[..., :-d_star]  # left(x) = right(x - d*)
    vol = build_residual_cost_volume(left, right, torch.full((1, 5, w), float(d_star), dtype=torch.float64), r)
    c = left.shape[1]
    for y in range(5):
        for x in range(d_star + r, w):
            dist = [float(((vol.costs[0, :c, k, y, x] - vol.costs[0, c:, k, y, x]) ** 2).sum()) for k in range(2 * r + 1)]
            assert int(np.argmin(dist)) == r
            assert dist[r] == 0.0


# ---------------------------------------------------------------- aggregation

def test_aggregation_shape_and_zero_parameters():
    agg = CostAggregation(8)
    vol = ResidualCostVolume(torch.rand(2, 8, 5, 3, 4), 2, 4)
    assert aggregate_costs(vol, agg).shape == (2, 5, 3, 4)
    with torch.no_grad():
        for p in agg.parameters():
            p.zero_()
    assert torch.equal(aggregate_costs(vol, agg), torch.zeros(2, 5, 3, 4))


def test_aggregation_layer_widths():
    agg = CostAggregation(32)
    assert [(c.in_channels, c.out_channels) for c in agg.convs] == [(32, 16), (16, 16), (16, 8), (8, 1)]
    assert all(c.kernel_size == (3, 3, 3) for c in agg.convs)


def test_aggregation_volume_gradient_finite_differences():
    torch.manual_seed(0)
    agg = CostAggregation(4).double()
    vol = torch.randn(1, 4, 3, 2, 3, dtype=torch.float64, generator=G(2), requires_grad=True)
    probe = torch.randn(1, 3, 2, 3, dtype=torch.float64, generator=G(3))

    def f(v):
        return (agg(v) * probe).sum()

    f(vol).backward()
    h, worst = 1e-6, 0.0
    with torch.no_grad():
        flat = vol.view(-1)
        for i in range(vol.numel()):
            o = flat[i].item()
            flat[i] = o + h
            fp = f(vol).item()
            flat[i] = o - h
            fm = f(vol).item()
            flat[i] = o
            num, ana = (fp - fm) / (2 * h), vol.grad.view(-1)[i].item()
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    assert worst < 1e-4


# ---------------------------------------------------------------- soft-argmin

def test_uniform_scores_give_zero():
    eps = soft_argmin_residual(torch.full((1, 9, 3, 4), 0.37))
    assert torch.equal(eps.values, torch.zeros(1, 3, 4))


def test_sharp_minimum_at_plus_three():
    scores = torch.zeros(1, 9, 2, 2)
    scores[:, 4 + 3] = -60.0
    assert torch.allclose(soft_argmin_residual(scores).values, torch.full((1, 2, 2), 3.0), atol=1e-3)


def test_soft_argmin_matches_loop():
    scores = torch.randn(1, 5, 3, 4, dtype=torch.float64, generator=G(4)) * 3
    out = soft_argmin_residual(scores).values[0]
    for y in range(3):
        for x in range(4):
            assert out[y, x].item() == pytest.approx(soft_argmin_oracle(scores[0, :, y, x].tolist()), abs=1e-6)


@given(st.integers(1, 16), st.integers(0, 10_000), st.floats(1e-3, 1e4))
def test_residual_bound_property(r, seed, scale):
    scores = torch.randn(1, 2 * r + 1, 2, 3, generator=G(seed)) * scale
    eps = soft_argmin_residual(scores).values
    assert eps.abs().max() <= r


def test_soft_argmin_errors():
    with pytest.raises(NumericError):
        soft_argmin_residual(torch.full((1, 3, 2, 2), float("nan")))
    with pytest.raises(ShapeError):
        soft_argmin_residual(torch.zeros(1, 4, 2, 2))


# ---------------------------------------------------------------- temporal attention

def test_constant_disparity_gives_constant_attention():
    head = TemporalAttentionHead()
    att = compute_temporal_attention(DisparityMap(torch.full((6, 8), 12.0), 4), head).weights
    expected = torch.sigmoid(head.conv.bias)
    assert torch.equal(att, expected.expand_as(att))


def test_step_edge_maximises_attention():
    head = TemporalAttentionHead()
    with torch.no_grad():
        head.conv.weight.fill_(0.1)
    d = torch.zeros(1, 6, 10)
    d[..., 5:] = 20.0
    att = head(d).weights[0, 0]
    col_max = att.amax(dim=0)
    assert torch.isclose(col_max[4], att.max()) and torch.isclose(col_max[5], att.max())
    assert (col_max[[0, 1, 2, 7, 8, 9]] < att.max()).all()


def test_attention_strictly_inside_unit_interval():
    att = TemporalAttentionHead()(torch.rand(2, 8, 8, generator=G(0)) * 50).weights
    assert ((att > 0) & (att < 1)).all()


def test_attention_source_must_be_stride_four():
    with pytest.raises(ShapeError):
        compute_temporal_attention(DisparityMap(torch.zeros(4, 4), 8), TemporalAttentionHead())


def test_apply_attention():
    vol = ResidualCostVolume(torch.rand(2, 3, 5, 4, 6, generator=G(1)), 2, 4)
    ones = TemporalAttention(torch.ones(2, 1, 4, 6))
    half = TemporalAttention(torch.full((2, 1, 4, 6), 0.5))
    assert torch.equal(apply_temporal_attention(vol, ones).costs, vol.costs)
    assert torch.equal(apply_temporal_attention(vol, half).costs, vol.costs * 0.5)
    w = torch.rand(2, 1, 4, 6, generator=G(2))
    out = apply_temporal_attention(vol, TemporalAttention(w)).costs
    for b in range(2):
        for c in range(3):
            for r in range(5):
                assert torch.equal(out[b, c, r], vol.costs[b, c, r] * w[b, 0])
    with pytest.raises(ShapeError):
        apply_temporal_attention(vol, TemporalAttention(torch.ones(2, 1, 4, 5)))


# ---------------------------------------------------------------- full module

def pyramids(c=3, h=32, w=64, seed=0, dtype=torch.float32):
    g = G(seed)

    def one():
        return FeaturePyramid(*(torch.rand(1, c, h // s, w // s, dtype=dtype, generator=g) for s in (16, 8, 4)))

    return one(), one()


def force_uniform(m: MREM):
    with torch.no_grad():
        for agg in m.aggregation.values():
            agg.convs[-1].weight.zero_()
            agg.convs[-1].bias.zero_()


def test_zero_residual_identity_constant_prior():
    torch.manual_seed(0)
    m = MREM((3, 3, 3))
    force_uniform(m)
    fl, fr = pyramids()
    prior = DisparityMap(torch.full((32, 64), 7.25), 1)
    out, branches = mrem_forward(fl, fr, prior, prior, (16, 8, 4), m)
    assert torch.equal(out.values, prior.values)
    for b in branches.values():
        assert torch.equal(b.values, prior.values)


def test_zero_residual_follows_resampling_chain():
    torch.manual_seed(0)
    m = MREM((3, 3, 3))
    force_uniform(m)
    fl, fr = pyramids()
    prior = torch.rand(1, 32, 64, generator=G(9)) * 30
    out = m(fl, fr, prior, prior, (16, 8, 4))
    x = rescale_disparity(prior, 1, 16)
    x = rescale_disparity(x, 16, 8)
    x = rescale_disparity(x, 8, 4)
    assert torch.equal(out.disparity, rescale_disparity(x, 4, 1))


def test_branch_residuals_within_ranges():
    torch.manual_seed(1)
    m = MREM((3, 3, 3))
    with torch.no_grad():
        for agg in m.aggregation.values():
            agg.convs[-1].weight.mul_(500)  # sharp score profiles push residuals to the ends
    fl, fr = pyramids(seed=3)
    out = m(fl, fr, torch.rand(1, 32, 64) * 40, torch.zeros(1, 32, 64), (16, 8, 4))
    for scale, r in (("large", 16), ("medium", 8), ("small", 4)):
        assert out.residuals[scale].range_r == r
        assert out.residuals[scale].values.abs().max() <= r


def test_attention_only_touches_large_branch():
    torch.manual_seed(0)
    with_ta = MREM((3, 3, 3), use_temporal_attention=True)
    without = MREM((3, 3, 3), use_temporal_attention=False)
    without.aggregation.load_state_dict(with_ta.aggregation.state_dict())
    fl, fr = pyramids(seed=2)
    prior = torch.rand(1, 32, 64, generator=G(1)) * 20
    a = with_ta(fl, fr, prior, prior, (16, 8, 4))
    b = without(fl, fr, prior, prior, (16, 8, 4))
    assert torch.equal(a.branches["small"], b.branches["small"])
    assert torch.equal(a.branches["medium"], b.branches["medium"])
    assert not torch.equal(a.branches["large"], b.branches["large"])


def test_single_branch_matches_loop_implementation():
    """One channel, R = 2, 4x6 grid: warp, concatenate, 3D-convolve and soft-argmin by hand."""
    torch.manual_seed(3)
    g = G(11)
    left = torch.rand(1, 1, 4, 6, dtype=torch.float64, generator=g)
    right = torch.rand(1, 1, 4, 6, dtype=torch.float64, generator=g)
    prior = torch.rand(1, 4, 6, dtype=torch.float64, generator=g) * 3
    agg = CostAggregation(2).double()
    eps = soft_argmin_residual(aggregate_costs(build_residual_cost_volume(left, right, prior, 2), agg)).values[0]

    x = cost_volume_oracle(left[0].numpy(), right[0].numpy(), prior[0].numpy(), 2)
    for i, conv in enumerate(agg.convs):
        x = conv3d_oracle(x, conv.weight.detach().numpy(), conv.bias.detach().numpy())
        if i < 3:
            x = np.where(x > 0, x, 0.1 * x)
    for y in range(4):
        for xx in range(6):
            assert eps[y, xx].item() == pytest.approx(soft_argmin_oracle(list(x[0, :, y, xx])), abs=1e-6)


def test_mrem_rejects_bad_ranges():
    m = MREM((3, 3, 3))
    fl, fr = pyramids()
    with pytest.raises(ConfigError):
        m(fl, fr, torch.zeros(1, 32, 64), torch.zeros(1, 32, 64), (16, 8, 0))
