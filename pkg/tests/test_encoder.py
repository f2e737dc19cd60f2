import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference_check
from ugd.encoder import UGDNet, encode_patch, encode_patches, head_widths, heads_forward, pooled_feature, quality_index


@pytest.fixture(scope="module")
def small_net():
    return UGDNet(h=8, n_blocks=2, d=8, seed=3)


def _patch(seed, s=16):
    p = np.random.default_rng(seed).standard_normal((s, 3))
    return p / np.maximum(1.0, np.linalg.norm(p, axis=1, keepdims=True))


def test_head_widths():
    assert head_widths(64, 5) == [64, 32, 8, 5]


def test_encode_deterministic(small_net):
    p = _patch(0)
    assert np.array_equal(encode_patch(small_net, p), encode_patch(small_net, p))
    assert encode_patch(small_net, p).shape == (8,)


def test_same_seed_same_params():
    a, b = UGDNet(8, 1, 8, seed=5), UGDNet(8, 1, 8, seed=5)
    for x, y in zip(a.parameters(), b.parameters()):
        assert torch.equal(x, y)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_permutation_invariance(seed):
    net = UGDNet(h=16, n_blocks=2, d=16, seed=1)
    p = _patch(seed, 64)
    perm = np.random.default_rng(seed + 1).permutation(64)
    assert np.abs(encode_patch(net, p) - encode_patch(net, p[perm])).max() <= 1e-9


def test_batch_matches_single(small_net):
    ps = np.stack([_patch(i) for i in range(5)])
    batch = encode_patches(small_net, ps, batch=2)
    for i in range(5):
        np.testing.assert_allclose(batch[i], encode_patch(small_net, ps[i]), atol=1e-13)


def test_wrong_patch_size(small_net):
    with pytest.raises(ValueError):
        encode_patches(small_net, np.zeros((1, 10, 3)), s=16)


def test_head_ranges(small_net):
    f = np.random.default_rng(0).standard_normal((200, 8)) * 5
    out = heads_forward(small_net, f)
    assert np.all((out["w"] > 0) & (out["w"] < 1))
    np.testing.assert_allclose(out["mix"].sum(1), 1.0, atol=1e-9)
    assert out["class_logits"].shape == (200, 5)


def test_zero_params_heads():
    net = UGDNet(h=8, n_blocks=1, d=8)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    net.invalidate()
    out = heads_forward(net, np.ones(8))
    assert out["w"] == 0.5
    np.testing.assert_allclose(out["mix"], [0.25] * 4, atol=1e-15)


def test_pooled_feature():
    r = np.random.default_rng(0)
    f, w = r.standard_normal((1, 4)), np.array([0.3])
    np.testing.assert_allclose(pooled_feature(f, w), 0.3 * f[0])
    assert np.all(pooled_feature(r.standard_normal((3, 4)), np.zeros(3)) == 0)
    f, w = r.standard_normal((7, 4)), r.random(7)
    want = np.zeros(4)
    for i in range(7):
        want += w[i] * f[i]
    assert np.abs(pooled_feature(f, w) - want).max() <= 1e-12


def test_quality_index():
    r = np.random.default_rng(1)
    assert quality_index(np.full(5, 2.5), r.random(5) + 0.1) == pytest.approx(2.5, abs=1e-15)
    assert quality_index(np.array([4.0]), np.array([0.2])) == pytest.approx(4.0)
    I, w = r.standard_normal(9), r.random(9)
    assert abs(quality_index(I, w) - float(np.dot(I, w) / np.sum(w))) <= 1e-12
    with pytest.raises(ValueError):
        quality_index(I, np.zeros(9))


def test_input_gradient_matches_finite_differences():
    net = UGDNet(h=8, n_blocks=2, d=8, seed=2).double()
    x = torch.from_numpy(_patch(4)).requires_grad_(True)
    proj = torch.from_numpy(np.random.default_rng(5).standard_normal(8))
    worst, checked, _ = central_difference_check([x], lambda: (net.encoder(x) * proj).sum())
    assert worst <= 1e-4 and checked >= 40
