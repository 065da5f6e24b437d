"""Region pooling and the two loss terms."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sdrl.augment as aug
import sdrl.nn_ops as ops
import sdrl.objective as obj
import sdrl.tensor as tz
from sdrl.errors import AllRegionsInvalid, NonBinaryMask, NonIntegerRatio
from sdrl.tensor import Tensor

# ---------------------------------------------------------------------------
# resize_mask


def test_resize_all_ones_stays_ones():
    m = np.ones((16, 16), dtype=np.uint8)
    np.testing.assert_array_equal(obj.resize_mask(m, (4, 4)), np.ones((4, 4), np.uint8))


def test_resize_quadrant_by_hand():
    m = np.zeros((8, 8), dtype=np.uint8)
    m[:4, :4] = 1
    np.testing.assert_array_equal(obj.resize_mask(m, (2, 2)), [[1, 0], [0, 0]])


def test_resize_single_pixel_vanishes():
    m = np.zeros((64, 64), dtype=np.uint8)
    m[10, 50] = 1
    assert obj.resize_mask(m, (8, 8)).sum() == 0


def test_resize_exact_half_goes_foreground():
    # 2x2 source blocks with exactly two foreground pixels: tie -> 1
    m = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    np.testing.assert_array_equal(obj.resize_mask(m, (1, 1)), [[1]])


def test_resize_fraction_rule_randomized():
    rng = np.random.default_rng(3)
    for _ in range(20):
        th, tw = rng.integers(1, 5, size=2)
        bh, bw = rng.integers(1, 5, size=2)
        m = (rng.random((th * bh, tw * bw)) < 0.45).astype(np.uint8)
        got = obj.resize_mask(m, (th, tw))
        for i in range(th):
            for j in range(tw):
                block = m[i * bh:(i + 1) * bh, j * bw:(j + 1) * bw]
                want = 1 if block.sum() / block.size >= 0.5 else 0
                assert got[i, j] == want


def test_resize_rejects_non_integer_ratio():
    with pytest.raises(NonIntegerRatio):
        obj.resize_mask(np.zeros((10, 10), dtype=np.uint8), (4, 4))


def test_resize_rejects_non_binary():
    with pytest.raises(NonBinaryMask):
        obj.resize_mask(np.full((4, 4), 2, dtype=np.uint8), (2, 2))


# ---------------------------------------------------------------------------
# masked_pool


def pool_oracle(features: np.ndarray, resized: np.ndarray):
    """Scalar-loop per-region means with float64 accumulation."""
    c, h, w = features.shape
    out = []
    for want in (0, 1):
        acc = np.zeros(c, dtype=np.float64)
        count = 0
        for i in range(h):
            for j in range(w):
                if resized[i, j] == want:
                    count += 1
                    for ch in range(c):
                        acc[ch] += np.float64(features[ch, i, j])
        out.append((acc / max(count, 1)).astype(np.float32))
    return out[0], out[1]


def test_masked_pool_matches_scalar_oracle():
    rng = np.random.default_rng(11)
    for _ in range(30):
        c = int(rng.integers(1, 9))
        fh, fw = (int(v) for v in rng.integers(2, 17, size=2))
        factor = int(rng.integers(1, 4))
        feats = rng.normal(size=(c, fh, fw)).astype(np.float32)
        mask = (rng.random((fh * factor, fw * factor)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        emb = obj.masked_pool(Tensor(feats), mask)
        want_bg, want_fg = pool_oracle(feats, obj.resize_mask(mask, (fh, fw)))
        np.testing.assert_array_equal(emb.vectors[obj.BG].data, want_bg)
        np.testing.assert_array_equal(emb.vectors[obj.FG].data, want_fg)


def test_masked_pool_all_foreground_is_global_mean():
    rng = np.random.default_rng(4)
    feats = Tensor(rng.normal(size=(5, 8, 8)).astype(np.float32))
    emb = obj.masked_pool(feats, np.ones((8, 8), dtype=np.uint8))
    assert emb.valid == [False, True]
    np.testing.assert_array_equal(emb.vectors[obj.FG].data, ops.spatial_mean(feats).data)
    np.testing.assert_array_equal(emb.vectors[obj.BG].data, np.zeros(5, np.float32))


def test_masked_pool_constant_features():
    feats = Tensor(np.full((3, 4, 4), 0.7, dtype=np.float32))
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[:2] = 1
    emb = obj.masked_pool(feats, mask)
    assert emb.valid == [True, True]
    for k in (obj.BG, obj.FG):
        np.testing.assert_allclose(emb.vectors[k].data, 0.7, rtol=1e-6)


# ---------------------------------------------------------------------------
# loss terms

finite_vec = st.lists(
    st.floats(min_value=-10, max_value=10, allow_nan=False, width=32),
    min_size=4, max_size=4,
).filter(lambda v: sum(abs(x) for x in v) > 1e-3)


@settings(max_examples=250, deadline=None)
@given(finite_vec, finite_vec)
def test_dissimilarity_loss_bounds(a, b):
    loss = obj.semantic_dissimilarity_loss(Tensor(np.array(a, np.float32)),
                                           Tensor(np.array(b, np.float32)))
    assert 0.0 <= float(loss.data) <= 2.0 + 1e-6


@settings(max_examples=250, deadline=None)
@given(finite_vec, finite_vec, finite_vec, finite_vec)
def test_cross_view_loss_bounds_and_swap(p1, z2, p2, z1):
    args = [Tensor(np.array(v, np.float32)) for v in (p1, z2, p2, z1)]
    loss = obj.cross_view_similarity_loss(*args)
    assert 0.0 <= float(loss.data) <= 2.0 + 1e-6
    swapped = obj.cross_view_similarity_loss(args[2], args[3], args[0], args[1])
    assert abs(float(loss.data) - float(swapped.data)) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(finite_vec, finite_vec, st.floats(min_value=0.01, max_value=100))
def test_cosine_terms_scale_invariant(a, b, scale):
    base = obj.semantic_dissimilarity_loss(Tensor(np.array(a, np.float32)),
                                           Tensor(np.array(b, np.float32)))
    scaled = obj.semantic_dissimilarity_loss(
        Tensor((np.array(a, np.float64) * scale).astype(np.float32)),
        Tensor(np.array(b, np.float32)))
    assert abs(float(base.data) - float(scaled.data)) <= 1e-5


def test_dissimilarity_pinned_values():
    v = Tensor(np.array([1.0, 2.0, 3.0], np.float32))
    assert float(obj.semantic_dissimilarity_loss(v, v).data) == pytest.approx(2.0, abs=1e-6)
    a = Tensor(np.array([1.0, 0.0], np.float32))
    b = Tensor(np.array([0.0, 1.0], np.float32))
    assert float(obj.semantic_dissimilarity_loss(a, b).data) == pytest.approx(1.0, abs=1e-6)
    neg = Tensor(np.array([-1.0, -2.0, -3.0], np.float32))
    assert float(obj.semantic_dissimilarity_loss(v, neg).data) == pytest.approx(0.0, abs=1e-6)


def test_cross_view_pinned_values():
    a = Tensor(np.array([0.5, 1.5, -2.0], np.float32))
    b = Tensor(np.array([1.0, -1.0, 0.5], np.float32))
    perfect = obj.cross_view_similarity_loss(a, a, b, b)
    assert float(perfect.data) == pytest.approx(0.0, abs=1e-6)
    e1 = Tensor(np.array([1.0, 0.0], np.float32))
    e2 = Tensor(np.array([0.0, 1.0], np.float32))
    ortho = obj.cross_view_similarity_loss(e1, e2, e2, e1)
    assert float(ortho.data) == pytest.approx(1.0, abs=1e-6)


def test_cross_view_stop_gradient_sides_get_zero():
    rng = np.random.default_rng(8)
    p1, z2, p2, z1 = (Tensor(rng.normal(size=6).astype(np.float32), requires_grad=True)
                      for _ in range(4))
    loss = obj.cross_view_similarity_loss(p1, z2, p2, z1)
    tz.backward(loss)
    assert z1.grad is None and z2.grad is None
    assert p1.grad is not None and np.abs(p1.grad).max() > 0


def test_cross_view_p_side_gradient_matches_fd():
    rng = np.random.default_rng(9)
    p1, z2, p2, z1 = (Tensor((rng.uniform(0.3, 1.3, 6) * np.where(rng.random(6) < 0.5, -1, 1)
                              ).astype(np.float32), requires_grad=True) for _ in range(4))
    err = tz.finite_difference_check(
        lambda: obj.cross_view_similarity_loss(p1, z2, p2, z1), [p1, p2], eps=1e-2)
    assert err <= 1e-2


# ---------------------------------------------------------------------------
# sample_loss


class _StubModel:
    """Encoder emits a constant map; heads are identity-like passthroughs."""

    def __init__(self, channels=6, value=1.0):
        self.channels = channels
        self.value = value

    def encode(self, images):
        n, _, h, w = images.shape
        return Tensor(np.full((n, self.channels, h // 2, w // 2), self.value, np.float32))

    def project(self, x):
        return tz.scalar_mul(x, 1.0)

    def predict(self, z):
        return tz.scalar_mul(z, 1.0)


def _bundle(rng, size=16, fg=0.4):
    img1 = rng.uniform(0, 1, (size, size, 3)).astype(np.float32)
    img2 = rng.uniform(0, 1, (size, size, 3)).astype(np.float32)
    mask = (rng.random((size, size)) < fg).astype(np.uint8)
    return aug.make_view_bundle(img1, img2, mask, rng)


def test_sample_loss_constant_encoder_saturates_l_sd():
    rng = np.random.default_rng(12)
    out = obj.sample_loss(_bundle(rng), _StubModel())
    assert float(out.l_sd.data) == pytest.approx(2.0, abs=1e-5)
    assert float(out.total.data) == pytest.approx(float(out.l_sd.data) + float(out.l_s.data),
                                                  abs=1e-6)
    assert out.terms_used == (2, 4)


def test_sample_loss_bounds_on_real_model(rng, small_encoder, small_heads):
    import sdrl.nn as nn
    model = nn.SSLModel(small_encoder, small_heads, rng)
    model.train()
    out = obj.sample_loss(_bundle(np.random.default_rng(21), size=32), model)
    assert 0.0 <= float(out.l_sd.data) <= 2.0
    assert 0.0 <= float(out.l_s.data) <= 2.0
    assert np.isfinite(float(out.total.data))


def test_sample_loss_trivial_mask_matches_global_mode(rng, small_encoder, small_heads):
    import sdrl.nn as nn
    model = nn.SSLModel(small_encoder, small_heads, rng)
    model.train()
    r = np.random.default_rng(31)
    img1 = r.uniform(0, 1, (32, 32, 3)).astype(np.float32)
    img2 = r.uniform(0, 1, (32, 32, 3)).astype(np.float32)
    mask = np.ones((32, 32), dtype=np.uint8)
    params = [[aug.sample_params(r) for _ in range(2)] for _ in range(2)]
    bundle = aug.build_bundle(img1, img2, mask, params)

    sdrl_out = obj.sample_loss(bundle, model, obj.ObjectiveConfig(mode="sdrl"))
    global_out = obj.sample_loss(bundle, model, obj.ObjectiveConfig(mode="global"))
    # all-foreground pooling degenerates to global average pooling
    assert abs(float(sdrl_out.l_s.data) - float(global_out.l_s.data)) <= 1e-6
    assert float(sdrl_out.l_sd.data) == 0.0
    assert sdrl_out.terms_used[0] == 0


def test_sample_loss_t2_global_pool_policy():
    rng = np.random.default_rng(13)
    out = obj.sample_loss(_bundle(rng), _StubModel(),
                          obj.ObjectiveConfig(t2_mask_policy="global_pool"))
    # t1 contributes bg+fg pairs, t2 a single whole-view pair
    assert out.terms_used == (2, 3)


def test_sample_loss_raises_when_no_pair_is_computable():
    rng = np.random.default_rng(14)
    size = 16
    img = rng.uniform(0, 1, (size, size, 3)).astype(np.float32)
    ones = np.ones((size, size), dtype=np.uint8)
    zeros = np.zeros((size, size), dtype=np.uint8)
    # hand-built bundle whose two views never share a valid region
    bundle = aug.ViewBundle(
        images=[[img, img], [img, img]],
        masks=[[ones, zeros], [ones, zeros]],
        params=[[aug.identity_params()] * 2] * 2,
    )
    with pytest.raises(AllRegionsInvalid):
        obj.sample_loss(bundle, _StubModel())


def test_sample_loss_skips_empty_region_terms():
    rng = np.random.default_rng(15)
    bundle = _bundle(rng, fg=0.0)  # no foreground anywhere
    out = obj.sample_loss(bundle, _StubModel())
    # dissimilarity needs both regions; similarity only has the bg pairs
    assert out.terms_used == (0, 2)
    assert float(out.l_sd.data) == 0.0
