"""Mask pooling, cosine branches, gating, and the segmentation head."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from travseg import autodiff as ad
from travseg.autodiff import Tensor
from travseg.errors import (ContractError, EmptyRegionError, ShapeError,
                            ValidationError)
from travseg.prototypes import (PrototypeSet, QueryMask, SegHead, SupportMask,
                                branch_features, cosine_branch, decode,
                                downsample_mask, gap_pool, load_pgm,
                                mask_pool, merge_prototypes, modulate,
                                ncl_forward, save_pgm, trainable_param_count)


def feat64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def rand_feat(rng, c=6, h=8, w=10):
    return Tensor(rng.normal(size=(c, h, w)))


def rand_mask(rng, h=16, w=20, p=0.5):
    m = (rng.random((h, w)) < p).astype(np.uint8)
    m[0, 0], m[-1, -1] = 1, 0  # both polarities nonempty
    return SupportMask(m)


# -- masks ------------------------------------------------------------------


def test_support_mask_validation():
    with pytest.raises(ValidationError):
        SupportMask(np.array([0, 1, 2]).reshape(1, 3))
    with pytest.raises(ValidationError):
        SupportMask(np.zeros(4))


def test_region_polarity_complement(rng):
    m = rand_mask(rng)
    np.testing.assert_array_equal(
        m.region("positive") + m.region("negative"), np.ones(m.mask.shape))
    with pytest.raises(ValidationError):
        m.region("sideways")


def test_pgm_round_trip(tmp_path, rng):
    m = rand_mask(rng, 9, 7)
    p = tmp_path / "m.pgm"
    save_pgm(p, m)
    np.testing.assert_array_equal(load_pgm(p).mask, m.mask)


def test_downsample_mask_preserves_mean(rng):
    region = (rng.random((32, 40)) < 0.3).astype(np.uint8)
    soft = downsample_mask(region, 8, 10)
    assert soft.shape == (8, 10)
    assert soft.min() >= 0 and soft.max() <= 1 + 1e-12
    np.testing.assert_allclose(soft.mean(), region.mean(), rtol=0, atol=1e-12)


def test_downsample_mask_constant_region_is_constant():
    soft = downsample_mask(np.ones((12, 20), dtype=np.uint8), 5, 7)
    np.testing.assert_allclose(soft, 1.0, rtol=0, atol=1e-12)


# -- pooling ----------------------------------------------------------------


def test_gap_pool_matches_brute_force_weighted_mean(rng):
    feat = rand_feat(rng)
    mask = rand_mask(rng)
    proto = gap_pool(feat, mask, "positive")
    assert proto.vectors.shape == (1, 6)

    soft = downsample_mask(mask.region("positive"), 8, 10)
    want = (feat.data * soft).sum(axis=(1, 2)) / soft.sum()
    np.testing.assert_allclose(proto.vectors.data[0], want, atol=1e-6)


def test_gap_pool_cell_aligned_blocks(rng):
    """Mask resolution = 2x feature grid: soft weights are 2x2 block means."""
    feat = rand_feat(rng, c=3, h=4, w=6)
    region = (rng.random((8, 12)) < 0.4).astype(np.uint8)
    region[0, 0] = 1
    mask = SupportMask(region)
    proto = gap_pool(feat, mask, "positive")
    blocks = region.reshape(4, 2, 6, 2).mean(axis=(1, 3))
    want = (feat.data * blocks).sum(axis=(1, 2)) / blocks.sum()
    np.testing.assert_allclose(proto.vectors.data[0], want, atol=1e-6)


def test_mask_pool_grid1_equals_gap(rng):
    feat = rand_feat(rng)
    mask = rand_mask(rng)
    a = mask_pool(feat, mask, "negative", grid=1)
    b = gap_pool(feat, mask, "negative")
    np.testing.assert_array_equal(a.vectors.data, b.vectors.data)
    assert a.pooling_mode == b.pooling_mode == "gap"


def test_mask_pool_full_mask_grid2_averages_quadrants(rng):
    feat = rand_feat(rng, c=2, h=4, w=4)
    mask = SupportMask(np.ones((8, 8), dtype=np.uint8))
    protos = mask_pool(feat, mask, "positive", grid=2)
    assert protos.vectors.shape == (4, 2)
    quads = [feat.data[:, :2, :2], feat.data[:, :2, 2:],
             feat.data[:, 2:, :2], feat.data[:, 2:, 2:]]
    for row, q in zip(protos.vectors.data, quads):
        np.testing.assert_allclose(row, q.mean(axis=(1, 2)), atol=1e-6)


def test_mask_pool_weights_ignore_pixels_outside_region(rng):
    """Feature values on obstacle pixels cannot leak into positive pooling."""
    feat = rand_feat(rng, c=3, h=6, w=6)
    region = np.zeros((6, 6), dtype=np.uint8)
    region[1:3, 1:5] = 1
    mask = SupportMask(region)
    protos = mask_pool(feat, mask, "positive", grid=2)

    poisoned = feat.data.copy()
    poisoned[:, region == 0] = 1e6
    protos2 = mask_pool(Tensor(poisoned), mask, "positive", grid=2)
    np.testing.assert_allclose(protos.vectors.data, protos2.vectors.data,
                               rtol=1e-9)


def test_mask_pool_empty_region_raises(rng):
    feat = rand_feat(rng, c=2, h=4, w=4)
    with pytest.raises(EmptyRegionError):
        mask_pool(feat, SupportMask(np.ones((8, 8), dtype=np.uint8)),
                  "negative", grid=2)


def test_mask_pool_rejects_bad_inputs(rng):
    with pytest.raises(ShapeError):
        mask_pool(Tensor(np.zeros((4, 4), dtype=np.float32)),
                  rand_mask(rng), "positive")
    with pytest.raises(ValidationError):
        mask_pool(rand_feat(rng), rand_mask(rng), "positive", grid=0)


def test_merge_prototypes_union_and_mode_guard(rng):
    feat = rand_feat(rng)
    mask = rand_mask(rng)
    a = mask_pool(feat, mask, "positive", grid=2, shot=0)
    b = mask_pool(feat, mask, "positive", grid=2, shot=1)
    merged = merge_prototypes([a, b])
    assert merged.vectors.shape[0] == a.vectors.shape[0] + b.vectors.shape[0]
    assert merged.shots == a.shots + b.shots
    g = gap_pool(feat, mask, "positive")
    with pytest.raises(ContractError):
        merge_prototypes([a, g])
    with pytest.raises(ContractError):
        merge_prototypes([])


# -- similarity and gating ---------------------------------------------------


def test_cosine_identical_and_orthogonal():
    pixels = np.zeros((2, 1, 3))
    pixels[:, 0, 0] = [1.0, 0.0]   # matches prototype
    pixels[:, 0, 1] = [0.0, 2.0]   # orthogonal
    pixels[:, 0, 2] = [-3.0, 0.0]  # anti-parallel
    protos = PrototypeSet("positive", feat64([[5.0, 0.0]]), "gap", 1, [0])
    sim = cosine_branch(feat64(pixels), protos).data
    np.testing.assert_allclose(sim[0], [1.0, 0.0, -1.0], atol=1e-7)


def test_cosine_takes_max_over_prototypes():
    pixels = np.zeros((2, 1, 2))
    pixels[:, 0, 0] = [1.0, 0.0]
    pixels[:, 0, 1] = [0.0, 1.0]
    protos = PrototypeSet("positive", feat64([[1.0, 0.0], [0.0, 1.0]]),
                          "mask_pool", 2, [0, 0])
    sim = cosine_branch(feat64(pixels), protos).data
    np.testing.assert_allclose(sim[0], [1.0, 1.0], atol=1e-7)


def test_cosine_zero_pixel_scores_zero():
    feat = feat64(np.zeros((3, 2, 2)))
    protos = PrototypeSet("positive", feat64([[1.0, 1.0, 1.0]]), "gap", 1, [0])
    np.testing.assert_array_equal(cosine_branch(feat, protos).data,
                                  np.zeros((2, 2)))


@given(st.integers(0, 2**32 - 1))
def test_cosine_bounded_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    feat = Tensor(rng.normal(size=(4, 5, 6)))
    mask = SupportMask((rng.random((10, 12)) < 0.5).astype(np.uint8))
    try:
        protos = mask_pool(feat, mask, "positive", grid=2)
    except EmptyRegionError:
        return
    sim = cosine_branch(Tensor(rng.normal(size=(4, 5, 6))), protos).data
    assert (sim >= -1.0 - 1e-6).all() and (sim <= 1.0 + 1e-6).all()


@given(st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(lam):
    rng = np.random.default_rng(17)
    feat = Tensor(rng.normal(size=(4, 6, 8)))
    mask = SupportMask((rng.random((12, 16)) < 0.6).astype(np.uint8))
    query = Tensor(rng.normal(size=(4, 6, 8)))
    base = cosine_branch(query, mask_pool(feat, mask, "positive")).data
    scaled = cosine_branch(
        query, mask_pool(Tensor(feat.data * lam), mask, "positive")).data
    np.testing.assert_allclose(scaled, base, atol=1e-5)


def test_polarity_swap_swaps_branches(rng):
    feat = rand_feat(rng)
    mask = rand_mask(rng)
    query = rand_feat(rng)
    pos = cosine_branch(query, mask_pool(feat, mask, "positive")).data
    flipped = SupportMask(1 - mask.mask)
    neg_of_flipped = cosine_branch(
        query, mask_pool(feat, flipped, "negative")).data
    np.testing.assert_allclose(pos, neg_of_flipped, atol=1e-6)


def test_modulate_gate_values(rng):
    feat = rand_feat(rng, c=2, h=2, w=2)
    ones = Tensor(np.ones((2, 2), dtype=np.float64))
    np.testing.assert_allclose(modulate(feat, ones).data, feat.data,
                               atol=1e-12)
    anti = Tensor(-np.ones((2, 2), dtype=np.float64))
    assert not modulate(feat, anti).data.any()
    mid = Tensor(np.zeros((2, 2), dtype=np.float64))
    np.testing.assert_allclose(modulate(feat, mid).data, feat.data * 0.5,
                               atol=1e-12)
    with pytest.raises(ShapeError):
        modulate(feat, Tensor(np.ones((3, 2), dtype=np.float64)))


# -- head and full branch ----------------------------------------------------


def test_seghead_shapes_and_upsample(rng):
    head = SegHead(rng, 12, 8, out_hw=(24, 32))
    logits = head(Tensor(rng.normal(size=(12, 6, 8)).astype(np.float32)))
    assert logits.shape == (2, 24, 32)


def test_seghead_init_gain_scales_weights():
    a = SegHead(np.random.default_rng(3), 4, 4, (8, 8), init_gain=1.0)
    b = SegHead(np.random.default_rng(3), 4, 4, (8, 8), init_gain=0.25)
    np.testing.assert_allclose(b.conv1.weight.data,
                               a.conv1.weight.data * 0.25, rtol=1e-6)
    assert not b.conv1.bias.data.any()


def test_query_mask_is_argmax(rng):
    logits = Tensor(rng.normal(size=(2, 5, 7)))
    qm = QueryMask.from_logits(logits)
    np.testing.assert_array_equal(
        qm.mask, (logits.data[1] > logits.data[0]).astype(np.uint8))
    assert qm.mask.dtype == np.uint8


def test_decode_requires_matching_branches(rng):
    head = SegHead(rng, 8, 4, (8, 8))
    a = Tensor(np.zeros((4, 4, 4), dtype=np.float32))
    b = Tensor(np.zeros((4, 4, 5), dtype=np.float32))
    with pytest.raises(ShapeError):
        decode(a, b, head)


def test_branch_features_zero_negative_without_n2p(rng):
    feat = rand_feat(rng)
    mask = rand_mask(rng)
    query = rand_feat(rng)
    q_pos, q_neg = branch_features([(feat, mask)], query, use_n2p=False)
    assert q_neg.shape == q_pos.shape
    assert not q_neg.data.any()
    _, q_neg_on = branch_features([(feat, mask)], query, use_n2p=True)
    assert q_neg_on.data.any()


def test_branch_features_k_duplicate_shots_change_nothing(rng):
    """Duplicated supports add identical prototypes; max-cosine is invariant."""
    feat = rand_feat(rng)
    mask = rand_mask(rng)
    query = rand_feat(rng)
    one = branch_features([(feat, mask)], query, use_n2p=True)
    five = branch_features([(feat, mask)] * 5, query, use_n2p=True)
    np.testing.assert_allclose(one[0].data, five[0].data, atol=1e-6)
    np.testing.assert_allclose(one[1].data, five[1].data, atol=1e-6)


def test_branch_features_gap_mode_uses_single_cell(rng):
    feat = rand_feat(rng)
    mask = rand_mask(rng)
    query = rand_feat(rng)
    a = branch_features([(feat, mask)], query, True, pooling_mode="gap")
    b = branch_features([(feat, mask)], query, True, pooling_mode="mask_pool",
                        grid=1)
    np.testing.assert_allclose(a[0].data, b[0].data, atol=1e-7)


def test_ncl_forward_prototype_scale_invariance(rng):
    """Scaling support features leaves the decoded mask unchanged."""
    feat = rand_feat(rng)
    mask = rand_mask(rng)
    query = rand_feat(rng)
    head = SegHead(np.random.default_rng(0), 12, 6, (16, 20), dtype=ad.FP64)
    base = ncl_forward([(feat, mask)], query, head, use_n2p=True)
    scaled = ncl_forward([(Tensor(feat.data * 37.5), mask)], query, head,
                         use_n2p=True)
    np.testing.assert_array_equal(base.mask, scaled.mask)


def test_ncl_forward_simmap_mode_single_channel_inputs(rng):
    feat = rand_feat(rng)
    mask = rand_mask(rng)
    query = rand_feat(rng)
    q_pos, q_neg = branch_features([(feat, mask)], query, True,
                                   branch_mode="simmap")
    assert q_pos.shape == (1, 8, 10) and q_neg.shape == (1, 8, 10)


def test_branch_features_requires_support(rng):
    with pytest.raises(ContractError):
        branch_features([], rand_feat(rng), True)
    with pytest.raises(ValidationError):
        branch_features([(rand_feat(rng), rand_mask(rng))], rand_feat(rng),
                        True, pooling_mode="extreme")


def test_non_parametric_branches_add_no_trainable_params(rng):
    head = SegHead(rng, 12, 6, (16, 20))
    n = trainable_param_count(head.named_params())
    want = 6 * 12 * 9 + 6 + 2 * 6 * 9 + 2
    assert n == want


def test_decode_gradient_check(rng):
    head = SegHead(np.random.default_rng(2), 4, 3, (6, 8), dtype=ad.FP64)
    q_pos = Tensor(rng.normal(size=(2, 3, 4)))
    q_neg = Tensor(rng.normal(size=(2, 3, 4)))

    def loss_fn(t):
        return ad.mean_all(head(ad.concat_channels(t, q_neg)))

    assert ad.grad_check(loss_fn, q_pos) <= 1e-4
    for name, p in head.named_params().items():
        e = ad.grad_check(
            lambda t: ad.mean_all(head(ad.concat_channels(q_pos, q_neg))), p)
        assert e <= 1e-4, f"{name}: {e}"
