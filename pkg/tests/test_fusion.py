import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaprune.core import LayerStack, ShapeMismatch, TokenMatrix
from adaprune.fusion import (
    IDENTITY,
    ClassProfile,
    MissingGrid,
    NonFiniteScore,
    ProfileError,
    ProfileTable,
    Projection,
    UnalignedLayers,
    align_layer,
    align_stack,
    default_profiles,
    fuse,
    load_profiles,
    project,
    resolve_profiles,
    softmax_mixture,
)
from adaprune.pruner import OpCounter

# published per-category defaults: (LLaVA-family weights, Qwen2.5-VL weights, split ratio)
PUBLISHED = {
    0: ({5: 0.2, 15: 0.3, 22: 0.5}, {9: 0.2, 22: 0.3, 31: 0.5}, 0.8),
    1: ({5: 0.2, 22: 0.8}, {9: 0.2, 31: 0.8}, 0.4),
    2: ({5: 0.2, 22: 0.8}, {9: 0.2, 31: 0.8}, 0.7),
    3: ({20: 0.2, 22: 0.8}, {28: 0.2, 31: 0.8}, 0.7),
    4: ({14: 0.2, 17: 0.3, 22: 0.5}, {21: 0.2, 24: 0.3, 31: 0.5}, 0.7),
    5: ({5: 0.2, 15: 0.3, 22: 0.5}, {9: 0.2, 22: 0.3, 31: 0.5}, 0.6),
    6: ({12: 0.2, 15: 0.3, 19: 0.5}, {18: 0.2, 22: 0.3, 28: 0.5}, 0.8),
    7: ({3: 0.2, 12: 0.3, 18: 0.5}, {6: 0.2, 18: 0.3, 26: 0.5}, 0.2),
    8: ({20: 0.2, 22: 0.8}, {29: 0.2, 31: 0.8}, 0.9),
}


def stack_of(*layers, ids=None):
    ids = ids or tuple(range(1, len(layers) + 1))
    return LayerStack(tuple(TokenMatrix(np.asarray(l, dtype=np.float32)) for l in layers), ids)


def test_softmax_small_tau_uniform():
    np.testing.assert_allclose(softmax_mixture([1.7, -3.2, 0.4], 1e-6), [1 / 3] * 3, atol=1e-5)


def test_softmax_large_tau_one_hot():
    a = softmax_mixture([0.1, 0.9, 0.3], 1e3)
    assert a.argmax() == 1 and a.max() > 1 - 1e-9


def test_softmax_symmetric_pair():
    np.testing.assert_array_equal(softmax_mixture([0.0, 0.0]), [0.5, 0.5])


def test_softmax_rejects_bad_input():
    with pytest.raises(NonFiniteScore):
        softmax_mixture([0.0, np.inf])
    with pytest.raises(ValueError):
        softmax_mixture([0.0], tau=0.0)
    with pytest.raises(ValueError):
        softmax_mixture([])


def test_softmax_max_subtraction_handles_huge_scores():
    a = softmax_mixture([1e4, 1e4 - 1], 1.0)
    expected = np.array([1.0, math.exp(-1)]) / (1 + math.exp(-1))
    np.testing.assert_allclose(a, expected, rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=32), st.sampled_from([0.1, 1.0, 4.0, 30.0]))
def test_softmax_on_simplex(w, tau):
    a = softmax_mixture(w, tau)
    assert (a >= 0).all() and abs(a.sum() - 1) <= 1e-6


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 32), st.sampled_from([0.1, 1.0, 4.0]), st.integers(0, 2**32 - 1))
def test_softmax_l1_lipschitz(L, tau, seed):
    rng = np.random.default_rng(seed)
    w, w2 = rng.uniform(-10, 10, (2, L))
    lhs = np.abs(softmax_mixture(w, tau) - softmax_mixture(w2, tau)).sum()
    assert lhs <= tau / 2 * np.abs(w - w2).sum() + 1e-9


def test_fuse_one_hot_selects_layer(rng):
    layers = rng.standard_normal((3, 5, 4))
    out = fuse(stack_of(*layers), np.array([0.0, 1.0, 0.0]))
    np.testing.assert_array_equal(out.data, layers[1].astype(np.float32))


def test_fuse_table_weights_on_basis_rows():
    w = PUBLISHED[0][0]
    e = np.eye(3)
    out = fuse(stack_of(e[[0]], e[[1]], e[[2]], ids=(5, 15, 22)), np.array(list(w.values())))
    np.testing.assert_allclose(out.data, [[0.2, 0.3, 0.5]], atol=1e-7)


def test_fuse_identical_layers(rng):
    x = rng.standard_normal((6, 3))
    out = fuse(stack_of(x, x), np.array([0.37, 0.63]))
    np.testing.assert_allclose(out.data, x.astype(np.float32), atol=1e-6)


def test_fuse_errors():
    with pytest.raises(ShapeMismatch):
        fuse(stack_of(np.ones((2, 2)), np.ones((2, 2))), np.array([1.0]))
    s = LayerStack((TokenMatrix(np.ones((4, 2)), grid=(2, 2)), TokenMatrix(np.ones((1, 2)), grid=(1, 1))), (1, 2))
    with pytest.raises(UnalignedLayers):
        fuse(s, np.array([0.5, 0.5]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 10), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_fuse_hull_and_definition(L, m, d, seed):
    rng = np.random.default_rng(seed)
    layers = rng.standard_normal((L, m, d)).astype(np.float32)
    alpha = softmax_mixture(rng.uniform(-3, 3, L), 1.0)
    out = fuse(stack_of(*layers), alpha).data.astype(np.float64)
    exact = sum(a * l.astype(np.float64) for a, l in zip(alpha, layers))
    assert np.abs(out - exact).max() <= 1e-5
    assert (out >= layers.min(axis=0) - 1e-5).all() and (out <= layers.max(axis=0) + 1e-5).all()
    assert (np.linalg.norm(out, axis=1) <= np.linalg.norm(layers, axis=2).max(axis=0) + 1e-5).all()


def test_fuse_counts_multiply_adds(rng):
    c = OpCounter()
    fuse(stack_of(*rng.standard_normal((3, 7, 5))), np.array([0.2, 0.3, 0.5]), counter=c)
    assert c["fusion"] == 3 * 7 * 5


def test_fuse_keep_cls():
    layers = tuple(TokenMatrix(np.full((2, 2), float(i)), cls=np.array([10.0 * i, 0.0])) for i in (1, 2))
    out = fuse(LayerStack(layers, (1, 2), has_cls=True), np.array([0.5, 0.5]), keep_cls=True)
    np.testing.assert_allclose(out.data[0], [15.0, 0.0])
    assert out.rows == 3
    assert fuse(LayerStack(layers, (1, 2), has_cls=True), np.array([0.5, 0.5])).rows == 2


def test_project_identity_bitwise(rng):
    m = TokenMatrix(rng.standard_normal((4, 3)))
    assert project(m, IDENTITY) is m
    out = project(m, Projection(np.eye(3)))
    np.testing.assert_array_equal(out.data, m.data)


def test_project_hand_product():
    out = project(TokenMatrix([[1.0, 2.0]]), Projection(np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0]])


def test_project_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        project(TokenMatrix(np.ones((1, 2))), Projection(np.ones((3, 1))))


def test_align_identity_branch(rng):
    m = TokenMatrix(rng.standard_normal((6, 2)), grid=(2, 3))
    assert align_layer(m, (2, 3)) is m


def test_align_area_pool():
    m = TokenMatrix(np.array([[1.0], [2.0], [3.0], [10.0]]), grid=(2, 2))
    np.testing.assert_allclose(align_layer(m, (1, 1)).data, [[4.0]])


def test_align_nearest_replicates():
    m = TokenMatrix(np.array([[1.0, -2.0]]), grid=(1, 1))
    out = align_layer(m, (2, 2), mode="nearest")
    np.testing.assert_array_equal(out.data, np.tile([1.0, -2.0], (4, 1)))


def test_align_bilinear_half_pixel_oracle():
    # 1-D ramp 0,1 upsampled 2x with pixel-centre sampling: src = (i + 0.5)/2 - 0.5, clamped at 0
    m = TokenMatrix(np.array([[0.0], [1.0]]), grid=(1, 2))
    out = align_layer(m, (1, 4)).data[:, 0]
    src = np.clip((np.arange(4) + 0.5) / 2 - 0.5, 0, 1)
    np.testing.assert_allclose(out, src, atol=1e-7)


def test_align_non_integer_downsample_uses_bilinear(rng):
    m = TokenMatrix(rng.standard_normal((25, 3)), grid=(5, 5))
    out = align_layer(m, (3, 3))
    assert out.grid == (3, 3)
    # a constant map stays constant under any resampling
    c = TokenMatrix(np.tile([1.5, -0.5, 2.0], (25, 1)), grid=(5, 5))
    np.testing.assert_allclose(align_layer(c, (3, 3)).data, np.tile([1.5, -0.5, 2.0], (9, 1)), atol=1e-6)


def test_align_missing_grid():
    with pytest.raises(MissingGrid):
        align_layer(TokenMatrix(np.ones((4, 2))), (2, 2))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.sampled_from(["bilinear", "nearest"]),
       st.floats(-5, 5))
def test_align_round_trip_constant(h, w, f, mode, value):
    base = TokenMatrix(np.full((h * w, 2), value), grid=(h, w))
    up = align_layer(base, (h * f, w * f), mode=mode)
    back = align_layer(up, (h, w))
    np.testing.assert_allclose(back.data, base.data, atol=1e-6)


def test_align_stack_to_last_grid(rng):
    s = LayerStack((TokenMatrix(rng.standard_normal((16, 2)), grid=(4, 4)),
                    TokenMatrix(rng.standard_normal((4, 2)), grid=(2, 2))), (1, 2))
    out = align_stack(s)
    assert out.is_aligned() and out.layers[0].grid == (2, 2)


def test_shipped_profiles_match_table():
    llava, qwen = default_profiles("llava"), default_profiles("qwen2.5-vl")
    for c, (lw, qw, ratio) in PUBLISHED.items():
        assert llava[c].layer_weights == lw and llava[c].split_ratio == ratio
        assert qwen[c].layer_weights == qw and qwen[c].split_ratio == ratio
        assert llava[c].mode == qwen[c].mode == "weights"


def test_profile_modes_and_support():
    p = ClassProfile(3, 0.5, layer_scores={4: 0.0, 9: 0.0}, tau=2.0)
    np.testing.assert_allclose(p.mixture([1, 4, 9]), [0.0, 0.5, 0.5])
    assert p.mode == "scores" and ClassProfile.from_dict(p.to_dict()) == p
    with pytest.raises(ProfileError):
        ClassProfile(0, 0.5)
    with pytest.raises(ProfileError):
        ClassProfile(0, 1.5, layer_weights={1: 1.0})
    with pytest.raises(ProfileError):
        ClassProfile(0, 0.5, layer_weights={1: 0.7})
    with pytest.raises(ProfileError):
        p.mixture([1, 4])


def test_profile_table_must_be_complete():
    with pytest.raises(ProfileError):
        ProfileTable(tuple(ClassProfile(c, 0.5, layer_weights={1: 1.0}) for c in range(8)))


def test_profile_json_round_trip_and_env(tmp_path, monkeypatch):
    table = default_profiles("qwen2.5-vl")
    again = load_profiles(table.to_json())
    assert again.profiles == table.profiles
    path = tmp_path / "p.json"
    path.write_text(table.to_json())
    monkeypatch.setenv("ADAPRUNE_PROFILE", str(path))
    assert resolve_profiles().profiles == table.profiles
    monkeypatch.delenv("ADAPRUNE_PROFILE")
    assert resolve_profiles().backbone == "llava"
    with pytest.raises(ProfileError):
        load_profiles(json.dumps({"profiles": [{"category": 0}]}))
