import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glossattn import numerics as nx
from glossattn.attention import (
    ConfigError,
    GlossAttentionParams,
    MultiHeadAttention,
    adjust_positions,
    gloss_attention,
    init_positions,
    interpolate_kv,
    multi_head,
    score_counter,
    self_attention,
    sliding_window_attention,
)
from glossattn.numerics import ContractError, Tensor

from conftest import check_grads
from oracles import banded, oracle_attention, oracle_gloss


def make_params(rng, d, heads=1, n=3, offset_scale=0.0, out=False):
    p = GlossAttentionParams.initialise(d, heads, n, rng, out_projection=out)
    if offset_scale:
        p.w_offset.data = offset_scale * rng.standard_normal(p.w_offset.shape)
    return p


# -- self attention -----------------------------------------------------------


def test_self_attention_single_frame_returns_its_value(rng):
    p = make_params(rng, 4)
    x = rng.standard_normal((1, 4))
    out, maps = self_attention(x, p)
    np.testing.assert_allclose(out.data, x @ p.w_v.data, rtol=1e-15)
    np.testing.assert_array_equal(maps[0].weights, [[1.0]])


def test_self_attention_identical_keys_are_uniform(rng):
    p = make_params(rng, 4)
    p.w_k.data = np.zeros((4, 4))
    x = rng.standard_normal((5, 4))
    out, maps = self_attention(x, p)
    np.testing.assert_allclose(maps[0].weights, np.full((5, 5), 0.2), atol=1e-15)
    np.testing.assert_allclose(out.data, np.tile((x @ p.w_v.data).mean(axis=0), (5, 1)), atol=1e-14)


def test_self_attention_matches_loop_oracle(rng):
    p = make_params(rng, 2)
    x = rng.standard_normal((3, 2))
    out, _ = self_attention(x, p)
    np.testing.assert_allclose(out.data, oracle_attention(x, p.w_q.data, p.w_k.data, p.w_v.data), atol=1e-13)


def test_self_attention_masked_keys_get_no_weight(rng):
    p = make_params(rng, 4)
    x = rng.standard_normal((2, 5, 4))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    _, maps = self_attention(x, p, mask)
    assert maps[0].weights.shape == (3, 3)
    out, _ = self_attention(x[0, :3], p)
    full, _ = self_attention(x, p, mask)
    np.testing.assert_allclose(full.data[0, :3], out.data, atol=1e-14)


# -- positions ------------------------------------------------------------------


def test_init_positions_examples():
    np.testing.assert_array_equal(init_positions(10, 7), [6, 7, 8, 9, 10, 11, 12])
    np.testing.assert_array_equal(init_positions(0, 3, 20), [-2, -1, 0])
    for t in (0, 4, 9):
        np.testing.assert_array_equal(init_positions(t, 1), [t - 1])
    with pytest.raises(ContractError):
        init_positions(20, 3, 20)


def test_adjust_positions_examples(rng):
    P = init_positions(0, 3, 20)
    np.testing.assert_array_equal(adjust_positions(P, rng.standard_normal(4), np.zeros((3, 4)), 20), [18, 19, 0])
    q = np.array([1.0, 0.0])
    w = np.array([[0.75, 3.0]])
    np.testing.assert_allclose(adjust_positions([5.0], q, w, 10), [5.75], rtol=1e-15)
    wide = adjust_positions(np.arange(-30, 30, dtype=float), q, np.zeros((60, 2)), 20)
    assert np.all((wide >= 0) & (wide < 20))


def test_interpolate_kv_examples(rng):
    K = rng.standard_normal((8, 3))
    V = rng.standard_normal((8, 3))
    k_hat, v_hat = interpolate_kv(np.array([5.0, 5.25, 7.5]), K, V)
    np.testing.assert_array_equal(k_hat.data[0], K[5])
    np.testing.assert_allclose(k_hat.data[1], 0.75 * K[5] + 0.25 * K[6], rtol=1e-15)
    np.testing.assert_allclose(k_hat.data[2], 0.5 * K[7] + 0.5 * K[0], rtol=1e-15)
    np.testing.assert_allclose(v_hat.data[2], 0.5 * V[7] + 0.5 * V[0], rtol=1e-15)
    for bad in ([-0.1], [8.0]):
        with pytest.raises(ContractError):
            interpolate_kv(np.array(bad), K, V)


def test_interpolation_gradient_reaches_positions(rng):
    K = rng.standard_normal((6, 2))
    errs = check_grads(lambda p, k: nx.sum(nx.interp_gather(k, nx.reshape(p, (1, 3)), 6.0)), [np.array([0.3, 2.6, 5.4]), K])
    assert max(errs) < 1e-8


# -- gloss attention ---------------------------------------------------------------


def test_gloss_attention_matches_loop_oracle(rng):
    p = make_params(rng, 6, n=4, offset_scale=0.7)
    x = rng.standard_normal((9, 6))
    out, _ = gloss_attention(x, p)
    ref = oracle_gloss(x, p.w_q.data, p.w_k.data, p.w_v.data, p.w_offset.data[0])
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_gloss_single_position_returns_interpolated_value(rng):
    p = make_params(rng, 4, n=1, offset_scale=0.5)
    x = rng.standard_normal((7, 4))
    out, maps = gloss_attention(x, p)
    np.testing.assert_array_equal(maps[0].weights, np.ones((7, 1)))
    _, v_hat = interpolate_kv(maps[0].positions[:, 0], x @ p.w_k.data, x @ p.w_v.data)
    np.testing.assert_allclose(out.data, v_hat.data, atol=1e-14)


def test_zero_offset_gloss_equals_banded_self_attention(rng):
    T, N = 12, 5
    p = make_params(rng, 6, n=N)
    x = rng.standard_normal((T, 6))
    out, _ = gloss_attention(x, p)
    ref = oracle_attention(x, p.w_q.data, p.w_k.data, p.w_v.data, banded(T, N))
    inside = [t for t in range(T) if 0 <= t - math.ceil(N / 2) and t - math.ceil(N / 2) + N <= T]
    np.testing.assert_allclose(out.data[inside], ref[inside], atol=1e-9)


def test_score_counts_are_exact(rng):
    for T in (8, 13):
        p = make_params(rng, 4, heads=2, n=3)
        x = rng.standard_normal((T, 4))
        score_counter.reset()
        gloss_attention(x, p)
        assert score_counter.count == 2 * 3 * T
        score_counter.reset()
        self_attention(x, p)
        assert score_counter.count == 2 * T * T


def test_zero_offsets_stay_local(rng):
    T, N = 15, 7
    p = make_params(rng, 8, heads=2, n=N)
    _, maps = gloss_attention(rng.standard_normal((T, 8)), p)
    for m in maps:
        dense = m.dense()
        for t in range(T):
            dist = np.minimum(np.abs(np.arange(T) - t), T - np.abs(np.arange(T) - t))
            assert dense[t, dist > math.ceil(N / 2)].sum() == 0.0


def test_gloss_padding_is_never_read(rng):
    p = make_params(rng, 4, n=3, offset_scale=2.0)
    x = rng.standard_normal((2, 9, 4))
    mask = np.ones((2, 9), dtype=bool)
    mask[0, 6:] = False
    a, maps = gloss_attention(x, p, mask)
    x2 = x.copy()
    x2[0, 6:] = 1e3
    b, _ = gloss_attention(x2, p, mask)
    np.testing.assert_array_equal(a.data[0, :6], b.data[0, :6])
    assert maps[0].n_frames == 6 and np.all(maps[0].positions < 6)


def test_gloss_attention_gradients(rng):
    T, d, N = 11, 8, 3
    p = make_params(rng, d, n=N, offset_scale=0.3)
    x = rng.standard_normal((T, d))
    probe = rng.standard_normal((T, d))

    def loss(x, wq, wk, wv, wo):
        params = GlossAttentionParams(wq, wk, wv, wo, N, 1)
        return nx.sum(nx.mul(gloss_attention(x, params)[0], probe))

    errs = check_grads(loss, [x, p.w_q.data, p.w_k.data, p.w_v.data, p.w_offset.data])
    assert max(errs) < 1e-5


# -- sliding window ------------------------------------------------------------------


def test_sliding_window_wider_than_sequence_is_full_attention(rng):
    p = make_params(rng, 4)
    x = rng.standard_normal((6, 4))
    # the band starts at t - ceil(w/2), so it covers everything once w >= 2T
    a, _ = sliding_window_attention(x, p, window=12)
    b, _ = self_attention(x, p)
    np.testing.assert_allclose(a.data, b.data, atol=1e-14)


def test_sliding_window_one_reads_single_position(rng):
    from glossattn.attention import _band

    # w = 1 keeps only frame t - 1
    np.testing.assert_array_equal(_band(6, 6, 1), np.eye(6, k=-1, dtype=bool))
    p = make_params(rng, 4)
    # the band is clipped, not wrapped, so the first query has no key at all
    with pytest.raises(ContractError):
        sliding_window_attention(rng.standard_normal((6, 4)), p, window=1)


def test_sliding_window_matches_banded_oracle(rng):
    p = make_params(rng, 4)
    x = rng.standard_normal((8, 4))
    out, maps = sliding_window_attention(x, p, window=3)
    ref = oracle_attention(x, p.w_q.data, p.w_k.data, p.w_v.data, banded(8, 3))
    np.testing.assert_allclose(out.data, ref, atol=1e-13)
    assert np.count_nonzero(maps[0].weights[4]) == 3


# -- multi head ------------------------------------------------------------------------


def test_single_head_plus_projection(rng):
    p = make_params(rng, 4, heads=1, n=3, offset_scale=0.4, out=True)
    x = rng.standard_normal((7, 4))
    z, _ = gloss_attention(x, p)
    out, _ = multi_head(x, "gloss", p)
    np.testing.assert_allclose(out.data, z.data @ p.w_out.data + p.b_out.data, atol=1e-14)


def test_two_heads_match_manual_split(rng):
    d, T, H = 6, 6, 2
    p = make_params(rng, d, heads=H, out=True)
    x = rng.standard_normal((T, d))
    out, maps = multi_head(x, "self", p)
    dh = d // H
    parts = []
    for h in range(H):
        cols = slice(h * dh, (h + 1) * dh)
        parts.append(oracle_attention(x, p.w_q.data[:, cols], p.w_k.data[:, cols], p.w_v.data[:, cols]))
    ref = np.hstack(parts) @ p.w_out.data + p.b_out.data
    np.testing.assert_allclose(out.data, ref, atol=1e-13)
    assert [m.head for m in maps] == [0, 1]


def test_permuting_heads_permutes_maps_only(rng):
    d, H = 8, 2
    p = make_params(rng, d, heads=H, n=3, offset_scale=0.5, out=True)
    x = rng.standard_normal((9, d))
    out, maps = multi_head(x, "gloss", p)
    dh = d // H
    perm = np.r_[dh:d, 0:dh]
    q = GlossAttentionParams(
        Tensor(p.w_q.data[:, perm]), Tensor(p.w_k.data[:, perm]), Tensor(p.w_v.data[:, perm]),
        Tensor(p.w_offset.data[::-1].copy()), 3, H, Tensor(p.w_out.data[perm]), p.b_out,
    )
    out2, maps2 = multi_head(x, "gloss", q)
    np.testing.assert_allclose(out.data, out2.data, atol=1e-13)
    np.testing.assert_allclose(maps[0].weights, maps2[1].weights, atol=1e-14)


def test_head_divisibility_is_a_config_error(rng):
    with pytest.raises(ConfigError):
        GlossAttentionParams.initialise(6, 4, 3, rng)
    with pytest.raises(ConfigError):
        MultiHeadAttention(6, 4, "gloss", 3, rng)


def test_module_has_offsets_only_for_gloss(rng):
    assert MultiHeadAttention(4, 2, "gloss", 3, rng).w_offset is not None
    assert MultiHeadAttention(4, 2, "self", 3, rng).w_offset is None


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 14), st.integers(1, 5), st.integers(0, 10_000), st.sampled_from(["gloss", "self", "sliding"]))
def test_map_rows_are_distributions(T, N, seed, variant):
    rng = np.random.default_rng(seed)
    p = make_params(rng, 4, heads=2, n=N, offset_scale=1.5)
    x = rng.standard_normal((T, 4))
    kw = {"window": max(N, 3)} if variant == "sliding" else {}
    _, maps = multi_head(x, variant, p, **kw)
    for m in maps:
        w = m.dense()
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
        assert np.all((m.weights >= 0) & (m.weights <= 1))
