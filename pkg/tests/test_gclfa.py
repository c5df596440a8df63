import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibekit import ContractError, EmptyAttentionRowError, Rng, Tape, Tensor
from vibekit import ops
from vibekit.gclfa import (
    CoarseSpec,
    MacCounter,
    RoPEParams,
    TokenGrid,
    WindowSpec,
    apply_rope_2d,
    build_dense_mask,
    dense_masked_attention,
    gclfa_attention,
    gclfa_blocked,
    gclfa_reference,
    inward_offset,
    logmask_from_mask,
    mask_contains,
    mask_stats,
    pool_kv,
)


def random_grids(h, w, d, seed):
    rng = Rng(seed)
    n = h * w
    return (TokenGrid(h, w, rng.gaussian((n, d))),
            TokenGrid(h, w, rng.gaussian((n, d))),
            TokenGrid(h, w, rng.gaussian((n, d))))


class TestInwardOffset:
    @pytest.mark.parametrize("q,expected", [(0, 2), (1, 1), (3, 0), (4, 0), (6, 1), (7, 2)])
    def test_hand_values(self, q, expected):
        assert inward_offset(q, 8, 4) == expected

    def test_contracts(self):
        with pytest.raises(ContractError):
            inward_offset(8, 8, 4)  # out of range
        with pytest.raises(ContractError):
            inward_offset(0, 8, 3)  # odd window
        with pytest.raises(ContractError):
            inward_offset(0, 4, 4)  # window not smaller than extent


class TestMaskContains:
    def test_spec_examples(self):
        win = WindowSpec(4, 4)
        assert mask_contains((0, 0), (4, 4), (8, 8), win) is True
        assert mask_contains((0, 0), (5, 0), (8, 8), win) is False

    def test_asymmetry(self):
        win = WindowSpec(4, 4)
        assert mask_contains((0, 0), (4, 0), (8, 8), win) is True
        assert mask_contains((4, 0), (0, 0), (8, 8), win) is False

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 7), st.integers(0, 7))
    def test_self_visibility(self, x, y):
        assert mask_contains((x, y), (x, y), (8, 8), WindowSpec(4, 4)) is True


class TestDenseMask:
    def test_row_sums_8x8_win4(self):
        m = build_dense_mask((8, 8), WindowSpec(4, 4)).numpy()
        assert set(m.sum(axis=1).tolist()) == {25.0}

    def test_oversized_all_ones(self):
        m = build_dense_mask((4, 4), WindowSpec(6, 6)).numpy()
        assert np.array_equal(m, np.ones((16, 16)))

    def test_matches_scalar_definition(self):
        grid, win = (6, 5), WindowSpec(2, 4)
        m = build_dense_mask(grid, win).numpy()
        w_tok, h_tok = grid
        for yq in range(h_tok):
            for xq in range(w_tok):
                for yk in range(h_tok):
                    for xk in range(w_tok):
                        expect = mask_contains((xq, yq), (xk, yk), grid, win)
                        assert m[yq * w_tok + xq, yk * w_tok + xk] == float(expect)

    @pytest.mark.parametrize("grid,win", [((8, 8), (4, 4)), ((10, 6), (4, 2)), ((16, 12), (6, 4))])
    def test_uniform_receptive_field(self, grid, win):
        m = build_dense_mask(grid, WindowSpec(*win)).numpy()
        assert set(m.sum(axis=1).tolist()) == {float((win[0] + 1) * (win[1] + 1))}


class TestRope:
    def test_origin_unchanged_and_norms(self):
        g = TokenGrid(3, 4, Tensor(Rng(0).gaussian_array((12, 8))))
        out = apply_rope_2d(g)
        assert np.array_equal(out.tokens.numpy()[0], g.tokens.numpy()[0])
        assert np.allclose(np.linalg.norm(out.tokens.numpy(), axis=1),
                           np.linalg.norm(g.tokens.numpy(), axis=1), atol=1e-12)

    def test_indivisible_dim_rejected(self):
        with pytest.raises(ContractError):
            TokenGrid(2, 2, Tensor(Rng(0).gaussian_array((4, 6))))


class TestPoolKv:
    def test_hand_case(self):
        vals = np.arange(1.0, 17.0).reshape(16, 1)
        tokens = Tensor(np.repeat(vals, 4, axis=1))  # d=4, all channels equal
        g = TokenGrid(4, 4, tokens)
        kc, vc = pool_kv(g, g, CoarseSpec(2))
        assert np.allclose(kc.numpy()[:, 0], [3.5, 5.5, 11.5, 13.5])
        assert np.allclose(vc.numpy()[:, 0], [3.5, 5.5, 11.5, 13.5])

    def test_constant_and_identity(self):
        g = TokenGrid(4, 4, Tensor(np.full((16, 4), 2.5)))
        kc, _ = pool_kv(g, g, CoarseSpec(2))
        assert np.allclose(kc.numpy(), 2.5)
        g2 = TokenGrid(4, 4, Tensor(Rng(1).gaussian_array((16, 4))))
        kc2, _ = pool_kv(g2, g2, CoarseSpec(1))
        assert np.array_equal(kc2.numpy(), g2.tokens.numpy())

    def test_divisibility(self):
        g = TokenGrid(3, 4, Tensor(Rng(0).gaussian_array((12, 4))))
        with pytest.raises(ContractError):
            pool_kv(g, g, CoarseSpec(2))


class TestDenseMaskedAttention:
    def test_diagonal_mask_returns_values(self):
        rng = Rng(3)
        q, k, v = (Tensor(rng.gaussian_array((5, 4))) for _ in range(3))
        log = np.full((5, 5), -np.inf)
        np.fill_diagonal(log, 0.0)
        out = dense_masked_attention(q, k, v, Tensor._wrap(log))
        assert np.allclose(out.numpy(), v.numpy(), atol=1e-12)

    def test_zero_mask_is_plain_attention(self):
        rng = Rng(4)
        q, k, v = (Tensor(rng.gaussian_array((6, 4))) for _ in range(3))
        out = dense_masked_attention(q, k, v, Tensor(np.zeros((6, 6))))
        scores = q.numpy() @ k.numpy().T / 2.0
        w = np.exp(scores - scores.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        assert np.allclose(out.numpy(), w @ v.numpy(), atol=1e-12)

    def test_empty_row_raises(self):
        rng = Rng(5)
        q, k, v = (Tensor(rng.gaussian_array((2, 4))) for _ in range(3))
        log = np.array([[0.0, 0.0], [-np.inf, -np.inf]])
        with pytest.raises(EmptyAttentionRowError):
            dense_masked_attention(q, k, v, Tensor._wrap(log))


class TestGclfaEquivalence:
    def test_one_by_one_grid_duplicate_invariance(self):
        g = TokenGrid(1, 1, Tensor([[1.0, 2.0, 3.0, 4.0]]))
        out = gclfa_attention(g, g, g, WindowSpec(2, 2), CoarseSpec(1))
        assert np.allclose(out.numpy(), g.tokens.numpy(), atol=1e-12)

    def test_duplicate_invariance_equals_plain_attention(self):
        # s=1 coarse branch duplicates every key/value; with an oversized
        # window the result must equal plain dense attention on rotated q, k
        q, k, v = random_grids(4, 4, 8, seed=0)
        win = WindowSpec(6, 6)
        out = gclfa_attention(q, k, v, win, CoarseSpec(1))
        q_r = apply_rope_2d(q).tokens
        k_r = apply_rope_2d(k).tokens
        plain = dense_masked_attention(q_r, k_r, v.tokens, Tensor(np.zeros((16, 16))))
        assert np.max(np.abs(out.numpy() - plain.numpy())) < 1e-9

    @pytest.mark.parametrize("seed", range(6))
    def test_blocked_equals_reference(self, seed):
        rng = Rng(seed, stream=77)
        h = int(4 + 2 * rng.randint(7))
        w = int(4 + 2 * rng.randint(7))
        d = int(4 * (1 + rng.randint(4)))
        s = [1, 2, 4][rng.randint(3)]
        while h % s or w % s:
            s = [1, 2, 4][rng.randint(3)]
        win_w = 2 * (1 + rng.randint(max(1, (w - 1) // 2)))
        win_h = 2 * (1 + rng.randint(max(1, (h - 1) // 2)))
        win = WindowSpec(min(win_w, w - 2), min(win_h, h - 2))
        q, k, v = random_grids(h, w, d, seed=1000 + seed)
        ref = gclfa_reference(q, k, v, win, CoarseSpec(s))
        blk = gclfa_blocked(q, k, v, win, CoarseSpec(s))
        assert np.max(np.abs(ref.numpy() - blk.numpy())) < 1e-9

    def test_reference_spec_case(self):
        q, k, v = random_grids(8, 8, 8, seed=0)
        win, coarse = WindowSpec(4, 4), CoarseSpec(2)
        ref = gclfa_reference(q, k, v, win, coarse)
        blk = gclfa_blocked(q, k, v, win, coarse)
        assert np.max(np.abs(ref.numpy() - blk.numpy())) < 1e-9

    def test_threads_match_single(self):
        q, k, v = random_grids(8, 8, 8, seed=9)
        win, coarse = WindowSpec(4, 4), CoarseSpec(2)
        one = gclfa_blocked(q, k, v, win, coarse, threads=1)
        two = gclfa_blocked(q, k, v, win, coarse, threads=2)
        assert np.array_equal(one.numpy(), two.numpy())

    def test_blocked_rejects_tape(self):
        q, k, v = random_grids(4, 4, 4, seed=2)
        with pytest.raises(ContractError):
            gclfa_attention(q, k, v, WindowSpec(2, 2), CoarseSpec(1), tape=Tape())

    def test_truncating_window_rejected(self):
        q, k, v = random_grids(4, 4, 4, seed=3)
        with pytest.raises(ContractError):
            gclfa_attention(q, k, v, WindowSpec(4, 4), CoarseSpec(1))


class TestMaskSemantics:
    def test_multiplicative_variant_differs(self):
        # zeroed logits still receive weight exp(0): the literal product
        # form keeps masked keys in play, which is why it is not the default
        q, k, v = random_grids(6, 6, 8, seed=11)
        win, coarse = WindowSpec(2, 2), CoarseSpec(2)
        additive = gclfa_reference(q, k, v, win, coarse)
        literal = gclfa_reference(q, k, v, win, coarse, multiplicative_mask=True)
        assert np.max(np.abs(additive.numpy() - literal.numpy())) > 1e-3

    def test_weight_rows_sum_to_one(self):
        q, k, v = random_grids(6, 6, 8, seed=12)
        _, weights = gclfa_reference(q, k, v, WindowSpec(2, 2), CoarseSpec(2), return_weights=True)
        assert np.allclose(weights.numpy().sum(axis=1), 1.0, atol=1e-12)
        assert np.all(weights.numpy() >= 0.0)


class TestReferenceGradients:
    def test_grad_flows_through_attention(self):
        from vibekit import grad_check

        q, k, v = random_grids(4, 4, 4, seed=13)
        win, coarse = WindowSpec(2, 2), CoarseSpec(2)
        proj = Tensor(Rng(14).gaussian_array((16, 4)))

        def f(x, tape):
            grids = (TokenGrid(4, 4, x), k, v)
            out = gclfa_reference(*grids, win, coarse, tape=tape)
            return ops.reduce_sum(ops.mul(out, proj, tape), tape)

        assert grad_check(f, q.tokens, h=1e-5) < 1e-6


class TestMaskStats:
    def test_spec_example_8x8(self):
        st_ = mask_stats((8, 8), WindowSpec(4, 4), CoarseSpec(2), d=16)
        assert st_.local_keys == 25
        assert st_.coarse_keys == 16
        assert st_.keys_per_query == {25: 64}
        assert st_.flops_dense == 2 * 64 * 64 * 16
        assert st_.flops_sparse == 2 * 64 * 41 * 16
        assert st_.reduction == pytest.approx(64 / 41)

    def test_spec_example_64x64(self):
        st_ = mask_stats((64, 64), WindowSpec(16, 16), CoarseSpec(4), d=16)
        assert st_.local_keys == 289
        assert st_.coarse_keys == 256
        assert st_.reduction == pytest.approx(4096 / 545)

    def test_duplication_cost_half(self):
        st_ = mask_stats((4, 4), WindowSpec(6, 6), CoarseSpec(1), d=8)
        assert st_.local_keys == 16
        assert st_.coarse_keys == 16
        assert st_.reduction == pytest.approx(0.5)

    def test_counts_match_instrumented_executors(self):
        q, k, v = random_grids(8, 8, 8, seed=20)
        win, coarse = WindowSpec(4, 4), CoarseSpec(2)
        st_ = mask_stats((8, 8), win, coarse, d=8)
        counter = MacCounter()
        gclfa_blocked(q, k, v, win, coarse, counter=counter)
        assert counter.total == st_.flops_sparse
        # plain dense attention over the N tokens is the cost-model baseline
        counter2 = MacCounter()
        dense_masked_attention(q.tokens, k.tokens, v.tokens,
                               Tensor(np.zeros((64, 64))), counter=counter2)
        assert counter2.total == st_.flops_dense


class TestLogmaskHelper:
    def test_coarse_columns_always_visible(self):
        m = build_dense_mask((4, 4), WindowSpec(2, 2))
        log = logmask_from_mask(m, n_coarse=4).numpy()
        assert log.shape == (16, 20)
        assert np.all(log[:, 16:] == 0.0)
        assert np.all(np.isneginf(log[:, :16]) == (m.numpy() == 0.0))
