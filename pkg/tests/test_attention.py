import math

import numpy as np
import pytest
import torch

from anchorsfm import attention as att

torch.manual_seed(0)


def identity_mha(channels):
    mha = att.MultiHeadAttention(channels, heads=1)
    for lin in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
        with torch.no_grad():
            lin.weight.copy_(torch.eye(channels))
            lin.bias.zero_()
    return mha


def reference_attention(mha, q_tokens, kv_tokens, allowed=None):
    """Independent O(Q*S) evaluation with explicit loops in float64."""
    W = {n: p.detach().double().numpy() for n, p in mha.named_parameters()}
    q_in = q_tokens.detach().double().numpy()
    kv_in = kv_tokens.detach().double().numpy()
    heads = mha.heads
    hd = mha.channels // heads
    q = q_in @ W["q_proj.weight"].T + W["q_proj.bias"]
    k = kv_in @ W["k_proj.weight"].T + W["k_proj.bias"]
    v = kv_in @ W["v_proj.weight"].T + W["v_proj.bias"]
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(q.shape[0]):
            logits = []
            for j in range(k.shape[0]):
                if allowed is not None and not bool(allowed[i, j]):
                    logits.append(-np.inf)
                else:
                    logits.append(float(q[i, sl] @ k[j, sl]) / math.sqrt(hd))
            logits = np.array(logits)
            w = np.exp(logits - logits.max())
            w = w / w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(k.shape[0]))
    return out @ W["out_proj.weight"].T + W["out_proj.bias"]


class TestMultiHeadAttention:
    def test_single_token_is_value_projection(self):
        mha = identity_mha(8)
        x = torch.randn(1, 8)
        out = mha(x, x)
        torch.testing.assert_close(out, x)  # softmax over one key is 1

    def test_diagonal_mask_is_per_token_value_projection(self):
        mha = att.MultiHeadAttention(16, heads=4)
        x = torch.randn(4, 16)
        out = mha(x, x, allowed=torch.eye(4, dtype=torch.bool))
        expected = mha.out_proj(mha.v_proj(x))
        torch.testing.assert_close(out, expected)

    def test_matches_reference_full_mask(self):
        for seed in range(5):
            torch.manual_seed(seed)
            mha = att.MultiHeadAttention(32, heads=4)
            x = torch.randn(8, 32)
            out = mha(x, x).detach().numpy()
            ref = reference_attention(mha, x, x)
            np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-6)

    def test_matches_reference_random_mask(self):
        rng = np.random.default_rng(1)
        for seed in range(5):
            torch.manual_seed(100 + seed)
            mha = att.MultiHeadAttention(32, heads=2)
            x = torch.randn(6, 32)
            kv = torch.randn(9, 32)
            allowed = torch.from_numpy(rng.random((6, 9)) < 0.5)
            allowed[:, 0] = True  # keep every row alive
            out = mha(x, kv, allowed=allowed).detach().numpy()
            ref = reference_attention(mha, x, kv, allowed)
            np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-6)

    def test_disallowed_columns_get_exact_zero(self):
        mha = att.MultiHeadAttention(16, heads=2)
        x = torch.randn(5, 16)
        allowed = torch.ones(5, 5, dtype=torch.bool)
        allowed[:, 3] = False
        allowed[3, 3] = True
        _, weights = mha(x, x, allowed=allowed, return_weights=True)
        assert torch.all(weights[:, :3, 3] == 0.0)
        assert torch.all(weights[:, 4:, 3] == 0.0)

    def test_softmax_rows_sum_to_one(self):
        mha = att.MultiHeadAttention(16, heads=2)
        x = torch.randn(6, 16)
        allowed = torch.eye(6, dtype=torch.bool)
        allowed[:, 0] = True
        _, weights = mha(x, x, allowed=allowed, return_weights=True)
        torch.testing.assert_close(
            weights.sum(dim=-1), torch.ones(2, 6), atol=1e-6, rtol=0
        )

    def test_fully_masked_row_raises(self):
        mha = att.MultiHeadAttention(16, heads=2)
        x = torch.randn(3, 16)
        allowed = torch.ones(3, 3, dtype=torch.bool)
        allowed[1] = False
        with pytest.raises(att.MaskedRowError):
            mha(x, x, allowed=allowed)

    def test_shape_mismatch_raises(self):
        mha = att.MultiHeadAttention(16, heads=2)
        with pytest.raises(att.ShapeError):
            mha(torch.randn(3, 8), torch.randn(3, 8))
        with pytest.raises(att.ShapeError):
            mha(torch.randn(3, 16), torch.randn(4, 16), allowed=torch.ones(3, 3, dtype=torch.bool))

    def test_channels_divisible_by_heads(self):
        with pytest.raises(att.InvalidConfigurationError):
            att.MultiHeadAttention(10, heads=3)


class TestLocalizationMask:
    def test_pure_scene_regression_all_true(self):
        mask = att.build_localization_mask([(0, 3), (1, 3)], [])
        assert mask.allowed.shape == (6, 6)
        assert bool(mask.allowed.all())

    def test_hand_enumerated_two_queries(self):
        mask = att.build_localization_mask([(0, 2)], [(1, 1), (2, 1)])
        expected = torch.tensor(
            [
                [1, 1, 0, 0],  # anchor tokens see anchors only
                [1, 1, 0, 0],
                [1, 1, 1, 0],  # query frame 1: itself + anchors
                [1, 1, 0, 1],  # query frame 2: itself + anchors
            ],
            dtype=torch.bool,
        )
        torch.testing.assert_close(mask.allowed, expected)

    def test_query_row_count_identity(self):
        for n_anchor_tokens in (1, 4, 9):
            mask = att.build_localization_mask([(0, n_anchor_tokens)], [(1, 1)])
            assert int(mask.allowed[-1].sum()) == 1 + n_anchor_tokens

    def test_empty_anchor_layout_raises(self):
        with pytest.raises(att.InvalidConfigurationError):
            att.build_localization_mask([], [(0, 2)])

    def test_cached_flags_restrict_query_columns(self):
        cached = [True, False, True]
        mask = att.build_localization_mask([(0, 3)], [(1, 2)], anchor_cached=cached)
        # query rows see flagged anchor tokens and their own frame only
        assert mask.allowed[3].tolist() == [True, False, True, True, True]
        # anchor rows still see every anchor token
        assert mask.allowed[0].tolist() == [True, True, True, False, False]
        assert mask.cached.tolist() == [True, False, True, False, False]


class TestAlternatingBlock:
    def test_single_frame_global_is_second_self_attention(self):
        block = att.AlternatingBlock(16, heads=2)
        frame = torch.randn(7, 16)
        out, stage = block([frame])
        expected = block.global_attn(stage[0])
        torch.testing.assert_close(out[0], expected)

    def test_identical_frames_identical_outputs(self):
        block = att.AlternatingBlock(16, heads=2)
        frame = torch.randn(5, 16)
        out, _ = block([frame, frame.clone()])
        torch.testing.assert_close(out[0], out[1])

    def test_anchor_rows_bit_identical_under_mask(self):
        torch.manual_seed(3)
        block = att.AlternatingBlock(32, heads=4)
        anchors = [torch.randn(6, 32) for _ in range(2)]
        queries = [torch.randn(6, 32) for _ in range(2)]
        out_plain, _ = block(anchors)
        mask = att.build_localization_mask(
            [(i, 6) for i in range(2)], [(2 + i, 6) for i in range(2)]
        )
        out_joint, _ = block(anchors + queries, mask=mask)
        for a, b in zip(out_plain, out_joint[:2]):
            assert torch.equal(a, b)

    def test_channel_mismatch_raises(self):
        block = att.AlternatingBlock(16, heads=2)
        with pytest.raises(att.ShapeError):
            block([torch.randn(3, 16), torch.randn(3, 8)])

    def test_anchor_permutation_equivariance(self):
        torch.manual_seed(5)
        block = att.AlternatingBlock(16, heads=2)
        frames = [torch.randn(4, 16) for _ in range(3)]
        out, _ = block(frames)
        perm = [2, 0, 1]
        out_p, _ = block([frames[i] for i in perm])
        for i, j in enumerate(perm):
            torch.testing.assert_close(out_p[i], out[j], rtol=1e-5, atol=1e-6)


class TestCachedAttend:
    def test_duplicate_key_matches_self_attention(self):
        block = att.AlternatingBlock(16, heads=2)
        token = torch.randn(1, 16)
        cache = att.RepresentationCache([token.clone()], np.array([0]))
        out = att.cached_attend(token, cache, 0, block)
        solo = block.global_attn(token)
        torch.testing.assert_close(out, solo, rtol=1e-6, atol=1e-7)

    def test_matches_masked_joint_pass(self):
        for seed in range(10):
            torch.manual_seed(seed)
            block = att.AlternatingBlock(32, heads=4)
            anchor = torch.randn(5, 32)
            query = torch.randn(3, 32)
            mask = att.build_localization_mask([(0, 5)], [(1, 3)])
            joint, stage = block([anchor, query], mask=mask)
            cache = att.RepresentationCache([stage[0]], np.zeros(5, dtype=int))
            out = att.cached_attend(stage[1], cache, 0, block)
            torch.testing.assert_close(out, joint[1], rtol=1e-5, atol=1e-6)

    def test_batch_independence(self):
        torch.manual_seed(11)
        block = att.AlternatingBlock(32, heads=4)
        anchor = torch.randn(4, 32)
        q1, q2 = torch.randn(6, 32), torch.randn(6, 32)
        mask = att.build_localization_mask([(0, 4)], [(1, 6), (2, 6)])
        joint, stage = block([anchor, q1, q2], mask=mask)
        cache = att.RepresentationCache([stage[0]], np.zeros(4, dtype=int))
        sep1 = att.cached_attend(stage[1], cache, 0, block)
        sep2 = att.cached_attend(stage[2], cache, 0, block)
        torch.testing.assert_close(sep1, joint[1], rtol=1e-5, atol=1e-6)
        torch.testing.assert_close(sep2, joint[2], rtol=1e-5, atol=1e-6)

    def test_batched_queries_match_loop(self):
        torch.manual_seed(13)
        block = att.AlternatingBlock(32, heads=4)
        cache = att.RepresentationCache([torch.randn(7, 32)], np.zeros(7, dtype=int))
        queries = torch.randn(4, 6, 32)
        batched = att.cached_attend(queries, cache, 0, block)
        for b in range(4):
            single = att.cached_attend(queries[b], cache, 0, block)
            torch.testing.assert_close(batched[b], single, rtol=1e-5, atol=1e-6)

    def test_cache_miss(self):
        block = att.AlternatingBlock(16, heads=2)
        cache = att.RepresentationCache([torch.zeros(0, 16)], np.zeros(0, dtype=int))
        with pytest.raises(att.CacheMissError):
            att.cached_attend(torch.randn(2, 16), cache, 0, block)
        with pytest.raises(att.CacheMissError):
            att.cached_attend(torch.randn(2, 16), cache, 5, block)
