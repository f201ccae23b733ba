import itertools
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from kamamba.sparse import (
    SparseAttentionMamba,
    SpatialSDM,
    SpectralSDM,
    TemporalSDM,
    TokenSelection,
    anchor_index,
    anchor_similarity,
    attention_map,
    gather_tokens,
    keep_count,
    rowcol_topk_union,
    scatter_residual,
    spatial_prune,
    union_mask,
)
from kamamba.tokens import from_spectral_tokens


def zero_mamba(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class TestKeepCount:
    @pytest.mark.parametrize("n, k", [(169, 50), (12, 3), (23, 6), (10, 3)])
    def test_defaults(self, n, k):
        assert keep_count(0.3, n) == k

    def test_zero_keep_rejected(self):
        with pytest.raises(ValueError, match="keeps no tokens"):
            keep_count(0.3, 3)

    @pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
    def test_ratio_range(self, ratio):
        with pytest.raises(ValueError):
            keep_count(ratio, 10)


class TestAnchorSimilarity:
    def test_anchor_index(self):
        assert anchor_index(13, 13) == 84

    def test_self_zero_and_opposite_pi(self):
        s = torch.randn(1, 9, 5)
        s[0, 2] = s[0, 4]
        s[0, 7] = -s[0, 4]
        a = anchor_similarity(s)
        assert a[0, 4] == 0
        assert a[0, 2] == pytest.approx(0.0, abs=1e-3)
        assert a[0, 7] == pytest.approx(math.pi, abs=1e-3)

    def test_zero_norm_token_flagged(self):
        s = torch.randn(2, 9, 3)
        s[1, 0] = 0
        a, flags = anchor_similarity(s, return_flags=True)
        assert a[1, 0] == pytest.approx(math.pi / 2)
        assert flags[1, 0] and flags.sum() == 1

    def test_matches_pairwise_oracle(self, float64):
        s = torch.randn(3, 16, 7)
        a = anchor_similarity(s)
        anchor = 7
        for b, i in itertools.product(range(3), range(16)):
            if i == anchor:
                continue
            x, y = s[b, i].tolist(), s[b, anchor].tolist()
            cos = sum(p * q for p, q in zip(x, y)) / math.sqrt(sum(p * p for p in x) * sum(q * q for q in y))
            assert a[b, i].item() == pytest.approx(math.acos(cos), abs=1e-6)

    def test_range(self):
        a = anchor_similarity(torch.randn(4, 25, 6))
        assert (a >= 0).all() and (a <= math.pi).all()


class TestSpatialPrune:
    def test_sort_example(self):
        s = torch.randn(1, 4, 3)
        sel, condensed = spatial_prune(s, torch.tensor([[0.1, 0.3, 0.2, 0.4]]), ratio=0.5)
        assert sel.kept(0) == [0, 2]
        assert torch.equal(condensed[0], s[0, [0, 2]])

    def test_full_ratio_is_identity(self):
        s = torch.randn(2, 10, 3)
        sel, condensed = spatial_prune(s, torch.rand(2, 10), ratio=1.0)
        assert sel.kept(1) == list(range(10))
        assert torch.equal(condensed, s)

    def test_default_count(self):
        s = torch.randn(2, 169, 4)
        sel, condensed = spatial_prune(s, anchor_similarity(s))
        assert condensed.shape == (2, 50, 4)
        assert 84 in sel.kept(0)

    def test_ties_go_to_lower_index(self):
        sel, _ = spatial_prune(torch.randn(1, 6, 2), torch.tensor([[0.5, 0.1, 0.5, 0.5, 0.1, 0.9]]), 0.5)
        assert sel.kept(0) == [0, 1, 4]

    def test_similarity_order_option(self):
        sel, _ = spatial_prune(torch.randn(1, 4, 2), torch.tensor([[0.3, 0.1, 0.2, 0.4]]), 0.75,
                               order="similarity")
        assert sel.indices[0].tolist() == [1, 2, 0]
        with pytest.raises(ValueError):
            spatial_prune(torch.randn(1, 4, 2), torch.rand(1, 4), 0.5, order="random")

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
    def test_monotone_in_ratio(self, seed, r1, r2):
        lo, hi = sorted((r1, r2))
        g = torch.Generator().manual_seed(seed)
        angles = torch.rand(1, 40, generator=g).round(decimals=1)  # force ties
        s = torch.zeros(1, 40, 1)
        small = set(spatial_prune(s, angles, lo)[0].kept(0))
        large = set(spatial_prune(s, angles, hi)[0].kept(0))
        assert small <= large


class TestScatter:
    def sel(self, idx, n):
        idx = torch.tensor(idx)
        return TokenSelection(idx, torch.ones_like(idx, dtype=torch.bool), n, 0.5)

    def test_zero_update_is_identity(self):
        x = torch.randn(2, 6, 3)
        sel = self.sel([[0, 4], [1, 2]], 6)
        assert torch.equal(scatter_residual(x, torch.zeros(2, 2, 3), sel), x)

    def test_select_all_is_residual_add(self):
        x, y = torch.randn(2, 5, 3), torch.randn(2, 5, 3)
        sel = self.sel([list(range(5))] * 2, 5)
        assert torch.equal(scatter_residual(x, y, sel), x + y)

    def test_matches_loop_oracle(self):
        x, y = torch.randn(3, 8, 4), torch.randn(3, 3, 4)
        sel = self.sel([[0, 3, 7], [1, 2, 5], [2, 4, 6]], 8)
        out = scatter_residual(x, y, sel)
        expected = x.clone()
        for b in range(3):
            for pos, i in enumerate(sel.kept(b)):
                expected[b, i] = x[b, i] + y[b, pos]
        assert torch.equal(out, expected)

    def test_padded_slots_ignored(self):
        x = torch.randn(1, 5, 2)
        sel = TokenSelection(torch.tensor([[1, 0]]), torch.tensor([[True, False]]), 5, 0.5)
        out = scatter_residual(x, torch.ones(1, 2, 2), sel)
        assert torch.equal(out[0, 0], x[0, 0])
        assert torch.equal(gather_tokens(x, sel)[0, 1], torch.zeros(2))

    def test_errors(self):
        x = torch.randn(1, 4, 2)
        with pytest.raises(IndexError):
            scatter_residual(x, torch.zeros(1, 1, 2), self.sel([[4]], 4))
        with pytest.raises(ValueError, match="condensed shape"):
            scatter_residual(x, torch.zeros(1, 2, 2), self.sel([[1]], 4))


class TestAttentionSelection:
    def test_identical_tokens_uniform_rows(self):
        lin_q, lin_k = torch.nn.Linear(5, 8, bias=False), torch.nn.Linear(5, 8, bias=False)
        am = attention_map(torch.ones(1, 12, 5), lin_q, lin_k)
        torch.testing.assert_close(am, torch.full((1, 12, 12), 1 / 12))

    def test_matches_softmax_oracle(self, float64):
        lin_q, lin_k = torch.nn.Linear(5, 8, bias=False), torch.nn.Linear(5, 8, bias=False)
        x = torch.randn(2, 7, 5)
        am = attention_map(x, lin_q, lin_k)
        q, k = x @ lin_q.weight.T, x @ lin_k.weight.T
        for b, i in itertools.product(range(2), range(7)):
            logits = [(q[b, i] @ k[b, j]).item() / math.sqrt(8) for j in range(7)]
            z = sum(math.exp(v) for v in logits)
            for j in range(7):
                assert am[b, i, j].item() == pytest.approx(math.exp(logits[j]) / z, abs=1e-6)
        torch.testing.assert_close(am.sum(-1), torch.ones(2, 7))

    def test_uniform_map_picks_lowest_indices(self):
        sel, _ = rowcol_topk_union(torch.full((1, 12, 12), 1 / 12), 0.3)
        assert sel.kept(0) == [0, 1, 2]

    def test_dominant_column_selected(self):
        am = torch.softmax(torch.randn(1, 12, 12), -1) * 0.1
        am[0, :, 9] += 0.9
        sel, _ = rowcol_topk_union(am, 0.3)
        assert 9 in sel.kept(0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(4, 24))
    def test_union_size_and_mask_predicate(self, seed, n):
        g = torch.Generator().manual_seed(seed)
        am = torch.softmax(torch.randn(1, n, n, generator=g) * 3, -1)
        sel, mask = rowcol_topk_union(am, 0.3)
        k = keep_count(0.3, n)
        members = set(sel.kept(0))
        assert k <= len(members) <= 2 * k
        assert sel.kept(0) == sorted(members)
        for i, j in itertools.product(range(n), repeat=2):
            assert bool(mask[0, i, j]) == (i in members or j in members)

    def test_union_mask_shape(self):
        member = torch.tensor([[True, False, False]])
        assert union_mask(member).int().tolist() == [[[1, 1, 1], [1, 0, 0], [1, 0, 0]]]


class TestStages:
    def test_spatial_shapes_and_max_dominance(self):
        torch.manual_seed(0)
        spa = SpatialSDM(12, 23)
        s = torch.randn(2, 169, 276)
        out, spectral, sel = spa(s)
        assert out.shape == (2, 169, 276) and spectral.shape == (2, 12, 23)
        pooled = from_spectral_tokens(spectral)
        assert (pooled[:, None, :] >= out).all()
        assert sel.counts.tolist() == [50, 50]

    def test_spatial_constant_field(self):
        spa = SpatialSDM(2, 3)
        zero_mamba(spa.mamba)
        s = torch.arange(6.0).expand(1, 25, 6).clone()
        _, spectral, _ = spa(s)
        assert torch.equal(from_spectral_tokens(spectral)[0], torch.arange(6.0))

    def test_residual_identity_when_mamba_zeroed(self):
        torch.manual_seed(1)
        spa = SpatialSDM(3, 4)
        zero_mamba(spa.mamba)
        s = torch.randn(2, 25, 12)
        assert torch.equal(spa(s)[0], s)
        spe = SpectralSDM(4, 7, d_attn=8)
        zero_mamba(spe.block.mamba)
        f = torch.randn(2, 4, 7)
        assert torch.equal(spe.block(f)[0], f)
        tem = TemporalSDM(4, 7, 25, d_attn=8)
        zero_mamba(tem.block.mamba)
        z = torch.randn(2, 28, 25)
        assert torch.equal(tem(z)[0], tem.compress(z))

    def test_pruned_tokens_get_no_branch_gradient(self):
        torch.manual_seed(2)
        spa = SpatialSDM(3, 4)
        s = torch.randn(1, 25, 12, requires_grad=True)
        out, _, sel = spa(s)
        (out - s).pow(2).sum().backward()
        kept = torch.zeros(25, dtype=torch.bool)
        kept[sel.kept(0)] = True
        assert torch.equal(s.grad[0, ~kept], torch.zeros_like(s.grad[0, ~kept]))
        assert s.grad[0, kept].abs().sum() > 0

    def test_spectral_output_and_uppool(self):
        torch.manual_seed(3)
        spe = SpectralSDM(12, 23)
        z, out, am, sel = spe(torch.randn(2, 12, 23), torch.randn(2, 169, 276))
        assert z.shape == (2, 276, 169) and am.shape == (2, 12, 12)
        assert all(3 <= c <= 6 for c in sel.counts.tolist())
        # broadcast up-pool: a constant spectral grid adds the same value to every position
        zero = torch.zeros(1, 25, 16)
        spe_small = SpectralSDM(4, 4, d_attn=8)
        zero_mamba(spe_small.block.mamba)
        f = torch.full((1, 4, 4), 2.5)
        z_small = spe_small(f, zero)[0]
        assert torch.equal(z_small, torch.full((1, 16, 25), 2.5))

    def test_dense_equivalence_with_full_selection(self, float64):
        torch.manual_seed(4)
        sam = SparseAttentionMamba(7, d_attn=8, ratio=1.0, d_state=4)
        f = torch.randn(2, 5, 7)
        out, am, sel, mask = sam(f)
        assert mask.all() and sel.counts.tolist() == [5, 5]
        x = sam.norm(f)
        dense = attention_map(x, sam.w_q, sam.w_k) @ sam.w_v(x)
        torch.testing.assert_close(out, f + sam.mamba(dense))

    def test_temporal_cardinalities(self):
        torch.manual_seed(5)
        tem = TemporalSDM(12, 23, 169)
        out, logits, am, sel = tem(torch.randn(2, 276, 169))
        assert out.shape == (2, 23, 169) and logits.shape == (2, 11)
        assert am.shape == (2, 23, 23)
        assert all(6 <= c <= 12 for c in sel.counts.tolist())

    def test_temporal_constant_in_time(self):
        tem = TemporalSDM(2, 10, 9, d_attn=4)
        with torch.no_grad():
            tem.compress.weight.fill_(1.0)
            tem.compress.bias.zero_()
        z = torch.randn(1, 1, 9).expand(1, 20, 9).contiguous()
        _, _, am, sel = tem(z)
        torch.testing.assert_close(am, torch.full((1, 10, 10), 0.1))
        assert sel.kept(0) == [0, 1, 2]
