import numpy as np
import pytest
import torch

import oracles
from conftest import central_difference_check
from rtpen.data import PROFILES, SamplingRule
from rtpen.errors import EmptyGridError
from rtpen.proposal_branch import (ProposalBranch, build_candidate_grid, build_moment_map,
                                   frame_to_word_attention, fuse_sequence, run_branch,
                                   score_moments, select_center_based)

ALL = SamplingRule.parse("all_pairs")


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_grid_counts():
    assert len(build_candidate_grid(8, SamplingRule.parse("mod(2,1)"))) == 16
    assert len(build_candidate_grid(6, PROFILES["didemo"])) == 21
    assert len(build_candidate_grid(4, ALL)) == 10


def test_grid_rules_and_order():
    g = build_candidate_grid(20, PROFILES["activitycaption"])
    assert all((b - a) % 8 == 0 for a, b in g.valid_cells)
    assert (0, 0) in g.cell_index      # single-frame cells satisfy 0 mod 8
    assert g.valid_cells == sorted(g.valid_cells)
    with pytest.raises(EmptyGridError):
        build_candidate_grid(1, SamplingRule.parse("mod(2,1)"))


def test_frame_to_word_special_cases(rng):
    d_h = 5
    W1, W2 = t(rng.standard_normal((d_h, 3))), t(rng.standard_normal((d_h, 4)))
    b, w = t(rng.standard_normal(d_h)), t(rng.standard_normal(d_h))
    V = t(rng.standard_normal((6, 3)))
    q1 = t(rng.standard_normal((1, 4)))
    att = frame_to_word_attention(V, q1, W1, W2, b, w)
    np.testing.assert_allclose(att.weights.numpy(), 1.0)
    np.testing.assert_allclose(att.context.numpy(), np.repeat(q1.numpy(), 6, 0))
    same = q1.repeat(3, 1)
    np.testing.assert_allclose(frame_to_word_attention(V, same, W1, W2, b, w).context.numpy(),
                               np.repeat(q1.numpy(), 6, 0), rtol=1e-12)


def test_frame_to_word_matches_loop(rng):
    for _ in range(100):
        n_v, n_q, d_v, d_q, d_h = (int(x) for x in rng.integers(1, 9, 5))
        V, Q = rng.standard_normal((n_v, d_v)), rng.standard_normal((n_q, d_q))
        W1, W2 = rng.standard_normal((d_h, d_v)), rng.standard_normal((d_h, d_q))
        b, w = rng.standard_normal(d_h), rng.standard_normal(d_h)
        att = frame_to_word_attention(t(V), t(Q), t(W1), t(W2), t(b), t(w))
        delta, weights, S = oracles.frame_to_word(V, Q, W1, W2, b, w)
        assert oracles.rel_err(att.logits.numpy(), delta) <= 1e-6
        assert oracles.rel_err(att.context.numpy(), S) <= 1e-6
        np.testing.assert_allclose(att.weights.sum(-1).numpy(), 1.0, atol=1e-6)


@torch.no_grad()
def test_fuse_sequence_shapes_and_symmetry(rng):
    torch.manual_seed(0)
    rnn = torch.nn.GRU(5, 4, batch_first=True, bidirectional=True).double()
    v, s = t(rng.standard_normal((1, 3))), t(rng.standard_normal((1, 2)))
    assert fuse_sequence(v, s, rnn).shape == (1, 8)
    v, s = t(rng.standard_normal((7, 3))), t(rng.standard_normal((7, 2)))
    # a bidirectional GRU whose two directions share weights is reversal-symmetric
    for name in ("weight_ih_l0", "weight_hh_l0", "bias_ih_l0", "bias_hh_l0"):
        getattr(rnn, name + "_reverse").copy_(getattr(rnn, name))
    out = fuse_sequence(v, s, rnn)
    rev = fuse_sequence(v.flip(0), s.flip(0), rnn).flip(0)
    np.testing.assert_allclose(torch.cat([rev[:, 4:], rev[:, :4]], -1).numpy(), out.numpy(), atol=1e-12)


@torch.no_grad()
def test_fuse_sequence_zero_weights_give_zero(rng):
    rnn = torch.nn.GRU(5, 4, batch_first=True, bidirectional=True).double()
    with torch.no_grad():
        for p in rnn.parameters():
            p.zero_()
    out = fuse_sequence(t(rng.standard_normal((4, 3))), t(rng.standard_normal((4, 2))), rnn)
    np.testing.assert_array_equal(out.numpy(), 0.0)


@torch.no_grad()
def test_fuse_sequence_respects_lengths(rng):
    torch.manual_seed(1)
    rnn = torch.nn.GRU(5, 4, batch_first=True, bidirectional=True).double()
    v, s = t(rng.standard_normal((2, 6, 3))), t(rng.standard_normal((2, 6, 2)))
    out = fuse_sequence(v, s, rnn, torch.tensor([6, 4]))
    alone = fuse_sequence(v[1, :4], s[1, :4], rnn)
    np.testing.assert_allclose(out[1, :4].numpy(), alone.numpy(), atol=1e-12)


def test_moment_map_examples():
    g = build_candidate_grid(4, ALL)
    M = torch.ones(4, 2, dtype=torch.float64)
    F = build_moment_map(M, torch.from_numpy(g.mask))
    np.testing.assert_array_equal(F[1, 3].numpy(), [3.0, 3.0])
    m = t(np.arange(8).reshape(4, 2))
    F = build_moment_map(m, torch.from_numpy(g.mask))
    for k in range(4):
        np.testing.assert_array_equal(F[k, k].numpy(), m[k].numpy())
    assert F[torch.from_numpy(~g.mask)].abs().sum() == 0


def test_moment_map_matches_loop(rng):
    rules = [ALL, SamplingRule.parse("mod(2,1)"), SamplingRule.parse("mod(3)")]
    for i in range(100):
        n_v, d = int(rng.integers(2, 11)), int(rng.integers(1, 9))
        g = build_candidate_grid(n_v, rules[i % 3])
        M = rng.standard_normal((n_v, d))
        F = build_moment_map(t(M), torch.from_numpy(g.mask)).numpy()
        ref = oracles.moment_map(M, g.mask)
        np.testing.assert_allclose(F, ref, rtol=1e-6, atol=1e-12)
        assert np.abs(F[~g.mask]).sum() == 0


def _conv_pair(d_m, ch, k, seed):
    torch.manual_seed(seed)
    c1 = torch.nn.Conv2d(d_m, ch, k, padding=k // 2).double()
    c2 = torch.nn.Conv2d(ch, ch, k, padding=k // 2).double()
    return c1, c2


def test_score_moments_matches_conv_oracle(rng):
    for i in range(100):
        n_v, d_m, ch = int(rng.integers(2, 8)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        k = (1, 3, 5)[i % 3]
        g = build_candidate_grid(n_v, ALL)
        c1, c2 = _conv_pair(d_m, ch, k, i)
        wp, bp = rng.standard_normal(ch), float(rng.standard_normal())
        F = oracles.moment_map(rng.standard_normal((n_v, d_m)), g.mask)
        got = score_moments(t(F)[None], torch.from_numpy(g.mask)[None], c1, c2, t(wp), t(bp))[0]
        ref = oracles.score_map(F, g.mask, c1.weight.detach().numpy(), c1.bias.detach().numpy(),
                                c2.weight.detach().numpy(), c2.bias.detach().numpy(), wp, bp)
        np.testing.assert_allclose(got.detach().numpy()[g.mask], ref[g.mask], rtol=1e-5)


@torch.no_grad()
def test_score_moments_zero_weights_half():
    g = build_candidate_grid(5, ALL)
    c1, c2 = _conv_pair(3, 4, 3, 0)
    with torch.no_grad():
        for c in (c1, c2):
            c.weight.zero_()
            c.bias.zero_()
    F = torch.randn(1, 5, 5, 3, dtype=torch.float64)
    out = score_moments(F, torch.from_numpy(g.mask)[None], c1, c2, torch.zeros(4, dtype=torch.float64),
                        torch.zeros((), dtype=torch.float64))
    np.testing.assert_array_equal(out[0].numpy()[g.mask], 0.5)


@torch.no_grad()
def test_kernel_one_is_local(rng):
    g = build_candidate_grid(5, ALL)
    c1, c2 = _conv_pair(3, 3, 1, 0)
    mask = torch.from_numpy(g.mask)[None]
    wp, bp = t(rng.standard_normal(3)), t(0.1)
    F = t(oracles.moment_map(rng.standard_normal((5, 3)), g.mask))[None]
    base = score_moments(F, mask, c1, c2, wp, bp)
    F2 = F.clone()
    F2[0, 1, 3] += 5.0
    moved = score_moments(F2, mask, c1, c2, wp, bp)
    changed = (moved - base).abs() > 0
    assert changed[0, 1, 3] and changed.sum() == 1


def _brute_select(cells, scores, T):
    return oracles.center_based(cells, list(scores), T)


def test_select_center_based_against_brute_force(rng):
    rules = [ALL, SamplingRule.parse("mod(2,1)"), SamplingRule.parse("mod(3)")]
    for i in range(250):
        n_v = int(rng.integers(2, 11))
        g = build_candidate_grid(n_v, rules[i % 3])
        if i % 4 == 0:   # coarse scores force ties
            scores = rng.integers(0, 3, len(g)) / 2.0
        else:
            scores = rng.uniform(0, 1, len(g))
        T = int(rng.integers(1, len(g) + 3))
        got = select_center_based(scores, g, T)
        assert got.cells == _brute_select(g.valid_cells, scores, T)
        assert len(got) == min(T, len(g))


def test_select_center_based_examples():
    g = build_candidate_grid(8, ALL)
    scores = np.full(len(g), 0.1)
    scores[g.cell_index[(2, 5)]] = 0.9
    got = select_center_based(scores, g, 3)
    assert got.cells[0] == (2, 5)
    assert got.cells == _brute_select(g.valid_cells, scores, 3)
    assert select_center_based(np.full(len(g), 0.5), g, 4).cells[0] == (0, 0)
    assert len(select_center_based(scores, g, 1000)) == len(g)


def _tiny_branch(kernel=3):
    torch.manual_seed(0)
    return ProposalBranch(d_v=6, d_q=6, d_h=5, rnn_hidden=3, conv_channels=4, kernel_size=kernel).double()


def test_run_branch_deterministic_and_shared(rng):
    br = _tiny_branch()
    v, q = t(rng.standard_normal((5, 6))), t(rng.standard_normal((4, 6)))
    prof = PROFILES["synthetic"]
    p1, s1, d1 = run_branch(v, q, br, prof, T=3)
    p2, s2, d2 = run_branch(v, q, br, prof, T=3)
    assert p1.cells == p2.cells and torch.equal(s1, s2) and torch.equal(d1, d2)
    assert len(p1) == 3 and ((s1 > 0) & (s1 < 1)).all()


def test_branch_gradients_match_finite_differences(rng):
    br = _tiny_branch()
    g = build_candidate_grid(5, ALL)
    mask = torch.from_numpy(g.mask)[None]
    v, q = t(rng.standard_normal((1, 5, 6))), t(rng.standard_normal((1, 4, 6)))

    def functional():
        return br(v, q, mask).score_map.sum()

    errs = central_difference_check(functional, dict(br.named_parameters()))
    assert max(errs.values()) <= 1e-3, errs


def test_shared_branch_is_one_parameter_set(rng):
    from rtpen.model import ModelConfig, RTPEN, collate
    from conftest import make_query, make_video
    torch.manual_seed(0)
    model = RTPEN(ModelConfig(d_v=6, d_q=6, d_h=5, rnn_hidden=3, conv_channels=4, T=3))
    assert model.sp_branch is model.branch
    unshared = RTPEN(ModelConfig(d_v=6, d_q=6, d_h=5, rnn_hidden=3, conv_channels=4, T=3, share_branch=False))
    assert unshared.sp_branch is not unshared.branch
    b = collate([make_video(rng, 5, 6)], [make_query(rng, 4, 6)], PROFILES["synthetic"])
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    en = model.enhanced(b)
    sp = model.suppressed(b, en.filter_out)
    (en.k - sp.k).sum().backward()
    opt.step()
    assert model.sp_branch is model.branch
    ids = [id(p) for p in model.parameters()]
    assert len(ids) == len(set(ids))
