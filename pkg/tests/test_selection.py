import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psngame.game import DomainError
from psngame.selection import (
    SelectionContext,
    SelectionParams,
    apply_threshold,
    apply_topk,
    parse_method,
    prefilter_candidates,
    score_agents,
    select,
    shared_cost_control_gradient,
)


def _ctx(positions, velocities=None, controls=None, ego=0, prev=None):
    p = np.asarray(positions, float)
    x = np.zeros((p.shape[0], 4))
    x[:, :2] = p
    if velocities is not None:
        x[:, 2:] = velocities
    return SelectionContext(ego, x, prev, None if controls is None else np.asarray(controls, float))


def test_distance_threshold_inclusive():
    ctx = _ctx([[0, 0], [1, 0], [3, 0], [0.5, 0]])
    assert list(select(ctx, SelectionParams("Distance", d_th=1.0)).values) == [1, 0, 1]


def test_knn_picks_nearest():
    ctx = _ctx([[0, 0], [1, 0], [3, 0], [0.5, 0]])
    assert list(select(ctx, SelectionParams("kNN", k=1)).values) == [0, 0, 1]
    assert list(select(ctx, SelectionParams("kNN", k=2)).values) == [1, 0, 1]


def test_topk_ties_to_lower_index():
    assert list(apply_topk([1.0, 1.0, 0.5], 1, 0).values) == [1, 0, 0]
    with pytest.raises(DomainError):
        apply_topk([1.0, 2.0], 3, 0)


def test_threshold_rule():
    assert list(apply_threshold([0.5, 0.49, 0.9], 0.5, 0).values) == [1, 0, 1]
    with pytest.raises(DomainError):
        apply_threshold([0.5], 0.5, 0, "gt")


def test_all_and_none_and_single_agent():
    ctx = _ctx([[0, 0], [1, 0], [2, 0]])
    assert list(select(ctx, SelectionParams("All")).values) == [1, 1]
    assert list(select(ctx, SelectionParams("None")).values) == [0, 0]
    assert select(_ctx([[0, 0]]), SelectionParams("kNN")).values.size == 0


def test_gradient_baseline_matches_finite_differences(rng):
    ctx = _ctx(rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), ego=1)
    g = shared_cost_control_gradient(ctx)
    dt, w4 = ctx.dt, ctx.weights.w4

    def cost(j, u):
        pe = ctx.state[1, :2] + 2 * dt * ctx.state[1, 2:] + dt**2 * ctx.controls[1]
        pj = ctx.state[j, :2] + 2 * dt * ctx.state[j, 2:] + dt**2 * u
        return w4 * np.exp(-np.sum((pe - pj) ** 2))

    for row, j in enumerate([0, 2, 3]):
        for c in range(2):
            e = np.zeros(2)
            e[c] = 1e-6
            fd = (cost(j, ctx.controls[j] + e) - cost(j, ctx.controls[j] - e)) / 2e-6
            assert np.isclose(g[row, c], fd, rtol=1e-5, atol=1e-14)


def test_bf_prefers_agents_inside_safety_distance():
    ctx = _ctx([[0, 0], [0.3, 0], [2, 0]])
    s = score_agents(ctx, "BF", SelectionParams("BF", d_safe=0.5))
    assert s[0] > 0 > s[1]


def test_cbf_prefers_approaching_agent():
    ctx = _ctx([[0, 0], [1, 0], [-1, 0]], velocities=[[0, 0], [-1, 0], [-1, 0]])
    s = score_agents(ctx, "CBF", SelectionParams("CBF"))
    assert s[0] > s[1]


def test_cost_evolution_needs_previous_state():
    ctx = _ctx([[0, 0], [1, 0], [2, 0]])
    with pytest.raises(DomainError):
        select(ctx, SelectionParams("CostEvolution"))
    prev = np.zeros((3, 4))
    prev[:, 0] = [0, 1, 1]
    ctx = _ctx([[0, 0], [1, 0], [2, 0]], prev=prev)
    assert list(select(ctx, SelectionParams("CostEvolution", k=1)).values) == [1, 0]


def test_psn_methods_need_mask_function():
    ctx = _ctx([[0, 0], [1, 0], [2, 0]])
    with pytest.raises(DomainError):
        select(ctx, SelectionParams("PsnRank"))
    fn = lambda c, h: np.array([0.2, 0.7])  # noqa: E731
    assert list(select(ctx, SelectionParams("PsnRank", k=1), fn).values) == [0, 1]
    assert list(select(ctx, SelectionParams("PsnThreshold", m_th=0.1), fn).values) == [1, 1]


def test_parse_method_syntax():
    assert parse_method("distance:1.5") == SelectionParams("Distance", d_th=1.5)
    assert parse_method("knn:2").k == 2
    assert parse_method("psn-th:0.3").m_th == 0.3
    assert parse_method("all").label == "all"
    assert parse_method("knn:3").label == "knn:3"
    with pytest.raises(DomainError):
        parse_method("bogus:1")


@given(st.integers(2, 12), st.integers(0, 10**6))
def test_topk_selects_exactly_k(n, seed):
    rng = np.random.default_rng(seed)
    ego = int(rng.integers(n))
    ctx = _ctx(rng.normal(size=(n, 2)), ego=ego)
    k = int(rng.integers(1, n))
    m = select(ctx, SelectionParams("kNN", k=k))
    assert m.values.sum() == k and m.ego == ego


@given(st.integers(2, 25), st.integers(1, 30), st.integers(0, 10**6))
def test_prefilter_nearest(n, budget, seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n, 2))
    cand = prefilter_candidates(p, 0, budget)
    assert cand.size == min(budget, n - 1) and 0 not in cand
    d = np.linalg.norm(p - p[0], axis=1)
    rest = [j for j in range(1, n) if j not in cand]
    if rest:
        assert d[cand].max() <= d[rest].min()
