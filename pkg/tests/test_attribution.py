import math
import random
import statistics

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from attnrobust.attribution import (
    AttributionReport,
    agreement_report,
    attention_importance,
    build_reports,
    gradient_importance,
    kendall_tau,
    read_reports,
    render_heatmap,
    render_page,
    saliency_from_embeddings,
    summarize,
    write_reports,
)
from attnrobust.data import TokenBatch
from attnrobust.errors import InvalidArgument

from conftest import make_model, random_batch


# --- Kendall tau-b ---------------------------------------------------------


def _tau_brute(x, y):
    """O(n^2) pair enumeration."""
    n = len(x)
    conc = disc = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = x[i] - x[j], y[i] - y[j]
            if dx == 0 and dy == 0:
                continue
            if dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif (dx > 0) == (dy > 0):
                conc += 1
            else:
                disc += 1
    denom = math.sqrt((conc + disc + tx) * (conc + disc + ty))
    return math.nan if denom == 0 else (conc - disc) / denom


def test_tau_closed_cases():
    assert kendall_tau([1, 2, 3], [1, 2, 3]) == 1.0
    assert kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0
    assert kendall_tau([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3, abs=1e-15)


def test_tau_undefined_and_errors():
    assert math.isnan(kendall_tau([1, 1, 1], [1, 2, 3]))
    with pytest.raises(InvalidArgument):
        kendall_tau([1], [1])
    with pytest.raises(InvalidArgument):
        kendall_tau([1, 2], [1, 2, 3])
    with pytest.raises(InvalidArgument):
        kendall_tau([1, float("nan")], [1, 2])


def test_tau_matches_brute_force_with_ties():
    rng = random.Random(0)
    for _ in range(500):
        n = rng.randint(2, 30)
        levels = rng.randint(1, 6)
        x = [rng.randint(0, levels) for _ in range(n)]
        y = [rng.randint(0, levels) for _ in range(n)]
        expected, got = _tau_brute(x, y), kendall_tau(x, y)
        if math.isnan(expected):
            assert math.isnan(got)
        else:
            assert abs(got - expected) < 1e-12


def test_tau_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(2, 200))
        x = rng.integers(0, 20, n).tolist()
        y = (rng.normal(size=n) + 0.05 * np.array(x)).round(1).tolist()
        ref = stats.kendalltau(x, y).statistic
        got = kendall_tau(x, y)
        assert (math.isnan(ref) and math.isnan(got)) or abs(got - ref) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=2, max_size=40))
def test_tau_symmetry_and_monotone_invariance(pairs):
    x, y = [p[0] for p in pairs], [p[1] for p in pairs]
    t = kendall_tau(x, y)
    if math.isnan(t):
        assert math.isnan(kendall_tau(y, x))
        return
    assert -1.0 <= t <= 1.0
    assert kendall_tau(y, x) == t
    assert abs(kendall_tau([math.exp(v) for v in x], [3 * v + 1 for v in y]) - t) < 1e-12
    assert abs(kendall_tau([-v for v in x], y) + t) < 1e-12


# --- gradient importance ---------------------------------------------------


def test_saliency_linear_model_closed_form():
    gen = torch.Generator().manual_seed(0)
    W = torch.randn(3, 2, generator=gen, dtype=torch.float64)
    emb = torch.randn(1, 4, 3, generator=gen, dtype=torch.float64)
    mask = torch.tensor([[True, True, True, False]])

    def fn(e):
        return torch.softmax((e * mask.unsqueeze(-1)).sum(1) @ W, dim=-1)

    imp, g = saliency_from_embeddings(fn, emb, mask, torch.tensor([1]), "grad_x_input")
    p = fn(emb)[0].tolist()
    # d p_1 / d e_t = p_1 (W[:, 1] - sum_k p_k W[:, k]) for every masked-in t
    grad = [p[1] * (float(W[i, 1]) - sum(p[k] * float(W[i, k]) for k in range(2))) for i in range(3)]
    for t in range(3):
        expected = abs(sum(grad[i] * float(emb[0, t, i]) for i in range(3)))
        assert float(imp[0, t]) == pytest.approx(expected, abs=1e-14)
    assert float(imp[0, 3]) == 0.0
    l2, _ = saliency_from_embeddings(fn, emb, mask, torch.tensor([1]), "grad_l2")
    assert float(l2[0, 0]) == pytest.approx(math.sqrt(sum(v * v for v in grad)), abs=1e-14)


def test_constant_model_has_zero_importance():
    model, batch = make_model(), random_batch()
    with torch.no_grad():
        model.out.weight.zero_()
    sal = gradient_importance(model, batch)
    assert all(v == 0.0 for row in sal.values for v in row)


@pytest.mark.parametrize("reduction", ["grad_x_input", "grad_l2"])
def test_gradient_importance_finite_differences(reduction):
    model, batch = make_model(seed=7), random_batch(B=3, seed=7)
    sal = gradient_importance(model, batch, classes=1, reduction=reduction)
    emb = model.embed(batch.ids).detach()
    h = 1e-6
    with torch.no_grad():
        for b in range(3):
            n = int(batch.lengths[b])
            assert len(sal.values[b]) == n
            for t in range(n):
                g = []
                for i in range(emb.shape[-1]):
                    vals = []
                    for sign in (1, -1):
                        e = emb.clone()
                        e[b, t, i] += sign * h
                        vals.append(float(model.forward_embedded(e, batch.lengths, batch.mask)[0].probs[b, 1]))
                    g.append((vals[0] - vals[1]) / (2 * h))
                if reduction == "grad_x_input":
                    expected = abs(sum(gi * float(emb[b, t, i]) for i, gi in enumerate(g)))
                else:
                    expected = math.sqrt(sum(gi * gi for gi in g))
                assert sal.values[b][t] == pytest.approx(expected, abs=1e-8)


def test_gradient_importance_default_class_and_errors():
    model, batch = make_model(seed=1), random_batch(seed=1)
    with torch.no_grad():
        pred = model(batch)[0].logits.argmax(-1).tolist()
    assert gradient_importance(model, batch).classes == pred
    with pytest.raises(InvalidArgument):
        gradient_importance(model, batch, classes=5)
    with pytest.raises(InvalidArgument):
        gradient_importance(model, batch, reduction="nope")


# --- attention importance --------------------------------------------------


def test_single_token_attention_is_one():
    model = make_model()
    batch = TokenBatch(torch.tensor([[4, 0, 0]]), torch.tensor([1]), torch.tensor([[True, False, False]]))
    assert attention_importance(model, batch) == [[1.0]]


def test_attention_importance_equals_forward_record():
    model, batch = make_model(seed=2), random_batch(seed=2)
    with torch.no_grad():
        _, att = model(batch)
    rows = attention_importance(model, batch)
    for b, row in enumerate(rows):
        assert row == att.weights[b, : int(batch.lengths[b])].tolist()


def test_duplicate_tokens_share_weight_without_recurrence():
    model = make_model(seed=3)
    with torch.no_grad():
        # no recurrent weights and a closed update gate: each hidden state
        # depends on its own token only
        m = model.rnn.hidden_size
        for sfx in ("l0", "l0_reverse"):
            getattr(model.rnn, f"weight_hh_{sfx}").zero_()
            getattr(model.rnn, f"bias_ih_{sfx}")[m : 2 * m] = -1000.0
    ids = torch.tensor([[5, 7, 5, 9, 7]])
    batch = TokenBatch(ids, torch.tensor([5]), torch.ones(1, 5, dtype=torch.bool))
    (row,) = attention_importance(model, batch)
    assert row[0] == pytest.approx(row[2], abs=1e-15)
    assert row[1] == pytest.approx(row[4], abs=1e-15)


# --- reports ---------------------------------------------------------------


def test_build_reports_skips_and_identity():
    reports = build_reports(
        [["a"], ["a", "b", "c"], ["a", "b"]],
        [[0.3], [0.1, 0.2, 0.3], [0.5, 0.5]],
        [[1.0], [0.2, 0.3, 0.5], [0.4, 0.6]],
        [0, 1, 1],
    )
    assert reports[0].tau is None
    assert reports[1].tau == 1.0
    assert reports[2].tau is None  # constant ranking
    summary = summarize(reports)
    assert (summary.n_examples, summary.n_scored, summary.skipped) == (3, 1, 2)
    assert summary.mean_tau == 1.0


def test_agreement_summary_recomputes_from_dump(tmp_path):
    model, batch = make_model(seed=4), random_batch(B=100, T=8, seed=4)
    reports, summary = agreement_report(model, batch, label_names=["neg", "pos"], chunk=32)
    assert len(reports) == 100
    write_reports(tmp_path / "r.jsonl", reports)
    back = read_reports(tmp_path / "r.jsonl")
    assert [r.to_json() for r in back] == [r.to_json() for r in reports]
    taus = []
    for r in back:
        if len(r.tokens) >= 2:
            t = _tau_brute(r.attention, r.grad_importance)
            if not math.isnan(t):
                taus.append(t)
    assert summary.n_scored == len(taus)
    assert summary.skipped == 100 - len(taus)
    assert abs(summary.mean_tau - sum(taus) / len(taus)) < 1e-12
    assert abs(summary.median_tau - statistics.median(taus)) < 1e-12
    assert sum(v["n"] for v in summary.per_class.values()) == len(taus)


def test_single_token_examples_are_skipped():
    model = make_model()
    batch = TokenBatch(torch.tensor([[3], [4]]), torch.tensor([1, 1]), torch.ones(2, 1, dtype=torch.bool))
    _, summary = agreement_report(model, batch)
    assert summary.skipped == 2 and summary.mean_tau is None


def test_report_floats_round_trip(tmp_path):
    r = AttributionReport(["x", "y"], [0.1 + 0.2, 1 / 3], [math.pi / 10, 1 - math.pi / 10], -1.0, 1, 0)
    write_reports(tmp_path / "r.jsonl", [r])
    (back,) = read_reports(tmp_path / "r.jsonl")
    assert back == r


# --- heatmaps --------------------------------------------------------------


def test_heatmap_uniform_and_one_hot():
    uniform = AttributionReport(["a", "b", "c"], [0.2, 0.2, 0.2], [1 / 3] * 3, None, 0)
    html_u = render_heatmap(uniform)
    assert html_u.count("rgb(255,0,0)") == 3
    one_hot = AttributionReport(["a", "b", "c"], [0.0, 0.5, 0.0], [0.0, 1.0, 0.0], 1.0, 1)
    html_o = render_heatmap(one_hot, ["neg", "pos"])
    assert html_o.count("rgb(255,0,0)") == 1 and html_o.count("rgb(0,0,255)") == 1
    # zero cells are white in both rows
    assert html_o.count("rgb(255,255,255)") == 4
    assert "pred=pos" in html_o


def test_heatmap_is_deterministic_and_escaped():
    r = AttributionReport(["<b>", "&"], [0.1, 0.2], [0.4, 0.6], 1.0, 0)
    page = render_page([r], "t")
    assert page == render_page([r], "t")
    assert "<b>" not in page.split("<body>")[1].replace("<body>", "")
    assert "&lt;b&gt;" in page
