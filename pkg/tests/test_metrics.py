import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from recprune.errors import ContractError
from recprune.metrics import (EvalReport, evaluate, hr_at_k, hr_binomial_band, ndcg_at_k,
                              rank_target, ranks_from_logits)
from recprune.model import forward

from conftest import make_model


def sort_rank(logits, target):
    """Explicit sort oracle: descending logit, then ascending id."""
    order = sorted(range(len(logits)), key=lambda i: (-logits[i], i))
    return order.index(target) + 1


def test_rank_examples():
    assert ranks_from_logits(np.array([[0.1, 3.0, 0.2]]), [1])[0] == 1
    assert ranks_from_logits(np.zeros((1, 5)), [3])[0] == 4
    logits = np.array([0.5, 2.0, -1.0, 2.0, 0.7])
    for t in range(5):
        assert ranks_from_logits(logits[None], [t])[0] == sort_rank(logits, t)


def test_hr_ndcg_examples():
    assert hr_at_k([1], 10) == 1.0 and ndcg_at_k([1], 10) == 1.0
    assert ndcg_at_k([3], 10) == 0.5
    assert hr_at_k([11], 10) == 0.0 and ndcg_at_k([11], 10) == 0.0 and hr_at_k([11], 20) == 1.0


def test_metric_contracts():
    with pytest.raises(ContractError):
        hr_at_k([], 10)
    with pytest.raises(ContractError):
        ndcg_at_k([0], 10)
    with pytest.raises(ContractError):
        hr_at_k([1], 0)
    with pytest.raises(ContractError):
        ranks_from_logits(np.zeros((1, 3)), [3])


@settings(max_examples=80, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(2, 9)),
                  elements=st.integers(-3, 3).map(float)), st.data())
def test_ranks_invariant_under_monotone_transform(logits, data):
    targets = np.array(data.draw(st.lists(st.integers(0, logits.shape[1] - 1),
                                          min_size=logits.shape[0], max_size=logits.shape[0])))
    r = ranks_from_logits(logits, targets)
    r2 = ranks_from_logits(np.exp(logits) * 3.0 + 1.0, targets)
    np.testing.assert_array_equal(r, r2)
    for k in (1, 3, 5):
        assert ndcg_at_k(r, k) <= hr_at_k(r, k)
        assert hr_at_k(r, k) <= hr_at_k(r, k + 1)
        assert ndcg_at_k(r, k) <= ndcg_at_k(r, k + 1)


def test_rank_target_uses_last_position():
    m = make_model()
    toks = [1, 2, 3]
    logits = forward(m, toks).data[-1, :10]
    for t in (0, 4, 9):
        assert rank_target(m, toks, t, 10) == sort_rank(list(logits), t)
    with pytest.raises(ContractError):
        rank_target(m, toks, 10, 10)


def test_evaluate_keys_and_determinism(tiny_dataset):
    from recprune.model import ModelConfig, init_model

    m = init_model(ModelConfig(n_layers=1, n_heads=2, d_k=4, d_model=8, d_ff=8,
                               vocab_size=tiny_dataset.vocab_size), 0)
    a = evaluate(m, tiny_dataset, "valid", (10, 20))
    b = evaluate(m, tiny_dataset, "valid", (10, 20))
    assert a == b
    assert sorted(a.hr) == [10, 20] and sorted(a.ndcg) == [10, 20]
    assert a.n_evaluated == len(tiny_dataset.split_indices("valid"))
    assert a.ndcg[20] <= a.hr[20] and a.hr[10] <= a.hr[20]


def test_report_formats():
    rep = EvalReport(hr={10: 0.5, 20: 0.75}, ndcg={10: 0.25, 20: 0.3}, ppl=12.0,
                     n_evaluated=4, param_count_non_embedding=99, split="valid", label="x")
    text = rep.to_text()
    assert "hr@10=0.500000" in text and "param_count_non_embedding=99" in text
    head, row = rep.to_tsv().splitlines()
    assert head.split("\t")[:4] == ["label", "split", "hr@10", "ndcg@10"]
    assert row.split("\t")[0] == "x"


def test_binomial_band():
    lo, hi = hr_binomial_band(10, 100, 400)
    half = 3 * math.sqrt(0.1 * 0.9 / 400)
    assert lo == pytest.approx(0.1 - half) and hi == pytest.approx(0.1 + half)
