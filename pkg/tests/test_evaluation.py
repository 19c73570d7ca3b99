"""困惑度、吞吐、生成困惑度、ELO 与探针"""
import math

import numpy as np
import pytest

from maria.evaluation.elo import bradley_terry, components, win_matrix
from maria.evaluation.generative import generative_ppl, sample_nll
from maria.evaluation.perplexity import (
    MIN_MASKED_TOKENS,
    evaluate_rates,
    masked_ppl_ar,
    masked_ppl_maria,
    masked_ppl_mlm_ardecode,
    ppl_of,
    rolling_ppl,
    subsample,
)
from maria.evaluation.probe import (
    TAGS,
    generate_tagging_data,
    probe_features,
    probe_tagging,
    tagging_text,
    train_linear_probe,
)
from maria.evaluation.throughput import fit_loglog, throughput_bench
from maria.exceptions import ContractError, LengthError, ModeError, UsageError
from maria.schemas import ComparisonRecord
from maria.transformer import TransformerModel
from tests.conftest import tiny_config


# ============== 困惑度 ==============

def test_masked_ppl_methods_share_masks(maria_model, byte_windows):
    maria = masked_ppl_maria(maria_model, byte_windows, 0.5, seed=1)
    ar = masked_ppl_ar(maria_model.ar, byte_windows, 0.5, seed=1)
    mlm = masked_ppl_mlm_ardecode(maria_model.mlm, byte_windows, 0.5, seed=1)
    assert maria.tokens == ar.tokens == mlm.tokens == 12 * 8
    assert mlm.forwards == 12 * 8
    for entry in (maria, ar, mlm):
        assert not entry.insufficient
        assert entry.ppl == pytest.approx(math.exp(entry.nll_sum / entry.tokens))


def test_random_models_score_near_uniform(maria_model, byte_windows):
    entry = masked_ppl_maria(maria_model, byte_windows, 0.3)
    assert entry.ppl == pytest.approx(260, rel=0.1)


def test_rate_zero_has_no_tokens(maria_model, byte_windows, log_messages):
    entry = masked_ppl_maria(maria_model, byte_windows, 0.0)
    assert entry.tokens == 0 and entry.ppl is None and entry.insufficient


def test_insufficient_flag(maria_model, byte_windows):
    entry = masked_ppl_ar(maria_model.ar, byte_windows[:1], 0.25)
    assert entry.tokens == 4 < MIN_MASKED_TOKENS
    assert entry.insufficient


def test_evaluate_rates(maria_model, byte_windows):
    entries = evaluate_rates("maria", maria_model, byte_windows, [0.2, 0.8], seed=0, dataset="bytes")
    assert [e.rate for e in entries] == [0.2, 0.8]
    assert all(e.dataset == "bytes" for e in entries)
    assert ppl_of(entries, "maria", 0.8) == entries[1].ppl
    with pytest.raises(UsageError):
        evaluate_rates("nope", maria_model, byte_windows, [0.5])


def test_rolling_ppl(maria_model):
    stream = np.random.default_rng(0).integers(0, 256, size=50)
    ar = rolling_ppl(maria_model.ar, stream, 16)
    fused = rolling_ppl(maria_model, stream, 16)
    assert ar.method == "rolling_ar" and fused.method == "rolling_maria"
    assert ar.tokens == fused.tokens == 50
    assert ar.forwards == 4


def test_rolling_ppl_contract(maria_model):
    with pytest.raises(ModeError):
        rolling_ppl(maria_model.mlm, [1, 2, 3], 2)
    with pytest.raises(LengthError):
        rolling_ppl(maria_model.ar, [1, 2, 3], 64)


def test_subsample_is_seeded(byte_windows):
    a, b = subsample(byte_windows, 5, seed=2), subsample(byte_windows, 5, seed=2)
    assert a.shape == (5, 16) and np.array_equal(a, b)
    assert len(subsample(byte_windows, 100)) == len(byte_windows)


# ============== 吞吐 ==============

def test_loglog_fit_recovers_exponent():
    lengths = [64, 128, 256, 512]
    fit = fit_loglog("quad", lengths, [1e-6 * n ** 2 for n in lengths])
    assert fit.slope == pytest.approx(2.0)
    assert fit.r2 == pytest.approx(1.0)


def test_throughput_bench(maria_model):
    report = throughput_bench(maria_model, ["maria_cached", "mlm_ardecode"], [8, 16], runs=2, warmups=1)
    assert len(report.points) == 4
    assert [f.method for f in report.fits] == ["maria_cached", "mlm_ardecode"]
    for point in report.points:
        assert len(point.wall_times_s) == 2
        assert point.masked_tokens == point.length // 2


def test_throughput_bench_validation(maria_model):
    with pytest.raises(UsageError):
        throughput_bench(maria_model, ["bogus"], [8])
    with pytest.raises(LengthError):
        throughput_bench(maria_model, ["maria_cached"], [64])
    with pytest.raises(ValueError):
        throughput_bench(maria_model, ["maria_cached"], [16, 8], runs=1)


# ============== 生成困惑度 ==============

def test_generative_ppl_of_flat_scorer():
    scorer = TransformerModel.init(tiny_config(), seed=0)
    scorer.params["head"].data[:] = 0.0
    assert sample_nll(scorer, [1, 2, 3]) == pytest.approx(math.log(260), rel=1e-5)
    assert generative_ppl(scorer, [[1, 2], [3, 4, 5]]) == pytest.approx(260, rel=1e-4)


def test_generative_ppl_edge_cases(mlm_model, ar_model):
    assert generative_ppl(ar_model, [[], []]) is None
    with pytest.raises(ModeError):
        generative_ppl(mlm_model, [[1, 2]])


# ============== ELO ==============

def _planted_records(ratings, games=1000):
    names = sorted(ratings)
    records = []
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            p = 1.0 / (1.0 + 10 ** ((ratings[b] - ratings[a]) / 400))
            wins = round(p * games)
            records += [ComparisonRecord(a=a, b=b, outcome="a")] * wins
            records += [ComparisonRecord(a=a, b=b, outcome="b")] * (games - wins)
    return records


def test_bradley_terry_recovers_planted_ratings():
    planted = {"alpha": 1200.0, "beta": 1000.0, "gamma": 800.0}
    table = bradley_terry(_planted_records(planted))
    assert table.diagnostics.converged and table.diagnostics.connected
    for name, rating in planted.items():
        assert table.ratings[name] == pytest.approx(rating, abs=5)
    assert np.mean(list(table.ratings.values())) == pytest.approx(1000.0)
    assert table.win_probability("alpha", "gamma") > 0.9


def _sampled_records(ratings, games, seed=0):
    rng = np.random.default_rng(seed)
    names = sorted(ratings)
    records = []
    for _ in range(games):
        a, b = (str(x) for x in rng.choice(names, size=2, replace=False))
        p = 1.0 / (1.0 + 10 ** ((ratings[b] - ratings[a]) / 400))
        records.append(ComparisonRecord(a=a, b=b, outcome="a" if rng.random() < p else "b"))
    return records


def test_bradley_terry_recovers_sampled_games():
    planted = {"low": 1000.0, "mid": 1100.0, "high": 1200.0}
    table = bradley_terry(_sampled_records(planted, 2000))
    assert table.diagnostics.converged
    # 评分按连通分量居中到 init，只比较相对值
    offset = np.mean(list(planted.values())) - np.mean(list(table.ratings.values()))
    for name, rating in planted.items():
        assert table.ratings[name] + offset == pytest.approx(rating, abs=30)


def test_sample_comparison_fixture_is_seeded():
    from scripts.init_test_data import SAMPLE_MODELS, sample_comparisons

    a, b = sample_comparisons(300, seed=3), sample_comparisons(300, seed=3)
    assert a == b
    assert all(r.a != r.b and {r.a, r.b} <= set(SAMPLE_MODELS) for r in a)
    table = bradley_terry(a)
    assert table.ratings["maria"] > table.ratings["ar_only"]


def test_bradley_terry_is_order_independent():
    records = _sampled_records({"a": 1100.0, "b": 1000.0, "c": 950.0}, 500)
    shuffled = list(records)
    np.random.default_rng(0).shuffle(shuffled)
    a, b = bradley_terry(records), bradley_terry(shuffled)
    for name in a.ratings:
        assert a.ratings[name] == pytest.approx(b.ratings[name], abs=1e-9)


def test_ties_split_evenly():
    records = [ComparisonRecord(a="x", b="y", outcome="tie")] * 3
    names, wins = win_matrix(records)
    assert wins.tolist() == [[0.0, 1.5], [1.5, 0.0]]
    table = bradley_terry(records)
    assert table.ratings["x"] == pytest.approx(table.ratings["y"])


def test_disconnected_graph(log_messages):
    records = [
        ComparisonRecord(a="a", b="b", outcome="a"),
        ComparisonRecord(a="b", b="a", outcome="a"),
        ComparisonRecord(a="c", b="d", outcome="tie"),
    ]
    table = bradley_terry(records)
    assert not table.diagnostics.connected
    assert table.diagnostics.components == [["a", "b"], ["c", "d"]]
    assert any("不连通" in m for m in log_messages)


def test_perfect_separation_needs_l2(log_messages):
    records = [ComparisonRecord(a="a", b="b", outcome="a")] * 5
    table = bradley_terry(records, max_iter=20)
    assert not table.diagnostics.converged
    regularized = bradley_terry(records, l2=0.1)
    assert regularized.diagnostics.converged
    assert regularized.ratings["a"] > regularized.ratings["b"]


def test_custom_scale():
    records = _planted_records({"a": 1100.0, "b": 900.0})
    table = bradley_terry(records, scale=200.0, base=math.e, init=0.0)
    assert table.ratings["a"] + table.ratings["b"] == pytest.approx(0.0, abs=1e-9)


def test_bradley_terry_contract():
    with pytest.raises(ContractError):
        bradley_terry([])
    with pytest.raises(ValueError):
        ComparisonRecord(a="x", b="x", outcome="a")


def test_components_union_find():
    games = np.zeros((4, 4))
    games[0, 2] = games[2, 0] = 1
    assert components(["w", "x", "y", "z"], games) == [["w", "y"], ["x"], ["z"]]


# ============== 探针 ==============

def test_probe_reaches_perfect_accuracy_on_separable_features():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 4, size=400)
    x = np.eye(4)[y] + rng.normal(0, 0.01, size=(400, 4))
    acc, stderr = train_linear_probe(x[:300], y[:300], x[300:], y[300:], epochs=30, lr=0.05)
    assert acc == 1.0 and stderr == 0.0


def test_probe_needs_two_classes():
    x = np.zeros((10, 3))
    with pytest.raises(ContractError):
        train_linear_probe(x, np.zeros(10), x, np.zeros(10))


def test_tagging_data_shapes():
    data = generate_tagging_data(3, 40, seed=0)
    assert len(data) == 3
    for seq in data:
        assert seq.tokens.shape == seq.labels.shape == (40,)
        assert seq.labels.max() < len(TAGS)
    assert tagging_text(5, seed=1) == tagging_text(5, seed=1)


def test_probe_features(maria_model):
    tokens = generate_tagging_data(1, 20)[0].tokens
    assert probe_features(maria_model.mlm, tokens, "mlm").shape == (20, 12)
    assert probe_features(maria_model.mlm, tokens, "concat", maria_model.ar).shape == (20, 28)
    with pytest.raises(ContractError):
        probe_features(maria_model.mlm, tokens, "concat")
    with pytest.raises(ContractError):
        probe_features(maria_model.mlm, tokens, "ar_only")


def test_probe_tagging_runs(maria_model):
    train = generate_tagging_data(6, 24, seed=0)
    test = generate_tagging_data(2, 24, seed=1)
    result = probe_tagging(maria_model.mlm, train, test, "concat", epochs=2, lr=1e-3, ar=maria_model.ar)
    assert 0.0 <= result.accuracy <= 1.0
    assert result.n_test == 48 and result.num_classes == len(TAGS)
