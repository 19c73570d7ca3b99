"""
端到端验收：缓存等价、乘积初始化恒等式、记忆化训练、融合头初始化对比、困惑度 / 吞吐 / 退火走势与探针趋势
较慢的用例标记为 slow（pytest -m slow）
"""
import numpy as np
import pytest

from maria import numerics as nx
from maria.data.corpus import shards_from_windows
from maria.data.tokenizer import ByteTokenizer
from maria.evaluation.generative import generative_ppl
from maria.evaluation.perplexity import masked_ppl_ar, masked_ppl_maria, masked_ppl_mlm_ardecode
from maria.evaluation.probe import generate_tagging_data, probe_tagging, tagging_text
from maria.evaluation.throughput import throughput_bench
from maria.fusion import MariaModel, bos_shift, fusion_logits, init_head, init_product
from maria.inference import generate_unconditional, infill_cached, infill_uncached, simulated_anneal
from maria.masking import apply_mask, sample_mask
from maria.numerics import Tensor, softmax_np
from maria.schemas import (
    AnnealSchedule,
    AttentionMode,
    InitKind,
    MaskMode,
    MaskRateSpec,
    ModelConfig,
    SamplerKind,
    SamplerSpec,
    TrainConfig,
)
from maria.training import eval_holdout, train_ar, train_fusion, train_mlm
from maria.transformer import TransformerModel
from tests.conftest import tiny_config


def test_product_init_identity_on_random_inputs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d1, d2, v = rng.integers(2, 12, size=3)
        W1 = Tensor(rng.normal(size=(d1, v)))
        W2 = Tensor(rng.normal(size=(d2, v)))
        head = init_product(W1, W2)
        h1, h2 = Tensor(rng.normal(size=(1, d1))), Tensor(rng.normal(size=(1, d2)))
        fused = fusion_logits(head, h1, h2).data
        expected = 0.5 * (h1.data @ W1.data + h2.data @ W2.data)
        assert np.abs(fused - expected).max() <= 1e-5
        geo = np.sqrt(softmax_np(h1.data @ W1.data) * softmax_np(h2.data @ W2.data))
        np.testing.assert_allclose(softmax_np(fused), geo / geo.sum(), atol=1e-5)


def test_tokenizer_fuzz_round_trip():
    tok = ByteTokenizer()
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        data = rng.integers(0, 256, size=int(rng.integers(0, 24)), dtype=np.uint8).tobytes()
        ids = tok.encode_bytes(data)
        assert tok.decode_bytes(ids) == data
        assert tok.encode(tok.decode(ids)) == ids


@pytest.mark.slow
@pytest.mark.parametrize("rate", [0.1, 0.5, 0.9])
def test_cached_infill_equivalence(maria_model, rate):
    rng = np.random.default_rng(int(rate * 10))
    samplers = [
        SamplerSpec.greedy(),
        SamplerSpec.at_temperature(0.7),
        SamplerSpec(kind=SamplerKind.nucleus, temperature=1.0, nucleus_p=0.9),
    ]
    for case in range(100):
        length = int(rng.integers(1, 33))
        tokens = rng.integers(0, 256, size=length)
        mask = sample_mask(length, rate, rng, mode=MaskMode.exact)
        masked = apply_mask(tokens, mask).tokens
        for sampler in samplers:
            a = infill_cached(maria_model, masked, mask, sampler, np.random.default_rng(case))
            b = infill_uncached(maria_model, masked, mask, sampler, np.random.default_rng(case))
            assert a.tokens.tolist() == b.tokens.tolist()


@pytest.mark.slow
def test_two_layer_gradient_check():
    model = TransformerModel.init(tiny_config(AttentionMode.bidirectional, d_model=8, n_layers=2, max_seq_len=12), seed=0)
    tokens = np.random.default_rng(1).integers(0, 256, size=(2, 10))
    targets = np.random.default_rng(2).integers(0, 256, size=20)

    def loss():
        logits = model.forward_logits(tokens)
        return nx.cross_entropy(nx.reshape(logits, (-1, logits.shape[-1])), targets)

    errors = nx.gradient_check(loss, model.parameters(), eps=1e-2, samples_per_param=4, floor=1e-2)
    rel = np.concatenate(list(errors.values()))
    assert (rel <= 1e-2).mean() >= 0.99


@pytest.mark.slow
def test_ar_memorizes_repeated_pattern():
    pattern = np.frombuffer(b"the old dog sees a red bird; the bird sees the old dog. ok!!!!!!", dtype=np.uint8)
    assert len(pattern) == 64
    windows = np.tile(pattern.astype(np.int64), (16, 1))
    corpus = shards_from_windows(windows, holdout=windows[:2])
    config = TrainConfig(
        steps=400, batch_size=8, micro_batch=8, lr=1e-2, eval_every=100, seed=0,
        model=ModelConfig(d_model=32, n_layers=1, n_heads=2, max_seq_len=64, ffn_mult=2),
    )
    model, log = train_ar(corpus, config)
    assert log.entries[0].holdout == pytest.approx(np.log(260), rel=0.1)
    assert log.entries[-1].holdout < 0.1
    assert log.entries[-1].lr <= 1e-7
    out = generate_unconditional(model, 64, SamplerSpec.greedy())
    assert (out == pattern).mean() > 0.9


# ============== 在合成英文上训练的基础模型 ==============

RATES = [0.1, 0.3, 0.5, 0.7, 0.9]


def _base_config(**overrides) -> TrainConfig:
    values = dict(
        steps=300, batch_size=16, micro_batch=16, lr=3e-3, eval_every=100, seed=0,
        model=ModelConfig(d_model=32, n_layers=2, n_heads=2, max_seq_len=32, ffn_mult=2),
    )
    values.update(overrides)
    return TrainConfig(**values)


def _windows(text: str, length: int = 32) -> np.ndarray:
    stream = np.asarray(ByteTokenizer().encode(text), dtype=np.int64)
    n = len(stream) // length
    return stream[: n * length].reshape(n, length)


@pytest.fixture(scope="module")
def tagging_models():
    windows = _windows(tagging_text(3000, seed=0))
    corpus = shards_from_windows(windows[:-40], holdout=windows[-40:])
    ar, _ = train_ar(corpus, _base_config())
    mlm, _ = train_mlm(corpus, _base_config())
    return ar, mlm, corpus


@pytest.mark.slow
def test_product_init_beats_random_init(tagging_models):
    ar, mlm, corpus = tagging_models
    config = TrainConfig(steps=100, batch_size=16, micro_batch=16, lr=1e-3, eval_every=50, seed=0, holdout_size=40)
    _, product = train_fusion(ar, mlm, corpus, config, init=InitKind.product)
    _, random = train_fusion(ar, mlm, corpus, config, init=InitKind.random)
    assert product.entries[0].holdout < random.entries[0].holdout
    assert product.entries[-1].holdout <= random.entries[-1].holdout


@pytest.mark.slow
def test_trained_models_beat_untrained(tagging_models):
    ar, mlm, corpus = tagging_models
    fresh = TransformerModel.init(ar.config, seed=9)
    assert eval_holdout(ar, corpus.holdout) < eval_holdout(fresh, corpus.holdout)


@pytest.mark.slow
def test_concat_probe_not_worse_than_mlm(tagging_models):
    ar, mlm, _ = tagging_models
    train = generate_tagging_data(60, 32, seed=0)
    test = generate_tagging_data(20, 32, seed=1)
    mlm_only = probe_tagging(mlm, train, test, "mlm", epochs=10, lr=1e-3, seed=0)
    concat = probe_tagging(mlm, train, test, "concat", epochs=10, lr=1e-3, seed=0, ar=ar)
    assert concat.accuracy >= mlm_only.accuracy - mlm_only.stderr


@pytest.fixture(scope="module")
def eval_windows():
    return _windows(tagging_text(4000, seed=7))[:2000]


@pytest.fixture(scope="module")
def trained_maria(tagging_models):
    ar, mlm, corpus = tagging_models
    head, _ = train_fusion(ar, mlm, corpus, _base_config(lr=3e-3, holdout_size=40, model=None))
    return MariaModel(ar=ar, mlm=mlm, head=head)


# ============== 不同掩码率下的困惑度走势 ==============

@pytest.mark.slow
def test_ar_masked_ppl_is_flat_across_rates(tagging_models, eval_windows):
    ar, _, _ = tagging_models
    ppls = [masked_ppl_ar(ar, eval_windows, rate, seed=0).ppl for rate in RATES]
    assert max(ppls) / min(ppls) <= 1.1


@pytest.mark.slow
def test_fixed_rate_mlm_degrades_at_high_rates(tagging_models, eval_windows):
    _, _, corpus = tagging_models
    mlm, _ = train_mlm(corpus, _base_config(mask_rate_spec=MaskRateSpec.fixed(0.3)))
    windows = eval_windows[:300]
    at_train_rate = masked_ppl_mlm_ardecode(mlm, windows, 0.3, seed=0).ppl
    at_high_rate = masked_ppl_mlm_ardecode(mlm, windows, 0.9, seed=0).ppl
    assert at_high_rate >= 2.0 * at_train_rate


@pytest.mark.slow
def test_maria_not_worse_than_ar_at_any_rate(trained_maria, eval_windows):
    windows = eval_windows[:500]
    for rate in RATES:
        maria = masked_ppl_maria(trained_maria, windows, rate, seed=1).ppl
        ar = masked_ppl_ar(trained_maria.ar, windows, rate, seed=1).ppl
        assert maria <= 1.02 * ar, rate


@pytest.mark.slow
def test_mlm_beats_ar_at_low_mask_rate(tagging_models, eval_windows):
    ar, mlm, _ = tagging_models
    rng = np.random.default_rng(0)
    mlm_hits, ar_hits, total = 0, 0, 0
    for clean in eval_windows[:500]:
        mask = sample_mask(len(clean), 0.1, rng, mode=MaskMode.exact)
        positions = np.asarray(mask.indices)
        masked = apply_mask(clean, mask).tokens
        mlm_pred = mlm.forward_logits(masked).data[positions].argmax(axis=-1)
        ar_pred = ar.forward_logits(bos_shift(clean)).data[positions].argmax(axis=-1)
        mlm_hits += int((mlm_pred == clean[positions]).sum())
        ar_hits += int((ar_pred == clean[positions]).sum())
        total += len(positions)
    assert mlm_hits / total > ar_hits / total


# ============== 吞吐与退火 ==============

@pytest.mark.slow
def test_cached_infill_scales_better_than_mlm_decode():
    def config(mode):
        return ModelConfig(d_model=64, n_layers=2, n_heads=4, max_seq_len=256, ffn_mult=2, attention_mode=mode)

    ar = TransformerModel.init(config(AttentionMode.causal), seed=0)
    mlm = TransformerModel.init(config(AttentionMode.bidirectional), seed=1)
    model = MariaModel(ar=ar, mlm=mlm, head=init_head(ar, mlm, InitKind.product))
    report = throughput_bench(model, ["maria_cached", "mlm_ardecode"], [64, 128, 256], runs=3, warmups=1)
    fits = {f.method: f for f in report.fits}
    assert fits["maria_cached"].r2 >= 0.9 and fits["mlm_ardecode"].r2 >= 0.9
    assert fits["mlm_ardecode"].slope >= fits["maria_cached"].slope + 0.5
    longest = {p.method: p.mean_s for p in report.points if p.length == 256}
    assert longest["mlm_ardecode"] > longest["maria_cached"]


@pytest.mark.slow
def test_annealing_lowers_generative_ppl(trained_maria):
    iterations = 8
    runs = []
    for seed in range(50):
        schedule = AnnealSchedule(iterations=iterations, remask_fraction=0.3, seed=seed)
        _, trace = simulated_anneal(
            trained_maria, 32, schedule, scorer=lambda toks: generative_ppl(trained_maria.ar, [toks])
        )
        runs.append([e.gen_ppl for e in trace])
    per_iteration = np.asarray(runs).mean(axis=0)
    assert per_iteration[-1] < per_iteration[0]
    quartiles = per_iteration[1:].reshape(4, iterations // 4).mean(axis=1)
    assert all(later <= earlier for earlier, later in zip(quartiles, quartiles[1:]))
