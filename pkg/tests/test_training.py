"""批加载、学习率、训练循环与留出集评估"""
import math

import numpy as np
import pytest

from maria.data.corpus import shards_from_windows
from maria.data.tokenizer import MASK_ID
from maria.exceptions import ContractError, DataError
from maria.fusion import MariaModel, init_head
from maria.schemas import InitKind, MaskMode, MaskRateSpec, ModelConfig, TrainConfig
from maria.training import (
    BatchLoader,
    cosine_lr,
    eval_holdout,
    holdout_losses,
    train_ar,
    train_fusion,
    train_mlm,
)


def _config(**overrides) -> TrainConfig:
    values = dict(steps=3, batch_size=4, micro_batch=2, lr=1e-3, eval_every=2, holdout_size=4, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def test_cosine_schedule():
    assert cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
    assert cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4)
    assert cosine_lr(1e-3, 99, 100) < 1e-3 * 0.01
    assert cosine_lr(1e-3, 100, 100) == pytest.approx(0.0, abs=1e-12)


def test_batch_size_must_divide():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=6, micro_batch=4)


def test_loader_is_deterministic(byte_windows):
    spec = MaskRateSpec()
    a = list(BatchLoader(byte_windows, 5, 4, seed=3, mask_spec=spec))
    b = list(BatchLoader(byte_windows, 5, 4, seed=3, mask_spec=spec))
    assert len(a) == 4
    for x, y in zip(a, b):
        assert np.array_equal(x.clean, y.clean)
        assert np.array_equal(x.masked, y.masked)


def test_loader_covers_epoch_before_repeating(byte_windows):
    batches = list(BatchLoader(byte_windows, 4, 3, seed=0))
    seen = np.concatenate([b.clean for b in batches])
    assert len({row.tobytes() for row in seen}) == len(byte_windows)


def test_prefetch_matches_synchronous(byte_windows):
    spec = MaskRateSpec()
    sync = list(BatchLoader(byte_windows, 4, 5, seed=1, mask_spec=spec))
    threaded = list(BatchLoader(byte_windows, 4, 5, seed=1, mask_spec=spec, prefetch=2))
    assert [b.step for b in threaded] == list(range(5))
    for x, y in zip(sync, threaded):
        assert np.array_equal(x.masked, y.masked)


def test_loader_masks_agree_with_clean(byte_windows):
    batch = next(iter(BatchLoader(byte_windows, 4, 1, seed=0, mask_spec=MaskRateSpec.fixed(0.5), mask_mode=MaskMode.exact)))
    keep = batch.masked != MASK_ID
    assert np.array_equal(batch.masked[keep], batch.clean[keep])
    assert batch.n_masked == 4 * 8


def test_loader_rejects_empty():
    with pytest.raises(DataError):
        BatchLoader(np.zeros((0, 8), dtype=np.int64), 2, 1)


def test_train_ar_log(tiny_corpus, ar_model):
    model, log = train_ar(tiny_corpus, _config(), model=ar_model)
    assert model is ar_model
    assert [e.step for e in log.entries] == [0, 1, 2]
    # 第 0 步在更新前评估，最后一步在更新后评估
    assert log.entries[0].holdout is not None
    assert log.entries[1].holdout is None
    assert log.entries[2].holdout is not None
    assert all(math.isfinite(e.loss) for e in log.entries)
    assert log.entries[0].lr == pytest.approx(1e-3)


def test_train_ar_rejects_bidirectional(tiny_corpus, mlm_model):
    with pytest.raises(ContractError):
        train_ar(tiny_corpus, _config(), model=mlm_model)


def test_too_few_windows(byte_windows):
    corpus = shards_from_windows(byte_windows[:3])
    with pytest.raises(DataError):
        train_ar(corpus, _config())


def test_window_longer_than_model(ar_model):
    corpus = shards_from_windows(np.zeros((4, 40), dtype=np.int64))
    with pytest.raises(ContractError):
        train_ar(corpus, _config(), model=ar_model)


def test_micro_batch_does_not_change_updates():
    windows = np.random.default_rng(5).integers(0, 256, size=(36, 16))
    corpus = shards_from_windows(windows[:32], holdout=windows[32:])
    small = ModelConfig(d_model=16, n_layers=1, n_heads=2, max_seq_len=16, ffn_mult=2)
    trained = []
    for micro in (1, 8, 32):
        model, _ = train_mlm(corpus, _config(steps=2, batch_size=32, micro_batch=micro, lr=1e-3, model=small))
        trained.append(model)
    for other in trained[1:]:
        for name, p in trained[0].params.items():
            np.testing.assert_allclose(other.params[name].data, p.data, atol=1e-5, err_msg=name)


def test_final_update_uses_zero_lr(tiny_corpus):
    _, log = train_ar(tiny_corpus, _config(steps=5))
    assert log.entries[0].lr == pytest.approx(1e-3)
    assert log.entries[-1].lr <= 1e-12
    assert [e.lr for e in log.entries] == sorted((e.lr for e in log.entries), reverse=True)


def test_training_a_frozen_model_is_rejected(tiny_corpus, ar_model, mlm_model):
    MariaModel(ar=ar_model, mlm=mlm_model, head=init_head(ar_model, mlm_model, InitKind.product))
    before = ar_model.checksum()
    with pytest.raises(ContractError):
        train_ar(tiny_corpus, _config(), model=ar_model)
    with pytest.raises(ContractError):
        train_mlm(tiny_corpus, _config(), model=mlm_model)
    assert ar_model.checksum() == before

    train_ar(tiny_corpus, _config(lr=1e-2), model=ar_model.unfreeze())
    assert ar_model.checksum() != before


def test_train_fusion_keeps_bases_frozen(tiny_corpus, ar_model, mlm_model):
    ar_sum, mlm_sum = ar_model.checksum(), mlm_model.checksum()
    head, log = train_fusion(ar_model, mlm_model, tiny_corpus, _config())
    assert ar_model.checksum() == ar_sum and mlm_model.checksum() == mlm_sum
    assert head.train_steps == 3
    assert log.kind == "fusion" and log.init == InitKind.product
    assert len(holdout_losses(log)) == 2


def test_train_fusion_updates_head(tiny_corpus, ar_model, mlm_model):
    head, _ = train_fusion(ar_model, mlm_model, tiny_corpus, _config(), init=InitKind.random)
    start, _ = train_fusion(ar_model, mlm_model, tiny_corpus, _config(steps=1, lr=1e-12), init=InitKind.random)
    assert not np.allclose(head.W3.data, start.W3.data)


def test_zero_mask_rate_skips_updates(tiny_corpus, ar_model, mlm_model, log_messages):
    config = _config(mask_rate_spec=MaskRateSpec.fixed(0.0))
    head, log = train_fusion(ar_model, mlm_model, tiny_corpus, config)
    assert all(e.loss == 0.0 for e in log.entries)
    assert any("跳过更新" in m for m in log_messages)


def test_eval_holdout_deterministic(tiny_corpus, maria_model):
    holdout = tiny_corpus.holdout
    a = eval_holdout(maria_model, holdout, 0.5, seed=4)
    b = eval_holdout(maria_model, holdout, 0.5, seed=4)
    assert a == b
    assert eval_holdout(maria_model.head, holdout, 0.5, seed=4, bases=(maria_model.ar, maria_model.mlm)) == a


def test_eval_holdout_random_model_near_uniform(tiny_corpus, ar_model):
    # 初始化的模型接近均匀分布：损失约为 ln 260
    assert eval_holdout(ar_model, tiny_corpus.holdout) == pytest.approx(math.log(260), abs=0.3)


def test_eval_holdout_empty(maria_model):
    assert math.isnan(eval_holdout(maria_model, np.zeros((0, 8), dtype=np.int64)))


def test_fusion_head_needs_bases(tiny_corpus, maria_model):
    with pytest.raises(ContractError):
        eval_holdout(maria_model.head, tiny_corpus.holdout)
