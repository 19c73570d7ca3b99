"""融合头：初始化、对齐、损失与组合模型"""
import numpy as np
import pytest

from maria import numerics as nx
from maria.data.tokenizer import BOS_ID, MASK_ID
from maria.exceptions import ContractError, InputConsistencyError, ModeError
from maria.fusion import (
    FusionHead,
    MariaModel,
    align_hidden,
    bos_shift,
    fusion_logits,
    init_head,
    init_product,
    init_random,
    maria_loss,
)
from maria.numerics import Tensor, softmax_np
from maria.schemas import AttentionMode, InitKind
from maria.transformer import TransformerModel
from tests.conftest import tiny_config


def test_product_init_averages_logits(ar_model, mlm_model):
    head = init_product(ar_model.head, mlm_model.head)
    rng = np.random.default_rng(0)
    h1 = Tensor(rng.normal(size=(3, 16)))
    h2 = Tensor(rng.normal(size=(3, 12)))
    expected = 0.5 * (h1.data @ ar_model.head.data + h2.data @ mlm_model.head.data)
    np.testing.assert_allclose(fusion_logits(head, h1, h2).data, expected, atol=1e-5)
    np.testing.assert_allclose(head.W3.data, np.vstack([ar_model.head.data, mlm_model.head.data]) / 2, atol=1e-7)


def test_product_init_is_normalized_geometric_mean(ar_model, mlm_model):
    head = init_product(ar_model.head, mlm_model.head)
    rng = np.random.default_rng(1)
    h1, h2 = rng.normal(size=(1, 16)), rng.normal(size=(1, 12))
    p_ar = softmax_np(h1 @ ar_model.head.data)
    p_mlm = softmax_np(h2 @ mlm_model.head.data)
    geo = np.sqrt(p_ar * p_mlm)
    geo /= geo.sum()
    fused = softmax_np(fusion_logits(head, Tensor(h1), Tensor(h2)).data)
    np.testing.assert_allclose(fused, geo, atol=1e-6)


def test_product_init_vocab_mismatch():
    with pytest.raises(ContractError):
        init_product(Tensor(np.zeros((4, 10))), Tensor(np.zeros((4, 11))))


def test_random_init_scale():
    head = init_random(64, 64, 260, seed=0)
    assert head.W3.shape == (128, 260)
    assert head.W3.data.std() == pytest.approx(np.sqrt(2 / 388), rel=0.05)
    assert head.init_kind == InitKind.random


def test_head_shape_checked():
    with pytest.raises(ContractError) as exc:
        FusionHead(W3=Tensor(np.zeros((5, 7))), d1=2, d2=2, v=7)
    assert exc.value.detail["expected"] == [4, 7]


def test_optional_bias(ar_model, mlm_model):
    head = init_head(ar_model, mlm_model, InitKind.product, bias=True)
    assert len(head.parameters()) == 2
    assert not head.bias.data.any()


def test_fusion_logits_width_mismatch(ar_model, mlm_model):
    head = init_product(ar_model.head, mlm_model.head)
    with pytest.raises(ContractError):
        fusion_logits(head, Tensor(np.zeros((1, 12))), Tensor(np.zeros((1, 12))))


def test_bos_shift():
    clean = np.array([[1, 2, 3], [4, 5, 6]])
    assert bos_shift(clean).tolist() == [[BOS_ID, 1, 2], [BOS_ID, 4, 5]]


def test_align_hidden(ar_model, mlm_model):
    clean = np.array([1, 2, 3, 4])
    masked = np.array([1, MASK_ID, 3, MASK_ID])
    aligned = align_hidden(clean, masked, ar_model, mlm_model)
    assert aligned.ar_hidden.shape == (4, 16)
    assert aligned.mlm_hidden.shape == (4, 12)
    assert aligned.n_masked == 2
    np.testing.assert_allclose(aligned.ar_hidden.data, ar_model.forward_hidden(bos_shift(clean)).data)


def test_align_hidden_rejects_inconsistent_input(ar_model, mlm_model):
    with pytest.raises(InputConsistencyError):
        align_hidden([1, 2, 3], [1, 9, MASK_ID], ar_model, mlm_model)
    with pytest.raises(ContractError):
        align_hidden([1, 2, 3], [1, 2], ar_model, mlm_model)


def test_loss_gradient_reaches_only_head(maria_model):
    model = maria_model
    clean = np.array([[5, 6, 7, 8], [9, 10, 11, 12]])
    masked = clean.copy()
    masked[:, 1] = MASK_ID
    with nx.Tape() as tape:
        loss = maria_loss(model.head, align_hidden(clean, masked, model.ar, model.mlm))
    nx.backward(tape, loss, model.head.parameters())
    assert model.head.W3.grad is not None and np.abs(model.head.W3.grad).sum() > 0
    assert all(p.grad is None for p in model.ar.parameters() + model.mlm.parameters())


def test_loss_without_masked_positions_is_zero(maria_model):
    clean = np.array([5, 6, 7])
    aligned = align_hidden(clean, clean, maria_model.ar, maria_model.mlm)
    assert maria_loss(maria_model.head, aligned).item() == 0.0


def test_maria_model_freezes_bases(maria_model):
    assert maria_model.ar.frozen and maria_model.mlm.frozen
    assert maria_model.max_seq_len == 32
    assert maria_model.vocab_size == 260


def test_maria_model_checks_modes(ar_model, mlm_model):
    head = init_head(ar_model, mlm_model, InitKind.product)
    with pytest.raises(ModeError):
        MariaModel(ar=mlm_model, mlm=ar_model, head=head)


def test_maria_model_checks_dimensions(ar_model):
    mlm = TransformerModel.init(tiny_config(AttentionMode.bidirectional, d_model=8), seed=0)
    head = init_random(16, 12, 260)
    with pytest.raises(ContractError) as exc:
        MariaModel(ar=ar_model, mlm=mlm, head=head)
    assert exc.value.detail["field"] == "d2"
