import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from incseg.losses import (
    EXEMPLAR,
    INC,
    LossError,
    LossWeights,
    PredictionSnapshot,
    classification_loss,
    distillation_loss,
    entropy,
    total_loss,
)

LN2 = math.log(2.0)


def onehot(mask):
    m = torch.as_tensor(mask, dtype=torch.float64)[None]
    return torch.stack([m, 1 - m], 1)


def test_ce_zero_for_correct_onehot():
    mask = torch.tensor([[1, 0], [0, 1]])
    assert classification_loss(onehot(mask), mask).item() == 0.0


def test_ce_uniform_is_ln2():
    mask = torch.tensor([[1, 0, 0], [0, 1, 1]])
    pred = torch.full((1, 2, 2, 3), 0.5, dtype=torch.float64)
    assert classification_loss(pred, mask).item() == pytest.approx(LN2, abs=1e-12)


def test_ce_errors():
    with pytest.raises(LossError, match="binary"):
        classification_loss(torch.full((1, 2, 2, 2), 0.5), torch.full((2, 2), 0.5))
    with pytest.raises(LossError):
        classification_loss(torch.full((1, 2, 2, 2), 0.5), torch.zeros(3, 3))


def test_dice_loss_option():
    mask = torch.tensor([[1, 0], [0, 1]])
    assert classification_loss(onehot(mask), mask, kind="dice").item() == pytest.approx(0.0, abs=1e-6)


def test_distillation_hand_value():
    p = torch.tensor([0.8, 0.2], dtype=torch.float64).view(1, 2, 1, 1)
    y = torch.tensor([0.5, 0.5], dtype=torch.float64).view(1, 2, 1, 1)
    expected = -(0.8 * math.log(0.5) + 0.2 * math.log(0.5))
    assert distillation_loss(y, p).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(LN2)


def test_distillation_onehot_target_is_zero():
    p = onehot(torch.tensor([[1, 0], [1, 1]]))
    assert distillation_loss(p, p).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_distillation_floor_is_entropy(seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 2, 3, 4, generator=g, dtype=torch.float64)
    p = torch.softmax(logits, 1)
    assert abs(distillation_loss(p, p).item() - entropy(p).item()) <= 1e-7
    y = torch.softmax(torch.randn(2, 2, 3, 4, generator=g, dtype=torch.float64), 1)
    assert distillation_loss(y, p).item() >= entropy(p).item() - 1e-12


def test_distillation_zero_logit_gradient_at_target():
    logits = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    p = torch.softmax(logits, 1).detach()
    loss = distillation_loss(logits, p, from_logits=True)
    loss.backward()
    assert logits.grad.abs().max().item() < 1e-15


def test_distillation_class_mismatch():
    p = torch.full((1, 2, 2, 2), 0.5)
    with pytest.raises(LossError):
        distillation_loss({"a": p}, {"b": p})


def test_temperature_one_is_identity():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(1, 2, 3, 3, generator=g, dtype=torch.float64)
    p = torch.softmax(torch.randn(1, 2, 3, 3, generator=g, dtype=torch.float64), 1)
    a = distillation_loss(logits, p, from_logits=True)
    b = distillation_loss(logits, p, from_logits=True, temperature=1.0)
    assert a.item() == b.item()


def test_total_loss_endpoints():
    lc, ld = [0.4, 0.3], torch.tensor([0.2, 0.9])
    assert total_loss(lc, ld, [INC, INC], 1.0).item() == pytest.approx(0.35)
    assert total_loss(lc, ld, [INC, INC], 0.0).item() == pytest.approx(0.55)
    assert total_loss([None, None], ld, [EXEMPLAR, EXEMPLAR], 0.3).item() == pytest.approx(0.55)


def test_total_loss_mixed_batch():
    val = total_loss([0.4, None], torch.tensor([0.2, 0.6], dtype=torch.float64), [INC, EXEMPLAR], 0.5)
    assert val.item() == pytest.approx(0.45, abs=1e-12)


def test_total_loss_linear_in_alpha():
    lc, ld = [0.4, 0.7], torch.tensor([0.2, 0.1], dtype=torch.float64)
    vals = [total_loss(lc, ld, [INC, INC], a).item() for a in np.linspace(0, 1, 11)]
    diffs = np.diff(vals)
    assert np.allclose(diffs, diffs[0])


def test_total_loss_errors():
    with pytest.raises(LossError, match="untagged"):
        total_loss([0.1], torch.tensor([0.1]), [None])
    with pytest.raises(LossError, match="missing"):
        total_loss([0.1, 0.2], torch.tensor([0.1]), [INC, INC])
    with pytest.raises(LossError):
        LossWeights(alpha=1.5)


def test_snapshot_validation_and_lookup():
    p = np.full((1, 2, 2, 2), 0.5, np.float32)
    snap = PredictionSnapshot(["A"], {"v/0000": p})
    assert snap.batch(["v/0000"])["A"].shape == (1, 2, 2, 2)
    with pytest.raises(LossError, match="no snapshot"):
        snap.get("v/0001")
    with pytest.raises(LossError, match="sum to 1"):
        snap.add("bad", np.full((1, 2, 2, 2), 0.7, np.float32))
