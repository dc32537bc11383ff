import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch import nn

from scenediff.readout import (
    ReadoutConfig,
    ReadoutHeads,
    ReadoutOutput,
    Stage2Target,
    aggregate_rows,
    smooth_l1,
    stage2_loss,
)


def zero_last_layers(heads):
    with torch.no_grad():
        for head in (heads.pred_head, heads.obj_head, heads.box_head):
            head[-1].weight.zero_()
            head[-1].bias.zero_()
    return heads


def test_zero_logits_give_uniform_and_half_boxes():
    heads = zero_last_layers(ReadoutHeads(ReadoutConfig(d_embed=8, hidden=16)))
    entry = torch.randn(8)
    torch.testing.assert_close(heads.predict_predicate(entry), torch.full((25,), 1 / 25))
    row, mask = torch.randn(4, 8), torch.tensor([True, True, False, True])
    torch.testing.assert_close(heads.predict_object(row, mask), torch.full((35,), 1 / 35))
    torch.testing.assert_close(heads.regress_box(row, mask), torch.full((4,), 0.5))


def test_softmax_shift_invariance():
    heads = ReadoutHeads(ReadoutConfig(d_embed=8, hidden=16))
    entry = torch.randn(8)
    before = heads.predict_predicate(entry)
    with torch.no_grad():
        heads.pred_head[-1].bias += 3.0
    torch.testing.assert_close(heads.predict_predicate(entry), before)
    assert before.sum().item() == pytest.approx(1.0)


def test_single_entry_row_modes_agree():
    cfg = ReadoutConfig(d_embed=6, hidden=8)
    row_heads = ReadoutHeads(cfg)
    elem_heads = ReadoutHeads(ReadoutConfig(d_embed=6, hidden=8, mode="element"))
    elem_heads.load_state_dict(row_heads.state_dict())
    row, mask = torch.randn(3, 6), torch.tensor([False, True, False])
    torch.testing.assert_close(row_heads.predict_object(row, mask), elem_heads.predict_object(row, mask))


def test_empty_row_rejected():
    heads = ReadoutHeads(ReadoutConfig(d_embed=4, hidden=4))
    with pytest.raises(ValueError):
        heads.predict_object(torch.randn(3, 4), torch.zeros(3, dtype=torch.bool))
    with pytest.raises(ValueError):
        ReadoutConfig(mode="sum").validate()


@given(st.integers(2, 5), st.integers(0, 10_000))
def test_row_mean_permutation_invariant_and_duplicates(n, seed):
    heads = ReadoutHeads(ReadoutConfig(d_embed=4, hidden=8))
    g = torch.Generator().manual_seed(seed)
    row = torch.randn(n, 4, generator=g)
    mask = torch.ones(n, dtype=torch.bool)
    perm = torch.randperm(n, generator=g)
    torch.testing.assert_close(heads.predict_object(row[perm], mask), heads.predict_object(row, mask))
    same = row[:1].expand(n, 4)
    torch.testing.assert_close(heads.predict_object(same, mask), heads.predict_object(row[:1], mask[:1]))


def test_aggregate_rows_modes():
    a0 = torch.arange(3 * 3 * 2, dtype=torch.float32).reshape(3, 3, 2)
    mask = torch.tensor([True, True, True])
    rows = aggregate_rows(a0, mask, "row")
    torch.testing.assert_close(rows[0], (a0[0, 1] + a0[0, 2]) / 2)
    elem = aggregate_rows(a0, mask, "element")
    torch.testing.assert_close(elem[0], a0[0, 1])
    torch.testing.assert_close(elem[1], a0[1, 0])
    # lone slot falls back to its diagonal
    lone = aggregate_rows(a0, torch.tensor([False, True, False]), "row")
    torch.testing.assert_close(lone[1], a0[1, 1])


def test_smooth_l1_values():
    x = torch.tensor([0.5, -0.5, 2.0, 0.0])
    torch.testing.assert_close(smooth_l1(x), torch.tensor([0.125, 0.125, 1.5, 0.0]))


def uniform_output(n=2, p=25, c=35):
    heads = zero_last_layers(ReadoutHeads(ReadoutConfig(d_embed=4, hidden=4, num_predicates=p, num_objects=c)))
    return heads(torch.randn(n, n, 4), torch.ones(n, dtype=torch.bool))


def test_uniform_predicate_loss_is_log_p():
    out = uniform_output()
    loss = stage2_loss(out, Stage2Target([(0, 3, 1)], {}, {}))
    assert loss.pred.item() == pytest.approx(math.log(25), abs=1e-6)
    assert loss.pred.item() == pytest.approx(3.2189, abs=1e-4)
    assert loss.obj.item() == 0 and loss.box.item() == 0


def test_loss_decomposition_and_box_term():
    out = uniform_output()
    target = Stage2Target([(0, 3, 1)], {0: 2, 1: 4}, {0: (0.0, 0.5, 1.0, 0.5)})
    loss = stage2_loss(out, target)
    assert loss.obj.item() == pytest.approx(math.log(35), abs=1e-6)
    # boxes are 0.5 everywhere: differences (0.5, 0, -0.5, 0) -> mean smooth-L1 = 0.0625
    assert loss.box.item() == pytest.approx(0.0625)
    assert loss.total.item() == pytest.approx(loss.pred.item() + loss.obj.item() + 0.5 * loss.box.item())
    assert loss.coverage["triplets"] == 1 and loss.coverage["objects"] == 2


def test_exact_one_hot_gives_zero_loss():
    logits = torch.full((2, 2, 3), -1e4)
    logits[0, 1, 2] = 1e4
    obj = torch.full((2, 4), -1e4)
    obj[0, 1] = obj[1, 3] = 1e4
    boxes = torch.tensor([[0.1, 0.2, 0.3, 0.4], [0.5, 0.5, 0.2, 0.2]])
    out = ReadoutOutput(logits, obj, boxes, torch.ones(2, dtype=torch.bool))
    target = Stage2Target([(0, 2, 1)], {0: 1, 1: 3}, {0: (0.1, 0.2, 0.3, 0.4), 1: (0.5, 0.5, 0.2, 0.2)})
    assert stage2_loss(out, target).total.item() == pytest.approx(0.0, abs=1e-6)


def test_stage2_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    heads = ReadoutHeads(ReadoutConfig(d_embed=3, hidden=4, num_predicates=3, num_objects=2)).double()
    assert sum(p.numel() for p in heads.parameters()) <= 2000
    a0 = torch.randn(3, 3, 3, dtype=torch.float64)
    mask = torch.tensor([True, True, False])
    target = Stage2Target([(0, 2, 1), (1, 0, 0)], {0: 1, 1: 0}, {0: (0.2, 0.3, 0.4, 0.5), 1: (0.6, 0.1, 0.2, 0.3)})

    def f():
        return stage2_loss(heads(a0, mask), target).total

    params = list(heads.parameters())
    grads = torch.autograd.grad(f(), params)
    h = 1e-6
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = f().item()
            flat[i] = old - h
            down = f().item()
            flat[i] = old
            fd = (up - down) / (2 * h)
            assert abs(fd - g.view(-1)[i].item()) <= 1e-6 + 1e-4 * abs(fd)


def test_heads_are_plain_modules():
    heads = ReadoutHeads(ReadoutConfig(d_embed=4, hidden=4))
    assert isinstance(heads.pred_head, nn.Sequential)
    out = heads(torch.randn(2, 3, 3, 4), torch.ones(2, 3, dtype=torch.bool))
    assert out.pred_logits.shape == (2, 3, 3, 25) and out.obj_logits.shape == (2, 3, 35)
    assert ((out.boxes > 0) & (out.boxes < 1)).all()
    assert np.isfinite(out.pred_logits.detach().numpy()).all()
