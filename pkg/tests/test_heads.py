import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grad_check
from hmoetrack import autodiff as ad
from hmoetrack.autodiff import ParamStore, Tensor
from hmoetrack.errors import ContractError
from hmoetrack.heads import (BBox, Heads, ScoreMap, balance_loss, box_at_cell, boxes_at_cells,
                             cls_loss, cls_loss_batch, decode_box, gaussian_target, giou,
                             giou_loss, giou_loss_batch, gt_cell, heads_forward,
                             heads_forward_batch, importance_loss, iou, l1_loss, peak_cell,
                             total_loss)
from hmoetrack.hmoe import GateResult, gate_from_logits
from hmoetrack.tokens import RGB, X, TokenSequence, assemble_layout


def _xyxy(*c):
    return BBox.from_xyxy(*c)


def test_giou_examples():
    a = _xyxy(0, 0, 2, 2)
    assert giou(a, a).value == 1.0
    assert abs(giou(a, _xyxy(1, 1, 3, 3)).value - (1 / 7 - 2 / 9)) <= 1e-12
    far = [giou(BBox(0, 0, 1, 1), BBox(d, 0, 1, 1)).value for d in (2, 10, 100, 1000)]
    assert all(b < a for a, b in zip(far, far[1:])) and far[-1] < -0.99


def test_giou_degenerate_flag():
    g = giou(BBox(0.5, 0.5, 0, 0), BBox(0.5, 0.5, 0, 0))
    assert g.value == -1.0 and g.degenerate
    with pytest.raises(ContractError):
        giou(BBox(0, 0, -1, 1), BBox(0, 0, 1, 1))


boxes = st.builds(BBox, st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 1), st.floats(0.01, 1))


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_giou_properties(a, b):
    g = giou(a, b).value
    assert g == pytest.approx(giou(b, a).value, abs=1e-12)
    assert -1.0 <= g <= iou(a, b) + 1e-12
    assert giou(a, a).value == pytest.approx(1.0)


def test_giou_equals_iou_when_union_fills_hull():
    a, b = _xyxy(0, 0, 2, 1), _xyxy(1, 0, 3, 1)
    assert giou(a, b).value == pytest.approx(iou(a, b), abs=1e-15)


def test_giou_loss_gradient_random_boxes():
    rng = np.random.default_rng(0)
    for _ in range(10):
        gt = BBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.4, 2))
        pred = np.concatenate([rng.uniform(0.3, 0.7, 2), rng.uniform(0.1, 0.4, 2)])
        err = grad_check(lambda xs: giou_loss(xs[0], gt), [pred])
        assert err <= 1e-4
        want = 1.0 - giou(BBox(*pred), gt).value
        assert giou_loss(Tensor(pred), gt).item() == pytest.approx(want, abs=1e-12)


def test_l1_loss_loop_oracle():
    pred = np.array([0.1, 0.9, 0.3, 0.2])
    gt = BBox(0.5, 0.5, 0.25, 0.5)
    want = sum(abs(p - g) for p, g in zip(pred, (0.5, 0.5, 0.25, 0.5))) / 4
    assert l1_loss(Tensor(pred), gt).item() == pytest.approx(want, abs=1e-15)


def _heads(dim=64, side=8, seed=0):
    return Heads(dim, side, ParamStore(), np.random.default_rng(seed))


def _fused(layout, avail=None, seed=0, dim=64):
    rng = np.random.default_rng(seed)
    return TokenSequence(Tensor(rng.normal(size=(layout.total, dim))), layout, avail or (True,) * len(layout))


LAYOUT = assemble_layout(3, 64, 16)


def test_heads_forward_shapes_and_zero_case():
    h = _heads()
    smap = heads_forward(_fused(LAYOUT), h)
    assert smap.logits.shape == (8, 8) and smap.offset.shape == (8, 8, 2) and smap.size.shape == (8, 8, 2)
    for p in h.p:
        p.assign(np.zeros(p.tensor.shape))
    zero = TokenSequence(Tensor(np.zeros((LAYOUT.total, 64))), LAYOUT, (True,) * 8)
    smap = heads_forward(zero, h)
    assert np.all(smap.logits.data == smap.logits.data[0, 0])
    assert np.all(smap.offset.data == 0.5) and np.all(smap.size.data == 0.5)


def test_heads_only_rgb_ignores_x():
    h = _heads()
    avail = (True, False) + (True,) * 6
    a = _fused(LAYOUT, avail, seed=1)
    arr = a.tokens.data.copy()
    seg = LAYOUT.search(X)
    arr[seg.start:seg.stop] += 10.0
    b = TokenSequence(Tensor(arr), LAYOUT, avail)
    np.testing.assert_array_equal(heads_forward(a, h).logits.data, heads_forward(b, h).logits.data)


def test_heads_both_unavailable():
    with pytest.raises(ContractError):
        heads_forward(_fused(LAYOUT, (False, False) + (True,) * 6), _heads())


def test_heads_batch_matches_single():
    h = _heads()
    seqs = [_fused(LAYOUT, seed=s) for s in range(3)]
    batch = heads_forward_batch(seqs, h)
    for j, s in enumerate(seqs):
        single = heads_forward(s, h)
        np.testing.assert_allclose(batch[j].logits.data, single.logits.data, atol=1e-12)
        np.testing.assert_allclose(batch[j].size.data, single.size.data, atol=1e-12)


def _map(logits, off=0.5, size=0.25):
    s = logits.shape[0]
    return ScoreMap(Tensor(logits), Tensor(np.full((s, s, 2), off)), Tensor(np.full((s, s, 2), size)))


def test_decode_examples():
    lg = np.zeros((8, 8))
    lg[3, 4] = 5.0
    box = decode_box(_map(lg))
    assert (box.cx, box.cy) == (0.5625, 0.4375)
    assert peak_cell(np.zeros((8, 8))) == (0, 0)
    assert gt_cell(box, 8) == (3, 4)


def test_box_at_cell_matches_decode():
    rng = np.random.default_rng(1)
    smap = ScoreMap(Tensor(rng.normal(size=(4, 4))), Tensor(rng.random((4, 4, 2))), Tensor(rng.random((4, 4, 2))))
    r, c = peak_cell(smap.logits.data)
    np.testing.assert_allclose(box_at_cell(smap, r, c).data, decode_box(smap).as_array(), atol=1e-15)
    stacked = boxes_at_cells(ad.reshape(smap.offset, (1, 4, 4, 2)), ad.reshape(smap.size, (1, 4, 4, 2)), [(r, c)])
    np.testing.assert_allclose(stacked.data[0], decode_box(smap).as_array(), atol=1e-15)


def test_cls_loss_limit_and_uniform_oracle():
    gt = BBox(0.45, 0.3, 0.2, 0.2)  # cell (2, 3) on an 8 grid
    r0, c0 = gt_cell(gt, 8)
    lg = np.full((8, 8), -30.0)
    lg[r0, c0] = 30.0
    assert cls_loss(_map(lg), gt).item() < 1e-9
    want = 0.0
    for r in range(8):
        for c in range(8):
            y = math.exp(-((r - r0) ** 2 + (c - c0) ** 2) / 2)
            if (r, c) == (r0, c0):
                want -= 0.25 * math.log(0.5)
            else:
                want -= (1 - y) ** 4 * 0.25 * math.log(0.5)
    assert cls_loss(_map(np.zeros((8, 8))), gt).item() == pytest.approx(want, abs=1e-12)
    assert cls_loss(_map(np.zeros((8, 8))), gt).item() > 0


def test_cls_loss_gradient_and_batch():
    rng = np.random.default_rng(2)
    gts = [BBox(0.3, 0.6, 0.2, 0.2), BBox(0.8, 0.1, 0.1, 0.3)]
    lg = rng.uniform(-1, 1, (2, 8, 8))
    err = grad_check(lambda xs: cls_loss_batch(xs[0], gts), [lg])
    assert err <= 1e-4
    each = [cls_loss(_map(lg[j]), gts[j]).item() for j in range(2)]
    assert cls_loss_batch(Tensor(lg), gts).item() == pytest.approx(np.mean(each), abs=1e-12)
    assert gaussian_target(8, 2, 3)[2, 3] == 1.0


def test_giou_loss_batch_is_mean():
    rng = np.random.default_rng(3)
    preds = np.concatenate([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.4, (3, 2))], axis=1)
    gts = [BBox(0.5, 0.5, 0.3, 0.2), BBox(0.4, 0.6, 0.2, 0.2), BBox(0.9, 0.9, 0.1, 0.1)]
    each = [giou_loss(Tensor(p), g).item() for p, g in zip(preds, gts)]
    assert giou_loss_batch(Tensor(preds), gts).item() == pytest.approx(np.mean(each), abs=1e-12)


def _res(probs, selected):
    p = Tensor(probs)
    return GateResult(p, p, tuple(selected), p)


def test_importance_examples():
    assert importance_loss([_res([0.25] * 4, (0, 1))] * 3).item() == pytest.approx(0.0, abs=1e-15)
    assert importance_loss([_res([1.0, 0.0], (0,)), _res([1.0, 0.0], (0,))]).item() == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(4), size=3)
    base = importance_loss([_res(p, (0,)) for p in probs]).item()
    scaled = importance_loss([_res(p * 3.0, (0,)) for p in probs]).item()
    assert scaled == pytest.approx(base, rel=1e-12)


def test_balance_examples_and_loop_oracle():
    M = 4
    uniform = [_res([0.25] * 4, sel) for sel in [(0, 1), (2, 3)]]
    assert abs(balance_loss(uniform).item() - 1.0) <= 1e-12
    onehot = [_res([1.0, 0, 0, 0], (0,))] * 5
    assert balance_loss(onehot).item() == pytest.approx(M)
    rng = np.random.default_rng(4)
    results = [gate_from_logits(Tensor(rng.normal(size=M)), 2) for _ in range(6)]
    counts = [0] * M
    for r in results:
        for n in r.selected:
            counts[n] += 1
    total = sum(counts)
    want = M * sum(counts[n] / total * sum(r.probs.data[n] for r in results) / len(results) for n in range(M))
    assert abs(balance_loss(results).item() - want) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=2, max_size=8), st.integers(1, 8))
def test_balance_at_least_one_for_single_item(logits, k):
    k = min(k, len(logits))
    assert balance_loss([gate_from_logits(Tensor(logits), k)]).item() >= 1.0 - 1e-12


def test_balance_can_drop_below_one_across_a_batch():
    # three near-ties routed to expert 0, one confident item routed to expert 1
    batch = [_res([0.51, 0.49], (0,))] * 3 + [_res([0.0, 1.0], (1,))]
    assert balance_loss(batch).item() == pytest.approx(2 * (0.75 * 0.3825 + 0.25 * 0.6175))
    assert balance_loss(batch).item() < 1.0


def test_total_loss_examples():
    parts = total_loss(Tensor(0.2), Tensor(0.3), Tensor(0.4), Tensor(0.06), Tensor(0.04))
    assert parts.aux.item() == pytest.approx(0.1)
    assert parts.total.item() == pytest.approx(2.1, abs=1e-12)
    zero = total_loss(*(Tensor(0.0) for _ in range(5)))
    assert zero.total.item() == 0.0
    proj = total_loss(Tensor(0.7), Tensor(0.3), Tensor(0.4), Tensor(0.05), Tensor(0.05), (0, 1, 0, 0))
    assert proj.total.item() == 0.7
    with pytest.raises(ContractError):
        total_loss(Tensor([1.0, 2.0]), Tensor(0.0), Tensor(0.0), Tensor(0.0), Tensor(0.0))
