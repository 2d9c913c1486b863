"""Center/size prediction heads, box geometry and the training objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from hmoetrack import autodiff as ad
from hmoetrack.autodiff import ParamStore, Tensor
from hmoetrack.errors import ContractError
from hmoetrack.hmoe import GateResult
from hmoetrack.tokens import RGB, X, TokenSequence

DEFAULT_LAMBDAS = (1.0, 5.0, 2.0, 1.0)


@dataclass(frozen=True)
class BBox:
    """Center-size box; normalized search coordinates unless stated otherwise."""

    cx: float
    cy: float
    w: float
    h: float

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_xyxy(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)


class GIoU(NamedTuple):
    value: float
    degenerate: bool = False


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = a.area + b.area - inter
    # the xyxy round trip can push identical boxes a few ulps above 1
    return min(inter / union, 1.0) if union > 0 else 0.0


def giou(a: BBox, b: BBox) -> GIoU:
    if a.w < 0 or a.h < 0 or b.w < 0 or b.h < 0:
        raise ContractError("boxes need non-negative width and height")
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = a.area + b.area - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    if union <= 0 or hull <= 0:
        return GIoU(-1.0, True)
    return GIoU(inter / union - (hull - union) / hull)


# ------------------------------------------------------------------- heads


@dataclass(frozen=True)
class ScoreMap:
    logits: Tensor  # S x S
    offset: Tensor  # S x S x 2, (x, y) in cell units, sigmoid-squashed
    size: Tensor  # S x S x 2, (w, h) normalized, sigmoid-squashed

    @property
    def side(self) -> int:
        return self.logits.shape[0]


class Heads:
    def __init__(self, dim: int, side: int, params: ParamStore, rng: np.random.Generator,
                 prefix: str = "head"):
        self.dim = dim
        self.side = side
        self.p = params
        self.prefix = prefix
        params.add(f"{prefix}.cls.w", rng.normal(0, 0.02, (dim, 1)))
        params.add(f"{prefix}.cls.b", np.full(1, -2.0))
        params.add(f"{prefix}.off.w", rng.normal(0, 0.02, (dim, 2)))
        params.add(f"{prefix}.off.b", np.zeros(2))
        params.add(f"{prefix}.size.w", rng.normal(0, 0.02, (dim, 2)))
        params.add(f"{prefix}.size.b", np.zeros(2))

    def __call__(self, fused: TokenSequence) -> ScoreMap:
        return heads_forward(fused, self)

    def w(self, name: str) -> Tensor:
        return self.p[f"{self.prefix}.{name}"]


def search_features(fused: TokenSequence) -> Tensor:
    """Average the two search segments where both are available, else take the one that is."""
    lay = fused.layout
    rgb_ok = fused.available(RGB, "search")
    x_ok = fused.available(X, "search")
    if rgb_ok and x_ok:
        return ad.scale(ad.add(fused.rows(lay.search(RGB)), fused.rows(lay.search(X))), 0.5)
    if rgb_ok:
        return fused.rows(lay.search(RGB))
    if x_ok:
        return fused.rows(lay.search(X))
    raise ContractError("both search segments are unavailable")


def heads_forward(fused: TokenSequence, heads: Heads) -> ScoreMap:
    feat = search_features(fused)
    s = heads.side
    if feat.shape[0] != s * s:
        raise ContractError(f"search segment has {feat.shape[0]} tokens, head expects {s}x{s}")
    w = heads.w
    logits = ad.reshape(ad.add_bias(ad.matmul(feat, w("cls.w")), w("cls.b")), (s, s))
    offset = ad.sigmoid(ad.reshape(ad.add_bias(ad.matmul(feat, w("off.w")), w("off.b")), (s, s, 2)))
    size = ad.sigmoid(ad.reshape(ad.add_bias(ad.matmul(feat, w("size.w")), w("size.b")), (s, s, 2)))
    return ScoreMap(logits, offset, size)


@dataclass(frozen=True)
class BatchScoreMaps:
    logits: Tensor  # B x S x S
    offset: Tensor  # B x S x S x 2
    size: Tensor  # B x S x S x 2

    def __len__(self) -> int:
        return self.logits.shape[0]

    def __getitem__(self, j: int) -> ScoreMap:
        return ScoreMap(self.logits[j], self.offset[j], self.size[j])


def heads_forward_batch(fused: Sequence[TokenSequence], heads: Heads) -> BatchScoreMaps:
    """Same maps as :func:`heads_forward`, computed for a batch in one pass."""
    s = heads.side
    feats = [search_features(f) for f in fused]
    for f in feats:
        if f.shape[0] != s * s:
            raise ContractError(f"search segment has {f.shape[0]} tokens, head expects {s}x{s}")
    b = len(feats)
    x = ad.reshape(ad.stack(feats), (b * s * s, heads.dim))
    w = heads.w
    logits = ad.reshape(ad.add_bias(ad.matmul(x, w("cls.w")), w("cls.b")), (b, s, s))
    offset = ad.sigmoid(ad.reshape(ad.add_bias(ad.matmul(x, w("off.w")), w("off.b")), (b, s, s, 2)))
    size = ad.sigmoid(ad.reshape(ad.add_bias(ad.matmul(x, w("size.w")), w("size.b")), (b, s, s, 2)))
    return BatchScoreMaps(logits, offset, size)


def peak_cell(logits: np.ndarray) -> tuple[int, int]:
    """Row-major argmax; ties resolve to the lowest flat index."""
    flat = int(np.argmax(np.asarray(logits).reshape(-1)))
    return divmod(flat, logits.shape[1])


def decode_box(smap: ScoreMap) -> BBox:
    s = smap.side
    row, col = peak_cell(smap.logits.data)
    ox, oy = smap.offset.data[row, col]
    w, h = smap.size.data[row, col]
    return BBox((col + ox) / s, (row + oy) / s, float(w), float(h))


def gt_cell(gt: BBox, side: int) -> tuple[int, int]:
    col = int(np.clip(np.floor(gt.cx * side), 0, side - 1))
    row = int(np.clip(np.floor(gt.cy * side), 0, side - 1))
    return row, col


def box_at_cell(smap: ScoreMap, row: int, col: int) -> Tensor:
    """Differentiable (cx, cy, w, h) read from one cell."""
    s = smap.side
    off = smap.offset[row, col]
    center = ad.scale(ad.add(off, Tensor([float(col), float(row)])), 1.0 / s)
    return ad.concat([center, smap.size[row, col]])


# ------------------------------------------------------------------- losses


def gaussian_target(side: int, row: int, col: int, sigma: float = 1.0) -> np.ndarray:
    r, c = np.mgrid[0:side, 0:side]
    return np.exp(-((r - row) ** 2 + (c - col) ** 2) / (2 * sigma**2))


def cls_loss(smap: ScoreMap, gt: BBox, alpha: float = 2.0, beta: float = 4.0,
             sigma: float = 1.0) -> Tensor:
    """Penalty-reduced focal loss against a Gaussian splat at the GT cell."""
    s = smap.side
    return cls_loss_batch(ad.reshape(smap.logits, (1, s, s)), [gt], alpha, beta, sigma)


def cls_loss_batch(logits: Tensor, gts: Sequence[BBox], alpha: float = 2.0, beta: float = 4.0,
                   sigma: float = 1.0) -> Tensor:
    """Batch mean of :func:`cls_loss` over stacked ``B x S x S`` logits."""
    b, side = logits.shape[0], logits.shape[1]
    y = np.stack([gaussian_target(side, *gt_cell(gt, side), sigma) for gt in gts])
    pos = (y == 1.0).astype(np.float64)
    neg_w = (1.0 - pos) * (1.0 - y) ** beta
    n_pos = np.maximum(pos.reshape(b, -1).sum(axis=1), 1.0)
    # per-item normalisation folded into the weights, then averaged over the batch
    norm = (1.0 / (n_pos * b))[:, None, None]
    p = ad.sigmoid(logits)
    log_p = ad.scale(ad.softplus(ad.scale(logits, -1.0)), -1.0)
    log_1mp = ad.scale(ad.softplus(logits), -1.0)
    one_minus_p = ad.add_scalar(ad.scale(p, -1.0), 1.0)
    pos_term = ad.mul(ad.mul(_pow(one_minus_p, alpha), log_p), Tensor(pos * norm))
    neg_term = ad.mul(ad.mul(_pow(p, alpha), log_1mp), Tensor(neg_w * norm))
    return ad.scale(ad.tsum(ad.add(pos_term, neg_term)), -1.0)


def _pow(t: Tensor, k: float) -> Tensor:
    if k == 2.0:
        return ad.mul(t, t)
    if k == 1.0:
        return t
    return ad.exp(ad.scale(ad.log(t), k))


def boxes_at_cells(offset: Tensor, size: Tensor, cells: Sequence[tuple[int, int]]) -> Tensor:
    """``B x 4`` differentiable (cx, cy, w, h) gathered from stacked ``B x S x S x 2`` maps."""
    side = offset.shape[1]
    idx = np.arange(len(cells))
    rows = np.array([c[0] for c in cells])
    cols = np.array([c[1] for c in cells])
    off = offset[idx, rows, cols]
    center = ad.scale(ad.add(off, Tensor(np.stack([cols, rows], axis=1).astype(float))), 1.0 / side)
    return ad.concat([center, size[idx, rows, cols]], axis=1)


def l1_loss(pred: Tensor, gt: BBox) -> Tensor:
    """Mean absolute error over (cx, cy, w, h)."""
    return l1_loss_batch(ad.reshape(pred, (1, 4)), [gt])


def l1_loss_batch(pred: Tensor, gts: Sequence[BBox]) -> Tensor:
    target = np.stack([g.as_array() for g in gts])
    return ad.mean(ad.abs_(ad.sub(pred, Tensor(target))))


def giou_loss(pred: Tensor, gt: BBox) -> Tensor:
    """1 - GIoU between a differentiable cxcywh box and a fixed target box."""
    return giou_loss_batch(ad.reshape(pred, (1, 4)), [gt])


def giou_loss_batch(pred: Tensor, gts: Sequence[BBox]) -> Tensor:
    """Batch mean of ``1 - GIoU`` for ``B x 4`` cxcywh predictions."""
    c = [pred[:, i] for i in range(4)]
    half_w, half_h = ad.scale(c[2], 0.5), ad.scale(c[3], 0.5)
    px0, px1 = ad.sub(c[0], half_w), ad.add(c[0], half_w)
    py0, py1 = ad.sub(c[1], half_h), ad.add(c[1], half_h)
    g = np.array([gt.xyxy() for gt in gts])
    gx0, gy0, gx1, gy1 = (Tensor(g[:, i]) for i in range(4))
    zero = Tensor(np.zeros(len(gts)))
    iw = ad.maximum(ad.sub(ad.minimum(px1, gx1), ad.maximum(px0, gx0)), zero)
    ih = ad.maximum(ad.sub(ad.minimum(py1, gy1), ad.maximum(py0, gy0)), zero)
    inter = ad.mul(iw, ih)
    union = ad.sub(ad.add(ad.mul(c[2], c[3]), Tensor([gt.area for gt in gts])), inter)
    hull = ad.mul(ad.sub(ad.maximum(px1, gx1), ad.minimum(px0, gx0)),
                  ad.sub(ad.maximum(py1, gy1), ad.minimum(py0, gy0)))
    score = ad.sub(ad.div(inter, union), ad.div(ad.sub(hull, union), hull))
    return ad.add_scalar(ad.scale(ad.mean(score), -1.0), 1.0)


def _probs_matrix(results: Sequence[GateResult]) -> Tensor:
    if not results:
        raise ContractError("auxiliary losses need a non-empty batch")
    return ad.stack([r.probs for r in results])


def importance_loss(results: Sequence[GateResult]) -> Tensor:
    """Squared coefficient of variation of per-expert summed probabilities."""
    imp = ad.tsum(_probs_matrix(results), axis=0)
    mu = ad.mean(imp)
    var = ad.sub(ad.mean(ad.mul(imp, imp)), ad.mul(mu, mu))
    return ad.div(var, ad.mul(mu, mu))


def balance_loss(results: Sequence[GateResult]) -> Tensor:
    """M * sum_n f_n P_n with f_n counted over (item, top-K slot) pairs."""
    probs = _probs_matrix(results)
    m = probs.shape[1]
    counts = np.zeros(m)
    for r in results:
        for n in r.selected:
            counts[n] += 1
    frac = counts / counts.sum()
    mean_p = ad.mean(probs, axis=0)
    return ad.scale(ad.tsum(ad.mul(mean_p, Tensor(frac))), float(m))


@dataclass(frozen=True)
class LossBreakdown:
    cls: Tensor
    l1: Tensor
    giou: Tensor
    balance: Tensor
    importance: Tensor
    aux: Tensor
    total: Tensor

    CSV_FIELDS = ("cls", "l1", "giou", "balance", "importance", "total")

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("cls", "l1", "giou", "balance", "importance", "aux", "total")}


def total_loss(cls: Tensor, l1: Tensor, giou_: Tensor, balance: Tensor, importance: Tensor,
               lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> LossBreakdown:
    parts = [ad.as_tensor(v) for v in (cls, l1, giou_, balance, importance)]
    for p in parts:
        if p.size != 1:
            raise ContractError(f"loss parts must be scalars, got shape {p.shape}")
    cls, l1, giou_, balance, importance = (ad.reshape(p, ()) for p in parts)
    l_aux, l_cls, l_l1, l_giou = (float(v) for v in lambdas)
    aux = ad.add(balance, importance)
    total = ad.add(
        ad.add(ad.scale(aux, l_aux), ad.scale(cls, l_cls)),
        ad.add(ad.scale(l1, l_l1), ad.scale(giou_, l_giou)),
    )
    return LossBreakdown(cls, l1, giou_, balance, importance, aux, total)
