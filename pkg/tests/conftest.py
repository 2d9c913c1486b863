import numpy as np
import pytest

from hmoetrack import autodiff as ad
from hmoetrack.model import ModelConfig
from hmoetrack.tokens import EncoderConfig


def grad_check(fn, arrays, seed=0, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a list of Tensors to a Tensor; the scalar probed is
    ``sum(fn(xs) * R)`` for a fixed random ``R``.
    """
    xs = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(xs)
    weights = ad.Tensor(np.random.default_rng(seed).normal(size=out.shape))
    with ad.Tape() as tape:
        loss = ad.tsum(ad.mul(fn(xs), weights))
    ad.backward(loss, tape)
    worst = 0.0
    for i, x in enumerate(xs):
        def f(t, i=i):
            args = list(xs)
            args[i] = t
            return ad.tsum(ad.mul(fn(args), weights))
        num = ad.finite_difference_gradient(f, x, h)
        ana = x.grad if x.grad is not None else np.zeros(x.shape)
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        worst = max(worst, float(np.abs(num - ana).max() / scale))
    return worst


@pytest.fixture
def tiny_model_cfg():
    enc = EncoderConfig(search_size=16, clip_size=8, patch=8, dim=8, n_clips=2, depth=1, heads=2)
    return ModelConfig(encoder=enc, expert_widths=(4, 8, 16))
