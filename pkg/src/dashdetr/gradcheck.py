"""Finite-difference checks of every differentiable operation.

The error measure is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)``,
maximised over all entries; numeric gradients use central differences.
Random inputs are kept away from the kinks of relu/abs/max/min, where a
finite difference straddling the kink would be meaningless.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward, concat, layer_norm, log_softmax, matmul, no_grad, softmax, stack
from .autograd import elementwise as ew
from .boxes import giou_tensor
from .config import LossConfig, ModelConfig
from .loss import Target, set_loss
from .matching import hungarian, pairwise_cost

STEP = 1e-5
FLOOR = 1e-6


def numerical_gradient(f: Callable[[Sequence[np.ndarray]], float], arrays: Sequence[np.ndarray],
                       h: float = STEP) -> list[np.ndarray]:
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            fp = f(arrays)
            a[idx] = orig - h
            fm = f(arrays)
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check(build: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = STEP) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` maps input tensors to a scalar tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    backward(out)

    def f(arrs):
        with no_grad():
            return build(*[Tensor(a) for a in arrs]).item()

    numeric = numerical_gradient(f, arrays, h)
    return max(relative_error(t.grad, n) for t, n in zip(leaves, numeric))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def cases(seed: int = 0) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    rng = np.random.default_rng(seed)
    w = np.random.default_rng(seed + 1)  # weights for the output functional
    W = lambda shape: w.normal(size=shape)

    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    x3 = rng.normal(size=(2, 3, 4))
    distinct = a + np.where(np.abs(a - b) < 0.05, 0.1, 0.0)
    wa, w3 = W((3, 4)), W((2, 3, 4))
    w24, w231, w64, w32, w38, w234 = W((2, 4)), W((2, 3, 1)), W((6, 4)), W((3, 2)), W((3, 8)), W((2, 3, 4))

    def mha_case(q, k, v, wq, wk, wv):
        dh = 2
        Q = matmul(q, wq).reshape(1, 3, 2, dh).transpose(0, 2, 1, 3)
        K = matmul(k, wk).reshape(1, 5, 2, dh).transpose(0, 2, 1, 3)
        V = matmul(v, wv).reshape(1, 5, 2, dh).transpose(0, 2, 1, 3)
        att = softmax(matmul(Q, K.transpose(0, 1, 3, 2)) * (1 / np.sqrt(dh)), axis=-1)
        out = matmul(att, V).transpose(0, 2, 1, 3).reshape(1, 3, 4)
        return (out * W_mha).sum()

    W_mha = W((1, 3, 4))
    pred_boxes = np.column_stack([rng.uniform(0.3, 0.7, 5), rng.uniform(0.3, 0.7, 5),
                                  rng.uniform(0.1, 0.4, 5), rng.uniform(0.1, 0.4, 5)])
    tgt_boxes = np.column_stack([rng.uniform(0.3, 0.7, 5), rng.uniform(0.3, 0.7, 5),
                                 rng.uniform(0.1, 0.4, 5), rng.uniform(0.1, 0.4, 5)])
    wg = W((5,))

    # set loss on a random small instance, assignment frozen at the start point
    n, k, m = 6, 5, 3
    logits0 = rng.normal(size=(n, k))
    raw0 = rng.normal(size=(n, 4))
    target = Target(rng.integers(0, k - 1, size=m), tgt_boxes[:m])
    boxes0 = 1 / (1 + np.exp(-raw0))
    asg = hungarian(pairwise_cost(logits0, boxes0, target.classes, target.boxes))
    lcfg = LossConfig()

    def set_loss_case(logits, raw):
        return set_loss(logits, ew("sigmoid", raw), target, asg, lcfg).total

    return {
        "add": (lambda x, y: _weighted_fixed(x + y, wa), [a, b]),
        "sub": (lambda x, y: _weighted_fixed(x - y, wa), [a, b]),
        "mul": (lambda x, y: _weighted_fixed(x * y, wa), [a, b]),
        "div": (lambda x, y: _weighted_fixed(x / y, wa), [a, pos]),
        "broadcast_trailing": (lambda x, y: _weighted_fixed(x + y * 2.0, w3), [x3, a]),
        "broadcast_bias": (lambda x, y: _weighted_fixed(x * y, w3), [x3, rng.normal(size=4)]),
        "relu": (lambda x: _weighted_fixed(ew("relu", x), wa), [_away_from_zero(rng, (3, 4))]),
        "sigmoid": (lambda x: _weighted_fixed(ew("sigmoid", x), wa), [a]),
        "exp": (lambda x: _weighted_fixed(ew("exp", x), wa), [a]),
        "log": (lambda x: _weighted_fixed(ew("log", x), wa), [pos]),
        "abs": (lambda x: _weighted_fixed(ew("abs", x), wa), [_away_from_zero(rng, (3, 4))]),
        "sqrt": (lambda x: _weighted_fixed(ew("sqrt", x), wa), [pos]),
        "tanh": (lambda x: _weighted_fixed(ew("tanh", x), wa), [a]),
        "maximum": (lambda x, y: _weighted_fixed(ew("maximum", x, y), wa), [distinct, b]),
        "minimum": (lambda x, y: _weighted_fixed(ew("minimum", x, y), wa), [distinct, b]),
        "matmul": (lambda x, y: _weighted_fixed(matmul(x, y), W_mm), [rng.normal(size=(3, 5)), rng.normal(size=(5, 2))]),
        "matmul_shared": (lambda x, y: _weighted_fixed(matmul(x, y), W_mms), [rng.normal(size=(2, 3, 5)), rng.normal(size=(5, 2))]),
        "matmul_batched": (lambda x, y: _weighted_fixed(matmul(x, y), W_mms), [rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 5, 2))]),
        "softmax": (lambda x: _weighted_fixed(softmax(x, axis=-1), wa), [a]),
        "softmax_axis0": (lambda x: _weighted_fixed(softmax(x, axis=0), wa), [a]),
        "log_softmax": (lambda x: _weighted_fixed(log_softmax(x, axis=-1), wa), [a]),
        "layer_norm": (lambda x, g, c: _weighted_fixed(layer_norm(x, g, c), w3), [x3, rng.normal(size=4), rng.normal(size=4)]),
        "sum_axis": (lambda x: _weighted_fixed(x.sum(axis=1), w24), [x3]),
        "mean": (lambda x: _weighted_fixed(x.mean(axis=-1, keepdims=True), w231), [x3]),
        "reshape_transpose": (lambda x: _weighted_fixed(x.reshape(4, 6).transpose(1, 0), w64), [x3]),
        "take_rows": (lambda x: _weighted_fixed(x[np.array([2, 0, 2])], wa), [a]),
        "slice": (lambda x: _weighted_fixed(x[:, 1:3], w32), [a]),
        "concat": (lambda x, y: _weighted_fixed(concat([x, y], axis=1), w38), [a, b]),
        "stack": (lambda x, y: _weighted_fixed(stack([x, y], axis=0), w234), [a, b]),
        "attention": (mha_case, [rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 5, 4)), rng.normal(size=(1, 5, 4)),
                                 rng.normal(size=(4, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4))]),
        "giou": (lambda p: _weighted_fixed(giou_tensor(p, tgt_boxes), wg), [pred_boxes]),
        "set_loss": (set_loss_case, [logits0, raw0]),
    }


W_mm = np.random.default_rng(1234).normal(size=(3, 2))
W_mms = np.random.default_rng(1235).normal(size=(2, 3, 2))


def _weighted_fixed(t: Tensor, weights: np.ndarray) -> Tensor:
    """Fixed random linear functional, so every output entry matters to the check."""
    return (t * weights).sum()


def model_case(seed: int = 0) -> tuple[Callable, list[np.ndarray]]:
    """Whole detector on a tiny config: gradient w.r.t. the input-patch projection."""
    from .model import Detector

    cfg = ModelConfig(d_model=8, num_encoder_layers=1, num_decoder_layers=1, num_heads=2, num_queries=3,
                      num_classes=2, ffn_hidden=8, patch_size=4, image_height=8, image_width=8)
    model = Detector(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    image = rng.random((1, 3, 8, 8))
    weights = rng.normal(size=(1, 3, 3))
    from .model import patchify

    patches = patchify(image, 4)

    def build(proj):
        tokens = matmul(Tensor(patches), proj) + model.backbone.bias
        pred = model.heads(model.decode(model.encode(tokens)))
        return (pred.class_logits * weights).sum() + pred.boxes.sum()

    return build, [model.backbone.weight.data.copy()]


def run_suite(seed: int = 0) -> dict[str, float]:
    results = {name: check(fn, arrays) for name, (fn, arrays) in cases(seed).items()}
    fn, arrays = model_case(seed)
    results["detector"] = check(fn, arrays)
    return results
