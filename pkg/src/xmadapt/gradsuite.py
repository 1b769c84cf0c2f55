"""Finite-difference gradient suite over every differentiable op plus the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import LossConfig, ce_loss, combined_loss, dice_loss, foreground_prob
from .model import GliomaNet, ModelConfig, channel_norm, pixel_shuffle
from .tensor import Tensor, gradcheck
from .vit import BackboneConfig, EncoderBlock, block_forward

OP_TOL = 1e-3
COMPOSITE_TOL = 1e-2


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    # a random projection makes every output element matter
    return T.tsum(out * rng.uniform(-1, 1, size=out.shape))


def op_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor], float]]:
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    pos = _leaf(rng, 3, 4, lo=0.5, hi=2.0)
    m1, m2 = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    x, w, bias = _leaf(rng, 2, 5, 6), _leaf(rng, 4, 6), _leaf(rng, 4)
    img, cw, cb = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 5, 3), _leaf(rng, 5)
    ln_x, g, beta = _leaf(rng, 3, 8, lo=-2, hi=2), _leaf(rng, 8, lo=0.5, hi=1.5), _leaf(rng, 8)
    sm = _leaf(rng, 3, 5, lo=-3, hi=3)
    ps = _leaf(rng, 1, 8, 2, 3)
    cn, cg, cbeta = _leaf(rng, 2, 4, 3, 3), _leaf(rng, 4, lo=0.5, hi=1.5), _leaf(rng, 4)
    prob = _leaf(rng, 2, 4, 4, lo=0.05, hi=0.95)
    gt = (rng.random((2, 4, 4)) < 0.4).astype(np.float32)
    logits = _leaf(rng, 2, 2, 4, 4, lo=-2, hi=2)
    p1, p2 = _leaf(rng, 2, 3), _leaf(rng, 2, 5)
    block = EncoderBlock(BackboneConfig(8, 4, 8, 1, 2, 2.0), rng)
    for prm in block.parameters():
        prm.data = rng.normal(0, 0.3, size=prm.shape).astype(np.float32)
    tokens = _leaf(rng, 1, 4, 8)
    r = lambda out: (lambda: _weighted(out(), np.random.default_rng(seed + 1)))  # noqa: E731
    return [
        ("add", r(lambda: a + b), [a, b], OP_TOL),
        ("sub", r(lambda: a - b), [a, b], OP_TOL),
        ("mul", r(lambda: a * b), [a, b], OP_TOL),
        ("div", r(lambda: a / pos), [a, pos], OP_TOL),
        ("exp", r(lambda: T.exp(a)), [a], OP_TOL),
        ("log", r(lambda: T.log(pos)), [pos], OP_TOL),
        ("sigmoid", r(lambda: T.sigmoid(a)), [a], OP_TOL),
        ("gelu", r(lambda: T.gelu(a)), [a], OP_TOL),
        ("matmul", r(lambda: T.matmul(m1, m2)), [m1, m2], OP_TOL),
        ("linear", r(lambda: T.linear(x, w, bias)), [x, w, bias], OP_TOL),
        ("conv1x1", r(lambda: T.conv1x1(img, cw, cb)), [img, cw, cb], OP_TOL),
        ("layernorm", r(lambda: T.layernorm(ln_x, g, beta, 1e-5)), [ln_x, g, beta], OP_TOL),
        ("softmax", r(lambda: T.softmax(sm, axis=-1)), [sm], OP_TOL),
        ("log_softmax", r(lambda: T.log_softmax(sm, axis=0)), [sm], OP_TOL),
        ("reshape", r(lambda: T.reshape(a, (4, 3)) * T.reshape(b, (4, 3))), [a, b], OP_TOL),
        ("permute", r(lambda: T.permute(m1, (2, 0, 1)) * T.permute(m1, (2, 0, 1))), [m1], OP_TOL),
        ("concat", r(lambda: T.concat([a, b * b], axis=1)), [a, b], OP_TOL),
        ("split", r(lambda: T.split(m2, [2, 3], axis=2)[1] * 2.0), [m2], OP_TOL),
        ("getitem", r(lambda: T.getitem(a, (slice(1, 3), [0, 2, 2]))), [a], OP_TOL),
        ("stack", r(lambda: T.stack([p1 * p1, p1], axis=0)), [p1], OP_TOL),
        ("sum", lambda: T.tsum(T.tsum(m2 * m2, axis=1)), [m2], OP_TOL),
        ("mean", lambda: T.mean(T.mean(p2 * p2, axis=0)), [p2], OP_TOL),
        ("pixel_shuffle", r(lambda: pixel_shuffle(ps)), [ps], OP_TOL),
        ("channel_norm", r(lambda: channel_norm(cn, cg, cbeta)), [cn, cg, cbeta], OP_TOL),
        ("dice_loss", lambda: dice_loss(prob, gt), [prob], OP_TOL),
        ("ce_loss", lambda: ce_loss(logits, gt), [logits], OP_TOL),
        ("combined_loss", lambda: combined_loss(logits, gt, LossConfig(0.5, 2.0)), [logits],
         COMPOSITE_TOL),
        ("foreground_prob", r(lambda: foreground_prob(logits)), [logits], OP_TOL),
        ("encoder block", r(lambda: block_forward(tokens, block)), [tokens, *block.parameters()],
         COMPOSITE_TOL),
    ]


def run_op_suite(seed: int = 0) -> list[CheckResult]:
    return [CheckResult(name, gradcheck(fn, inputs, seed=seed), tol)
            for name, fn, inputs, tol in op_cases(seed)]


def run_model_suite(config: ModelConfig, seed: int = 0, max_elements: int = 6) -> list[CheckResult]:
    """End-to-end loss gradient w.r.t. sampled adapter, decoder and lift weights."""
    net = GliomaNet(config)
    rng = np.random.default_rng(seed)
    S = config.image_size
    inputs = tuple(rng.uniform(0, 1, size=(1, len(g), S, S)) for g in net.variant.input_groups)
    gt = np.zeros((1, S, S), np.float32)
    gt[0, S // 4:3 * S // 4, S // 3:2 * S // 3] = 1
    loss_cfg = LossConfig(config.lambda_dice, config.lambda_ce)
    fn = lambda: combined_loss(net(inputs), gt, loss_cfg)  # noqa: E731
    targets = [("decoder head weight", net.decoder.head_weight),
               ("decoder stage-0 projection", net.decoder.stages[0].proj_weight)]
    if net.variant.kind == "cross":
        targets.insert(0, ("adapter weight", net.adapters[0].weight) if net.adapters else None)
        targets.append(("channel lift weight", net.lift_t1.weight))
    else:
        targets.append(("channel lift weight", net.lift.weight))
    results = []
    for item in targets:
        if item is None:
            continue
        name, param = item
        err = gradcheck(fn, [param], max_elements=max_elements, seed=seed)
        results.append(CheckResult(f"end-to-end: {name}", err, COMPOSITE_TOL))
    return results
