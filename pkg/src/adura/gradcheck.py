"""Finite-difference verification of every layer and loss.

Each check builds a small random instance, reduces the output to a scalar
with fixed random weights, and compares the backward-pass gradient of
every input with central differences.
"""

from __future__ import annotations

import time
from typing import Callable, NamedTuple

import numpy as np

from . import layers, losses, tensor as T
from .data import Label
from .rng import seeded_rng

TOLERANCE = 1e-4
STEP = 1e-5


class GradCheck(NamedTuple):
    """``build(rng)`` returns ``(fn, inputs)``; ``fn()`` maps to any-shape Tensor."""

    name: str
    build: Callable


class CheckResult(NamedTuple):
    name: str
    n_values: int
    rel_error: float
    passed: bool
    seconds: float


def relative_error(a, b):
    # gradients that are exactly zero (a conv bias feeding batch norm) would
    # otherwise compare finite-difference noise against 0
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(fn, t, h=STEP):
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``t.data``."""
    grad = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def run_check(check, seed=0, tol=TOLERANCE, h=STEP):
    start = time.perf_counter()
    rng = seeded_rng(seed)
    fn, inputs = check.build(rng)
    probe = fn()
    weights = rng.normal(size=probe.shape)

    def scalar():
        return T.sum_(fn() * weights)

    for t in inputs:
        t.grad = None
    scalar().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    errs = [relative_error(a, numeric_grad(scalar, t, h)) for a, t in zip(analytic, inputs)]
    err = max(errs) if errs else 0.0
    n = sum(t.size for t in inputs)
    return CheckResult(check.name, n, err, bool(err < tol), time.perf_counter() - start)


def run_checks(checks=None, seed=0, tol=TOLERANCE):
    checks = default_checks() if checks is None else checks
    return [run_check(c, seed, tol) for c in checks]


def format_results(results):
    lines = ["check,values,rel_error,status"]
    for r in results:
        lines.append(f"{r.name},{r.n_values},{r.rel_error:.3e},{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ registry


def _p(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _labels(rng, shape):
    return rng.choice(np.array([Label.POS, Label.NEG, Label.UNC, Label.BLANK], dtype=np.int8), size=shape)


def _unary(op, low=-2.0, high=2.0):
    def build(rng):
        x = T.Tensor(rng.uniform(low, high, size=(3, 4)), requires_grad=True)
        return (lambda: op(x)), [x]

    return build


def _binary(op):
    def build(rng):
        a, b = _p(rng, 3, 4), T.Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)
        return (lambda: op(a, b)), [a, b]

    return build


def _conv(C, O, k, stride, padding):
    def build(rng):
        x, w, b = _p(rng, 2, C, 5, 5), _p(rng, O, C, k, k), _p(rng, O)
        return (lambda: layers.conv2d(x, w, b, stride, padding)), [x, w, b]

    return build


def _deform(C, O):
    def build(rng):
        x, w, b = _p(rng, 2, C, 5, 5), _p(rng, O, C, 3, 3), _p(rng, O)
        # keep sample points away from integer grid lines, where bilinear
        # weights have kinks
        base = rng.integers(-2, 2, size=(2, 18, 5, 5)) + rng.uniform(0.2, 0.8, size=(2, 18, 5, 5))
        off = T.Tensor(base, requires_grad=True)
        return (lambda: layers.deform_conv2d(x, off, w, b, 1, 1)), [x, off, w, b]

    return build


def _batch_norm(rng):
    x, g, b = _p(rng, 3, 4, 3, 3), _p(rng, 4), _p(rng, 4)
    return (lambda: layers.batch_norm(x, g, b)[0]), [x, g, b]


def _deformable_block(rng):
    block = layers.DeformableBlock(3, 4, 3, rng=rng)
    # move away from the zero-offset initialisation so offsets matter
    block.offset_conv.weight.data = rng.normal(size=block.offset_conv.weight.shape) * 0.3
    x = _p(rng, 2, 3, 5, 5)
    return (lambda: block(x)[0]), [x] + block.parameters()


def _dense_block(rng):
    block = layers.DenseBlock(4, 2, 3, 3, rng=rng)
    x = _p(rng, 2, 4, 4, 4)
    return (lambda: block(x)), [x] + block.parameters()


def _dual_head(rng):
    head = layers.DualHead(6, 3, rng=rng, std=0.5)
    f = _p(rng, 4, 6)

    def fn():
        logits, raw = head(f)
        return T.concat([logits.reshape(4, 3, 1), raw], axis=2)

    return fn, [f] + head.parameters()


def _network(rng):
    cfg = layers.NetworkConfig(input_size=8, stem_channels=3, dense_blocks=1, layers_per_block=1, growth_rate=2, num_classes=2)
    net = layers.build_network(cfg, rng)
    net.deform.offset_conv.weight.data = rng.normal(size=net.deform.offset_conv.weight.shape) * 0.2
    x = T.Tensor(rng.random((2, 1, 8, 8)))
    params = [p for _, p in net.named_parameters() if p.size <= 60]

    def fn():
        out = net(x)
        return T.concat([out.logits.reshape(2, 2, 1), out.evidence_raw], axis=2)

    return fn, params


def _masked_bce(rng):
    z = _p(rng, 6, 4, scale=2.0)
    y = _labels(rng, (6, 4))
    y[0, 0], y[0, 1] = Label.POS, Label.NEG
    return (lambda: losses.masked_bce(z, y)), [z]


def _dirichlet(rng):
    raw = _p(rng, 6, 4, 2, scale=2.0)
    y = _labels(rng, (6, 4))
    y[0, :3] = (Label.POS, Label.NEG, Label.UNC)
    return (lambda: losses.dirichlet_loss(losses.evidence_to_alpha(raw), y, 0.05)), [raw]


def _orthogonality(rng):
    f = _p(rng, 2, 3, 4, 4)
    return (lambda: losses.orthogonality_loss(f)), [f]


def _offset(rng):
    # magnitudes on both sides of delta, away from the kink at |r| = delta
    mag = np.concatenate([rng.uniform(0.05, 0.9, 10), rng.uniform(1.1, 3.0, 8)])
    r = T.Tensor(mag * rng.choice([-1.0, 1.0], size=18), requires_grad=True)
    return (lambda: losses.offset_loss(r, 1.0)), [r]


def _total(rng):
    parts = {k: _p(rng) for k in losses.PART_NAMES}
    return (lambda: losses.total_loss(parts, losses.LossWeights())[0]), list(parts.values())


def _matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    return (lambda: T.matmul(a, b)), [a, b]


def _slice_pad_concat(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 2, 2, 4)

    def fn():
        c = T.concat([a, b], axis=1)
        return T.pad(c[:, 1:4, ::2], ((0, 0), (1, 0), (0, 1))).transpose(2, 0, 1)

    return fn, [a, b]


def _reductions(rng):
    a = _p(rng, 3, 4, 5)
    return (lambda: T.concat([T.sum_(a, axis=1), T.mean(a, axis=(0,), keepdims=False)], axis=0)), [a]


def default_checks():
    """Every primitive, layer and loss in the package."""
    return [
        GradCheck("add", _binary(T.add)),
        GradCheck("sub", _binary(T.sub)),
        GradCheck("mul", _binary(T.mul)),
        GradCheck("div", _binary(T.div)),
        GradCheck("power", _unary(lambda x: T.power(x, 3.0), 0.5, 2.0)),
        GradCheck("sqrt", _unary(T.sqrt, 0.5, 2.0)),
        GradCheck("exp", _unary(T.exp)),
        GradCheck("log", _unary(T.log, 0.5, 3.0)),
        GradCheck("abs", _unary(T.abs_, 0.2, 2.0)),
        GradCheck("relu", _unary(T.relu, 0.1, 2.0)),
        GradCheck("sigmoid", _unary(T.sigmoid)),
        GradCheck("softplus", _unary(T.softplus)),
        GradCheck("digamma", _unary(T.digamma, 0.2, 20.0)),
        GradCheck("matmul", _matmul),
        GradCheck("sum_mean", _reductions),
        GradCheck("slice_pad_concat", _slice_pad_concat),
        GradCheck("conv2d", _conv(2, 4, 3, 1, 1)),
        GradCheck("conv2d_wide", _conv(4, 2, 3, 1, 1)),
        GradCheck("conv2d_stride2", _conv(3, 3, 3, 2, 1)),
        GradCheck("conv2d_1x1", _conv(3, 2, 1, 1, 0)),
        GradCheck("deform_conv2d", _deform(2, 4)),
        GradCheck("deform_conv2d_wide", _deform(4, 2)),
        GradCheck("deformable_block", _deformable_block),
        GradCheck("batch_norm", _batch_norm),
        GradCheck("avg_pool2d", lambda rng: (lambda x: ((lambda: layers.avg_pool2d(x, 2)), [x]))(_p(rng, 2, 2, 4, 4))),
        GradCheck("global_avg_pool", lambda rng: (lambda x: ((lambda: layers.global_avg_pool(x)), [x]))(_p(rng, 2, 3, 3, 3))),
        GradCheck("dense_block", _dense_block),
        GradCheck("dual_head", _dual_head),
        GradCheck("network", _network),
        GradCheck("masked_bce", _masked_bce),
        GradCheck("dirichlet_loss", _dirichlet),
        GradCheck("orthogonality_loss", _orthogonality),
        GradCheck("offset_loss", _offset),
        GradCheck("total_loss", _total),
    ]
