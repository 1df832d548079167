"""Finite-difference verification of every differentiable primitive and of the full model loss.

All checks run in float64. A check projects the output onto fixed random
weights to obtain a scalar, differentiates it on a tape and compares against
central differences. The error measure is ``||g_tape - g_fd|| / max(||g_tape||,
||g_fd||, floor)`` per input tensor; the reported figure is the worst input.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig
from .fewshot import distance_matrix, nll_from_distances
from .model import Model, ModelConfig
from .tensor import Tensor
from .topology import SkeletonGraph

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3
PRIMITIVE_EPS = 1e-6
END_TO_END_EPS = 1e-3
_FLOOR = 1e-6
KINK_RETRIES = 3


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float
    seconds: float
    worst_input: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" [{self.worst_input}]" if self.worst_input else ""
        return f"{status} {self.name:<28} rel_err={self.rel_error:.2e} tol={self.tolerance:.0e}{where}"


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = _FLOOR) -> float:
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den


def _with_signature(f: Callable[[], float]) -> tuple[float, bytes]:
    masks: list[bytes] = []
    with T.observe_kinks(lambda m: masks.append(np.packbits(m).tobytes())):
        value = f()
    return value, b"".join(masks)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float, kink_aware: bool = False) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``x`` (mutated in place, then restored).

    With ``kink_aware`` a step whose two evaluations see different relu
    patterns is retried with a 10x smaller step, up to ``KINK_RETRIES`` times.
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        h = eps
        for _ in range(KINK_RETRIES + 1):
            flat[i] = old + h
            hi, sig_hi = _with_signature(f) if kink_aware else (f(), b"")
            flat[i] = old - h
            lo, sig_lo = _with_signature(f) if kink_aware else (f(), b"")
            flat[i] = old
            if sig_hi == sig_lo:
                break
            h /= 10
        gflat[i] = (hi - lo) / (2 * h)
    return g


def check_function(name: str, fn: Callable[..., Tensor], inputs: dict[str, np.ndarray], seed: int = 0,
                   eps: float = PRIMITIVE_EPS, tol: float = PRIMITIVE_TOL) -> CheckResult:
    """Compare tape and finite-difference gradients of ``sum(w * fn(**inputs))``."""
    start = time.perf_counter()
    with T.precision(np.float64):
        tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in inputs.items()}
        with T.Tape() as tape:
            out = fn(**tensors)
            w = np.random.default_rng(seed + 1).normal(size=out.shape)
            loss = T.sum_(T.mul(out, Tensor(w)))
        T.backward(loss, tape)

        def scalar() -> float:
            with T.no_grad():
                return float(np.sum(fn(**tensors).data * w))

        worst, worst_name = 0.0, ""
        for k, t in tensors.items():
            err = relative_error(t.grad, numeric_gradient(scalar, t.data, eps))
            if err > worst or not np.isfinite(err):
                worst, worst_name = err, k
    return CheckResult(name, worst, tol, time.perf_counter() - start, worst_name)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    n = lambda *s: rng.normal(size=s)
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)

    def bn(training):
        def f(x, gamma, beta):
            rm, rv = np.zeros((1, 3, 1)), np.ones((1, 3, 1)) * 1.5
            return T.batch_norm(x, T.reshape(gamma, (1, 3, 1)), T.reshape(beta, (1, 3, 1)), (0, 2), rm, rv, training)
        return f

    def drop(x):
        return T.dropout(x, 0.5, np.random.default_rng(3), training=True)

    def masked_distance(q, s):
        mq = np.array([[True, True, False], [True, True, True]])
        ms = np.array([[True, False, True], [True, True, True], [True, True, False]])
        return distance_matrix(q, s, mq, ms)

    specs = [
        ("add_broadcast", T.add, dict(a=n(3, 4), b=n(4))),
        ("sub", T.sub, dict(a=n(3, 4), b=n(3, 1))),
        ("mul_broadcast", T.mul, dict(a=n(2, 3, 4), b=n(3, 1))),
        ("div", T.div, dict(a=n(3, 4), b=pos(3, 4))),
        ("neg", T.neg, dict(a=n(5))),
        ("relu", T.relu, dict(a=_away_from_zero(rng, (4, 5)))),
        ("exp", T.exp, dict(a=n(3, 3))),
        ("log", T.log, dict(a=pos(3, 3))),
        ("sqrt", T.sqrt, dict(a=pos(3, 3))),
        ("sum_axis", lambda a: T.sum_(a, axis=(0, 2)), dict(a=n(2, 3, 4))),
        ("mean_axis", lambda a: T.mean(a, axis=1, keepdims=True), dict(a=n(2, 3, 4))),
        ("reshape_transpose", lambda a: T.transpose(T.reshape(a, (4, 6)), (1, 0)), dict(a=n(2, 3, 4))),
        ("getitem_slice", lambda a: a[:, 1:3, ::2], dict(a=n(2, 4, 5))),
        ("getitem_fancy", lambda a: T.getitem(a, np.array([0, 2, 2, 1])), dict(a=n(3, 4))),
        ("concat", lambda a, b: T.concat([a, b], axis=1), dict(a=n(2, 3), b=n(2, 2))),
        ("stack", lambda a, b: T.stack([a, b], axis=0), dict(a=n(2, 3), b=n(2, 3))),
        ("scatter_rows", lambda a: T.scatter_rows(a, np.array([0, 3]), 4), dict(a=n(2, 3))),
        ("matmul", T.matmul, dict(a=n(3, 4), b=n(4, 2))),
        ("matmul_batched", T.matmul, dict(a=n(2, 3, 4), b=n(4, 2))),
        ("einsum_3op", lambda a, b, c: T.einsum("ij,jk,kl->il", a, b, c), dict(a=n(2, 3), b=n(3, 4), c=n(4, 2))),
        ("einsum_broadcast", lambda a, b: T.einsum("bij,jk->bik", a, b), dict(a=n(2, 3, 4), b=n(4, 5))),
        ("softmax_lastdim", T.softmax_lastdim, dict(x=n(3, 5))),
        ("log_softmax_lastdim", T.log_softmax_lastdim, dict(x=n(3, 5))),
        ("norm_lastdim", T.norm_lastdim, dict(x=n(3, 4))),
        ("graph_conv", T.graph_conv, dict(x=n(2, 3, 4, 5), adjacency=n(2, 5, 5), weight=n(2, 4, 3))),
        ("conv_time_stride1", lambda x, w, b: T.conv_time(x, w, b, 1), dict(x=n(2, 3, 5, 4), w=n(4, 3, 3), b=n(4))),
        ("conv_time_stride2", lambda x, w, b: T.conv_time(x, w, b, 2), dict(x=n(2, 3, 5, 4), w=n(4, 3, 3), b=n(4))),
        ("conv1x1", T.conv1x1, dict(x=n(2, 3, 4, 2), weight=n(5, 3), bias=n(5))),
        ("batch_norm_train", bn(True), dict(x=n(4, 3, 5), gamma=pos(3), beta=n(3))),
        ("batch_norm_eval", bn(False), dict(x=n(4, 3, 5), gamma=pos(3), beta=n(3))),
        ("dropout", drop, dict(x=n(4, 6))),
        ("distance_matrix", masked_distance, dict(q=n(2, 3, 4), s=n(3, 3, 4))),
        ("nll_from_distances", lambda d: nll_from_distances(d, np.array([0, 2])), dict(d=pos(2, 3))),
    ]
    return [check_function(name, fn, inputs, seed) for name, fn, inputs in specs]


def toy_graph() -> SkeletonGraph:
    """Five joints: hip (center), spine, head and two hands; three overlapping parts."""
    return SkeletonGraph(
        num_joints=5,
        edges=((0, 1), (1, 2), (1, 3), (1, 4)),
        center=0,
        parts={"head": (1, 2), "hands": (1, 3, 4), "torso": (0, 1)},
        name="toy5",
    )


def tiny_model(seed: int = 0) -> Model:
    cfg = ModelConfig(encoder=EncoderConfig(channels=(4, 4), strides=(1, 2), dropout=0.5), d_emb=4)
    return Model(cfg, graph=toy_graph(), seed=seed)


def end_to_end_check(seed: int = 0, eps: float = END_TO_END_EPS, tol: float = END_TO_END_TOL) -> CheckResult:
    """Gradient of a 2-way episode loss with respect to every model parameter."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        model = tiny_model(seed)
        x = rng.normal(size=(4, 3, 12, 5, 2))
        mask = np.array([[True, False], [True, True], [True, False], [True, True]])
        x[~mask[:, 0], :, :, :, 0] = 0
        x[:, :, :, :, 1] *= mask[:, 1][:, None, None, None]
        targets = np.array([0, 1])

        def loss_value():
            drop_rng = np.random.default_rng(seed + 100)
            reps, umask = model.represent(x, mask, training=True, rng=drop_rng)
            d = distance_matrix(reps[2:], reps[:2], umask[2:], umask[:2])
            return nll_from_distances(d, targets)

        model.zero_grad()
        with T.Tape() as tape:
            loss = loss_value()
        T.backward(loss, tape)
        analytic = {k: p.grad.copy() for k, p in model.params.items()}

        def scalar() -> float:
            with T.no_grad():
                return float(loss_value().data)

        worst, worst_name = 0.0, ""
        for k, p in model.params.items():
            err = relative_error(analytic[k], numeric_gradient(scalar, p.data, eps, kink_aware=True))
            if err > worst or not np.isfinite(err):
                worst, worst_name = err, k
    return CheckResult("end_to_end_episode_loss", worst, tol, time.perf_counter() - start, worst_name)


def run_suite(seed: int = 0) -> list[CheckResult]:
    return primitive_checks(seed) + [end_to_end_check(seed)]
