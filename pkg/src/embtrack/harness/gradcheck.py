"""Finite-difference gradient checks for every differentiable op and the losses."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..core import ops
from ..core.tensor import Tape, Tensor, precision
from ..loss import (
    InstanceLabelMap, NeighborhoodSpec, cosine_embedding_loss, prepare_instances, softmax_cross_entropy,
)
from ..net import NetworkConfig, RecurrentHourglassNet, convgru_step, init_params


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    seconds: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def analytic_grads(fn: Callable, arrays: list[np.ndarray]) -> list[np.ndarray]:
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
        tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def numeric_grads(fn: Callable, arrays: list[np.ndarray], h: float = 1e-4) -> list[np.ndarray]:
    """Central differences of the scalar ``fn`` w.r.t. every input entry."""
    arrays = [a.copy() for a in arrays]

    def f():
        return fn(*[Tensor(a) for a in arrays]).item()

    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), or the absolute gap when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    diff = np.linalg.norm(a - n)
    return float(diff / scale) if scale > 1e-8 else float(diff)


def check(fn: Callable, arrays: list[np.ndarray], h: float = 1e-4) -> float:
    ga = analytic_grads(fn, arrays)
    gn = numeric_grads(fn, arrays, h)
    return max(relative_error(a, n) for a, n in zip(ga, gn))


def _projected(op: Callable, out_shape_fn=None, seed: int = 0):
    """Scalarise a tensor-valued op with a fixed random projection."""
    cache = {}

    def fn(*ts):
        y = op(*ts)
        if y.data.size == 1:
            return y
        if y.shape not in cache:
            cache[y.shape] = np.random.default_rng(seed).standard_normal(y.shape)
        return ops.sum(ops.mul(y, Tensor(cache[y.shape])))

    return fn


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def _distinct(rng, shape):
    # a random permutation of well-separated values keeps max-pool argmax stable under +-h
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - n * 0.005).reshape(shape)


def _label_map(rng, H, W, k):
    """Random blocky instance map with ids 0..k-1, every id present."""
    lab = np.zeros((H, W), dtype=np.int64)
    for i in range(1, k):
        y, x = rng.integers(0, H - 3), rng.integers(0, W - 3)
        lab[y:y + rng.integers(2, 5), x:x + rng.integers(2, 5)] = i
    present = np.unique(lab)
    return np.searchsorted(present, lab)


def _cases(rng: np.random.Generator):
    """Yield (name, fn, arrays) triples; the caller draws several instances per name."""
    B, C, H, W = 1, 2, 6, 6
    yield "add", _projected(ops.add), [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((1, 3, 1, 1))]
    yield "sub", _projected(ops.sub), [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]
    yield "mul", _projected(ops.mul), [rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 1))]
    yield "sum", lambda x: ops.sum(ops.mul(x, x)), [rng.standard_normal((3, 4))]
    yield "mean", lambda x: ops.mean(ops.mul(x, x)), [rng.standard_normal((3, 4))]
    yield "square", _projected(ops.square), [rng.standard_normal((3, 5))]
    yield "relu", _projected(ops.relu), [_away_from_zero(rng, (2, 3, 4, 4))]
    yield "sigmoid", _projected(ops.sigmoid), [3 * rng.standard_normal((2, 3, 4))]
    yield "tanh", _projected(ops.tanh), [2 * rng.standard_normal((2, 3, 4))]
    yield "concat_channels", _projected(ops.concat_channels), [rng.standard_normal((B, 2, H, W)),
                                                               rng.standard_normal((B, 3, H, W))]
    yield "slice_channels", _projected(lambda x: ops.slice_channels(x, 1, 3)), [rng.standard_normal((B, 4, H, W))]
    for pad in ("zero", "reflect"):
        yield (f"conv2d_{pad}", _projected(lambda x, w, b, p=pad: ops.conv2d(x, w, b, padding=p)),
               [rng.standard_normal((2, C, H, W)), rng.standard_normal((3, C, 3, 3)), rng.standard_normal(3)])
    yield "conv2d_1x1", _projected(lambda x, w, b: ops.conv2d(x, w, b)), [
        rng.standard_normal((B, C, H, W)), rng.standard_normal((3, C, 1, 1)), rng.standard_normal(3)]
    yield "max_pool2d", _projected(ops.max_pool2d), [_distinct(rng, (B, C, H, W))]
    yield "upsample2x", _projected(ops.upsample2x), [rng.standard_normal((B, C, 3, 3))]

    def gru(x, h, wzr, bzr, wh, bh):
        return convgru_step(x, h, {"wzr": wzr, "bzr": bzr, "wh": wh, "bh": bh})

    c = 2
    yield "convgru_step", _projected(gru), [
        rng.standard_normal((1, c, 4, 4)), rng.standard_normal((1, c, 4, 4)),
        0.5 * rng.standard_normal((2 * c, 2 * c, 3, 3)), 0.5 * rng.standard_normal(2 * c),
        0.5 * rng.standard_normal((c, 2 * c, 3, 3)), 0.5 * rng.standard_normal(c)]

    lab = _label_map(rng, 8, 8, int(rng.integers(2, 5)))
    valid = rng.random((8, 8)) > 0.1
    valid |= lab > 0  # keep every instance
    prep = prepare_instances(InstanceLabelMap(lab, valid), NeighborhoodSpec(radius=3.0))
    yield "cosine_embedding_loss", lambda e: cosine_embedding_loss(e, [prep]), [rng.standard_normal((1, 3, 8, 8))]

    classes = rng.integers(0, 3, size=(2, 5, 5))
    cvalid = rng.random((2, 5, 5)) > 0.2
    yield "softmax_cross_entropy", lambda z: softmax_cross_entropy(z, classes, cvalid), [
        rng.standard_normal((2, 3, 5, 5))]


def _network_case(rng: np.random.Generator):
    """Full two-stack recurrent network over two frames, checked w.r.t. a few weights."""
    cfg = NetworkConfig(levels=1, channels=2, embedding_dim=2, stacks=2)
    params = init_params(cfg, rng)
    # zero-initialised head biases leave dead pixels at the origin, where the
    # cosine is not differentiable; push every embedding away from it
    for n in ("head0.b", "head1.b"):
        shape = params[n].data.shape
        params[n].data[...] = rng.choice([-1.0, 1.0], shape) * rng.uniform(0.5, 1.0, shape)
    names = ["hg0.down0.w", "hg0.gru0.wzr", "head1.b"]
    frames = [rng.standard_normal((1, 1, 4, 4)) for _ in range(2)]
    lab = _label_map(rng, 4, 4, 2)
    prep = prepare_instances(InstanceLabelMap(lab), NeighborhoodSpec())

    def fn(*ws):
        p = dict(params)
        for n, w in zip(names, ws):
            p[n] = w
        net = RecurrentHourglassNet(cfg, p)
        outs, _ = net.run_sequence([Tensor(f) for f in frames])
        total = None
        for frame_out in outs:
            for o in frame_out:
                term = cosine_embedding_loss(o, [prep])
                total = term if total is None else ops.add(total, term)
        return total

    return "network_sequence_loss", fn, [params[n].data.copy() for n in names]


def run_suite(instances: int = 5, seed: int = 0, h: float = 1e-4, tol: float = 1e-4,
              include_network: bool = True) -> list[CheckResult]:
    """Check every op on ``instances`` random draws in float64."""
    results = {}
    with precision(np.float64):
        for k in range(instances):
            rng = np.random.default_rng([seed, k])
            cases = list(_cases(rng))
            if include_network:
                cases.append(_network_case(rng))
            for name, fn, arrays in cases:
                t0 = time.perf_counter()
                err = check(fn, arrays, h)
                dt = time.perf_counter() - t0
                prev = results.get(name)
                if prev is None:
                    results[name] = CheckResult(name, 1, err, dt, tol)
                else:
                    prev.instances += 1
                    prev.max_rel_error = max(prev.max_rel_error, err)
                    prev.seconds += dt
    return list(results.values())


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'op':<24s} {'n':>3s} {'max rel err':>12s} {'s':>6s}  status"]
    for r in results:
        lines.append(f"{r.name:<24s} {r.instances:>3d} {r.max_rel_error:>12.3e} {r.seconds:>6.2f}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
