"""Independent reference implementations used as test oracles.

Each oracle is written in the most direct way available (loops, dense
matrices, brute-force enumeration) and shares no code with the package
beyond the tape used to evaluate a forward function.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from amigo import tensor as T
from amigo.tensor import Tape, Tensor

FD_STEP = 1e-6


# -- finite differences --------------------------------------------------------


def _projected_loss(fn, tensors, weight):
    out = fn(tensors)
    return T.total_sum(T.mul(out, out.tape.constant(weight)))


def gradient_check(
    fn: Callable[[list[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    h: float = FD_STEP,
) -> float:
    """Max-norm relative error between tape and central-difference gradients.

    The (possibly non-scalar) output of ``fn`` is contracted with a fixed
    random weight matrix so every output entry contributes to the loss.
    """
    inputs = [np.array(x, dtype=np.float64, ndmin=2) for x in inputs]
    tape = Tape()
    probe = fn([tape.constant(x) for x in inputs])
    weight = np.random.default_rng(seed).normal(size=probe.shape)

    tape = Tape()
    leaves = [tape.variable(x) for x in inputs]
    loss = _projected_loss(fn, leaves, weight)
    analytic = tape.backward(loss, leaves)

    def value(arrs):
        t = Tape()
        return _projected_loss(fn, [t.constant(a) for a in arrs], weight).item()

    worst = 0.0
    for i, x in enumerate(inputs):
        numeric = np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[i][idx] += h
            minus[i][idx] -= h
            numeric[idx] = (value(plus) - value(minus)) / (2 * h)
        scale = max(np.abs(numeric).max(), np.abs(analytic[i]).max(), 1e-8)
        worst = max(worst, float(np.abs(numeric - analytic[i]).max() / scale))
    return worst


# -- graphs ----------------------------------------------------------------------


def brute_force_knn_edges(points: np.ndarray, k: int) -> set[tuple[int, int]]:
    """Union-symmetrised KNN edge set, ties broken by lower index."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    edges = set()
    for i in range(n):
        cand = []
        for j in range(n):
            if j == i:
                continue
            dx = pts[i, 0] - pts[j, 0]
            dy = pts[i, 1] - pts[j, 1]
            cand.append((dx * dx + dy * dy, j))
        cand.sort()
        for _, j in cand[:k]:
            edges.add((min(i, j), max(i, j)))
    return edges


def dense_neighbor_mean(features: np.ndarray, adjacency: np.ndarray) -> np.ndarray:
    out = np.zeros_like(features, dtype=np.float64)
    for i in range(len(features)):
        nbrs = np.flatnonzero(adjacency[i])
        if nbrs.size:
            out[i] = features[nbrs].mean(axis=0)
    return out


def dense_masked(features: np.ndarray, adjacency: np.ndarray, mask: np.ndarray):
    """Masking by zeroing rows of X and rows plus columns of A."""
    m = np.asarray(mask, dtype=np.float64)
    return features * m[:, None], adjacency * m[:, None] * m[None, :]


# -- survival statistics ---------------------------------------------------------


def brute_force_cindex(times, events, risks) -> float:
    """Harrell's C by explicit pair enumeration with 0.5 credit for risk ties."""
    num = 0.0
    den = 0
    n = len(times)
    for i in range(n):
        for j in range(n):
            if i == j or not events[i]:
                continue
            if times[i] < times[j]:
                den += 1
                if risks[i] > risks[j]:
                    num += 1.0
                elif risks[i] == risks[j]:
                    num += 0.5
    return num / den


def hand_logrank(times_a, events_a, times_b, events_b) -> tuple[float, float, float]:
    """Log-rank (observed_a, expected_a, variance) by looping over distinct event times."""
    ta, ea = list(times_a), list(events_a)
    tb, eb = list(times_b), list(events_b)
    event_times = sorted({t for t, e in zip(ta + tb, ea + eb) if e})
    observed = expected = variance = 0.0
    for t in event_times:
        n_a = sum(1 for x in ta if x >= t)
        n_b = sum(1 for x in tb if x >= t)
        d_a = sum(1 for x, e in zip(ta, ea) if e and x == t)
        d_b = sum(1 for x, e in zip(tb, eb) if e and x == t)
        n = n_a + n_b
        d = d_a + d_b
        observed += d_a
        expected += d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1)
    return observed, expected, variance


def hand_km(times, events) -> list[tuple[float, float]]:
    s = 1.0
    out = []
    for t in sorted({t for t, e in zip(times, events) if e}):
        at_risk = sum(1 for x in times if x >= t)
        d = sum(1 for x, e in zip(times, events) if e and x == t)
        s *= 1.0 - d / at_risk
        out.append((t, s))
    return out


def hand_cox_loss(risks, times, events) -> float:
    terms = []
    for j in range(len(risks)):
        if not events[j]:
            continue
        denom = sum(math.exp(risks[i]) for i in range(len(risks)) if times[i] >= times[j])
        terms.append(-(risks[j] - math.log(denom)))
    return sum(terms) / len(terms)


def parameter_gradient_check(params, loss_fn, names=None, h: float = FD_STEP, floor: float = 1e-8) -> float:
    """Max-norm relative error of model-parameter gradients vs central differences.

    ``loss_fn(w)`` builds a scalar loss from bound parameters ``w``. Arrays whose
    true gradient is zero are compared against ``floor`` instead of their own scale.
    """
    tape = Tape()
    w = params.bind(tape)
    analytic = w.gradients(loss_fn(w))

    def value():
        return loss_fn(params.bind(Tape(), trainable=False)).item()

    worst = 0.0
    for name in names or sorted(params.arrays):
        arr = params.arrays[name]
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(*arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = value()
            arr[idx] = orig - h
            down = value()
            arr[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        scale = max(np.abs(numeric).max(), np.abs(analytic[name]).max(), floor)
        worst = max(worst, float(np.abs(numeric - analytic[name]).max() / scale))
    return worst
