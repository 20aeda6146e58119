"""Batched Cox partial-likelihood loss and batch-censored-portion sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .exceptions import AllCensoredBatchError, ConfigError, DataError
from .tensor import Tensor

UNIFORM = "uniform"
Alpha = Union[float, str]


@dataclass
class BatchSpec:
    """``bcp_alpha`` is the chance that a batch slot is filled from the
    censored pool; the ``"uniform"`` sentinel samples all patients alike."""

    batch_size: int = 128
    bcp_alpha: Alpha = 0.1

    def __post_init__(self):
        if isinstance(self.bcp_alpha, str):
            if self.bcp_alpha != UNIFORM:
                raise ConfigError(f"bcp_alpha must be a number or {UNIFORM!r}, got {self.bcp_alpha!r}")
        else:
            a = float(self.bcp_alpha)
            if a == 1.0:
                raise ConfigError(
                    "bcp_alpha=1 fills every batch with censored patients only; the Cox loss has "
                    "no observed event to explain and censored patients would lose their explicit gradient"
                )
            if not 0.0 <= a < 1.0:
                raise ConfigError(f"bcp_alpha must lie in [0, 1), got {a}")
            self.bcp_alpha = a
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")


@dataclass
class RiskEntry:
    patient_id: str
    risk: Tensor
    time: float
    event: bool

    def __post_init__(self):
        if not self.time > 0:
            raise DataError(f"{self.patient_id}: time must be positive")


def ties_policy(times: Sequence[float]) -> np.ndarray:
    """Risk-set membership: ``member[j, i]`` is true when ``t_i >= t_j``.

    Equal times are in each other's risk set (Breslow handling).
    """
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    return t[None, :] >= t[:, None]


def cox_batch_loss(risks: Tensor, times: Sequence[float], events: Sequence[bool]) -> Tensor:
    """Mean negative log partial likelihood over the observed events in a batch.

    ``risks`` is an ``n x 1`` (or ``1 x n``) tensor of log-hazards. Censored
    subjects only contribute through the risk-set denominators.
    """
    r = risks.value.reshape(-1)
    n = r.size
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    ev = np.asarray(events, dtype=bool).reshape(-1)
    if t.size != n or ev.size != n:
        raise DataError(f"cox_batch_loss: {n} risks, {t.size} times, {ev.size} events")
    if np.any(t <= 0):
        raise DataError("cox_batch_loss: times must be positive")
    if not ev.any():
        raise AllCensoredBatchError("all-censored batch: the Cox loss needs at least one observed event")
    member = ties_policy(t)[ev]  # (n_obs, n)
    masked = np.where(member, r[None, :], -np.inf)
    top = masked.max(axis=1, keepdims=True)
    w = np.exp(masked - top)
    denom = w.sum(axis=1, keepdims=True)
    lse = (top + np.log(denom)).reshape(-1)
    n_obs = int(ev.sum())
    loss = float((lse - r[ev]).sum() / n_obs)
    soft = w / denom  # softmax over each risk set
    shape = risks.shape

    def backward(g):
        grad = soft.sum(axis=0)
        grad[ev] -= 1.0
        return ((g.reshape(-1)[0] / n_obs) * grad.reshape(shape),)

    return risks.tape.record("cox_loss", (risks,), np.array([[loss]]), backward, flops=4 * member.size)


def cox_loss_from_entries(entries: Sequence[RiskEntry]) -> Tensor:
    risks = T.concat_rows([e.risk for e in entries])
    return cox_batch_loss(risks, [e.time for e in entries], [e.event for e in entries])


def bcp_sample_batch(events: Sequence[bool], spec: BatchSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one batch of distinct patient indices.

    Each slot picks the censored pool with probability ``alpha`` (else the
    observed-event pool) and then a patient uniformly from it; a slot that
    hits an already chosen patient is redrawn from scratch. The batch size is
    capped by the number of patients reachable with non-zero probability.
    """
    ev = np.asarray(events, dtype=bool).reshape(-1)
    n = ev.size
    if spec.bcp_alpha == UNIFORM:
        size = min(spec.batch_size, n)
        return rng.choice(n, size=size, replace=False)
    alpha = spec.bcp_alpha
    censored = np.flatnonzero(~ev)
    observed = np.flatnonzero(ev)
    if alpha > 0 and censored.size == 0:
        raise DataError("bcp_alpha > 0 but there are no censored patients")
    if observed.size == 0:
        raise DataError("no patients with an observed event")
    reachable = observed.size + (censored.size if alpha > 0 else 0)
    size = min(spec.batch_size, reachable)
    chosen: list[int] = []
    taken = np.zeros(n, dtype=bool)
    while len(chosen) < size:
        pool = censored if rng.random() < alpha else observed
        i = int(pool[rng.integers(pool.size)])
        if taken[i]:
            continue
        taken[i] = True
        chosen.append(i)
    return np.array(chosen, dtype=np.int64)
