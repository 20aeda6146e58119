"""Survival evaluation: Harrell's C-index, Kaplan-Meier, log-rank, median split."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DegenerateInputError, EvaluationError


def _arrays(times, events, risks=None):
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    e = np.asarray(events, dtype=bool).reshape(-1)
    if t.size != e.size:
        raise EvaluationError(f"{t.size} times vs {e.size} events")
    if np.any(t <= 0):
        raise EvaluationError("survival times must be positive")
    if risks is None:
        return t, e
    r = np.asarray(risks, dtype=np.float64).reshape(-1)
    if r.size != t.size:
        raise EvaluationError(f"{t.size} times vs {r.size} risks")
    return t, e, r


def concordance_index(times, events, risks) -> float:
    """Harrell's C-index.

    A pair (i, j) is admissible when ``t_i < t_j`` and i had an observed
    event. It is concordant when ``risk_i > risk_j``; tied risks earn 0.5.
    """
    t, e, r = _arrays(times, events, risks)
    admissible = (t[:, None] < t[None, :]) & e[:, None]
    n_adm = int(admissible.sum())
    if n_adm == 0:
        raise EvaluationError("no admissible pairs for the C-index")
    conc = (r[:, None] > r[None, :]) & admissible
    ties = (r[:, None] == r[None, :]) & admissible
    return (int(conc.sum()) + 0.5 * int(ties.sum())) / n_adm


@dataclass
class KMCurve:
    event_times: np.ndarray
    survival_prob: np.ndarray
    at_risk: np.ndarray

    def median_survival(self) -> float | None:
        """First event time where the curve is at or below 0.5, else None."""
        hit = np.flatnonzero(self.survival_prob <= 0.5)
        return float(self.event_times[hit[0]]) if hit.size else None

    def at(self, time: float) -> float:
        """Step-function value S(time)."""
        i = np.searchsorted(self.event_times, time, side="right")
        return 1.0 if i == 0 else float(self.survival_prob[i - 1])


def kaplan_meier(times, events) -> KMCurve:
    t, e = _arrays(times, events)
    if t.size == 0:
        raise DegenerateInputError("kaplan_meier needs at least one outcome")
    event_times = np.unique(t[e])
    surv = np.empty(event_times.size)
    at_risk = np.empty(event_times.size, dtype=np.int64)
    s = 1.0
    for k, u in enumerate(event_times):
        n = int((t >= u).sum())
        d = int(((t == u) & e).sum())
        s *= 1.0 - d / n
        surv[k] = s
        at_risk[k] = n
    return KMCurve(event_times, surv, at_risk)


# ---------------------------------------------------------------------------
# chi-square tail through the regularised incomplete gamma function


def gammaincc(a: float, x: float) -> float:
    """Regularised upper incomplete gamma ``Q(a, x)``.

    Power series below ``x < a + 1``, Lentz continued fraction above.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    log_prefix = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(10_000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return max(0.0, 1.0 - total * math.exp(log_prefix))
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(log_prefix) * h


def chi2_sf(x: float, df: int = 1) -> float:
    return gammaincc(df / 2.0, x / 2.0)


@dataclass
class LogRankResult:
    chi_square: float
    p_value: float
    observed_a: float
    expected_a: float
    variance: float


def logrank_test(times_a, events_a, times_b, events_b) -> LogRankResult:
    """Two-group log-rank test with hypergeometric variance, 1 degree of freedom."""
    ta, ea = _arrays(times_a, events_a)
    tb, eb = _arrays(times_b, events_b)
    if ta.size == 0 or tb.size == 0:
        raise DegenerateInputError("log-rank test needs two non-empty groups")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    if not e.any():
        raise DegenerateInputError("log-rank test needs at least one observed event")
    obs = exp_ = var = 0.0
    for u in np.unique(t[e]):
        n_a = float((ta >= u).sum())
        n = n_a + float((tb >= u).sum())
        d_a = float(((ta == u) & ea).sum())
        d = d_a + float(((tb == u) & eb).sum())
        obs += d_a
        exp_ += d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0)
    if var <= 0:
        return LogRankResult(0.0, 1.0, obs, exp_, var)
    stat = (obs - exp_) ** 2 / var
    return LogRankResult(stat, chi2_sf(stat, 1), obs, exp_, var)


@dataclass
class Stratification:
    low: np.ndarray
    high: np.ndarray
    threshold: float
    median_survival_low: float | None = None
    median_survival_high: float | None = None


def stratify_by_median(risks, times=None, events=None) -> Stratification:
    """Split indices at the median risk; patients at the median count as low risk.

    With ``times``/``events`` given, per-group KM median survival is filled in.
    """
    r = np.asarray(risks, dtype=np.float64).reshape(-1)
    if r.size < 2:
        raise DegenerateInputError("median split needs at least two patients")
    med = float(np.median(r))
    low = np.flatnonzero(r <= med)
    high = np.flatnonzero(r > med)
    out = Stratification(low, high, med)
    if times is not None and events is not None:
        t, e = _arrays(times, events)
        if low.size:
            out.median_survival_low = kaplan_meier(t[low], e[low]).median_survival()
        if high.size:
            out.median_survival_high = kaplan_meier(t[high], e[high]).median_survival()
    return out


def survival_report(times, events, risks) -> tuple[dict, dict[str, KMCurve]]:
    """C-index, median-split log-rank and KM curves for one set of predictions."""
    t, e, r = _arrays(times, events, risks)
    strat = stratify_by_median(r, t, e)
    curves = {}
    if strat.low.size:
        curves["low"] = kaplan_meier(t[strat.low], e[strat.low])
    if strat.high.size:
        curves["high"] = kaplan_meier(t[strat.high], e[strat.high])
    lr = logrank_test(t[strat.low], e[strat.low], t[strat.high], e[strat.high])
    metrics = {
        "c_index": concordance_index(t, e, r),
        "logrank_chi2": lr.chi_square,
        "logrank_p": lr.p_value,
        "median_survival_low": strat.median_survival_low,
        "median_survival_high": strat.median_survival_high,
    }
    return metrics, curves


def write_km_csv(curves: dict[str, KMCurve], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "time", "survival_prob", "at_risk"])
        for group in sorted(curves):
            c = curves[group]
            for time, s, n in zip(c.event_times, c.survival_prob, c.at_risk):
                w.writerow([group, repr(float(time)), repr(float(s)), int(n)])
    return path


def write_metrics_json(metrics: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return path
