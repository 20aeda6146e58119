"""Input validation helpers for the estimator API."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .exceptions import DataError
from .graph import Cohort, PatientRecord

SURV_DTYPE = np.dtype([("event", bool), ("time", np.float64)])


def make_survival_y(times, events) -> np.ndarray:
    """Structured ``(event, time)`` array in the scikit-survival layout."""
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    e = np.asarray(events, dtype=bool).reshape(-1)
    if t.size != e.size:
        raise DataError(f"{t.size} times vs {e.size} events")
    y = np.empty(t.size, dtype=SURV_DTYPE)
    y["time"] = t
    y["event"] = e
    return y


def check_survival_y(y, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(times, events)`` from a structured array or an ``(n, 2)``
    ``[time, event]`` array."""
    arr = np.asarray(y)
    if arr.dtype.names:
        if not {"time", "event"} <= set(arr.dtype.names):
            raise DataError("structured y needs 'time' and 'event' fields")
        times = arr["time"].astype(np.float64)
        events = arr["event"].astype(bool)
    else:
        arr = np.asarray(y, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise DataError(f"y must be structured or shaped (n, 2), got {arr.shape}")
        times, events = arr[:, 0], arr[:, 1].astype(bool)
    if n is not None and times.size != n:
        raise DataError(f"y has {times.size} rows for {n} patients")
    if not np.all(np.isfinite(times)) or np.any(times <= 0):
        raise DataError("survival times must be finite and positive")
    return times, events


def check_patients(X, modalities: Sequence[str] | None = None) -> tuple[list[PatientRecord], list[str]]:
    """Accept a :class:`Cohort` or a sequence of patient records.

    Returns the patient list and the modality registry, and checks every
    patient has at least one graph per registered modality.
    """
    if isinstance(X, Cohort):
        patients = list(X.patients)
        registry = list(modalities) if modalities is not None else list(X.modalities)
    else:
        patients = list(X)
        if not all(isinstance(p, PatientRecord) for p in patients):
            raise DataError("X must be a Cohort or a sequence of PatientRecord")
        if modalities is None:
            registry = sorted({m for p in patients for m in p.graphs})
        else:
            registry = list(modalities)
    if not patients:
        raise DataError("no patients given")
    if not registry:
        raise DataError("no modalities registered")
    for p in patients:
        for m in registry:
            if not p.graphs.get(m):
                raise DataError(f"patient {p.patient_id!r} has no graph for modality {m!r}")
    return patients, registry


def survival_y_from_patients(patients: Sequence[PatientRecord]) -> np.ndarray:
    return make_survival_y([p.survival_time for p in patients], [p.event for p in patients])
