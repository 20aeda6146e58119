"""Synthetic cohorts with a planted, recoverable risk signal.

Each patient gets a latent log-hazard ``risk ~ N(0, risk_sd^2)``. In the
first modality the fraction of positive cells in every core rises
monotonically with that risk; the other modalities are pure noise. Cell
positions mix a uniform background with Gaussian clusters, and per-cell
features are a noisy linear embedding of (type flag, local positive
density). Survival times are exponential with rate
``hazard_scale * exp(risk)``; a ``censor_rate`` share of patients is
censored at a uniform time before their event.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtr

from .exceptions import ConfigError
from .graph import CellRecord, Cohort, PatientRecord, build_knn_graph


@dataclass
class SynthConfig:
    seed: int = 0
    n_patients: int = 150
    modalities: int = 2
    cores_per_modality: tuple[int, int] = (1, 3)
    cells_per_core: tuple[int, int] = (100, 300)
    d_in: int = 16
    positive_fraction_range: tuple[float, float] = (0.1, 0.9)
    censor_rate: float = 0.2
    hazard_scale: float = 0.2
    risk_sd: float = 2.0
    extent_px: tuple[float, float] = (500.0, 500.0)
    n_clusters: int = 3
    cluster_sd_px: float = 40.0
    feature_noise: float = 0.5
    k: int = 5
    max_edge_len: float = 60.0

    def __post_init__(self):
        self.cores_per_modality = tuple(int(v) for v in self.cores_per_modality)
        self.cells_per_core = tuple(int(v) for v in self.cells_per_core)
        self.positive_fraction_range = tuple(float(v) for v in self.positive_fraction_range)
        self.extent_px = tuple(float(v) for v in self.extent_px)
        for name in ("cores_per_modality", "cells_per_core"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} must be a non-empty range of positive ints, got {(lo, hi)}")
        lo, hi = self.positive_fraction_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"positive_fraction_range must lie in [0, 1], got {(lo, hi)}")
        if not 0.0 <= self.censor_rate < 1.0:
            raise ConfigError("censor_rate must lie in [0, 1)")
        if self.hazard_scale <= 0 or self.risk_sd <= 0:
            raise ConfigError("hazard_scale and risk_sd must be positive")
        if self.n_patients < 1 or self.modalities < 1 or self.d_in < 1:
            raise ConfigError("n_patients, modalities and d_in must be positive")

    def modality_names(self) -> list[str]:
        return [f"stain{m + 1:02d}" for m in range(self.modalities)]


@dataclass
class SynthCohort:
    cohort: Cohort
    risk: dict[str, float]
    cells: dict[str, list[CellRecord]]
    extents: dict[str, tuple[float, float]]
    positive_fraction: dict[str, float]  # per patient, first modality, pooled over cores


def _cell_positions(rng, n, cfg: SynthConfig) -> np.ndarray:
    w, h = cfg.extent_px
    n_bg = n // 2
    bg = rng.uniform([0, 0], [w, h], size=(n_bg, 2))
    centres = rng.uniform([0.2 * w, 0.2 * h], [0.8 * w, 0.8 * h], size=(cfg.n_clusters, 2))
    which = rng.integers(cfg.n_clusters, size=n - n_bg)
    cl = centres[which] + rng.normal(0.0, cfg.cluster_sd_px, size=(n - n_bg, 2))
    pts = np.vstack([bg, cl])
    return np.clip(pts, 0.0, [w - 1e-6, h - 1e-6])


def _local_positive_density(pts: np.ndarray, positive: np.ndarray, k: int) -> np.ndarray:
    kk = min(k, len(pts) - 1)
    if kk < 1:
        return positive.astype(float)
    _, idx = cKDTree(pts).query(pts, k=kk + 1)
    return positive[idx[:, 1:]].mean(axis=1)


def generate_cohort(cfg: SynthConfig) -> SynthCohort:
    root = np.random.SeedSequence(cfg.seed)
    embed_ss, *patient_ss = root.spawn(cfg.n_patients + 1)
    embed = np.random.default_rng(embed_ss).normal(size=(2, cfg.d_in))
    names = cfg.modality_names()
    lo, hi = cfg.positive_fraction_range
    patients, risk, cells_by_image, extents, fractions = [], {}, {}, {}, {}
    for n, ss in enumerate(patient_ss):
        rng = np.random.default_rng(ss)
        pid = f"P{n:04d}"
        r = float(rng.normal(0.0, cfg.risk_sd))
        t_event = float(rng.exponential(1.0 / (cfg.hazard_scale * np.exp(r))))
        if rng.random() < cfg.censor_rate:
            time, event = max(float(rng.uniform(0.0, t_event)), 1e-9), False
        else:
            time, event = max(t_event, 1e-9), True
        graphs: dict[str, list] = {}
        pos_count = tot_count = 0
        for m, mod in enumerate(names):
            n_cores = int(rng.integers(cfg.cores_per_modality[0], cfg.cores_per_modality[1] + 1))
            for core in range(n_cores):
                frac = lo + (hi - lo) * float(ndtr(r / cfg.risk_sd)) if m == 0 else float(rng.uniform(lo, hi))
                n_cells = int(rng.integers(cfg.cells_per_core[0], cfg.cells_per_core[1] + 1))
                pts = _cell_positions(rng, n_cells, cfg)
                positive = rng.random(n_cells) < frac
                dens = _local_positive_density(pts, positive, cfg.k)
                latent = np.column_stack([np.where(positive, 1.0, -1.0), dens])
                feats = latent @ embed + rng.normal(0.0, cfg.feature_noise, size=(n_cells, cfg.d_in))
                image_id = f"{pid}_{mod}_{core}"
                cells = [
                    CellRecord(float(x), float(y), bool(p), f, image_id=image_id, patient_id=pid, modality=mod)
                    for (x, y), p, f in zip(pts, positive, feats)
                ]
                cells_by_image[image_id] = cells
                extents[image_id] = cfg.extent_px
                graphs.setdefault(mod, []).append(
                    build_knn_graph(cells, cfg.k, cfg.max_edge_len, cfg.extent_px, image_id, mod, pid)
                )
                if m == 0:
                    pos_count += int(positive.sum())
                    tot_count += n_cells
        patients.append(PatientRecord(pid, time, event, graphs))
        risk[pid] = r
        fractions[pid] = pos_count / tot_count
    cohort = Cohort(patients, names, cfg.d_in)
    return SynthCohort(cohort, risk, cells_by_image, extents, fractions)


def write_csvs(synth: SynthCohort, out_dir) -> dict[str, Path]:
    """Write ``cells.csv``, ``patients.csv``, ``extents.csv`` and ``truth.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d_in = synth.cohort.d_in
    paths = {k: out / f"{k}.csv" for k in ("cells", "patients", "extents", "truth")}
    with paths["cells"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "patient_id", "modality", "x", "y", "cell_type"] + [f"f{i}" for i in range(d_in)])
        for image_id in sorted(synth.cells):
            for c in synth.cells[image_id]:
                w.writerow(
                    [c.image_id, c.patient_id, c.modality, repr(c.x), repr(c.y), "positive" if c.positive else "negative"]
                    + [repr(float(v)) for v in c.features]
                )
    with paths["patients"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "survival_time_years", "event"])
        for p in synth.cohort.patients:
            w.writerow([p.patient_id, repr(float(p.survival_time)), int(p.event)])
    with paths["extents"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "width_px", "height_px"])
        for image_id in sorted(synth.extents):
            wpx, hpx = synth.extents[image_id]
            w.writerow([image_id, repr(float(wpx)), repr(float(hpx))])
    with paths["truth"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "risk", "positive_fraction"])
        for pid in synth.risk:
            w.writerow([pid, repr(synth.risk[pid]), repr(synth.positive_fraction[pid])])
    return paths


def config_dict(cfg: SynthConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
