"""Run configuration, training, cross-validation, sweeps and report output.

Every reported number is a deterministic function of the configuration:
fold assignment is keyed by sorted patient ids and a seeded shuffle, the
model seed of a fold is derived from (seed, fold), and reports are written
with sorted keys and no timestamps.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import yaml
from sklearn.model_selection import StratifiedKFold

from .datagen import SynthConfig, config_dict, generate_cohort, write_csvs
from .estimator import AmigoSurvival
from .exceptions import ConfigError, DataError, EvaluationError
from .graph import Cohort, build_graphs, load_cell_table, load_extent_manifest, load_graphs, load_patient_metadata, save_graphs
from .metrics import KMCurve, kaplan_meier, logrank_test, stratify_by_median, survival_report, write_km_csv
from .model import ModelConfig
from .sparsify import SparsityConfig, sparsify
from .survival import UNIFORM, BatchSpec

logger = logging.getLogger(__name__)

S_VALUES = (0.0, 0.2, 0.4, 0.6, 0.8)
BCP_ALPHAS = (0.0, 0.1, 0.25, 0.5, UNIFORM)
# model fields that are derived from the data rather than configured
_DERIVED_MODEL_FIELDS = ("n_modalities", "d_node")


@dataclass
class DataConfig:
    """Where the cohort comes from. With no paths the synthetic generator is used."""

    graphs: str | None = None
    cells: str | None = None
    extents: str | None = None
    patients: str | None = None
    k: int = 5
    max_edge_len: float = 60.0


@dataclass
class Ablations:
    no_instance_norm: bool = False
    no_weight_sharing: bool = False
    full_weight_sharing: bool = False
    no_bcp: bool = False
    transformer_attention: bool = False
    inference_time_sparsity: bool = False
    non_shared_attention: bool = False


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    batch: BatchSpec = field(default_factory=BatchSpec)
    ablation: Ablations = field(default_factory=Ablations)
    lr: float = 0.002
    weight_decay: float = 1e-4
    epochs: int = 30
    folds: int = 3
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    max_batch_retries: int = 20
    output_dir: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        if self.folds < 2:
            raise ConfigError(f"folds must be at least 2, got {self.folds}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds: {self.seeds}")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.ablation.no_weight_sharing and self.ablation.full_weight_sharing:
            raise ConfigError("no_weight_sharing and full_weight_sharing are mutually exclusive")
        # re-run section validation after field-wise overrides
        for section in (self.synth, self.model, self.sparsity, self.batch):
            section.__post_init__()
        return self

    # -- (de)serialisation --------------------------------------------------

    def to_dict(self, include_output: bool = False) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "output_dir" and not include_output:
                continue
            value = getattr(self, f.name)
            if f.name == "synth":
                value = config_dict(value)
            elif dataclasses.is_dataclass(value):
                value = dataclasses.asdict(value)
            out[f.name] = value
        for name in _DERIVED_MODEL_FIELDS:
            out["model"].pop(name)
        return out

    def digest(self) -> str:
        """Short stable hash of everything that affects results."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def copy(self, **overrides) -> "RunConfig":
        cfg = RunConfig.from_dict(self.to_dict(include_output=True))
        for key, value in overrides.items():
            cfg.set(key, value)
        return cfg.validate()

    @classmethod
    def from_dict(cls, mapping: dict) -> "RunConfig":
        cfg = cls()
        for key, value in _flatten(mapping):
            cfg.set(key, value)
        return cfg.validate()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            mapping = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not a valid key-value file: {exc}") from exc
        if not isinstance(mapping, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(mapping)

    # -- field access -------------------------------------------------------

    def keys(self) -> list[str]:
        """Every settable dotted key."""
        keys = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                keys += [
                    f"{f.name}.{g.name}"
                    for g in dataclasses.fields(value)
                    if not (f.name == "model" and g.name in _DERIVED_MODEL_FIELDS)
                ]
            else:
                keys.append(f.name)
        return keys

    def resolve(self, key: str) -> str:
        """Map a dotted or unique bare key to its dotted form."""
        keys = self.keys()
        if key in keys:
            return key
        matches = [k for k in keys if k.rsplit(".", 1)[-1] == key]
        if len(matches) == 1:
            return matches[0]
        if matches:
            raise ConfigError(f"ambiguous key {key!r}; use one of {matches}")
        raise ConfigError(f"unknown config key {key!r}")

    def get(self, key: str) -> Any:
        target, name = self._locate(self.resolve(key))
        return getattr(target, name)

    def set(self, key: str, value: Any) -> None:
        dotted = self.resolve(key)
        target, name = self._locate(dotted)
        if dotted == "batch.bcp_alpha":
            # number or the "uniform" sentinel; BatchSpec validates
            value = parse_value(value) if isinstance(value, str) else value
            if isinstance(value, bool) or not isinstance(value, (int, float, str)):
                raise ConfigError(f"{key}: expected a number or {UNIFORM!r}, got {value!r}")
            setattr(target, name, value)
            return
        setattr(target, name, _coerce(getattr(target, name), value, key))

    def _locate(self, dotted: str):
        if "." in dotted:
            section, name = dotted.split(".", 1)
            return getattr(self, section), name
        return self, dotted

    # -- effective settings -------------------------------------------------

    def estimator_params(self, random_state: int) -> dict:
        """Keyword arguments for :class:`AmigoSurvival` after applying ablations."""
        ab = self.ablation
        m = self.model
        weight_sharing = m.weight_sharing
        if ab.no_weight_sharing:
            weight_sharing = "none"
        if ab.full_weight_sharing:
            weight_sharing = "full"
        return dict(
            n_layers=m.n_layers,
            hidden_dim=m.hidden_dim,
            mlp_dim=m.mlp_dim,
            pool_ratio=m.pool_ratio,
            n_heads=m.n_heads,
            weight_sharing=weight_sharing,
            shared_attention=m.shared_attention and not ab.non_shared_attention,
            instance_norm=m.instance_norm and not ab.no_instance_norm,
            instance_aggregator="transformer" if ab.transformer_attention else m.instance_aggregator,
            sparsity=self.sparsity.sparsity,
            apply_sparsity_at_inference=self.sparsity.apply_at_inference or ab.inference_time_sparsity,
            min_kept=self.sparsity.min_kept,
            batch_size=self.batch.batch_size,
            bcp_alpha=UNIFORM if ab.no_bcp else self.batch.bcp_alpha,
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            max_batch_retries=self.max_batch_retries,
            random_state=random_state,
        )

    def make_estimator(self, random_state: int) -> AmigoSurvival:
        return AmigoSurvival(**self.estimator_params(random_state))


def _flatten(mapping: dict, prefix: str = ""):
    for key, value in mapping.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, dotted + ".")
        else:
            yield dotted, value


def parse_value(text: str) -> Any:
    """Parse a command-line override with YAML scalar/list rules."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _coerce(current: Any, value: Any, key: str) -> Any:
    if isinstance(value, str) and not isinstance(current, str) and current is not None:
        value = parse_value(value)
    try:
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(current, tuple):
            return tuple(value)
        if isinstance(current, list):
            return [int(v) for v in (value if isinstance(value, (list, tuple)) else [value])]
        if isinstance(current, int) and not isinstance(value, bool):
            if float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(current, float) and not isinstance(value, bool):
            if isinstance(value, str):
                return value  # sentinel strings such as "uniform" are checked by the section
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot use {value!r} for a {type(current).__name__} field") from exc
    if value is not None and current is not None and not isinstance(value, type(current)):
        raise ConfigError(f"{key}: expected {type(current).__name__}, got {value!r}")
    return value


# -- data --------------------------------------------------------------------


def load_cohort(config: RunConfig) -> Cohort:
    d = config.data
    if d.graphs or d.cells:
        if not d.patients:
            raise ConfigError("data.patients is required together with data.graphs or data.cells")
        if d.graphs:
            graphs = load_graphs(d.graphs)
        else:
            if not d.extents:
                raise ConfigError("data.extents is required together with data.cells")
            graphs = build_graphs(load_cell_table(d.cells), load_extent_manifest(d.extents), d.k, d.max_edge_len)
        return load_patient_metadata(d.patients, graphs)
    return generate_cohort(config.synth).cohort


def build_graph(cell_table, extent_manifest, out_dir, k: int = 5, max_edge_len: float = 60.0) -> list[Path]:
    """Build and serialise one graph file per image. Re-running is idempotent."""
    graphs = build_graphs(load_cell_table(cell_table), load_extent_manifest(extent_manifest), k, max_edge_len)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    return save_graphs(graphs, out_dir)


def generate_synthetic(config: RunConfig, out_dir) -> dict[str, Path]:
    return write_csvs(generate_cohort(config.synth), out_dir)


# -- reports -------------------------------------------------------------------


@dataclass
class RunReport:
    kind: str
    config: dict
    cells: list[dict] = field(default_factory=list)
    c_index_mean: float | None = None
    c_index_std: float | None = None
    n_missing: int = 0
    pooled: dict = field(default_factory=dict)
    flops: dict = field(default_factory=dict)
    risks: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    curves: dict[str, KMCurve] = field(default_factory=dict, repr=False)

    @property
    def c_index_summary(self) -> str:
        if self.c_index_mean is None:
            return "n/a"
        return f"{self.c_index_mean:.3f} ± {self.c_index_std:.3f}"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "cells": self.cells,
            "c_index_mean": self.c_index_mean,
            "c_index_std": self.c_index_std,
            "c_index_summary": self.c_index_summary,
            "n_missing": self.n_missing,
            "pooled": self.pooled,
            "flops": self.flops,
            "risks": self.risks,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.json"}
        paths["report"].write_text(self.to_json(), encoding="utf-8")
        if self.curves:
            paths["km_curves"] = write_km_csv(self.curves, out / "km_curves.csv")
        return paths


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def mean_std(values: Sequence[float]) -> tuple[float | None, float | None]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _pooled_stats(times, events, risks) -> tuple[dict, dict[str, KMCurve]]:
    try:
        metrics, curves = survival_report(times, events, risks)
    except EvaluationError:
        strat = stratify_by_median(risks, times, events)
        lr = logrank_test(times[strat.low], events[strat.low], times[strat.high], events[strat.high])
        metrics = {
            "c_index": None,
            "logrank_chi2": lr.chi_square,
            "logrank_p": lr.p_value,
            "median_survival_low": strat.median_survival_low,
            "median_survival_high": strat.median_survival_high,
        }
        curves = {"low": kaplan_meier(times[strat.low], events[strat.low]), "high": kaplan_meier(times[strat.high], events[strat.high])}
    return metrics, curves


def _training_transform(est: AmigoSurvival, epoch: int = 0) -> Callable | None:
    if est.sparsity == 0:
        return None
    cfg = SparsityConfig(est.sparsity, False, est.min_kept)
    return lambda g: sparsify(g, cfg, est.random_state, epoch)


def flop_stats(est: AmigoSurvival, patients) -> dict:
    """Forward flops per patient as seen by training (epoch-0 masks)."""
    counts = est.forward_flops(patients, transform=_training_transform(est))
    return {
        "per_patient_mean": float(counts.mean()),
        "per_patient_std": float(counts.std()),
        "gflops_per_patient": float(counts.mean() / 1e9),
    }


# -- operations ---------------------------------------------------------------


def fold_assignment(cohort: Cohort, folds: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Patient-level stratified folds keyed by sorted ids and a seeded shuffle."""
    ids = sorted(cohort.patient_ids)
    by_id = {p.patient_id: p for p in cohort.patients}
    events = np.array([by_id[i].event for i in ids], dtype=int)
    counts = np.bincount(events, minlength=2)
    if counts.min() < folds:
        raise DataError(f"need at least {folds} patients per event class, have {counts.tolist()} (censored, observed)")
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    out = []
    for tr, te in skf.split(np.zeros(len(ids)), events):
        train_ids = [ids[i] for i in tr]
        test_ids = [ids[i] for i in te]
        if set(train_ids) & set(test_ids):
            raise AssertionError("patient appears in both train and test folds")
        out.append((train_ids, test_ids))
    return out


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0] % (2**31))


def cross_validate(config: RunConfig, cohort: Cohort | None = None, checkpoint_dir=None) -> RunReport:
    """k-fold patient-wise cross-validation repeated over ``config.seeds``.

    Out-of-fold risks of each seed are averaged per patient; the pooled
    risks are median-split for the log-rank test and KM curves.
    """
    config.validate()
    cohort = cohort if cohort is not None else load_cohort(config)
    by_id = {p.patient_id: p for p in cohort.patients}
    ids = sorted(by_id)
    cells, flops = [], []
    oof = {pid: [] for pid in ids}
    for seed in config.seeds:
        for fold, (train_ids, test_ids) in enumerate(fold_assignment(cohort, config.folds, seed)):
            est = config.make_estimator(_fold_seed(seed, fold))
            est.fit(cohort.subset(train_ids))
            test = [by_id[i] for i in test_ids]
            risks = est.predict(test)
            for pid, r in zip(test_ids, risks):
                oof[pid].append(float(r))
            events = np.array([p.event for p in test])
            try:
                c = float(est.score(test))
            except EvaluationError:
                c = None
            fs = flop_stats(est, test)
            flops.append(fs["per_patient_mean"])
            cells.append(
                {
                    "seed": seed,
                    "fold": fold,
                    "n_train": len(train_ids),
                    "n_test": len(test_ids),
                    "n_test_events": int(events.sum()),
                    "c_index": c,
                    "final_train_loss": est.loss_history_[-1],
                    "flops_per_patient": fs["per_patient_mean"],
                }
            )
            logger.info("seed %s fold %d: C=%s", seed, fold, "missing" if c is None else f"{c:.4f}")
            if checkpoint_dir is not None:
                est.save(Path(checkpoint_dir) / f"seed{seed}-fold{fold}.ckpt")
    pooled_risk = np.array([np.mean(oof[pid]) for pid in ids])
    t = np.array([by_id[pid].survival_time for pid in ids])
    e = np.array([by_id[pid].event for pid in ids])
    pooled, curves = _pooled_stats(t, e, pooled_risk)
    values = [c["c_index"] for c in cells]
    mean, std = mean_std(values)
    flop_arr = np.asarray(flops)
    return RunReport(
        kind="cross_validate",
        config=config.to_dict(),
        cells=cells,
        c_index_mean=mean,
        c_index_std=std,
        n_missing=sum(v is None for v in values),
        pooled=pooled,
        flops={
            "per_patient_mean": float(flop_arr.mean()),
            "per_patient_std": float(flop_arr.std()),
            "gflops_per_patient": float(flop_arr.mean() / 1e9),
        },
        risks=dict(zip(ids, pooled_risk.tolist())),
        extra={"censored_fraction": cohort.censored_fraction(), "n_patients": len(ids)},
        curves=curves,
    )


def train(config: RunConfig, cohort: Cohort | None = None, out_dir=None) -> tuple[Path | None, RunReport]:
    """Fit one model on the whole cohort with the first seed."""
    config.validate()
    cohort = cohort if cohort is not None else load_cohort(config)
    est = config.make_estimator(config.seeds[0]).fit(cohort)
    ckpt = None
    if out_dir is not None:
        ckpt = est.save(Path(out_dir) / "runs" / config.digest() / "model.ckpt")
    t = np.array([p.survival_time for p in cohort.patients])
    e = np.array([p.event for p in cohort.patients])
    risks = est.predict(cohort)
    pooled, curves = _pooled_stats(t, e, risks)
    report = RunReport(
        kind="train",
        config=config.to_dict(),
        pooled=pooled,
        flops=flop_stats(est, cohort.patients),
        risks=dict(zip(cohort.patient_ids, risks.tolist())),
        extra={"loss_history": est.loss_history_, "n_steps": est.n_steps_, "n_parameters": est.params_.n_parameters()},
        curves=curves,
    )
    return ckpt, report


def evaluate(checkpoint, cohort: Cohort) -> tuple[dict, dict[str, KMCurve], np.ndarray]:
    est = AmigoSurvival.load(checkpoint)
    risks = est.predict(cohort)
    t = np.array([p.survival_time for p in cohort.patients])
    e = np.array([p.event for p in cohort.patients])
    metrics, curves = _pooled_stats(t, e, risks)
    return metrics, curves, risks


Runner = Callable[[RunConfig], RunReport]


def _write_table(rows: list[dict], columns: Sequence[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in columns])
    return path


def sweep_sparsity(
    config: RunConfig,
    s_values: Iterable[float] = S_VALUES,
    cohort: Cohort | None = None,
    runner: Runner | None = None,
    out_path=None,
) -> list[dict]:
    """One cross-validation per sparsity ratio."""
    cohort = cohort if cohort is not None else load_cohort(config)
    runner = runner or (lambda cfg: cross_validate(cfg, cohort))
    rows = []
    for s in s_values:
        rep = runner(config.copy(**{"sparsity.sparsity": float(s)}))
        rows.append(
            {
                "s": float(s),
                "c_index_mean": rep.c_index_mean,
                "c_index_std": rep.c_index_std,
                "gflops_per_patient": rep.flops["gflops_per_patient"],
                "flops_per_patient": rep.flops["per_patient_mean"],
            }
        )
    if out_path is not None:
        _write_table(rows, ["s", "c_index_mean", "c_index_std", "gflops_per_patient", "flops_per_patient"], out_path)
    return rows


def sweep_bcp(
    config: RunConfig,
    alphas: Iterable[float | str] = BCP_ALPHAS,
    cohort: Cohort | None = None,
    runner: Runner | None = None,
    out_path=None,
) -> list[dict]:
    """One cross-validation per batch censored portion."""
    cohort = cohort if cohort is not None else load_cohort(config)
    runner = runner or (lambda cfg: cross_validate(cfg, cohort))
    rows = []
    for alpha in alphas:
        rep = runner(config.copy(**{"batch.bcp_alpha": alpha, "ablation.no_bcp": False}))
        rows.append(
            {
                "alpha": alpha if alpha == UNIFORM else float(alpha),
                "c_index_mean": rep.c_index_mean,
                "c_index_std": rep.c_index_std,
            }
        )
    if out_path is not None:
        _write_table(rows, ["alpha", "c_index_mean", "c_index_std"], out_path)
    return rows
