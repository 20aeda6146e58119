"""Cellular graphs, patient records and CSV ingestion.

A cellular graph has one node per segmented cell. Nodes are joined to
their ``k`` nearest neighbours (Euclidean pixel distance, ties broken by
lower cell index), the edge set is symmetrised by union, and edges longer
than ``max_edge_len`` pixels are then removed.

Node features are ``[cell features, type flag, x / width, y / height]``
where the type flag is +1 for positive and -1 for negative cells. The
relative coordinates use a top-left origin.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import serialize
from .exceptions import DataError, DegenerateInputError

POSITIVE_TOKENS = {"positive", "pos", "+"}
NEGATIVE_TOKENS = {"negative", "neg", "-"}

CELL_TABLE_FIXED = ["image_id", "patient_id", "modality", "x", "y", "cell_type"]
METADATA_COLUMNS = ["patient_id", "survival_time_years", "event"]
EXTENT_COLUMNS = ["image_id", "width_px", "height_px"]


@dataclass
class CellRecord:
    x: float
    y: float
    positive: bool
    features: np.ndarray
    image_id: str = ""
    patient_id: str = ""
    modality: str = ""


def parse_cell_type(token: str) -> bool:
    """Map a cell-type token to ``True`` (positive) / ``False`` (negative).

    Accepted case-insensitively: positive/pos/+ and negative/neg/-.
    """
    t = token.strip().lower()
    if t in POSITIVE_TOKENS:
        return True
    if t in NEGATIVE_TOKENS:
        return False
    raise ValueError(f"unknown cell_type {token!r}")


@dataclass(eq=False)
class CellularGraph:
    image_id: str
    modality: str
    node_features: np.ndarray
    positions: np.ndarray
    edges: np.ndarray
    image_extent: tuple[float, float]
    patient_id: str = ""

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric binary adjacency as CSR."""
        return edges_to_adjacency(self.edges, self.n_nodes)

    def validate(self, max_edge_len: float | None = None):
        c = self.n_nodes
        e = self.edges
        if e.size:
            if e.min() < 0 or e.max() >= c:
                raise DataError(f"{self.image_id}: edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise DataError(f"{self.image_id}: self-loop")
            canon = np.sort(e, axis=1)
            if len(np.unique(canon, axis=0)) != len(canon):
                raise DataError(f"{self.image_id}: duplicate edge")
            if max_edge_len is not None:
                w, h = self.image_extent
                px = self.positions * np.array([w, h])
                lengths = np.linalg.norm(px[e[:, 0]] - px[e[:, 1]], axis=1)
                if np.any(lengths > max_edge_len * (1 + 1e-9)):
                    raise DataError(f"{self.image_id}: edge longer than {max_edge_len}px")

    def save(self, path: str | Path) -> Path:
        header = {
            "image_id": self.image_id,
            "patient_id": self.patient_id,
            "modality": self.modality,
            "image_extent": [float(v) for v in self.image_extent],
        }
        arrays = {"node_features": self.node_features, "positions": self.positions, "edges": self.edges}
        return serialize.write(path, "graph", header, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "CellularGraph":
        header, arrays = serialize.read(path, "graph")
        return cls(
            image_id=header["image_id"],
            modality=header["modality"],
            node_features=arrays["node_features"],
            positions=arrays["positions"],
            edges=arrays["edges"],
            image_extent=tuple(header["image_extent"]),
            patient_id=header["patient_id"],
        )


def edges_to_adjacency(edges: np.ndarray, n: int) -> sp.csr_matrix:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    return adj


def induced_edges(edges: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Edges among the nodes where ``keep`` is true, relabelled in kept order."""
    keep = np.asarray(keep, dtype=bool)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if not len(e):
        return e
    new_index = np.cumsum(keep) - 1
    both = keep[e[:, 0]] & keep[e[:, 1]]
    return new_index[e[both]]


def knn_edges(points: np.ndarray, k: int) -> np.ndarray:
    """Undirected union of each point's ``min(k, c-1)`` nearest neighbours.

    Returns a sorted ``E x 2`` array with ``i < j`` per row. Distance ties
    go to the lower index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    c = len(pts)
    kk = min(k, c - 1)
    if kk <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=kk + 1)
    radius = dist[:, -1]
    # every point at distance <= radius is a candidate; re-rank exactly
    pairs = []
    for i, cand in enumerate(tree.query_ball_point(pts, r=radius * (1 + 1e-9) + 1e-12)):
        cand = np.asarray(cand, dtype=np.int64)
        cand = cand[cand != i]
        d2 = ((pts[cand] - pts[i]) ** 2).sum(axis=1)
        order = np.lexsort((cand, d2))[:kk]
        for j in cand[order]:
            pairs.append((i, j) if i < j else (j, i))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.array(pairs, dtype=np.int64), axis=0)


def build_knn_graph(
    cells: Sequence[CellRecord],
    k: int = 5,
    max_edge_len: float = 60.0,
    extent: tuple[float, float] = (1.0, 1.0),
    image_id: str = "",
    modality: str = "",
    patient_id: str = "",
) -> CellularGraph:
    if not cells:
        raise DegenerateInputError(f"image {image_id!r} has no cells")
    w, h = extent
    if w <= 0 or h <= 0:
        raise DataError(f"image {image_id!r}: extent must be positive, got {extent}")
    px = np.array([[c.x, c.y] for c in cells], dtype=np.float64)
    edges = knn_edges(px, k)
    if len(edges):
        lengths = np.sqrt(((px[edges[:, 0]] - px[edges[:, 1]]) ** 2).sum(axis=1))
        edges = edges[lengths <= max_edge_len]
    feats = np.stack([np.asarray(c.features, dtype=np.float64) for c in cells])
    flag = np.array([[1.0 if c.positive else -1.0] for c in cells])
    rel = px / np.array([w, h])
    return CellularGraph(
        image_id=image_id,
        modality=modality,
        node_features=np.hstack([feats, flag, rel]),
        positions=rel,
        edges=edges,
        image_extent=(float(w), float(h)),
        patient_id=patient_id,
    )


@dataclass(eq=False)
class PatientRecord:
    patient_id: str
    survival_time: float
    event: bool  # True: death observed, False: censored
    graphs: dict[str, list[CellularGraph]] = field(default_factory=dict)


@dataclass(eq=False)
class Cohort:
    patients: list[PatientRecord]
    modalities: list[str]
    d_in: int

    def __post_init__(self):
        if not self.modalities:
            raise DataError("cohort needs at least one modality")
        seen = set()
        for p in self.patients:
            if p.patient_id in seen:
                raise DataError(f"duplicate patient_id {p.patient_id!r}")
            seen.add(p.patient_id)
            if not p.survival_time > 0:
                raise DataError(f"patient {p.patient_id!r}: survival time must be positive")
            for m in self.modalities:
                if not p.graphs.get(m):
                    raise DataError(f"patient {p.patient_id!r} has no graph for modality {m!r}")

    def __len__(self) -> int:
        return len(self.patients)

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    @property
    def d_node(self) -> int:
        return self.d_in + 3

    def subset(self, ids: Iterable[str]) -> "Cohort":
        by_id = {p.patient_id: p for p in self.patients}
        return Cohort([by_id[i] for i in ids], list(self.modalities), self.d_in)

    def censored_fraction(self) -> float:
        return float(np.mean([not p.event for p in self.patients]))


# ---------------------------------------------------------------------------
# CSV ingestion


def _open_csv(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    return path.open(newline="", encoding="utf-8")


def _require(header: Sequence[str] | None, needed: Sequence[str], path) -> None:
    missing = [c for c in needed if c not in (header or [])]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")


def _float(value: str, column: str, row: int, path) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise DataError(f"{path}: row {row}: non-numeric {column} {value!r}") from None
    if not np.isfinite(out):
        raise DataError(f"{path}: row {row}: non-finite {column}")
    return out


def load_cell_table(path) -> dict[str, list[CellRecord]]:
    """Read a cell table into ``image_id -> cells`` (file order kept).

    Row numbers in error messages count the header as row 1.
    """
    with _open_csv(path) as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        _require(header, CELL_TABLE_FIXED, path)
        fcols = [c for c in header if c.startswith("f") and c[1:].isdigit()]
        d_in = len(fcols)
        expected = [f"f{i}" for i in range(d_in)]
        if sorted(fcols, key=lambda c: int(c[1:])) != expected:
            raise DataError(f"{path}: feature columns must be f0..f{d_in - 1}")
        out: dict[str, list[CellRecord]] = {}
        owners: dict[str, tuple[str, str]] = {}
        for rownum, row in enumerate(reader, start=2):
            x = _float(row["x"], "x", rownum, path)
            y = _float(row["y"], "y", rownum, path)
            if x < 0 or y < 0:
                raise DataError(f"{path}: row {rownum}: negative coordinate ({x}, {y})")
            try:
                positive = parse_cell_type(row["cell_type"] or "")
            except ValueError as exc:
                raise DataError(f"{path}: row {rownum}: {exc}") from None
            feats = np.array([_float(row[c], c, rownum, path) for c in expected])
            image_id = row["image_id"]
            owner = (row["patient_id"], row["modality"])
            if owners.setdefault(image_id, owner) != owner:
                raise DataError(f"{path}: row {rownum}: image {image_id!r} assigned to two patients/modalities")
            out.setdefault(image_id, []).append(
                CellRecord(x, y, positive, feats, image_id=image_id, patient_id=owner[0], modality=owner[1])
            )
    return out


def load_extent_manifest(path) -> dict[str, tuple[float, float]]:
    with _open_csv(path) as fh:
        reader = csv.DictReader(fh)
        _require(reader.fieldnames, EXTENT_COLUMNS, path)
        out = {}
        for rownum, row in enumerate(reader, start=2):
            w = _float(row["width_px"], "width_px", rownum, path)
            h = _float(row["height_px"], "height_px", rownum, path)
            if w <= 0 or h <= 0:
                raise DataError(f"{path}: row {rownum}: extent must be positive")
            out[row["image_id"]] = (w, h)
    return out


def build_graphs(
    cells_by_image: Mapping[str, Sequence[CellRecord]],
    extents: Mapping[str, tuple[float, float]],
    k: int = 5,
    max_edge_len: float = 60.0,
) -> list[CellularGraph]:
    graphs = []
    for image_id in sorted(cells_by_image):
        cells = cells_by_image[image_id]
        if image_id not in extents:
            raise DataError(f"image {image_id!r} missing from the extent manifest")
        graphs.append(
            build_knn_graph(
                cells,
                k=k,
                max_edge_len=max_edge_len,
                extent=extents[image_id],
                image_id=image_id,
                modality=cells[0].modality,
                patient_id=cells[0].patient_id,
            )
        )
    return graphs


def load_patient_metadata(path, graphs: Iterable[CellularGraph]) -> Cohort:
    """Join patient survival metadata with built graphs into a :class:`Cohort`.

    The modality registry is the sorted set of modalities seen in ``graphs``.
    """
    graphs = list(graphs)
    with _open_csv(path) as fh:
        reader = csv.DictReader(fh)
        _require(reader.fieldnames, METADATA_COLUMNS, path)
        rows = []
        seen = set()
        for rownum, row in enumerate(reader, start=2):
            pid = row["patient_id"]
            if pid in seen:
                raise DataError(f"{path}: row {rownum}: duplicate patient_id {pid!r}")
            seen.add(pid)
            t = _float(row["survival_time_years"], "survival_time_years", rownum, path)
            if t <= 0:
                raise DataError(f"{path}: row {rownum}: survival time must be positive, got {t}")
            ev = (row["event"] or "").strip()
            if ev not in ("0", "1"):
                raise DataError(f"{path}: row {rownum}: event must be 0 or 1, got {ev!r}")
            rows.append((pid, t, ev == "1"))
    modalities = sorted({g.modality for g in graphs})
    widths = {g.node_features.shape[1] for g in graphs}
    if len(widths) > 1:
        raise DataError(f"graphs disagree on feature width: {sorted(widths)}")
    d_in = (widths.pop() - 3) if widths else 0
    by_patient: dict[str, dict[str, list[CellularGraph]]] = {}
    for g in sorted(graphs, key=lambda g: g.image_id):
        by_patient.setdefault(g.patient_id, {}).setdefault(g.modality, []).append(g)
    orphans = sorted(set(by_patient) - seen)
    if orphans:
        raise DataError(f"graphs reference patients missing from metadata: {orphans}")
    problems = []
    for pid, _, _ in rows:
        have = by_patient.get(pid, {})
        for m in modalities:
            if not have.get(m):
                problems.append(f"{pid}/{m}")
    if problems:
        raise DataError(f"patients missing a modality: {', '.join(problems)}")
    patients = [PatientRecord(pid, t, ev, by_patient[pid]) for pid, t, ev in rows]
    return Cohort(patients, modalities, d_in)


def save_graphs(graphs: Iterable[CellularGraph], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    return [g.save(out_dir / f"{g.image_id}.graph") for g in graphs]


def load_graphs(directory) -> list[CellularGraph]:
    directory = Path(directory)
    files = sorted(directory.glob("*.graph"))
    if not files:
        raise DataError(f"{directory}: no .graph files")
    return [CellularGraph.load(f) for f in files]
