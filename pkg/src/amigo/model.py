"""Multi-branch cellular-graph encoder with shared-context coupling.

Per modality, each graph goes through ``n_layers`` coupled GraphSAGE layers,
each followed by SAGPool top-k selection. ``[mean, max]`` readouts of the
pooled node sets are summed over layers and mapped by a 2-layer MLP to one
vector per graph. Within a modality, graphs are merged by sigmoid-gated
instance attention plus instance normalisation. A multi-head self-attention
block mixes the per-modality vectors, the rows are averaged into the
patient embedding, and a linear head gives the risk score.

Weights are right-multiplied (``y = x @ W``), so a layer mapping width
``a`` to ``b`` stores a ``(a, b)`` matrix.

Shared weight on layers after the first
----------------------------------------
The coupling factor ``W_s`` is learnable on the first GraphSAGE layer of
every branch. On deeper layers the shared factor is the identity: an
all-ones factor would collapse every output unit to the same sum of
inputs, so those layers carry only their branch-specific weight.

Parameter sharing is described by *slots*: a logical key such as
``("W_m", m, l)`` resolves to a storage name. Ablations re-point slots, so
e.g. full weight sharing makes ``("W_m", 0, l)`` and ``("W_m", 1, l)``
resolve to the same array.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import serialize
from . import tensor as T
from .exceptions import ConfigError, DataError, DegenerateInputError, DimensionError
from .graph import CellularGraph, PatientRecord, induced_edges
from .tensor import MeanOperator, Tape, Tensor

WEIGHT_SHARING = ("coupled", "none", "full")
INSTANCE_AGGREGATORS = ("attention", "transformer")


@dataclass
class ModelConfig:
    n_modalities: int = 2
    d_node: int = 19
    n_layers: int = 3
    hidden_dim: int = 128
    mlp_dim: int = 32
    pool_ratio: float = 0.5
    n_heads: int = 4
    weight_sharing: str = "coupled"
    shared_attention: bool = True
    instance_norm: bool = True
    instance_aggregator: str = "attention"

    def __post_init__(self):
        if self.mlp_dim % self.n_heads:
            raise ConfigError(f"mlp_dim {self.mlp_dim} is not divisible by n_heads {self.n_heads}")
        if not 0.0 < self.pool_ratio <= 1.0:
            raise ConfigError(f"pool_ratio must lie in (0, 1], got {self.pool_ratio}")
        if self.n_layers < 1 or self.n_modalities < 1:
            raise ConfigError("n_layers and n_modalities must be positive")
        if self.weight_sharing not in WEIGHT_SHARING:
            raise ConfigError(f"weight_sharing must be one of {WEIGHT_SHARING}")
        if self.instance_aggregator not in INSTANCE_AGGREGATORS:
            raise ConfigError(f"instance_aggregator must be one of {INSTANCE_AGGREGATORS}")

    def layer_widths(self) -> list[int]:
        return [self.d_node] + [self.hidden_dim] * self.n_layers

    @property
    def head_dim(self) -> int:
        return self.mlp_dim // self.n_heads


def _transformer_shapes(prefix: str, d: int) -> dict[str, tuple[int, int]]:
    return {
        f"{prefix}.Wq": (d, d),
        f"{prefix}.Wk": (d, d),
        f"{prefix}.Wv": (d, d),
        f"{prefix}.Wo": (d, d),
        f"{prefix}.mlp1": (d, d),
        f"{prefix}.mlp1_b": (1, d),
        f"{prefix}.mlp2": (d, d),
        f"{prefix}.mlp2_b": (1, d),
    }


class ModelParams:
    """Named parameter arrays plus the slot table describing sharing."""

    def __init__(self, cfg: ModelConfig, arrays: dict[str, np.ndarray], slots: dict[str, str]):
        self.cfg = cfg
        self.arrays = arrays
        self.slots = slots

    @staticmethod
    def slot_key(kind: str, *index) -> str:
        return "/".join([kind, *map(str, index)])

    def name(self, kind: str, *index) -> str:
        return self.slots[self.slot_key(kind, *index)]

    def get(self, kind: str, *index) -> np.ndarray:
        return self.arrays[self.name(kind, *index)]

    @classmethod
    def layout(cls, cfg: ModelConfig) -> tuple[dict[str, str], dict[str, tuple[int, int]]]:
        """Slot table and storage shapes for ``cfg``."""
        slots: dict[str, str] = {}
        shapes: dict[str, tuple[int, int]] = {}
        widths = cfg.layer_widths()
        h, d = cfg.hidden_dim, cfg.mlp_dim
        for m in range(cfg.n_modalities):
            branch = "shared" if cfg.weight_sharing == "full" else f"m{m}"
            ws = f"W_s.m{m}" if cfg.weight_sharing == "none" else "W_s"
            slots[cls.slot_key("W_s", m)] = ws
            shapes[ws] = (widths[1], widths[1])
            for l in range(cfg.n_layers):
                name = f"W_m.{branch}.l{l}"
                slots[cls.slot_key("W_m", m, l)] = name
                shapes[name] = (2 * widths[l], widths[l + 1])
                name = f"pool.{branch}.l{l}"
                slots[cls.slot_key("pool", m, l)] = name
                shapes[name] = (2 * widths[l + 1], 1)
            for part, shape in (("mlp1", (2 * h, h)), ("mlp1_b", (1, h)), ("mlp2", (h, d)), ("mlp2_b", (1, d))):
                name = f"{part}.{branch}"
                slots[cls.slot_key(part, m)] = name
                shapes[name] = shape
            attn = "inst" if cfg.shared_attention else f"inst.m{m}"
            if cfg.instance_aggregator == "attention":
                slots[cls.slot_key("W_attn", m)] = f"W_attn.{attn}"
                shapes[f"W_attn.{attn}"] = (d, 1)
            else:
                for name, shape in _transformer_shapes(f"inst_tf.{attn}", d).items():
                    slots[cls.slot_key("inst_tf", m, name.rsplit(".", 1)[1])] = name
                    shapes[name] = shape
        for name, shape in _transformer_shapes("xmod", d).items():
            slots[cls.slot_key("xmod", name.rsplit(".", 1)[1])] = name
            shapes[name] = shape
        slots[cls.slot_key("risk")] = "risk"
        shapes["risk"] = (d, 1)
        return slots, shapes

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        slots, shapes = cls.layout(cfg)
        rng = np.random.default_rng(seed)
        arrays = {}
        for name in sorted(shapes):
            shape = shapes[name]
            if name.startswith("W_s"):
                arrays[name] = np.eye(shape[0])
            elif name.endswith("_b"):
                arrays[name] = np.zeros(shape)
            else:
                fan_in, fan_out = shape
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                arrays[name] = rng.uniform(-limit, limit, size=shape)
        return cls(cfg, arrays, slots)

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()}, dict(self.slots))

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def bind(self, tape: Tape, trainable: bool = True) -> "BoundParams":
        return BoundParams(self, tape, trainable)

    # -- checkpoints -------------------------------------------------------

    def to_bytes(self, meta: dict | None = None) -> bytes:
        header = {"model_config": asdict(self.cfg), "layout": self.slots, "meta": meta or {}}
        return serialize.dumps("checkpoint", header, self.arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["ModelParams", dict]:
        header, arrays = serialize.loads(data, "checkpoint")
        cfg = ModelConfig(**header["model_config"])
        slots, shapes = cls.layout(cfg)
        if slots != header["layout"]:
            raise DataError("checkpoint layout does not match its model config")
        for name, shape in shapes.items():
            if name not in arrays or arrays[name].shape != tuple(shape):
                raise DataError(f"checkpoint is missing or misshapes {name!r}")
        return cls(cfg, arrays, slots), header["meta"]

    def save(self, path, meta: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes(meta))
        return path

    @classmethod
    def load(cls, path) -> tuple["ModelParams", dict]:
        return cls.from_bytes(Path(path).read_bytes())


class BoundParams:
    """Parameters registered on one tape; arrays are bound lazily on first use.

    With ``trainable=False`` they enter the tape as constants, which skips
    all backward bookkeeping (inference).
    """

    def __init__(self, params: ModelParams, tape: Tape, trainable: bool = True):
        self.params = params
        self.tape = tape
        self.cfg = params.cfg
        self.trainable = trainable
        self.leaves: dict[str, Tensor] = {}

    def __call__(self, kind: str, *index) -> Tensor:
        name = self.params.name(kind, *index)
        leaf = self.leaves.get(name)
        if leaf is None:
            bind = self.tape.variable if self.trainable else self.tape.constant
            leaf = self.leaves[name] = bind(self.params.arrays[name])
        return leaf

    def gradients(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Backpropagate ``loss``; unused parameters get zero gradients."""
        grads = self.tape.backward(loss, self.leaves)
        return {name: grads.get(name, np.zeros_like(arr)) for name, arr in self.params.arrays.items()}


@dataclass
class PatientEmbedding:
    embedding: Tensor
    risk: Tensor
    modality_reps: Tensor | None = None
    attention: list[np.ndarray] = field(default_factory=list)

    @property
    def risk_value(self) -> float:
        return self.risk.item()


# ---------------------------------------------------------------------------
# graph encoder


def coupled_graphsage_layer(h: Tensor, adjacency, layer: int, modality: int, w: BoundParams) -> Tensor:
    """``relu([h, mean_nbr(h)] @ W_m @ W_s)``; the ``W_s`` factor only on layer 0.

    ``adjacency`` is anything :func:`amigo.tensor.neighbor_mean` accepts.
    """
    widths = w.cfg.layer_widths()
    if h.shape[1] != widths[layer]:
        raise DimensionError(f"layer {layer} expects width {widths[layer]}, got {h.shape}")
    z = T.concat_cols([h, T.neighbor_mean(h, adjacency)])
    z = T.matmul(z, w("W_m", modality, layer))
    if layer == 0:
        z = T.matmul(z, w("W_s", modality))
    return T.relu(z)


def top_k_nodes(scores: np.ndarray, ratio: float) -> np.ndarray:
    """Indices of the ``ceil(ratio * c)`` highest scores, ascending; ties to lower index."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    k = max(1, math.ceil(ratio * s.size))
    order = np.lexsort((np.arange(s.size), -s))
    return np.sort(order[:k])


def sagpool(h: Tensor, edges: np.ndarray, score_weight: Tensor, ratio: float, op: MeanOperator | None = None):
    """Self-attention graph pooling over an undirected edge list.

    Scores are ``tanh([h, mean_nbr(h)] @ w)``; the kept rows are multiplied
    by their score so the scorer is trained. The pooled graph is the induced
    subgraph of the kept nodes. Returns ``(kept, h_kept, kept_edges)``.
    """
    c = h.shape[0]
    if op is None:
        op = MeanOperator.from_edges(edges, c)
    score = T.tanh(T.matmul(T.concat_cols([h, T.neighbor_mean(h, op)]), score_weight))
    kept = top_k_nodes(score.value, ratio)
    h_kept = T.mul(T.gather_rows(h, kept), T.gather_rows(score, kept))
    keep = np.zeros(c, dtype=bool)
    keep[kept] = True
    return kept, h_kept, induced_edges(edges, keep)


def _linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = T.matmul(x, weight)
    return y if bias is None else T.add(y, bias)


def branch_forward(graph: CellularGraph, modality: int, w: BoundParams) -> Tensor:
    """Encode one cellular graph into a ``1 x mlp_dim`` row."""
    cfg = w.cfg
    if graph.n_nodes < 1:
        raise DegenerateInputError(f"graph {graph.image_id!r} has no nodes")
    if graph.node_features.shape[1] != cfg.d_node:
        raise DimensionError(f"graph {graph.image_id!r} has {graph.node_features.shape[1]} features, model expects {cfg.d_node}")
    h = w.tape.constant(graph.node_features)
    edges = graph.edges
    readout = None
    for l in range(cfg.n_layers):
        op = MeanOperator.from_edges(edges, h.shape[0])
        h = coupled_graphsage_layer(h, op, l, modality, w)
        _, h, edges = sagpool(h, edges, w("pool", modality, l), cfg.pool_ratio, op)
        r = T.concat_cols([T.row_mean(h), T.row_max(h)])
        readout = r if readout is None else T.add(readout, r)
    z = T.relu(_linear(readout, w("mlp1", modality), w("mlp1_b", modality)))
    return _linear(z, w("mlp2", modality), w("mlp2_b", modality))


# ---------------------------------------------------------------------------
# aggregation


def instance_attention(reps: Sequence[Tensor], attn_weight: Tensor, normalize: bool = True) -> Tensor:
    """Sigmoid-gated sum of instance rows, then instance normalisation."""
    if not reps:
        raise DegenerateInputError("instance_attention needs at least one instance")
    R = T.concat_rows(list(reps))
    gates = T.sigmoid(T.matmul(R, attn_weight))
    tape = R.tape
    pooled = T.matmul(tape.constant(np.ones((1, R.shape[0]))), T.mul(gates, R))
    return T.instance_norm(pooled) if normalize else pooled


def attention_block(R: Tensor, get: Callable[[str], Tensor], n_heads: int, mask: np.ndarray | None = None):
    """Multi-head self-attention over the rows of ``R`` with an MLP residual.

    ``out = R + MLP(concat_heads @ Wo)``. ``mask[i, j]`` false stops row i
    from attending to row j (used to keep patients apart in a batch).
    Returns ``(out, attention_maps)``.
    """
    n, d = R.shape
    dh = d // n_heads
    Q = T.matmul(R, get("Wq"))
    K = T.matmul(R, get("Wk"))
    V = T.matmul(R, get("Wv"))
    scale = 1.0 / math.sqrt(dh)
    heads, maps = [], []
    for i in range(n_heads):
        lo, hi = i * dh, (i + 1) * dh
        q, k, v = T.slice_cols(Q, lo, hi), T.slice_cols(K, lo, hi), T.slice_cols(V, lo, hi)
        att = T.softmax_rows(T.mul(T.matmul(q, T.transpose(k)), scale), mask)
        maps.append(att.value)
        heads.append(T.matmul(att, v))
    A = T.matmul(T.concat_cols(heads), get("Wo"))
    z = T.relu(_linear(A, get("mlp1"), get("mlp1_b")))
    return T.add(R, _linear(z, get("mlp2"), get("mlp2_b"))), maps


def cross_modal_transformer(R: Tensor, w: BoundParams) -> PatientEmbedding:
    cfg = w.cfg
    if R.shape[0] != cfg.n_modalities:
        raise DimensionError(f"expected {cfg.n_modalities} modality rows, got {R.shape[0]}")
    out, maps = attention_block(R, lambda part: w("xmod", part), cfg.n_heads)
    emb = T.row_mean(out)
    risk = T.matmul(emb, w("risk"))
    return PatientEmbedding(emb, risk, R, maps)


def aggregate_instances(reps: Sequence[Tensor], modality: int, w: BoundParams) -> Tensor:
    cfg = w.cfg
    if cfg.instance_aggregator == "attention":
        return instance_attention(reps, w("W_attn", modality), normalize=cfg.instance_norm)
    if not reps:
        raise DegenerateInputError("instance aggregation needs at least one instance")
    out, _ = attention_block(T.concat_rows(list(reps)), lambda part: w("inst_tf", modality, part), cfg.n_heads)
    pooled = T.row_mean(out)
    return T.instance_norm(pooled) if cfg.instance_norm else pooled


GraphTransform = Callable[[CellularGraph], CellularGraph]


def patient_forward(
    patient: PatientRecord,
    w: BoundParams,
    modalities: Sequence[str],
    transform: GraphTransform | None = None,
) -> PatientEmbedding:
    """Risk and embedding for one patient.

    ``transform`` (e.g. a sparsifier) is applied to every graph before encoding.
    """
    rows = []
    for m, name in enumerate(modalities):
        graphs = patient.graphs.get(name) or []
        if not graphs:
            raise DataError(f"patient {patient.patient_id!r} has no graph for modality {name!r}")
        reps = [branch_forward(transform(g) if transform else g, m, w) for g in graphs]
        rows.append(aggregate_instances(reps, m, w))
    return cross_modal_transformer(T.concat_rows(rows), w)


# ---------------------------------------------------------------------------
# batched path: one disjoint-union graph per modality


@dataclass
class BatchEmbedding:
    embedding: Tensor  # P x mlp_dim
    risk: Tensor  # P x 1
    flops: int = 0


def top_k_segments(scores: np.ndarray, segments: np.ndarray, n_segments: int, ratio: float) -> np.ndarray:
    """Per-segment :func:`top_k_nodes` on contiguous segments; global ascending indices."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    seg = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_segments)
    k = np.maximum(1, np.ceil(ratio * counts).astype(np.int64))
    idx = np.arange(s.size)
    order = np.lexsort((idx, -s, seg))
    starts = T.segment_starts(seg, n_segments)
    seg_sorted = seg[order]
    rank = idx - starts[seg_sorted]
    return np.sort(order[rank < k[seg_sorted]])


def encode_graphs(graphs: Sequence[CellularGraph], modality: int, w: BoundParams) -> Tensor:
    """:func:`branch_forward` for many graphs at once; one output row per graph."""
    cfg = w.cfg
    sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)
    if sizes.size == 0 or np.any(sizes < 1):
        raise DegenerateInputError("encode_graphs needs non-empty graphs")
    for g in graphs:
        if g.node_features.shape[1] != cfg.d_node:
            raise DimensionError(f"graph {g.image_id!r} has {g.node_features.shape[1]} features, model expects {cfg.d_node}")
    n_graphs = len(graphs)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    seg = np.repeat(np.arange(n_graphs), sizes)
    edges = np.concatenate([g.edges + off for g, off in zip(graphs, offsets)]).reshape(-1, 2)
    h = w.tape.constant(np.concatenate([g.node_features for g in graphs]))
    readout = None
    for l in range(cfg.n_layers):
        n = h.shape[0]
        op = MeanOperator.from_edges(edges, n)
        h = coupled_graphsage_layer(h, op, l, modality, w)
        score = T.tanh(T.matmul(T.concat_cols([h, T.neighbor_mean(h, op)]), w("pool", modality, l)))
        kept = top_k_segments(score.value, seg, n_graphs, cfg.pool_ratio)
        h = T.mul(T.gather_rows(h, kept), T.gather_rows(score, kept))
        keep = np.zeros(n, dtype=bool)
        keep[kept] = True
        edges = induced_edges(edges, keep)
        seg = seg[kept]
        r = T.concat_cols([T.segment_mean(h, seg, n_graphs), T.segment_max(h, seg, n_graphs)])
        readout = r if readout is None else T.add(readout, r)
    z = T.relu(_linear(readout, w("mlp1", modality), w("mlp1_b", modality)))
    return _linear(z, w("mlp2", modality), w("mlp2_b", modality))


def batch_forward(
    patients: Sequence[PatientRecord],
    w: BoundParams,
    modalities: Sequence[str],
    transform: GraphTransform | None = None,
) -> BatchEmbedding:
    """Same result as :func:`patient_forward` for every patient, in one pass.

    Graphs of one modality from all patients are encoded as a single
    disjoint union; attention is masked so patients never see each other.
    """
    cfg = w.cfg
    n_pat = len(patients)
    if n_pat == 0:
        raise DegenerateInputError("batch_forward needs at least one patient")
    start_flops = w.tape.flop_count
    per_modality = []
    for m, name in enumerate(modalities):
        graphs, owner = [], []
        for i, p in enumerate(patients):
            gs = p.graphs.get(name) or []
            if not gs:
                raise DataError(f"patient {p.patient_id!r} has no graph for modality {name!r}")
            graphs.extend(transform(g) if transform else g for g in gs)
            owner.extend([i] * len(gs))
        owner = np.asarray(owner, dtype=np.int64)
        reps = encode_graphs(graphs, m, w)
        if cfg.instance_aggregator == "attention":
            gates = T.sigmoid(T.matmul(reps, w("W_attn", m)))
            pooled = T.segment_sum(T.mul(gates, reps), owner, n_pat)
        else:
            same = owner[:, None] == owner[None, :]
            out, _ = attention_block(reps, lambda part, m=m: w("inst_tf", m, part), cfg.n_heads, same)
            pooled = T.segment_mean(out, owner, n_pat)
        per_modality.append(T.instance_norm(pooled) if cfg.instance_norm else pooled)
    n_mod = len(modalities)
    if n_mod != cfg.n_modalities:
        raise DimensionError(f"expected {cfg.n_modalities} modalities, got {n_mod}")
    # modality-major stack -> patient-major token order
    stacked = T.concat_rows(per_modality)
    tokens = T.gather_rows(stacked, [m * n_pat + i for i in range(n_pat) for m in range(n_mod)])
    patient_of = np.repeat(np.arange(n_pat), n_mod)
    out, _ = attention_block(tokens, lambda part: w("xmod", part), cfg.n_heads, patient_of[:, None] == patient_of[None, :])
    emb = T.segment_mean(out, patient_of, n_pat)
    risk = T.matmul(emb, w("risk"))
    return BatchEmbedding(emb, risk, w.tape.flop_count - start_flops)


def describe(params: ModelParams) -> str:
    return json.dumps({"config": asdict(params.cfg), "n_parameters": params.n_parameters()}, indent=2)
