"""Graph data model, synthetic benchmark generation, masking, splits, file IO.

Graphs carry categorical node/edge attributes and a binary label.  The
synthetic benchmark plants a clique motif with a required attribute code
into positive graphs and rejection-samples negatives so the motif is
provably absent.  Masking replaces attribute codes with a reserved MASK
token (one past the declared cardinality) and never touches topology.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, GenerationError, ParseError, SplitError

MAX_NEGATIVE_ATTEMPTS = 10_000


@dataclass(frozen=True)
class GraphSchema:
    """Attribute layout shared by every graph in a dataset."""

    node_channels: int
    node_cardinality: int
    edge_channels: int
    edge_cardinality: int

    @property
    def node_mask_code(self) -> int:
        return self.node_cardinality

    @property
    def edge_mask_code(self) -> int:
        return self.edge_cardinality


class Graph:
    """Undirected graph with categorical attributes and a binary label.

    Edges are stored once as (u, v) with u < v, sorted lexicographically.
    Instances are treated as immutable after construction; derived index
    arrays are cached on first use.
    """

    __slots__ = ("num_nodes", "node_attrs", "edge_list", "edge_attrs",
                 "label", "schema", "_incidence", "_neighbors", "_onehot")

    def __init__(self, num_nodes, node_attrs, edge_list, edge_attrs, label, schema):
        self.num_nodes = int(num_nodes)
        self.node_attrs = np.asarray(node_attrs, dtype=np.int64).reshape(
            self.num_nodes, schema.node_channels)
        self.edge_list = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)
        self.edge_attrs = np.asarray(edge_attrs, dtype=np.int64).reshape(
            self.edge_list.shape[0], schema.edge_channels)
        self.label = int(label)
        self.schema = schema
        self._incidence = None
        self._neighbors = None
        self._onehot = {}

    @property
    def num_edges(self) -> int:
        return self.edge_list.shape[0]

    def validate(self, allow_mask_codes: bool = False) -> None:
        s = self.schema
        if self.num_nodes < 1:
            raise ContractError("graph must have at least one node")
        if self.label not in (0, 1):
            raise ContractError(f"label must be binary, got {self.label}")
        node_cap = s.node_cardinality + (1 if allow_mask_codes else 0)
        edge_cap = s.edge_cardinality + (1 if allow_mask_codes else 0)
        if self.node_attrs.size and (
                self.node_attrs.min() < 0 or self.node_attrs.max() >= node_cap):
            raise ContractError("node attribute code out of range")
        if self.edge_attrs.size and (
                self.edge_attrs.min() < 0 or self.edge_attrs.max() >= edge_cap):
            raise ContractError("edge attribute code out of range")
        if self.num_edges:
            u, v = self.edge_list[:, 0], self.edge_list[:, 1]
            if u.min() < 0 or v.max() >= self.num_nodes:
                raise ContractError("edge endpoint out of range")
            if np.any(u == v):
                raise ContractError("self-loops are not allowed")
            if np.any(u > v):
                raise ContractError("edges must be stored as (u, v) with u < v")
            keys = u * self.num_nodes + v
            if len(np.unique(keys)) != len(keys):
                raise ContractError("duplicate undirected edge")

    def incidence(self):
        """(src, dst, edge_index) arrays with each undirected edge doubled."""
        if self._incidence is None:
            u, v = self.edge_list[:, 0], self.edge_list[:, 1]
            src = np.concatenate([u, v])
            dst = np.concatenate([v, u])
            eidx = np.concatenate([np.arange(self.num_edges)] * 2)
            self._incidence = (src, dst, eidx)
        return self._incidence

    def neighbors(self, node: int) -> np.ndarray:
        if self._neighbors is None:
            nbrs = [[] for _ in range(self.num_nodes)]
            for u, v in self.edge_list:
                nbrs[u].append(v)
                nbrs[v].append(u)
            self._neighbors = [np.array(sorted(n), dtype=np.int64) for n in nbrs]
        return self._neighbors[node]

    def node_onehot(self, channel: int, depth: int) -> np.ndarray:
        key = ("n", channel, depth)
        if key not in self._onehot:
            eye = np.eye(depth)
            self._onehot[key] = eye[self.node_attrs[:, channel]]
        return self._onehot[key]

    def edge_onehot(self, channel: int, depth: int) -> np.ndarray:
        key = ("e", channel, depth)
        if key not in self._onehot:
            eye = np.eye(depth)
            self._onehot[key] = eye[self.edge_attrs[:, channel]]
        return self._onehot[key]

    def copy(self) -> "Graph":
        return Graph(self.num_nodes, self.node_attrs.copy(), self.edge_list.copy(),
                     self.edge_attrs.copy(), self.label, self.schema)

    def structurally_equal(self, other: "Graph") -> bool:
        return (self.num_nodes == other.num_nodes
                and self.label == other.label
                and self.schema == other.schema
                and np.array_equal(self.node_attrs, other.node_attrs)
                and np.array_equal(self.edge_list, other.edge_list)
                and np.array_equal(self.edge_attrs, other.edge_attrs))


@dataclass
class MaskedGraph:
    """A noisy view of a graph plus the indices the masking touched.

    `mask_pairs` lists (masked node, neighbor) pairs; the same index pairs
    address both the original and the noisy view since topology is shared.
    """

    noisy: Graph
    masked_node_indices: np.ndarray
    masked_edge_indices: np.ndarray
    mask_pairs: np.ndarray  # (P, 2) int64


@dataclass(frozen=True)
class MotifSpec:
    """Clique motif: `size` mutually connected nodes sharing one code."""

    size: int = 3
    channel: int = 0
    code: int = 1


@dataclass(frozen=True)
class DatasetSpec:
    n_graphs: int = 400
    nodes_min: int = 8
    nodes_max: int = 16
    edge_density: float = 0.3
    node_channels: int = 2
    node_cardinality: int = 4
    edge_channels: int = 1
    edge_cardinality: int = 3
    motif: MotifSpec = field(default_factory=MotifSpec)
    positive_fraction: float = 0.5

    def schema(self) -> GraphSchema:
        return GraphSchema(self.node_channels, self.node_cardinality,
                           self.edge_channels, self.edge_cardinality)

    def validate(self) -> None:
        if not 0.0 < self.positive_fraction < 1.0:
            raise ContractError("positive_fraction must lie strictly in (0, 1)")
        if self.motif.size > self.nodes_min:
            raise ContractError("motif size exceeds the minimum graph size")
        if not 1 <= self.nodes_min <= self.nodes_max:
            raise ContractError("need 1 <= nodes_min <= nodes_max")
        if not 0.0 <= self.edge_density <= 1.0:
            raise ContractError("edge_density must lie in [0, 1]")
        if self.motif.code >= self.node_cardinality or self.motif.channel >= self.node_channels:
            raise ContractError("motif attribute pattern outside schema")
        if self.n_graphs < 1:
            raise ContractError("n_graphs must be positive")


def _as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(int(seed_or_rng))


def contains_motif(g: Graph, motif: MotifSpec) -> bool:
    """Clique search restricted to nodes carrying the required code."""
    candidates = np.flatnonzero(g.node_attrs[:, motif.channel] == motif.code)
    if len(candidates) < motif.size:
        return False
    edge_set = {(int(u), int(v)) for u, v in g.edge_list}

    def connected(a, b):
        return (a, b) in edge_set if a < b else (b, a) in edge_set

    for combo in itertools.combinations(candidates.tolist(), motif.size):
        if all(connected(a, b) for a, b in itertools.combinations(combo, 2)):
            return True
    return False


def _random_graph(spec: DatasetSpec, rng: np.random.Generator) -> Graph:
    schema = spec.schema()
    n = int(rng.integers(spec.nodes_min, spec.nodes_max + 1))
    pairs = np.array(list(itertools.combinations(range(n), 2)), dtype=np.int64)
    if len(pairs):
        keep = rng.random(len(pairs)) < spec.edge_density
        edges = pairs[keep]
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    node_attrs = rng.integers(0, spec.node_cardinality, size=(n, spec.node_channels))
    edge_attrs = rng.integers(0, spec.edge_cardinality, size=(len(edges), spec.edge_channels))
    return Graph(n, node_attrs, edges, edge_attrs, 0, schema)


def _plant_motif(g: Graph, spec: DatasetSpec, rng: np.random.Generator) -> Graph:
    motif = spec.motif
    nodes = rng.choice(g.num_nodes, size=motif.size, replace=False)
    node_attrs = g.node_attrs.copy()
    node_attrs[nodes, motif.channel] = motif.code
    existing = {(int(u), int(v)) for u, v in g.edge_list}
    new_edges, new_attrs = [], []
    for a, b in itertools.combinations(sorted(int(x) for x in nodes), 2):
        if (a, b) not in existing:
            new_edges.append((a, b))
            new_attrs.append(rng.integers(0, spec.edge_cardinality,
                                          size=spec.edge_channels))
    edge_list = g.edge_list
    edge_attrs = g.edge_attrs
    if new_edges:
        edge_list = np.vstack([edge_list, np.array(new_edges, dtype=np.int64)])
        edge_attrs = np.vstack([edge_attrs, np.array(new_attrs, dtype=np.int64)])
        order = np.lexsort((edge_list[:, 1], edge_list[:, 0]))
        edge_list, edge_attrs = edge_list[order], edge_attrs[order]
    return Graph(g.num_nodes, node_attrs, edge_list, edge_attrs, 1, g.schema)


def generate_synthetic_dataset(spec: DatasetSpec, seed) -> list:
    """Motif-classification benchmark with an exact positive quota.

    Positives get the motif planted; negatives are resampled until the
    motif is absent (GenerationError after MAX_NEGATIVE_ATTEMPTS tries).
    """
    spec.validate()
    rng = _as_rng(seed)
    n_pos = int(round(spec.positive_fraction * spec.n_graphs))
    labels = np.array([1] * n_pos + [0] * (spec.n_graphs - n_pos), dtype=np.int64)
    rng.shuffle(labels)

    graphs = []
    for label in labels:
        if label == 1:
            g = _plant_motif(_random_graph(spec, rng), spec, rng)
        else:
            for attempt in range(MAX_NEGATIVE_ATTEMPTS):
                g = _random_graph(spec, rng)
                if not contains_motif(g, spec.motif):
                    break
            else:
                raise GenerationError(
                    f"could not sample a motif-free graph in {MAX_NEGATIVE_ATTEMPTS} tries; "
                    "spec too dense")
        g.validate()
        graphs.append(g)
    return graphs


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def mask_graph(g: Graph, node_ratio: float, seed) -> MaskedGraph:
    """Replace attribute codes of randomly chosen nodes (and their incident
    edges) with the reserved MASK token; topology is untouched.

    The masked-node count is max(1, round-half-up(ratio * num_nodes)) for
    any positive ratio, and 0 for ratio == 0.
    """
    if not 0.0 <= node_ratio <= 1.0:
        raise ContractError("node_ratio must lie in [0, 1]")
    rng = _as_rng(seed)
    if node_ratio == 0.0:
        m = 0
    else:
        m = min(g.num_nodes, max(1, _round_half_up(node_ratio * g.num_nodes)))
    chosen = np.sort(rng.choice(g.num_nodes, size=m, replace=False)) if m else \
        np.zeros(0, dtype=np.int64)

    node_attrs = g.node_attrs.copy()
    edge_attrs = g.edge_attrs.copy()
    node_attrs[chosen] = g.schema.node_mask_code

    masked_set = set(int(x) for x in chosen)
    edge_hits = np.zeros(0, dtype=np.int64)
    if g.num_edges and m:
        hit = np.array([u in masked_set or v in masked_set for u, v in g.edge_list])
        edge_hits = np.flatnonzero(hit)
        edge_attrs[edge_hits] = g.schema.edge_mask_code

    pairs = []
    for u in chosen:
        for v in g.neighbors(int(u)):
            pairs.append((int(u), int(v)))
    mask_pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)

    noisy = Graph(g.num_nodes, node_attrs, g.edge_list.copy(), edge_attrs,
                  g.label, g.schema)
    return MaskedGraph(noisy, chosen.astype(np.int64), edge_hits, mask_pairs)


def split_indices(labels, fractions, seed):
    """Stratified index partition; deterministic given seed."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ContractError("need three positive split fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError("split fractions must sum to 1")
    labels = np.asarray(labels)
    rng = _as_rng(seed)
    parts = [[], [], []]
    for label in (0, 1):
        idx = np.flatnonzero(labels == label)
        rng.shuffle(idx)
        n = len(idx)
        cuts = [0]
        acc = 0.0
        for f in fractions:
            acc += f
            cuts.append(_round_half_up(acc * n) if acc < 1.0 - 1e-12 else n)
        for part in range(3):
            parts[part].extend(int(i) for i in idx[cuts[part]:cuts[part + 1]])
    parts = [np.array(sorted(p), dtype=np.int64) for p in parts]
    for name, part in zip(("train", "valid", "test"), parts):
        got = set(int(labels[i]) for i in part)
        if got != {0, 1}:
            raise SplitError(f"{name} split is missing a label class")
    return tuple(parts)


def split_dataset(ds, fractions, seed):
    """Stratified (train, valid, test) partition of a graph list."""
    train_i, valid_i, test_i = split_indices([g.label for g in ds], fractions, seed)
    return ([ds[i] for i in train_i], [ds[i] for i in valid_i], [ds[i] for i in test_i])


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

_HEADER_PREFIX = "DBPGRAPHS v1"


def dumps_dataset(ds, schema: GraphSchema | None = None) -> str:
    if schema is None:
        if not ds:
            raise ContractError("cannot infer a schema from an empty dataset")
        schema = ds[0].schema
    lines = [f"{_HEADER_PREFIX} C_n={schema.node_channels} K_n={schema.node_cardinality} "
             f"C_e={schema.edge_channels} K_e={schema.edge_cardinality}"]
    for g in ds:
        nodes = " ".join(str(c) for row in g.node_attrs for c in row)
        edges = " ".join(
            " ".join([str(u), str(v)] + [str(c) for c in attrs])
            for (u, v), attrs in zip(g.edge_list, g.edge_attrs))
        lines.append(f"g {g.num_nodes} {g.label} | {nodes} | {edges}")
    return "\n".join(lines) + "\n"


def save_dataset(ds, path, schema: GraphSchema | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_dataset(ds, schema))


def loads_dataset(text: str):
    lines = text.splitlines()
    if not lines:
        raise ParseError("line 1: empty dataset file")
    header = lines[0].split()
    if len(header) != 6 or header[0] != "DBPGRAPHS" or header[1] != "v1":
        raise ParseError("line 1: bad header")
    try:
        vals = {}
        for tok in header[2:]:
            key, raw = tok.split("=")
            vals[key] = int(raw)
        schema = GraphSchema(vals["C_n"], vals["K_n"], vals["C_e"], vals["K_e"])
    except (ValueError, KeyError):
        raise ParseError("line 1: malformed header fields") from None

    graphs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            head, nodes_part, edges_part = (s.strip() for s in line.split("|"))
            tag, n_raw, label_raw = head.split()
            if tag != "g":
                raise ValueError
            n, label = int(n_raw), int(label_raw)
            node_vals = [int(t) for t in nodes_part.split()] if nodes_part else []
            if len(node_vals) != n * schema.node_channels:
                raise ValueError
            node_attrs = np.array(node_vals, dtype=np.int64).reshape(n, schema.node_channels)
            edge_vals = [int(t) for t in edges_part.split()] if edges_part else []
            stride = 2 + schema.edge_channels
            if len(edge_vals) % stride:
                raise ValueError
            rows = np.array(edge_vals, dtype=np.int64).reshape(-1, stride)
            g = Graph(n, node_attrs, rows[:, :2], rows[:, 2:], label, schema)
            g.validate()
        except (ValueError, ContractError) as exc:
            detail = str(exc) if isinstance(exc, ContractError) else "malformed record"
            raise ParseError(f"line {lineno}: {detail}") from None
        graphs.append(g)
    return graphs


def load_dataset(path):
    with open(path, "r", encoding="utf-8") as fh:
        return loads_dataset(fh.read())
