"""Graph containers, dataset parsers and basic graph metrics."""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path


class ParseError(ValueError):
    """Raised when a dataset file is malformed or incomplete."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected simple graph with node features and a label.

    Edges are stored once as ``(u, v)`` with ``u < v``.  ``label`` is an int
    for multiclass tasks or a float vector (NaN = unlabeled) for multilabel.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    label: int | np.ndarray = 0
    edge_weights: np.ndarray | None = None
    _adj: list = field(default=None, repr=False, compare=False)

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges: Iterable[Sequence[int]] = (),
        features: np.ndarray | None = None,
        label: int | Sequence[float] | np.ndarray = 0,
        edge_weights: Sequence[float] | None = None,
    ) -> "Graph":
        """Build a graph, canonicalising edge order and collapsing duplicates.

        Self-loops are dropped.  For duplicate pairs the first weight wins.
        """
        if num_nodes < 0:
            raise ValueError("num_nodes must be non-negative")
        edges = list(edges)
        weights = None if edge_weights is None else list(edge_weights)
        if weights is not None and len(weights) != len(edges):
            raise ValueError("edge_weights must align with edges")
        seen: dict[tuple[int, int], float] = {}
        for i, (u, v) in enumerate(edges):
            u, v = int(u), int(v)
            if not (0 <= u < num_nodes and 0 <= v < num_nodes):
                raise ValueError(f"edge ({u}, {v}) out of range for {num_nodes} nodes")
            if u == v:
                continue
            key = (u, v) if u < v else (v, u)
            if key not in seen:
                seen[key] = 1.0 if weights is None else float(weights[i])
        keys = sorted(seen)
        e = np.array(keys, dtype=np.int64).reshape(-1, 2)
        w = None if weights is None else np.array([seen[k] for k in keys], dtype=np.float64)
        if features is None:
            x = np.ones((num_nodes, 1))
        else:
            x = np.array(features, dtype=np.float64, copy=True)
            if x.ndim == 1:
                x = x.reshape(num_nodes, -1)
            if x.shape[0] != num_nodes:
                raise ValueError(f"features have {x.shape[0]} rows, expected {num_nodes}")
        if isinstance(label, (int, np.integer)):
            lab: int | np.ndarray = int(label)
        else:
            lab = _frozen(np.array(label, dtype=np.float64))
        return cls(
            num_nodes=int(num_nodes),
            edges=_frozen(e),
            features=_frozen(x),
            label=lab,
            edge_weights=None if w is None else _frozen(w),
        )

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def weights(self) -> np.ndarray:
        """Edge weights, defaulting to 1.0."""
        if self.edge_weights is None:
            return np.ones(self.num_edges)
        return self.edge_weights

    def neighbors(self, v: int) -> list[int]:
        if self._adj is None:
            adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
            for u, w in self.edges:
                adj[u].append(int(w))
                adj[w].append(int(u))
            for lst in adj:
                lst.sort()
            object.__setattr__(self, "_adj", adj)
        return self._adj[v]

    def adjacency_lists(self) -> list[list[int]]:
        if self.num_nodes:
            self.neighbors(0)
        return self._adj or []

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def adjacency(self, weighted: bool = True) -> sp.csr_matrix:
        """Symmetric sparse adjacency without self-loops."""
        n = self.num_nodes
        u, v = self.edges[:, 0], self.edges[:, 1]
        w = self.weights if weighted else np.ones(self.num_edges)
        a = sp.coo_matrix(
            (np.concatenate([w, w]), (np.concatenate([u, v]), np.concatenate([v, u]))),
            shape=(n, n),
        )
        return a.tocsr()

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(
            num_nodes=self.num_nodes,
            edges=self.edges,
            features=_frozen(np.array(features, dtype=np.float64)),
            label=self.label,
            edge_weights=self.edge_weights,
        )

    def relabel(self, perm: Sequence[int]) -> "Graph":
        """Return the graph with node ``v`` renamed to ``perm[v]``."""
        perm = np.asarray(perm)
        x = np.empty_like(self.features)
        x[perm] = self.features
        return Graph.from_edges(
            self.num_nodes,
            perm[self.edges] if self.num_edges else [],
            x,
            self.label if isinstance(self.label, int) else np.array(self.label),
            None if self.edge_weights is None else self.edge_weights,
        )

    def same_as(self, other: "Graph") -> bool:
        if self.num_nodes != other.num_nodes or not np.array_equal(self.edges, other.edges):
            return False
        if not np.array_equal(self.weights, other.weights):
            return False
        if not np.array_equal(self.features, other.features):
            return False
        return np.array_equal(np.asarray(self.label), np.asarray(other.label), equal_nan=True)


@dataclass(frozen=True)
class Dataset:
    graphs: tuple[Graph, ...]
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        dims = {g.feature_dim for g in self.graphs}
        if len(dims) > 1:
            raise ValueError(f"graphs disagree on feature dimension: {sorted(dims)}")
        for i, g in enumerate(self.graphs):
            if isinstance(g.label, int) and not 0 <= g.label < self.num_classes:
                raise ValueError(f"graph {i} label {g.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i: int) -> Graph:
        return self.graphs[i]

    @property
    def multilabel(self) -> bool:
        return bool(self.graphs) and not isinstance(self.graphs[0].label, int)

    @property
    def feature_dim(self) -> int:
        return self.graphs[0].feature_dim if self.graphs else 0

    @property
    def labels(self) -> np.ndarray:
        if self.multilabel:
            return np.stack([g.label for g in self.graphs])
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    def subset(self, idx: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.graphs[i] for i in idx), self.num_classes, self.name)


@dataclass(frozen=True)
class SplitPlan:
    folds: np.ndarray
    k: int
    seed: int

    def fold(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(train, val, test) indices: fold ``i`` tests, fold ``i+1`` validates."""
        test = np.flatnonzero(self.folds == i)
        val = np.flatnonzero(self.folds == (i + 1) % self.k)
        train = np.flatnonzero((self.folds != i) & (self.folds != (i + 1) % self.k))
        return train, val, test


# --------------------------------------------------------------------- parsers


def _read_rows(path: Path, dtype=float) -> list[list]:
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([dtype(t) for t in re.split(r"[,\s]+", line) if t])
            except ValueError as exc:
                raise ParseError(f"{path.name}:{lineno}: {exc}") from None
    return rows


def parse_tudataset(directory: str | Path) -> Dataset:
    """Read a raw TUDataset directory (``DS_A.txt``, ``DS_graph_indicator.txt``, ...)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ParseError(f"{directory} is not a directory")
    hits = sorted(directory.glob("*_A.txt"))
    prefix = hits[0].name[: -len("_A.txt")] if hits else directory.name
    if not hits:
        raise ParseError(f"missing {prefix}_A.txt")

    def path(suffix: str, required: bool = True) -> Path | None:
        p = directory / f"{prefix}_{suffix}.txt"
        if not p.exists():
            if required:
                raise ParseError(f"missing {p.name}")
            return None
        return p

    a_path = path("A")
    indicator = [int(r[0]) for r in _read_rows(path("graph_indicator"), int)]
    graph_labels = [int(r[0]) for r in _read_rows(path("graph_labels"), int)]
    nl_path = path("node_labels", required=False)
    na_path = path("node_attributes", required=False)
    ea_path = path("edge_attributes", required=False)

    total = len(indicator)
    gid = np.array(indicator, dtype=np.int64) - 1
    num_graphs = len(graph_labels)
    if total and (gid.min() < 0 or gid.max() >= num_graphs):
        raise ParseError("graph indicator references a graph without a label")
    starts = np.searchsorted(gid, np.arange(num_graphs))
    if np.any(np.diff(gid) < 0):
        raise ParseError(f"{prefix}_graph_indicator.txt is not sorted by graph")

    blocks: list[np.ndarray] = []
    if nl_path is not None:
        node_labels = np.array([r[0] for r in _read_rows(nl_path, int)])
        if len(node_labels) != total:
            raise ParseError(f"{nl_path.name} has {len(node_labels)} rows, expected {total}")
        values = np.unique(node_labels)
        onehot = np.zeros((total, len(values)))
        onehot[np.arange(total), np.searchsorted(values, node_labels)] = 1.0
        blocks.append(onehot)
    if na_path is not None:
        attrs = np.array(_read_rows(na_path, float), dtype=np.float64)
        if len(attrs) != total:
            raise ParseError(f"{na_path.name} has {len(attrs)} rows, expected {total}")
        blocks.append(attrs.reshape(total, -1))
    x = np.hstack(blocks) if blocks else np.ones((total, 1))

    per_graph: list[list[tuple[int, int]]] = [[] for _ in range(num_graphs)]
    per_weight: list[list[float]] = [[] for _ in range(num_graphs)]
    edge_w = None
    if ea_path is not None:
        edge_w = [r[0] for r in _read_rows(ea_path, float)]
    with a_path.open() as fh:
        row = 0
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                u, v = (int(t) - 1 for t in re.split(r"[,\s]+", line) if t)
            except ValueError:
                raise ParseError(f"{a_path.name}:{lineno}: expected two node ids") from None
            for node in (u, v):
                if not 0 <= node < total:
                    raise ParseError(
                        f"{a_path.name}:{lineno}: node {node + 1} outside declared range 1..{total}"
                    )
            if gid[u] != gid[v]:
                raise ParseError(f"{a_path.name}:{lineno}: edge joins two graphs")
            g = gid[u]
            per_graph[g].append((u - starts[g], v - starts[g]))
            if edge_w is not None:
                per_weight[g].append(edge_w[row])
            row += 1

    classes = sorted(set(graph_labels))
    remap = {c: i for i, c in enumerate(classes)}
    counts = np.bincount(gid, minlength=num_graphs)
    graphs = []
    for g in range(num_graphs):
        lo = starts[g]
        graphs.append(
            Graph.from_edges(
                int(counts[g]),
                per_graph[g],
                x[lo : lo + counts[g]],
                remap[graph_labels[g]],
                per_weight[g] if edge_w is not None else None,
            )
        )
    return Dataset(tuple(graphs), len(classes), prefix)


def _format_label(label) -> str:
    if isinstance(label, int):
        return str(label)
    return ",".join("nan" if math.isnan(v) else repr(float(v)) for v in label)


def write_native(dataset: Dataset, file: str | Path) -> None:
    """Write the canonical native text form (see :func:`parse_native`)."""
    lines = [f"# {dataset.name} classes={dataset.num_classes}"]
    for g in dataset.graphs:
        lines.append(f"G {g.num_nodes} {_format_label(g.label)}")
        for (u, v), w in zip(g.edges, g.weights):
            if g.edge_weights is None:
                lines.append(f"E {u} {v}")
            else:
                lines.append(f"E {u} {v} {float(w)!r}")
        for v in range(g.num_nodes):
            lines.append("F " + str(v) + " " + " ".join(repr(float(t)) for t in g.features[v]))
    Path(file).write_text("\n".join(lines) + "\n")


def parse_native(file: str | Path) -> Dataset:
    """Read the line-delimited native format.

    ::

        G <num_nodes> <label>      # label: int, or comma list of floats/nan
        E <u> <v> [w]
        F <node> <v0> <v1> ...
    """
    file = Path(file)
    records: list[dict] = []
    declared_classes = None

    def finish(rec: dict, lineno: int) -> Graph:
        n = rec["n"]
        feats = rec["feats"]
        if feats:
            if len(feats) != n:
                raise ParseError(f"{file.name}:{lineno}: graph has F lines for {len(feats)} of {n} nodes")
            dims = {len(f) for f in feats.values()}
            if len(dims) != 1:
                raise ParseError(f"{file.name}:{lineno}: ragged feature rows")
            x = np.array([feats[v] for v in range(n)], dtype=np.float64).reshape(n, -1)
        else:
            x = None
        ws = rec["weights"]
        weighted = any(w is not None for w in ws)
        if weighted and any(w is None for w in ws):
            raise ParseError(f"{file.name}:{lineno}: mix of weighted and unweighted edges")
        return Graph.from_edges(n, rec["edges"], x, rec["label"], ws if weighted else None)

    graphs: list[Graph] = []
    cur: dict | None = None
    lineno = 0
    with file.open() as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if line.startswith("#"):
                m = re.search(r"classes=(\d+)", line)
                if m and declared_classes is None:
                    declared_classes = int(m.group(1))
                continue
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "G":
                    if cur is not None:
                        graphs.append(finish(cur, lineno))
                    if len(parts) != 3:
                        raise ValueError("expected 'G <num_nodes> <label>'")
                    lab_tok = parts[2]
                    label = (
                        [float(t) for t in lab_tok.split(",")]
                        if "," in lab_tok or "." in lab_tok or "nan" in lab_tok.lower()
                        else int(lab_tok)
                    )
                    cur = {"n": int(parts[1]), "label": label, "edges": [], "weights": [], "feats": {}}
                elif cur is None:
                    raise ValueError(f"'{tag}' record before any 'G' line")
                elif tag == "E":
                    if len(parts) not in (3, 4):
                        raise ValueError("expected 'E <u> <v> [w]'")
                    u, v = int(parts[1]), int(parts[2])
                    if not (0 <= u < cur["n"] and 0 <= v < cur["n"]):
                        raise ValueError(f"edge ({u}, {v}) outside 0..{cur['n'] - 1}")
                    cur["edges"].append((u, v))
                    cur["weights"].append(float(parts[3]) if len(parts) == 4 else None)
                elif tag == "F":
                    v = int(parts[1])
                    if not 0 <= v < cur["n"]:
                        raise ValueError(f"node {v} outside 0..{cur['n'] - 1}")
                    cur["feats"][v] = [float(t) for t in parts[2:]]
                else:
                    raise ValueError(f"unknown record tag '{tag}'")
            except ValueError as exc:
                raise ParseError(f"{file.name}:{lineno}: {exc}") from None
    if cur is not None:
        graphs.append(finish(cur, lineno))
    if not graphs:
        raise ParseError(f"{file.name}: no graphs")
    dims = {g.feature_dim for g in graphs}
    if len(dims) > 1:
        raise ParseError(f"{file.name}: feature dimension differs across graphs {sorted(dims)}")
    if isinstance(graphs[0].label, int):
        num_classes = max(g.label for g in graphs) + 1
        if declared_classes is not None:
            num_classes = max(num_classes, declared_classes)
    else:
        num_classes = len(graphs[0].label)
    return Dataset(tuple(graphs), num_classes, file.stem)


def load_dataset(path: str | Path) -> Dataset:
    """Dispatch on path type: directory means TUDataset, file means native."""
    path = Path(path)
    if path.is_dir():
        return parse_tudataset(path)
    return parse_native(path)


# ---------------------------------------------------------------------- splits


def make_splits(dataset: Dataset, k: int, seed: int) -> SplitPlan:
    """Stratified k-fold assignment, deterministic in ``seed``."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k={k} exceeds number of graphs ({n})")
    rng = np.random.default_rng(seed)
    if dataset.multilabel:
        strata = np.zeros(n, dtype=np.int64)
    else:
        strata = dataset.labels
    folds = np.empty(n, dtype=np.int64)
    offset = 0
    for c in np.unique(strata):
        members = np.flatnonzero(strata == c)
        rng.shuffle(members)
        folds[members] = (offset + np.arange(len(members))) % k
        offset += len(members)
    return SplitPlan(folds=folds, k=k, seed=seed)


# --------------------------------------------------------------------- metrics


def avg_closeness(graph: Graph) -> float:
    """Mean closeness centrality, normalised within each connected component."""
    n = graph.num_nodes
    if n <= 1:
        return 0.0
    dist = shortest_path(graph.adjacency(weighted=False), unweighted=True, directed=False)
    reach = np.isfinite(dist)
    total = np.where(reach, dist, 0.0).sum(axis=1)
    comp = reach.sum(axis=1) - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(total > 0, comp / total, 0.0)
    return float(c.mean())


def khop_neighbors(graph: Graph, v: int, k: int) -> frozenset[int]:
    """Nodes at shortest-path distance exactly ``k`` from ``v``."""
    if not 0 <= v < graph.num_nodes:
        raise IndexError(f"node {v} out of range")
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = {v: 0}
    queue = deque([v])
    while queue:
        u = queue.popleft()
        if dist[u] == k:
            continue
        for w in graph.neighbors(u):
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    return frozenset(u for u, d in dist.items() if d == k)
