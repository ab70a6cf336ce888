"""Graph/episode data model, label-disjoint splits, N-way K-shot sampling, and file I/O.

Dataset files are line-delimited UTF-8 JSON: a header record carrying
``{format_version, d, num_classes}`` followed by one record per graph with
``{id, num_nodes, edges, features, label, truth_mask?}``. Each undirected edge
appears once; adjacency is rebuilt symmetric on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, DatasetParseError, SamplingError, ValidationError

FORMAT_VERSION = 1


@dataclass
class Graph:
    """Undirected graph: symmetric 0/1 adjacency, node features, class label.

    ``truth_mask`` marks the ground-truth explanation nodes (1 = rationale)
    when the dataset provides one.
    """

    adjacency: np.ndarray
    features: np.ndarray
    label: int
    truth_mask: np.ndarray | None = None
    graph_id: int | None = None

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.truth_mask is not None:
            self.truth_mask = np.asarray(self.truth_mask, dtype=np.int64)
        self.validate()

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.sum()) // 2

    def validate(self) -> None:
        a = self.adjacency
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError(f"adjacency must be square, got {a.shape}")
        n = a.shape[0]
        if n == 0:
            raise ValidationError("graph has no nodes")
        if not np.array_equal(a, a.T):
            raise ValidationError("adjacency is not symmetric")
        if np.any(np.diag(a) != 0):
            raise ValidationError("adjacency has self-loops")
        if not np.all((a == 0) | (a == 1)):
            raise ValidationError("adjacency entries must be 0/1")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValidationError(
                f"features must have one row per node, got {self.features.shape} for {n} nodes"
            )
        if self.truth_mask is not None:
            m = self.truth_mask
            if m.shape != (n,):
                raise ValidationError(f"truth_mask length {m.shape} does not match {n} nodes")
            if not np.all((m == 0) | (m == 1)):
                raise ValidationError("truth_mask entries must be 0/1")
            if m.sum() == 0 or m.sum() == n:
                raise ValidationError("truth_mask must contain at least one 0 and one 1")

    def edge_list(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(np.triu(self.adjacency))
        return [(int(u), int(v)) for u, v in zip(rows, cols)]

    def equals(self, other: "Graph") -> bool:
        if self.label != other.label or self.graph_id != other.graph_id:
            return False
        if not np.array_equal(self.adjacency, other.adjacency):
            return False
        if not np.array_equal(self.features, other.features):
            return False
        if (self.truth_mask is None) != (other.truth_mask is None):
            return False
        if self.truth_mask is not None and not np.array_equal(self.truth_mask, other.truth_mask):
            return False
        return True


@dataclass
class Episode:
    """One N-way K-shot task: support/query graphs with episode-local labels."""

    support: list[tuple[Graph, int]]
    query: list[tuple[Graph, int]]
    class_map: dict[int, int]
    n_way: int
    k_shot: int
    query_per_class: int

    def __post_init__(self):
        counts = np.zeros(self.n_way, dtype=int)
        for _, local in self.support:
            counts[local] += 1
        if len(self.support) != self.n_way * self.k_shot or np.any(counts != self.k_shot):
            raise ValidationError(
                f"support must hold exactly {self.k_shot} graphs per local class, got counts {counts}"
            )
        support_ids = {id(g) for g, _ in self.support}
        if any(id(g) in support_ids for g, _ in self.query):
            raise ValidationError("support and query sets overlap")

    def support_labels(self) -> np.ndarray:
        return np.array([local for _, local in self.support], dtype=np.int64)

    def query_labels(self) -> np.ndarray:
        return np.array([local for _, local in self.query], dtype=np.int64)


@dataclass(frozen=True)
class DatasetSplit:
    train_classes: tuple[int, ...]
    val_classes: tuple[int, ...]
    test_classes: tuple[int, ...]

    def __post_init__(self):
        groups = [set(self.train_classes), set(self.val_classes), set(self.test_classes)]
        total = sum(len(g) for g in groups)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise ValidationError("split groups are not pairwise disjoint")

    def classes_for(self, role: str) -> tuple[int, ...]:
        try:
            return getattr(self, f"{role}_classes")
        except AttributeError:
            raise ConfigurationError(f"unknown split role '{role}'") from None

    def all_classes(self) -> set[int]:
        return set(self.train_classes) | set(self.val_classes) | set(self.test_classes)


def split_classes(num_classes: int, ratios_or_counts: Sequence[float], seed: int) -> DatasetSplit:
    """Deterministic disjoint train/val/test partition of class ids."""
    parts = list(ratios_or_counts)
    if len(parts) != 3:
        raise ConfigurationError(f"expected three split sizes, got {len(parts)}")
    if all(isinstance(p, (int, np.integer)) for p in parts):
        counts = [int(p) for p in parts]
    else:
        counts = [int(round(p * num_classes)) for p in parts]
        counts[0] += num_classes - sum(counts)
    if any(c < 0 for c in counts) or sum(counts) != num_classes:
        raise ConfigurationError(f"split sizes {counts} do not partition {num_classes} classes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(num_classes)
    train = tuple(sorted(int(c) for c in order[: counts[0]]))
    val = tuple(sorted(int(c) for c in order[counts[0] : counts[0] + counts[1]]))
    test = tuple(sorted(int(c) for c in order[counts[0] + counts[1] :]))
    return DatasetSplit(train, val, test)


def index_by_class(graphs: Sequence[Graph]) -> dict[int, list[int]]:
    index: dict[int, list[int]] = {}
    for i, g in enumerate(graphs):
        index.setdefault(g.label, []).append(i)
    return index


def sample_episode(
    graphs: Sequence[Graph],
    split: DatasetSplit,
    role: str,
    n_way: int,
    k_shot: int,
    query_per_class: int,
    rng: np.random.Generator,
    class_index: dict[int, list[int]] | None = None,
) -> Episode:
    """Uniformly sample an N-way K-shot episode from one split role.

    Local labels 0..N-1 follow the (random) order in which classes were drawn,
    so the class-to-local assignment is symmetric across episodes.
    """
    if class_index is None:
        class_index = index_by_class(graphs)
    pool = [c for c in split.classes_for(role) if c in class_index]
    if len(pool) < n_way:
        raise SamplingError(
            f"{role} split offers {len(pool)} classes with data, need {n_way}"
        )
    chosen = rng.choice(np.asarray(sorted(pool)), size=n_way, replace=False)
    support: list[tuple[Graph, int]] = []
    query: list[tuple[Graph, int]] = []
    class_map: dict[int, int] = {}
    need = k_shot + query_per_class
    for local, global_class in enumerate(int(c) for c in chosen):
        class_map[global_class] = local
        candidates = class_index[global_class]
        if len(candidates) < need:
            raise SamplingError(
                f"class {global_class} has {len(candidates)} graphs, need {need}"
            )
        picked = rng.choice(len(candidates), size=need, replace=False)
        for j in picked[:k_shot]:
            support.append((graphs[candidates[int(j)]], local))
        for j in picked[k_shot:]:
            query.append((graphs[candidates[int(j)]], local))
    return Episode(
        support=support,
        query=query,
        class_map=class_map,
        n_way=n_way,
        k_shot=k_shot,
        query_per_class=query_per_class,
    )


# -- serialization --------------------------------------------------------------

def _graph_record(graph: Graph) -> dict:
    record = {
        "id": graph.graph_id,
        "num_nodes": graph.num_nodes,
        "edges": [[u, v] for u, v in graph.edge_list()],
        "features": graph.features.tolist(),
        "label": int(graph.label),
    }
    if graph.truth_mask is not None:
        record["truth_mask"] = graph.truth_mask.tolist()
    return record


def save_dataset(graphs: Sequence[Graph], path: str | Path, extra_header: dict | None = None) -> None:
    """Write graphs as line-delimited JSON behind a self-describing header."""
    graphs = list(graphs)
    if not graphs:
        raise ValidationError("refusing to write an empty dataset")
    d = graphs[0].features.shape[1]
    for g in graphs:
        g.validate()
        if g.features.shape[1] != d:
            raise ValidationError(
                f"graph {g.graph_id}: feature dimension {g.features.shape[1]} != header d={d}"
            )
    header = {
        "format_version": FORMAT_VERSION,
        "d": d,
        "num_classes": int(max(g.label for g in graphs)) + 1,
    }
    if extra_header:
        header.update(extra_header)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for g in graphs:
            fh.write(json.dumps(_graph_record(g), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> list[Graph]:
    """Read a dataset file, validating structure; errors carry line numbers."""
    graphs: list[Graph] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise DatasetParseError("empty dataset file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise DatasetParseError(f"bad header: {err.msg}", line=1) from err
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetParseError(
            f"unsupported format_version {header.get('format_version')}", line=1
        )
    d = int(header["d"])
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as err:
            raise DatasetParseError(f"bad record: {err.msg}", line=lineno) from err
        try:
            n = int(record["num_nodes"])
            adjacency = np.zeros((n, n))
            for u, v in record["edges"]:
                u, v = int(u), int(v)
                if not (0 <= u < n and 0 <= v < n):
                    raise ValidationError(f"edge [{u}, {v}] out of range for {n} nodes")
                if u == v:
                    raise ValidationError(f"self-loop on node {u}")
                adjacency[u, v] = 1.0
                adjacency[v, u] = 1.0
            features = np.asarray(record["features"], dtype=np.float64)
            if features.shape != (n, d):
                raise ValidationError(
                    f"features shape {features.shape} does not match ({n}, {d})"
                )
            graph = Graph(
                adjacency=adjacency,
                features=features,
                label=int(record["label"]),
                truth_mask=record.get("truth_mask"),
                graph_id=record.get("id"),
            )
        except KeyError as err:
            raise DatasetParseError(f"missing field {err}", line=lineno) from err
        except ValidationError as err:
            raise ValidationError(f"line {lineno}: {err}") from err
        graphs.append(graph)
    if not graphs:
        raise DatasetParseError("dataset has a header but no graphs", line=1)
    return graphs


def read_header(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    try:
        return json.loads(first)
    except json.JSONDecodeError as err:
        raise DatasetParseError(f"bad header: {err.msg}", line=1) from err
