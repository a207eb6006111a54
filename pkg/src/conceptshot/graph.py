"""Concept hierarchy: nodes across abstraction levels, undirected parent links,
per-node semantic vectors, and the row-normalized propagation operator.

Level 0 is the most abstract; the last level (``entity_level``) holds the
leaf entity classes that few-shot episodes are built from.  All edges connect
adjacent levels and the parent-link graph must be acyclic (a forest).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError
from .tensor import Tensor, sym_neighbor_mean

VALID_SPLITS = ("meta-train", "meta-test", "weak", "none")

_SEM_MAGIC = b"CSEM"
_FORMAT_NAME = "conceptshot-graph"


@dataclass
class NodeRecord:
    id: int
    name: str
    level: int
    split: str = "none"


class ConceptGraph:
    """Validated hierarchy with semantics; raises DataError on any violation."""

    def __init__(self, nodes, edges, semantics, num_levels):
        edges = [(int(i), int(j)) for i, j in edges]
        self.nodes = sorted((NodeRecord(**n) if isinstance(n, dict) else n for n in nodes),
                            key=lambda n: n.id)
        self.edges = sorted({(min(i, j), max(i, j)) for i, j in edges})
        self.semantics = np.asarray(semantics, dtype=np.float64)
        self.num_levels = int(num_levels)
        self._validate(edges)
        self._nbrs = None

    # -- derived views ------------------------------------------------------

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def entity_level(self):
        return self.num_levels - 1

    def is_entity(self, node_id):
        return self.nodes[node_id].level == self.entity_level

    def level_ids(self, level):
        return [n.id for n in self.nodes if n.level == level]

    def split_ids(self, split, level=None):
        lv = self.entity_level if level is None else level
        return [n.id for n in self.nodes if n.level == lv and n.split == split]

    def neighbors(self, node_id):
        if self._nbrs is None:
            nbrs = [[] for _ in self.nodes]
            for i, j in self.edges:
                nbrs[i].append(j)
                nbrs[j].append(i)
            self._nbrs = [sorted(v) for v in nbrs]
        return self._nbrs[node_id]

    def children(self, node_id):
        lv = self.nodes[node_id].level
        return [j for j in self.neighbors(node_id) if self.nodes[j].level == lv + 1]

    def descendants_at_entity_level(self, node_id):
        """Leaf ids reachable downward from ``node_id`` (the node itself if a leaf)."""
        if self.is_entity(node_id):
            return [node_id]
        out, frontier = [], [node_id]
        while frontier:
            nxt = []
            for u in frontier:
                for c in self.children(u):
                    (out if self.is_entity(c) else nxt).append(c)
            frontier = nxt
        return sorted(set(out))

    # -- validation ---------------------------------------------------------

    def _validate(self, raw_edges):
        if self.num_levels < 1:
            raise DataError(f"num_levels must be >= 1, got {self.num_levels}")
        if not self.nodes:
            raise DataError("graph has no nodes")
        ids = [n.id for n in self.nodes]
        if ids != list(range(len(ids))):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            if dup:
                raise DataError(f"duplicate node id {dup[0]}")
            raise DataError(f"node ids must be exactly 0..{len(ids) - 1}")
        for n in self.nodes:
            if not (0 <= n.level < self.num_levels):
                raise DataError(f"node {n.id} has level {n.level} outside [0, {self.num_levels})")
            if n.split not in VALID_SPLITS:
                raise DataError(f"node {n.id} has unknown split '{n.split}'")
            if n.split in ("meta-train", "meta-test") and n.level != self.entity_level:
                raise DataError(f"node {n.id} is non-leaf but tagged entity split '{n.split}'")
        m = len(self.nodes)
        if len({(min(i, j), max(i, j)) for i, j in raw_edges}) != len(raw_edges):
            raise DataError("duplicate edge in edge list")
        parent = list(range(m))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j in self.edges:
            if not (0 <= i < m and 0 <= j < m):
                raise DataError(f"edge {i}-{j} references an unknown node")
            if i == j:
                raise DataError(f"edge {i}-{j} is a self loop")
            li, lj = self.nodes[i].level, self.nodes[j].level
            if li == lj:
                raise DataError(f"edge {i}-{j} connects nodes at the same level {li}")
            if abs(li - lj) != 1:
                raise DataError(f"edge {i}-{j} skips levels ({li} to {lj})")
            ri, rj = find(i), find(j)
            if ri == rj:
                raise DataError(f"cycle detected: edge {i}-{j} closes a loop in the hierarchy")
            parent[ri] = rj
        has_edge = set()
        for i, j in self.edges:
            has_edge.add(i)
            has_edge.add(j)
        for n in self.nodes:
            if n.level == self.entity_level and self.num_levels > 1 and n.id not in has_edge:
                raise DataError(f"entity node {n.id} has no parent")
        if self.semantics.ndim != 2 or self.semantics.shape[0] != m:
            raise DataError(
                f"semantics shape {self.semantics.shape} does not match {m} nodes")
        if not np.all(np.isfinite(self.semantics)):
            raise DataError("semantics contain non-finite values")

    def __eq__(self, other):
        return (isinstance(other, ConceptGraph)
                and self.num_levels == other.num_levels
                and self.nodes == other.nodes
                and self.edges == other.edges
                and self.semantics.shape == other.semantics.shape
                and np.array_equal(self.semantics, other.semantics))


# ---------------------------------------------------------------------------
# propagation operator

class Propagation:
    """Row-stochastic neighborhood-averaging operator P = D^-1 (A [+ I]).

    ``apply`` runs the operator differentiably with order-canonical summation;
    ``dense`` materializes P for inspection and oracle checks.
    """

    def __init__(self, nbr_idx, degrees, size):
        self.nbr_idx = nbr_idx
        self.degrees = degrees
        self.size = size

    def apply(self, x: Tensor) -> Tensor:
        return sym_neighbor_mean(x, self.nbr_idx, self.degrees)

    @property
    def dense(self):
        p = np.zeros((self.size, self.size))
        for i in range(self.size):
            for j in self.nbr_idx[i]:
                if j < self.size:
                    p[i, j] = 1.0 / self.degrees[i]
        return p


def propagation_operator(g: ConceptGraph, self_loops: bool = True) -> Propagation:
    """Build P from the graph adjacency; ``self_loops`` adds I before normalizing.

    Without self loops an isolated node has no mass to average and the
    operator is undefined; that case is rejected here.
    """
    m = g.num_nodes
    lists = []
    for i in range(m):
        nbrs = list(g.neighbors(i))
        if self_loops:
            nbrs.append(i)
        if not nbrs:
            raise NumericalError(
                f"node {i} has degree 0 without self loops; propagation undefined")
        lists.append(sorted(nbrs))
    degrees = np.array([len(v) for v in lists], dtype=np.float64)
    maxdeg = max(len(v) for v in lists)
    nbr_idx = np.full((m, maxdeg), m, dtype=np.intp)
    for i, v in enumerate(lists):
        nbr_idx[i, :len(v)] = v
    return Propagation(nbr_idx, degrees, m)


def select_task_rows(x: Tensor, class_ids) -> Tensor:
    """Differentiable row selection with episode-grade validation."""
    ids = np.asarray(class_ids, dtype=np.intp)
    if len(set(ids.tolist())) != ids.size:
        raise DataError(f"selection: class ids contain duplicates: {sorted(ids.tolist())}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.data.shape[0]):
        raise DataError(
            f"selection: class id {int(ids.max())} out of range for {x.data.shape[0]} rows")
    from .tensor import gather_rows
    return gather_rows(x, ids)


# ---------------------------------------------------------------------------
# serialization

def save_graph(g: ConceptGraph, path, semantics_sidecar: str | None = None):
    """Write the graph as a JSON document; semantics embedded at full precision
    or referenced as a little-endian float32 sidecar next to the graph file."""
    path = Path(path)
    doc = {
        "format": _FORMAT_NAME,
        "version": 1,
        "num_levels": g.num_levels,
        "nodes": [{"id": n.id, "name": n.name, "level": n.level, "split": n.split}
                  for n in g.nodes],
        "edges": [[i, j] for i, j in g.edges],
    }
    if semantics_sidecar:
        m, d = g.semantics.shape
        blob = _SEM_MAGIC + struct.pack("<BII", 1, m, d)
        blob += g.semantics.astype("<f4").tobytes()
        (path.parent / semantics_sidecar).write_bytes(blob)
        doc["semantics"] = {"dim": d, "file": semantics_sidecar}
    else:
        doc["semantics"] = {"dim": int(g.semantics.shape[1]),
                            "values": g.semantics.tolist()}
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_graph(path) -> ConceptGraph:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"graph file not found: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"graph file {path} is not valid JSON: {e}")
    if doc.get("format") != _FORMAT_NAME:
        raise DataError(f"{path} is not a {_FORMAT_NAME} file")
    sem = doc.get("semantics", {})
    if "file" in sem:
        semantics = _load_semantics_sidecar(path.parent / sem["file"])
    else:
        semantics = np.asarray(sem.get("values"), dtype=np.float64)
    try:
        nodes = [NodeRecord(id=int(n["id"]), name=str(n["name"]), level=int(n["level"]),
                            split=str(n.get("split", "none")))
                 for n in doc["nodes"]]
        edges = [(int(i), int(j)) for i, j in doc["edges"]]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed graph document {path}: {e}")
    return ConceptGraph(nodes, edges, semantics, doc["num_levels"])


def _load_semantics_sidecar(path: Path):
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"semantics sidecar not found: {path}")
    if blob[:4] != _SEM_MAGIC or len(blob) < 13:
        raise DataError(f"{path} is not a semantics sidecar")
    ver, m, d = struct.unpack("<BII", blob[4:13])
    expect = 13 + 4 * m * d
    if ver != 1 or len(blob) != expect:
        raise DataError(f"semantics sidecar {path} is truncated or has a bad header")
    vals = np.frombuffer(blob, dtype="<f4", offset=13).reshape(m, d)
    return vals.astype(np.float64)


def describe(g: ConceptGraph) -> str:
    """Human-readable structure summary (used by the inspect-graph subcommand)."""
    lines = [f"nodes: {g.num_nodes}   edges: {len(g.edges)}   levels: {g.num_levels}"
             f"   semantic dim: {g.semantics.shape[1]}"]
    for lv in range(g.num_levels):
        ids = g.level_ids(lv)
        tag = " (entities)" if lv == g.entity_level else ""
        lines.append(f"level {lv}{tag}: {len(ids)} nodes")
    for split in VALID_SPLITS:
        n = len(g.split_ids(split))
        if n:
            lines.append(f"entity split '{split}': {n} classes")
    return "\n".join(lines)
