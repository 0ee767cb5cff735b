"""Sparse network structure: node roles, edges and greedy colorings.

A topology is pure structure. Weights live on :class:`spinforge.sampler.SparseIsingModel`.

Topology file format (UTF-8)::

    # comment
    nodes 3 edges 2
    node 0 pixel:0
    node 1 label:7:0
    node 2 hidden:1
    edge 0 2
    edge 1 2
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, TextIO

import numpy as np


class TopologyError(ValueError):
    """Raised for malformed topology files and invalid graph structure."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConstructionError(TopologyError):
    """Raised when a generator cannot satisfy its degree budget."""


@dataclass(frozen=True)
class NodeRole:
    kind: str  # "pixel", "label" or "hidden"
    index: int  # pixel index, digit, or hidden layer (1-based)
    replica: int = 0

    def __post_init__(self):
        if self.kind not in ("pixel", "label", "hidden"):
            raise TopologyError(f"unknown role kind {self.kind!r}")
        if self.kind == "label" and not 0 <= self.index <= 9:
            raise TopologyError(f"label digit {self.index} out of range 0-9")
        if self.index < 0 or self.replica < 0:
            raise TopologyError(f"negative index in role {self}")

    @classmethod
    def parse(cls, text: str) -> "NodeRole":
        parts = text.split(":")
        try:
            if parts[0] == "pixel" and len(parts) == 2:
                return cls("pixel", int(parts[1]))
            if parts[0] == "label" and len(parts) == 3:
                return cls("label", int(parts[1]), int(parts[2]))
            if parts[0] == "hidden" and len(parts) == 2:
                return cls("hidden", int(parts[1]))
        except ValueError:
            pass
        raise TopologyError(f"bad role {text!r}")

    def __str__(self) -> str:
        if self.kind == "label":
            return f"label:{self.index}:{self.replica}"
        return f"{self.kind}:{self.index}"


@dataclass(frozen=True, eq=False)
class Topology:
    """Immutable sparse undirected graph with node roles and a proper coloring.

    ``edges`` is an ``(E, 2)`` int array with ``i < j`` in each row, rows sorted.
    """

    node_count: int
    edges: np.ndarray
    roles: tuple[NodeRole, ...]
    colors: np.ndarray = field(default=None)

    def __post_init__(self):
        edges = _canonical_edges(self.edges, self.node_count)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "roles", tuple(self.roles))
        if len(self.roles) != self.node_count:
            raise TopologyError(f"{len(self.roles)} roles for {self.node_count} nodes")
        _check_roles(self.roles)
        if self.colors is None:
            object.__setattr__(self, "colors", color_graph(self))
        else:
            colors = np.asarray(self.colors, dtype=np.int64)
            if colors.shape != (self.node_count,) or not is_proper_coloring(edges, colors):
                raise TopologyError("supplied coloring is not proper")
            object.__setattr__(self, "colors", colors)
        edges.flags.writeable = False
        self.colors.flags.writeable = False

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def density(self) -> float:
        n = self.node_count
        return self.edge_count / (n * (n - 1) / 2) if n > 1 else 0.0

    @cached_property
    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.node_count)

    @property
    def max_degree(self) -> int:
        return int(self.degree.max()) if self.node_count else 0

    @property
    def n_colors(self) -> int:
        return int(self.colors.max()) + 1 if self.node_count else 0

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(indptr, neighbor, edge_id)``; neighbors of ``i`` sit in ``indptr[i]:indptr[i+1]``."""
        n = self.node_count
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        eid = np.concatenate([np.arange(self.edge_count)] * 2)
        order = np.lexsort((dst, src))
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
        return indptr, dst[order].astype(np.int64), eid[order].astype(np.int64)

    @cached_property
    def color_order(self) -> tuple[np.ndarray, np.ndarray]:
        """``(nodes, class_ptr)``: nodes sorted by (color, index) and class offsets."""
        nodes = np.lexsort((np.arange(self.node_count), self.colors)).astype(np.int64)
        class_ptr = np.zeros(self.n_colors + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.colors, minlength=self.n_colors), out=class_ptr[1:])
        return nodes, class_ptr

    def nodes_of(self, kind: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r.kind == kind], dtype=np.int64)

    @cached_property
    def label_replicas(self) -> int:
        labels = [r for r in self.roles if r.kind == "label"]
        return len(labels) // 10

    @cached_property
    def pixel_nodes(self) -> np.ndarray:
        """Node id of each pixel, ordered by pixel index."""
        pix = [(r.index, i) for i, r in enumerate(self.roles) if r.kind == "pixel"]
        return np.array([i for _, i in sorted(pix)], dtype=np.int64)

    @cached_property
    def label_nodes(self) -> np.ndarray:
        """Node id for label spin position ``digit + 10 * replica``."""
        out = np.full(10 * self.label_replicas, -1, dtype=np.int64)
        for i, r in enumerate(self.roles):
            if r.kind == "label":
                out[r.index + 10 * r.replica] = i
        return out

    @property
    def visible_nodes(self) -> np.ndarray:
        """Pixels then labels; matches the encoded visible vector layout."""
        return np.concatenate([self.pixel_nodes, self.label_nodes])

    @cached_property
    def hidden_nodes(self) -> np.ndarray:
        return self.nodes_of("hidden")

    def to_text(self) -> str:
        buf = io.StringIO()
        dump_topology(self, buf)
        return buf.getvalue()

    @cached_property
    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _canonical_edges(edges, n: int) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(e) and (e.min() < 0 or e.max() >= n):
        raise TopologyError("edge endpoint out of range")
    if np.any(e[:, 0] == e[:, 1]):
        i = int(e[e[:, 0] == e[:, 1]][0, 0])
        raise TopologyError(f"self-loop on node {i}")
    e = np.sort(e, axis=1)
    e = e[np.lexsort((e[:, 1], e[:, 0]))]
    if len(e) > 1 and np.any(np.all(e[1:] == e[:-1], axis=1)):
        k = int(np.flatnonzero(np.all(e[1:] == e[:-1], axis=1))[0])
        raise TopologyError(f"duplicate edge ({e[k, 0]}, {e[k, 1]})")
    return np.ascontiguousarray(e)


def _check_roles(roles: Iterable[NodeRole]) -> None:
    pixels, labels = set(), set()
    for r in roles:
        if r.kind == "pixel":
            if r.index in pixels:
                raise TopologyError(f"duplicate pixel role {r}")
            pixels.add(r.index)
        elif r.kind == "label":
            if (r.index, r.replica) in labels:
                raise TopologyError(f"duplicate label role {r}")
            labels.add((r.index, r.replica))
    if pixels and pixels != set(range(len(pixels))):
        raise TopologyError("pixel indices must be 0..P-1")
    if labels:
        reps = max(rep for _, rep in labels) + 1
        if labels != {(d, rep) for d in range(10) for rep in range(reps)}:
            raise TopologyError(
                f"label role count mismatch: {len(labels)} labels, expected 10 x {reps}"
            )


def is_proper_coloring(edges: np.ndarray, colors: np.ndarray) -> bool:
    edges = np.asarray(edges).reshape(-1, 2)
    return bool(np.all(colors[edges[:, 0]] != colors[edges[:, 1]]))


def color_graph(topology: Topology) -> np.ndarray:
    """Greedy largest-degree-first coloring; uses at most ``max_degree + 1`` colors."""
    n = topology.node_count
    indptr, nbr, _ = topology.csr
    degree = np.diff(indptr)
    colors = np.full(n, -1, dtype=np.int64)
    for i in sorted(range(n), key=lambda k: (-degree[k], k)):
        used = {int(colors[j]) for j in nbr[indptr[i]:indptr[i + 1]]}
        c = 0
        while c in used:
            c += 1
        colors[i] = c
    return colors


def load_topology(source: TextIO | str, max_degree: int | None = None) -> Topology:
    """Parse a topology file (path or text stream) and color it."""
    if isinstance(source, str):
        with open(source, encoding="utf-8") as fh:
            return load_topology(fh, max_degree)

    header = None
    roles: dict[int, NodeRole] = {}
    edges: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if header is None:
                if len(parts) != 4 or parts[0] != "nodes" or parts[2] != "edges":
                    raise TopologyError("expected header 'nodes N edges E'", lineno)
                header = (int(parts[1]), int(parts[3]))
                if header[0] < 1 or header[1] < 0:
                    raise TopologyError("bad header counts", lineno)
            elif parts[0] == "node" and len(parts) == 3:
                i = int(parts[1])
                if not 0 <= i < header[0]:
                    raise TopologyError(f"node id {i} out of range", lineno)
                if i in roles:
                    raise TopologyError(f"node {i} declared twice", lineno)
                roles[i] = NodeRole.parse(parts[2])
            elif parts[0] == "edge" and len(parts) == 3:
                i, j = int(parts[1]), int(parts[2])
                if not (0 <= i < header[0] and 0 <= j < header[0]):
                    raise TopologyError(f"edge ({i}, {j}) out of range", lineno)
                if i == j:
                    raise TopologyError(f"self-loop on node {i}", lineno)
                key = (min(i, j), max(i, j))
                if key in seen:
                    raise TopologyError(f"duplicate edge {key}", lineno)
                seen.add(key)
                edges.append(key)
            else:
                raise TopologyError(f"unrecognised line {line!r}", lineno)
        except TopologyError as exc:
            if exc.line is None:
                raise TopologyError(str(exc), lineno) from None
            raise
        except ValueError:
            raise TopologyError(f"malformed line {line!r}", lineno) from None

    if header is None:
        raise TopologyError("empty topology file")
    n, e = header
    if len(roles) != n:
        raise TopologyError(f"role count mismatch: {len(roles)} node lines for {n} nodes")
    if len(edges) != e:
        raise TopologyError(f"edge count mismatch: header says {e}, found {len(edges)}")
    topo = Topology(n, np.array(edges, dtype=np.int64).reshape(-1, 2), tuple(roles[i] for i in range(n)))
    if max_degree is not None and topo.max_degree > max_degree:
        raise TopologyError(f"max degree {topo.max_degree} exceeds limit {max_degree}")
    return topo


def dump_topology(topology: Topology, out: TextIO) -> None:
    out.write(f"nodes {topology.node_count} edges {topology.edge_count}\n")
    for i, role in enumerate(topology.roles):
        out.write(f"node {i} {role}\n")
    for i, j in topology.edges:
        out.write(f"edge {i} {j}\n")


def save_topology(topology: Topology, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        dump_topology(topology, fh)


def generate_sparse_dbm(
    visible: int,
    hidden_layers: list[int],
    max_degree: int,
    seed: int,
    label_replicas: int = 0,
    target_edges: int | None = None,
    label_degree: int | None = None,
) -> Topology:
    """Random layered sparse topology with intra-hidden-layer edges.

    Visible nodes connect only to hidden layer 1, hidden layer ``k`` to layers
    ``k - 1``, ``k`` and ``k + 1``. Every node below the top layer gets at least
    one edge upward; edges are then added at random until every node is at
    ``max_degree`` or ``target_edges`` is reached.

    The last ``10 * label_replicas`` visible nodes carry label roles. With
    ``label_degree`` set, label nodes are wired to the least-loaded layer-1
    nodes up to that degree before the random fill, so pixels cannot crowd
    them out of a small hidden layer.
    """
    if max_degree < 2:
        raise ConstructionError(f"max_degree must be >= 2, got {max_degree}")
    if visible < 1 or not hidden_layers or min(hidden_layers) < 1:
        raise ConstructionError("layer counts must be >= 1")
    n_labels = 10 * label_replicas
    if n_labels > visible:
        raise ConstructionError(f"{n_labels} label nodes do not fit in {visible} visible")

    sizes = [visible, *hidden_layers]
    starts = np.concatenate([[0], np.cumsum(sizes)])
    n = int(starts[-1])
    layer_of = np.repeat(np.arange(len(sizes)), sizes)
    rng = np.random.default_rng(seed)
    degree = np.zeros(n, dtype=np.int64)
    adjacency: list[set[int]] = [set() for _ in range(n)]
    edges: list[tuple[int, int]] = []

    def add(a: int, b: int) -> None:
        adjacency[a].add(b)
        adjacency[b].add(a)
        degree[a] += 1
        degree[b] += 1
        edges.append((min(a, b), max(a, b)))

    def layer_nodes(k: int) -> np.ndarray:
        return np.arange(starts[k], starts[k + 1])

    # upward connectivity, top layer pair first so hidden nodes keep room for their parents
    for k in range(len(sizes) - 1, 0, -1):
        upper = layer_nodes(k)
        for u in rng.permutation(layer_nodes(k - 1)):
            room = upper[degree[upper] < max_degree]
            if len(room) == 0:
                raise ConstructionError(
                    f"degree budget {max_degree} cannot connect layer {k - 1} to layer {k}"
                )
            least = room[degree[room] == degree[room].min()]
            add(int(u), int(rng.choice(least)))

    if label_degree is not None:
        if not 1 <= label_degree <= max_degree:
            raise ConstructionError(f"label_degree must be in [1, {max_degree}], got {label_degree}")
        first = layer_nodes(1)
        for _ in range(label_degree):
            for u in range(visible - n_labels, visible):
                if degree[u] >= label_degree:
                    continue
                room = first[(degree[first] < max_degree) & ~np.isin(first, list(adjacency[u]))]
                if len(room) == 0:
                    raise ConstructionError(f"layer 1 has no room left for label degree {label_degree}")
                least = room[degree[room] == degree[room].min()]
                add(u, int(rng.choice(least)))

    def partners(u: int) -> np.ndarray:
        k = layer_of[u]
        if k == 0:
            return layer_nodes(1)
        lo = max(k - 1, 0)
        hi = min(k + 1, len(sizes) - 1)
        return np.arange(starts[lo], starts[hi + 1])

    limit = target_edges if target_edges is not None else n * max_degree
    open_nodes = [i for i in range(n) if degree[i] < max_degree]
    while len(edges) < limit and open_nodes:
        idx = int(rng.integers(len(open_nodes)))
        u = open_nodes[idx]
        cand = partners(u)
        found = None
        for v in rng.choice(cand, size=min(len(cand), 16), replace=False):
            v = int(v)
            if v != u and degree[v] < max_degree and v not in adjacency[u]:
                found = v
                break
        if found is None:
            ok = [int(v) for v in cand if v != u and degree[v] < max_degree and v not in adjacency[u]]
            if ok:
                found = ok[int(rng.integers(len(ok)))]
        if found is None:
            open_nodes[idx] = open_nodes[-1]
            open_nodes.pop()
            continue
        add(u, found)
        open_nodes = [i for i in open_nodes if degree[i] < max_degree] if (
            degree[u] >= max_degree or degree[found] >= max_degree
        ) else open_nodes

    n_pixels = visible - n_labels
    roles = [NodeRole("pixel", i) for i in range(n_pixels)]
    roles += [NodeRole("label", p % 10, p // 10) for p in range(n_labels)]
    for k, size in enumerate(hidden_layers, start=1):
        roles += [NodeRole("hidden", k)] * size
    return Topology(n, np.array(edges, dtype=np.int64), tuple(roles))
