"""Undirected and block chain graphs over random components and responses.

Edges are stored as ordered pairs: a directed edge ``a -> b`` once, an
undirected edge ``a -- b`` as both ``(a, b)`` and ``(b, a)``.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass

import numpy as np

LATENT_BLOCK = "latent-block"
LATENT_SCALAR = "latent-scalar"
RESPONSE = "response"


@dataclass(frozen=True)
class Vertex:
    label: str
    kind: str
    margin: int
    clustering: int = 0
    cluster: int | None = None


class GraphError(ValueError):
    pass


class MixedGraph:
    """Vertices with undirected and directed edges and an ordered block partition."""

    def __init__(self, vertices, undirected=(), directed=(), blocks=None):
        self.vertices = tuple(vertices)
        self._by_label = {v.label: v for v in self.vertices}
        if len(self._by_label) != len(self.vertices):
            raise GraphError("vertex labels must be unique")
        und = set()
        for a, b in undirected:
            self._check(a, b)
            und.update({(a, b), (b, a)})
        dirs = set()
        for a, b in directed:
            self._check(a, b)
            dirs.add((a, b))
        if any((b, a) in dirs for a, b in dirs):
            raise GraphError("directed 2-cycle")
        self.undirected = frozenset(und)
        self.directed = frozenset(dirs)
        if blocks is None:
            blocks = [[v.label for v in self.vertices]]
        self.blocks = tuple(tuple(b) for b in blocks)
        placed = [l for b in self.blocks for l in b]
        if sorted(placed) != sorted(self._by_label):
            raise GraphError("blocks must partition the vertex set")

    def _check(self, a, b):
        if a == b:
            raise GraphError(f"self-loop at {a}")
        for x in (a, b):
            if x not in self._by_label:
                raise GraphError(f"unknown vertex {x}")

    def __getitem__(self, label):
        return self._by_label[label]

    @property
    def labels(self):
        return [v.label for v in self.vertices]

    def undirected_pairs(self):
        """Each undirected edge once, as a sorted pair, in sorted order."""
        return sorted({tuple(sorted(e)) for e in self.undirected})

    def directed_pairs(self):
        return sorted(self.directed)

    def block_of(self, label):
        for i, b in enumerate(self.blocks):
            if label in b:
                return i
        raise KeyError(label)

    def parents(self, label):
        return sorted(a for a, b in self.directed if b == label)

    def neighbours(self, label):
        """Adjacent vertices ignoring edge direction."""
        out = {b for a, b in self.undirected if a == label}
        out.update(b for a, b in self.directed if a == label)
        out.update(a for a, b in self.directed if b == label)
        return out

    def is_undirected(self):
        return not self.directed

    def check_chain(self):
        """Undirected edges stay within blocks; directed edges go latent -> response."""
        for a, b in self.undirected:
            if self.block_of(a) != self.block_of(b):
                raise GraphError(f"undirected edge {a} -- {b} crosses blocks")
        for a, b in self.directed:
            if self.block_of(a) == self.block_of(b):
                raise GraphError(f"directed edge {a} -> {b} inside a block")
            if self[a].kind == RESPONSE or self[b].kind != RESPONSE:
                raise GraphError(f"directed edge {a} -> {b} must run latent -> response")

    def to_dict(self):
        return {
            "vertices": [
                {"label": v.label, "kind": v.kind, "margin": v.margin + 1,
                 "clustering": v.clustering + 1, "block": self.block_of(v.label) + 1}
                for v in self.vertices
            ],
            "undirected": [list(e) for e in self.undirected_pairs()],
            "directed": [list(e) for e in self.directed_pairs()],
            "blocks": [list(b) for b in self.blocks],
        }


def latent_label(margin, clustering=None):
    if clustering is None:
        return f"B[{margin + 1}]"
    return f"B{clustering + 1}[{margin + 1}]"


def response_label(margin):
    return f"Y[{margin + 1}]"


def latent_graph(d, edges=(), clustering=None, labels=None):
    """Undirected graph over the ``d`` random-component vectors of one clustering."""
    if labels is None:
        labels = [latent_label(j, clustering) for j in range(d)]
    verts = [Vertex(labels[j], LATENT_BLOCK, j, clustering or 0) for j in range(d)]
    return MixedGraph(verts, [(labels[i], labels[j]) for i, j in edges])


def build_ug(pvalues, alpha=0.05, labels=None, clustering=None):
    """Connect ``i`` and ``j`` whenever the (already corrected) p-value is below ``alpha``."""
    p = np.asarray(pvalues, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise GraphError("p-value matrix must be square")
    if not np.allclose(p, p.T, rtol=0, atol=1e-12):
        raise GraphError("p-value matrix must be symmetric")
    d = p.shape[0]
    edges = [(i, j) for i, j in itertools.combinations(range(d), 2) if p[i, j] < alpha]
    return latent_graph(d, edges, clustering, labels)


def scalar_representation(g: MixedGraph, q):
    """One vertex per cluster and margin: ``q`` disconnected copies of ``g``."""
    verts, edges = [], []
    index = {v.label: v for v in g.vertices}
    for c in range(q):
        for v in g.vertices:
            verts.append(Vertex(f"{v.label}_{c + 1}", LATENT_SCALAR, v.margin, v.clustering, c))
        for a, b in g.undirected_pairs():
            edges.append((f"{index[a].label}_{c + 1}", f"{index[b].label}_{c + 1}"))
    blocks = [[f"{v.label}_{c + 1}" for v in g.vertices] for c in range(q)]
    return MixedGraph(verts, edges, blocks=blocks)


def build_bcg(latent_blocks, margins):
    """Block chain graph: latent blocks plus a response block, latent -> response arrows."""
    if not latent_blocks:
        raise GraphError("need at least one latent block")
    multi = len(latent_blocks) > 1
    verts, und, dirs, blocks = [], [], [], []
    for c, g in enumerate(latent_blocks):
        if sorted(v.margin for v in g.vertices) != list(range(margins)):
            raise GraphError(f"latent block {c + 1} must have one vertex per margin")
        rename = {v.label: (latent_label(v.margin, c) if multi else v.label) for v in g.vertices}
        block = []
        for v in g.vertices:
            verts.append(Vertex(rename[v.label], LATENT_BLOCK, v.margin, c))
            block.append(rename[v.label])
            dirs.append((rename[v.label], response_label(v.margin)))
        und.extend((rename[a], rename[b]) for a, b in g.undirected_pairs())
        blocks.append(block)
    responses = [response_label(j) for j in range(margins)]
    verts.extend(Vertex(r, RESPONSE, j) for j, r in enumerate(responses))
    blocks.append(responses)
    out = MixedGraph(verts, und, dirs, blocks)
    out.check_chain()
    return out


def moralize(g: MixedGraph) -> MixedGraph:
    """Marry all parents of each vertex and drop edge directions."""
    edges = set(g.undirected_pairs())
    edges.update(tuple(sorted(e)) for e in g.directed)
    for v in g.labels:
        for a, b in itertools.combinations(g.parents(v), 2):
            edges.add((a, b))
    return MixedGraph(g.vertices, sorted(edges), (), g.blocks)


def separates(g: MixedGraph, a, b, s=()) -> bool:
    """True when every path from ``a`` to ``b`` passes through ``s``."""
    a, b, s = set(a), set(b), set(s)
    if a & b or a & s or b & s:
        raise GraphError("A, B and S must be disjoint")
    for x in a | b | s:
        g[x]
    seen = set(a)
    queue = deque(a)
    while queue:
        v = queue.popleft()
        for w in g.neighbours(v):
            if w in s or w in seen:
                continue
            if w in b:
                return False
            seen.add(w)
            queue.append(w)
    return True


def induced_separation(bcg: MixedGraph, a_resp, b_resp):
    """Smallest set of latent vertices separating two response sets in the moral graph.

    Among separators of minimal size, those containing fewer direct parents
    of the query responses are preferred (a response's own random component
    separates trivially and says nothing about the latent structure between
    them); remaining ties go to label order.  Returns ``None`` when no
    latent set separates them.
    """
    moral = moralize(bcg)
    latent = sorted(v.label for v in bcg.vertices if v.kind != RESPONSE)
    own = {p for r in set(a_resp) | set(b_resp) for p in bcg.parents(r)}
    for k in range(len(latent) + 1):
        found = [c for c in itertools.combinations(latent, k) if separates(moral, a_resp, b_resp, c)]
        if found:
            return frozenset(min(found, key=lambda c: (len(own.intersection(c)), c)))
    return None


def figure2_bcg():
    """Three margins, two clusterings, chains 1--2--3 in each latent block."""
    chain = [(0, 1), (1, 2)]
    return build_bcg([latent_graph(3, chain, 0), latent_graph(3, chain, 1)], 3)


def _q(label):
    return '"' + label.replace('"', '\\"') + '"'


def export_dot(g: MixedGraph, name="G") -> str:
    """Deterministic Graphviz text; one ``cluster_<i>`` subgraph per block."""
    directed = bool(g.directed)
    conn = "->" if directed else "--"
    lines = [f"{'digraph' if directed else 'graph'} {name} {{"]
    for i, block in enumerate(g.blocks):
        lines.append(f"  subgraph cluster_{i + 1} {{")
        for label in sorted(block):
            lines.append(f"    {_q(label)};")
        for a, b in g.undirected_pairs():
            if g.block_of(a) == i and g.block_of(b) == i:
                extra = " [dir=none]" if directed else ""
                lines.append(f"    {_q(a)} {conn} {_q(b)}{extra};")
        lines.append("  }")
    for a, b in g.undirected_pairs():
        if g.block_of(a) != g.block_of(b):
            extra = " [dir=none]" if directed else ""
            lines.append(f"  {_q(a)} {conn} {_q(b)}{extra};")
    for a, b in g.directed_pairs():
        lines.append(f"  {_q(a)} -> {_q(b)};")
    lines.append("}")
    return "\n".join(lines) + "\n"
