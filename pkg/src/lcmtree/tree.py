"""Rooted weighted trees shared by the domain hierarchy and the category hierarchy.

A tree is stored as parallel arrays over a dense node index assigned in a
deterministic topological order (root first, then document order among nodes
whose parent is already placed).  Node ids are opaque strings; external
integer labels (domain 0..G, category 1..C) are carried by ``leaf_order``.
Instances are immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

import csv
import io

import numpy as np

from .errors import TreeError


class RootedWeightedTree:
    """Rooted tree with positive edge weights and per-node level tags.

    Attributes
    ----------
    ids : list[str]            node ids in dense (topological) order; ids[0] is the root
    parent : np.ndarray int64  dense parent index per node; -1 for the root
    weights : np.ndarray       edge weight between each node and its parent; 1.0 at the root
    levels : np.ndarray int64  level tag per node, values in 1..n_levels
    leaf_order : list[str]     leaf ids in external label order
    """

    def __init__(self, ids, parent, weights, levels, leaf_order):
        self.ids = list(ids)
        self.parent = np.asarray(parent, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.levels = np.asarray(levels, dtype=np.int64)
        self.leaf_order = list(leaf_order)
        self._index = {u: i for i, u in enumerate(self.ids)}
        self._validate()
        self._build_masks()

    # -- construction ------------------------------------------------------

    def _validate(self):
        n = len(self.ids)
        if len(self._index) != n:
            raise TreeError("duplicate node id")
        if n == 0:
            raise TreeError("empty tree")
        if self.parent[0] != -1 or np.any(self.parent[1:] < 0):
            raise TreeError("dense order must place the single root first")
        if np.any(self.parent[1:] >= np.arange(1, n)):
            raise TreeError("parent index must precede child (not topological)")
        if np.any(self.weights <= 0.0):
            raise TreeError("edge weights must be strictly positive")
        if self.weights[0] != 1.0:
            raise TreeError("root weight must equal 1")
        if np.any(self.levels < 1):
            raise TreeError("levels must be integers in 1..L")
        has_child = np.zeros(n, dtype=bool)
        has_child[self.parent[self.parent >= 0]] = True
        leaves = {self.ids[i] for i in range(n) if not has_child[i]}
        if set(self.leaf_order) != leaves or len(self.leaf_order) != len(leaves):
            raise TreeError("leaf_order is not a bijection onto the leaves")

    def _build_masks(self):
        n = len(self.ids)
        anc = np.zeros((n, n), dtype=bool)  # anc[v, u]: u in a(v), self included
        for v in range(n):
            u = v
            while u != -1:
                anc[v, u] = True
                u = self.parent[u]
        self._anc_mask = anc
        self.leaf_indices = np.array([self._index[u] for u in self.leaf_order], dtype=np.int64)
        # leaf_anc[g, u]: node u lies on the root path of external leaf g
        self.leaf_anc = anc[self.leaf_indices, :]
        # leaf_desc[u, g]: external leaf g is below node u
        self.leaf_desc = self.leaf_anc.T.copy()

    # -- basic queries -----------------------------------------------------

    @property
    def n_nodes(self):
        return len(self.ids)

    @property
    def n_leaves(self):
        return len(self.leaf_order)

    @property
    def n_levels(self):
        return int(self.levels.max())

    @property
    def root(self):
        return self.ids[0]

    def index(self, node_id):
        try:
            return self._index[node_id]
        except KeyError:
            raise TreeError(f"unknown node id: {node_id!r}") from None

    def is_leaf(self, node_id):
        return not np.any(self.parent == self.index(node_id))

    def ancestors(self, node_id):
        """Root path of a node, root first, ending at (and including) the node."""
        chain = []
        u = self.index(node_id)
        while u != -1:
            chain.append(self.ids[u])
            u = self.parent[u]
        return chain[::-1]

    def descendants(self, node_id):
        """All nodes below a node, the node itself included."""
        i = self.index(node_id)
        return {self.ids[v] for v in np.nonzero(self._anc_mask[:, i])[0]}

    def children(self, node_id):
        i = self.index(node_id)
        return [self.ids[v] for v in np.nonzero(self.parent == i)[0]]

    def path_distance(self, u, v, weight_override=None):
        """Length of the unique tree path between two nodes.

        Every node on the path except the topmost contributes its parent-edge
        weight; the path is the symmetric difference of the two root paths.
        ``weight_override`` substitutes per-node edge weights (dense order),
        as needed by the fused-domain dissimilarity measure.
        """
        w = self.weights if weight_override is None else np.asarray(weight_override, dtype=np.float64)
        mask = self._anc_mask[self.index(u)] ^ self._anc_mask[self.index(v)]
        return float(w[mask].sum())

    def root_path_weight(self, leaf_id, weight_override=None):
        """Sum of w over the full root path a(leaf), the root's own weight included."""
        w = self.weights if weight_override is None else np.asarray(weight_override, dtype=np.float64)
        return float(w[self._anc_mask[self.index(leaf_id)]].sum())

    # -- serialization -----------------------------------------------------

    def serialize(self):
        """Edge-list document (CSV text) that :func:`parse_tree` accepts back."""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["id", "parent", "weight", "level"])
        for i, node_id in enumerate(self.ids):
            parent = "" if self.parent[i] == -1 else self.ids[self.parent[i]]
            writer.writerow([node_id, parent, repr(float(self.weights[i])), int(self.levels[i])])
        return out.getvalue()


def parse_tree(document, leaf_order=None):
    """Parse an edge-list document into a validated :class:`RootedWeightedTree`.

    The document is delimited text with header ``id,parent,weight,level``; the
    root row has an empty parent field and weight 1 (or empty, defaulting to 1).
    Missing levels default to 1 for the root and 2 elsewhere.  ``leaf_order``
    fixes the leaf-to-label mapping; when omitted, leaves are taken in document
    order.
    """
    rows = list(csv.reader(io.StringIO(document.strip())))
    if not rows:
        raise TreeError("empty tree document")
    header = [h.strip().lower() for h in rows[0]]
    expected = ["id", "parent", "weight", "level"]
    if header[: len(expected)] != expected[: len(header)] or header[0] != "id":
        raise TreeError(f"tree header must start with {expected}, got {header}")
    col = {name: header.index(name) if name in header else None for name in expected}

    records = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        node_id = row[col["id"]].strip()
        if not node_id:
            raise TreeError(f"line {lineno}: empty node id")
        if node_id in seen:
            raise TreeError(f"line {lineno}: node {node_id!r} declared twice (two parents?)")
        seen.add(node_id)
        parent = row[col["parent"]].strip() if col["parent"] is not None and col["parent"] < len(row) else ""
        wtxt = row[col["weight"]].strip() if col["weight"] is not None and col["weight"] < len(row) else ""
        ltxt = row[col["level"]].strip() if col["level"] is not None and col["level"] < len(row) else ""
        records.append((node_id, parent, wtxt, ltxt, lineno))

    roots = [r for r in records if r[1] == ""]
    if len(roots) != 1:
        raise TreeError(f"expected exactly one root row (empty parent), found {len(roots)}")
    root_id = roots[0][0]

    by_id = {r[0]: r for r in records}
    for node_id, parent, _, _, lineno in records:
        if parent == "":
            continue
        if parent == node_id:
            raise TreeError(f"line {lineno}: node {node_id!r} is its own parent (cycle)")
        if parent not in by_id:
            raise TreeError(f"line {lineno}: parent {parent!r} of {node_id!r} is not declared (disconnected)")

    # Kahn-style topological order: root first, then document order among ready nodes.
    order = [root_id]
    placed = {root_id}
    remaining = [r for r in records if r[0] != root_id]
    while remaining:
        progressed = False
        still = []
        for rec in remaining:
            if rec[1] in placed:
                order.append(rec[0])
                placed.add(rec[0])
                progressed = True
            else:
                still.append(rec)
        if not progressed:
            stuck = ", ".join(r[0] for r in still)
            raise TreeError(f"cycle detected among nodes: {stuck}")
        remaining = still

    idx = {u: i for i, u in enumerate(order)}
    parent_arr = np.empty(len(order), dtype=np.int64)
    weights = np.empty(len(order), dtype=np.float64)
    levels = np.empty(len(order), dtype=np.int64)
    for u in order:
        node_id, parent, wtxt, ltxt, lineno = by_id[u]
        i = idx[u]
        parent_arr[i] = -1 if parent == "" else idx[parent]
        if wtxt == "":
            w = 1.0
        else:
            try:
                w = float(wtxt)
            except ValueError:
                raise TreeError(f"line {lineno}: weight {wtxt!r} is not a number") from None
        if parent == "" and w != 1.0:
            raise TreeError(f"line {lineno}: root weight must be 1, got {w}")
        if w <= 0:
            raise TreeError(f"line {lineno}: weight must be positive, got {w}")
        weights[i] = w
        if ltxt == "":
            levels[i] = 1 if parent == "" else 2
        else:
            try:
                levels[i] = int(ltxt)
            except ValueError:
                raise TreeError(f"line {lineno}: level {ltxt!r} is not an integer") from None
            if levels[i] < 1:
                raise TreeError(f"line {lineno}: level must be >= 1")

    has_child = np.zeros(len(order), dtype=bool)
    has_child[parent_arr[parent_arr >= 0]] = True
    actual_leaves = [order[i] for i in range(len(order)) if not has_child[i]]
    if leaf_order is None:
        # document order, not dense order, so the file's row order is authoritative
        doc_leaves = [r[0] for r in records if r[0] in set(actual_leaves)]
        leaf_order = doc_leaves
    else:
        leaf_order = list(leaf_order)
        if set(leaf_order) != set(actual_leaves) or len(leaf_order) != len(actual_leaves):
            raise TreeError(
                f"leaf_order {leaf_order} does not match the actual leaves {sorted(actual_leaves)}"
            )

    return RootedWeightedTree(order, parent_arr, weights, levels, leaf_order)


def flat_tree(leaf_ids, root_id="root", weight=1.0):
    """Two-level tree: one root pointing at every leaf with equal edge weights."""
    n = len(leaf_ids) + 1
    ids = [root_id] + list(leaf_ids)
    parent = np.array([-1] + [0] * (n - 1), dtype=np.int64)
    weights = np.array([1.0] + [float(weight)] * (n - 1))
    levels = np.array([1] + [2] * (n - 1), dtype=np.int64)
    return RootedWeightedTree(ids, parent, weights, levels, list(leaf_ids))
