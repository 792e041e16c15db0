"""Synthetic data generators.

Two harnesses are provided.  The fully synthetic design draws data from the
generative model on a six-domain tree with two fused leaf pairs: class-weight
sticks start from a random root value per cause and receive fixed offsets on
the two internal nodes (-2 and +2 by default), so domains under the same
internal node share class weights while the remaining two leaves stay at the
root value.  The semi-synthetic harness starts from a fully labeled dataset,
carves out a synthetic target domain (uniformly or with per-cause resampling
fractions drawn from a half-half Beta(1,5)/Beta(1,20) mixture), masks its
labels, and extends the domain tree with an equidistant new leaf.

All randomness flows through numpy SeedSequences, so equal seeds give
byte-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .params import stick_break, stick_break_inverse
from .tree import RootedWeightedTree, flat_tree

SIGNAL_LEVELS = {"strong": (0.95, 0.05), "weak": (0.8, 0.2)}


def default_domain_tree():
    """Nine-node domain tree: two internal nodes over leaf pairs, two free leaves.

    Leaves d0..d5 map to domains 0..5 (d0 is the target); u1 spans {d0, d1}
    and u2 spans {d2, d3}; d4 and d5 hang off the root.  Unit edge weights.
    """
    ids = ["u0", "u1", "u2", "d0", "d1", "d2", "d3", "d4", "d5"]
    parent = np.array([-1, 0, 0, 1, 1, 2, 2, 0, 0], dtype=np.int64)
    weights = np.ones(9)
    levels = np.array([1, 2, 2, 2, 2, 2, 2, 2, 2], dtype=np.int64)
    return RootedWeightedTree(ids, parent, weights, levels, ["d0", "d1", "d2", "d3", "d4", "d5"])


def default_offsets():
    return {"u1": -2.0, "u2": 2.0}


@dataclass
class SimulationDesign:
    """Knobs of the fully synthetic generator; defaults mirror the desk-scale study."""

    n_total: int = 1000
    n_items: int = 20
    n_causes: int = 3
    n_classes: int = 2
    domain_tree: RootedWeightedTree = field(default_factory=default_domain_tree)
    allocation: str = "balanced"  # or "unbalanced" (4:1 within consecutive leaf pairs)
    signal: str = "strong"  # or "weak"
    csmf_mode: str = "balanced"  # or "unbalanced" (skewed scores, cyclically shifted)
    offsets: dict = field(default_factory=default_offsets)
    root_concentration: float = 2.0
    missing_rate: float = 0.0
    seed: int = 0


def _domain_sizes(design, rng):
    n_leaves = design.domain_tree.n_leaves
    if design.allocation == "balanced":
        base = design.n_total // n_leaves
        sizes = np.full(n_leaves, base, dtype=np.int64)
        sizes[: design.n_total - base * n_leaves] += 1
        return sizes
    if design.allocation != "unbalanced":
        raise ConfigError(f"unknown allocation mode {design.allocation!r}")
    if n_leaves % 2:
        raise ConfigError(
            f"unbalanced allocation pairs consecutive leaves; {n_leaves} leaves cannot be paired"
        )
    n_pairs = n_leaves // 2
    per_pair = np.full(n_pairs, design.n_total // n_pairs, dtype=np.int64)
    per_pair[: design.n_total - per_pair.sum()] += 1
    sizes = np.empty(n_leaves, dtype=np.int64)
    for q in range(n_pairs):
        big = int(round(per_pair[q] * 4 / 5))
        small = per_pair[q] - big
        # equal chances which member of the pair is the large one
        if rng.random() < 0.5:
            sizes[2 * q], sizes[2 * q + 1] = big, small
        else:
            sizes[2 * q], sizes[2 * q + 1] = small, big
    return sizes


def _csmf_table(design):
    C = design.n_causes
    n_dom = design.domain_tree.n_leaves
    if design.csmf_mode == "balanced":
        return np.full((n_dom, C), 1.0 / C)
    if design.csmf_mode != "unbalanced":
        raise ConfigError(f"unknown csmf mode {design.csmf_mode!r}")
    # skewed raw scores: 5 for the first cause, 1 for causes at multiples of C,
    # 3 elsewhere; normalized because the raw scores are not a simplex
    scores = np.empty(C)
    for c in range(1, C + 1):
        if c == 1:
            scores[c - 1] = 5.0
        elif c % C == 0:
            scores[c - 1] = 1.0
        else:
            scores[c - 1] = 3.0
    table = np.empty((n_dom, C))
    table[0] = np.roll(scores, 3)  # the target takes the third cyclic shift
    for g in range(1, n_dom):
        table[g] = np.roll(scores, g)
    return table / table.sum(axis=1, keepdims=True)


def _theta_table(design):
    if design.signal not in SIGNAL_LEVELS:
        raise ConfigError(f"unknown signal level {design.signal!r}")
    if design.n_classes != 2:
        raise ConfigError("signal presets define two class profiles; K must be 2")
    hi, lo = SIGNAL_LEVELS[design.signal]
    theta = np.empty((design.n_causes, design.n_items, 2))
    theta[:, :, 0] = hi
    theta[:, :, 1] = lo
    return theta


def _lambda_table(design, rng):
    tree = design.domain_tree
    C, K = design.n_causes, design.n_classes
    offsets = np.zeros(tree.n_nodes)
    for node_id, value in design.offsets.items():
        idx = tree.index(node_id)
        if idx == 0:
            raise ConfigError("offsets apply to non-root nodes only")
        offsets[idx] = float(value)
    eta = np.empty((C, tree.n_leaves, K - 1))
    alpha_root = np.empty((C, K - 1))
    for c in range(C):
        lam_root = rng.dirichlet(np.full(K, design.root_concentration))
        while np.any(lam_root <= 1e-12):
            lam_root = rng.dirichlet(np.full(K, design.root_concentration))
        alpha_root[c] = stick_break_inverse(lam_root)
        for g in range(tree.n_leaves):
            shift = offsets[tree.leaf_anc[g]].sum()
            eta[c, g] = alpha_root[c] + shift
    return stick_break(eta), alpha_root


@dataclass
class SimulationTruth:
    pi: np.ndarray  # (G+1, C)
    lam: np.ndarray  # (C, G+1, K)
    theta: np.ndarray  # (C, J, K)
    alpha_root: np.ndarray  # (C, K-1)
    Y: np.ndarray  # (N,) true cause codes, including masked rows
    Z: np.ndarray  # (N,) true class codes
    domain_sizes: np.ndarray

    def to_json_dict(self, cause_leaves, domain_leaves):
        return {
            "pi": {
                domain: [float(v) for v in row] for domain, row in zip(domain_leaves, self.pi)
            },
            "lambda": {
                cause: {
                    domain: [float(v) for v in self.lam[c, g]]
                    for g, domain in enumerate(domain_leaves)
                }
                for c, cause in enumerate(cause_leaves)
            },
            "theta": {
                cause: [[float(v) for v in row] for row in self.theta[c]]
                for c, cause in enumerate(cause_leaves)
            },
            "true_Y": [int(v) for v in self.Y],
            "true_Z": [int(v) for v in self.Z],
            "domain_sizes": [int(v) for v in self.domain_sizes],
            "cause_leaves": list(cause_leaves),
            "domain_leaves": list(domain_leaves),
        }


def simulate_dataset(design: SimulationDesign):
    """Draw one dataset from the generative model; returns (dataset, truth, cause_tree).

    The target domain's labels are masked in the dataset but kept in the truth.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=design.seed, spawn_key=(0,)))
    tree = design.domain_tree
    sizes = _domain_sizes(design, rng)
    pi = _csmf_table(design)
    theta = _theta_table(design)
    lam, alpha_root = _lambda_table(design, rng)

    D = np.repeat(np.arange(tree.n_leaves), sizes)
    N = D.size
    Y = np.empty(N, dtype=np.int64)
    Z = np.empty(N, dtype=np.int64)
    # vectorized inverse-cdf draws, one uniform per subject per stage
    u_cause = rng.random(N)
    for g in range(tree.n_leaves):
        rows = D == g
        Y[rows] = np.searchsorted(np.cumsum(pi[g]), u_cause[rows], side="right")
    np.clip(Y, 0, design.n_causes - 1, out=Y)
    u_class = rng.random(N)
    for g in range(tree.n_leaves):
        for c in range(design.n_causes):
            rows = (D == g) & (Y == c)
            Z[rows] = np.searchsorted(np.cumsum(lam[c, g]), u_class[rows], side="right")
    np.clip(Z, 0, design.n_classes - 1, out=Z)
    X = (rng.random((N, design.n_items)) < theta[Y, :, Z]).astype(np.int8)
    observed = np.ones((N, design.n_items), dtype=bool)
    if design.missing_rate > 0:
        observed = rng.random((N, design.n_items)) >= design.missing_rate
        X[~observed] = 0

    cause_leaves = [f"c{c + 1}" for c in range(design.n_causes)]
    cause_tree = flat_tree(cause_leaves, root_id="c_root")
    masked_Y = Y.copy()
    masked_Y[D == 0] = -1
    dataset = Dataset(
        X=X,
        observed=observed,
        Y=masked_Y,
        D=D,
        subject_ids=tuple(f"s{i:06d}" for i in range(N)),
        item_names=tuple(f"item_{j + 1}" for j in range(design.n_items)),
        domain_leaves=tuple(tree.leaf_order),
        cause_leaves=tuple(cause_leaves),
    )
    truth = SimulationTruth(
        pi=pi, lam=lam, theta=theta, alpha_root=alpha_root, Y=Y, Z=Z, domain_sizes=sizes
    )
    return dataset, truth, cause_tree


# -- semi-synthetic masking ----------------------------------------------------


def extend_tree_with_target(tree, new_leaf_id="synthetic_target", new_weight=1.0):
    """Add a synthetic target leaf under the root, equidistant from all leaves.

    Original leaf edge weights are stretched so every original leaf sits at the
    same distance from the root; the new leaf then has identical tree distance
    to each of them regardless of its own edge weight.  The new leaf takes
    position 0 in the leaf order.
    """
    if new_leaf_id in tree.ids:
        raise ConfigError(f"node id {new_leaf_id!r} already exists")
    depth = np.zeros(tree.n_nodes)
    for i in range(1, tree.n_nodes):
        depth[i] = depth[tree.parent[i]] + tree.weights[i]
    leaf_idx = tree.leaf_indices
    parent_depth = np.array([depth[tree.parent[i]] for i in leaf_idx])
    target_depth = float(parent_depth.max() + 1.0)
    new_weights = tree.weights.copy()
    for pos, i in enumerate(leaf_idx):
        new_weights[i] = target_depth - parent_depth[pos]
    ids = list(tree.ids) + [new_leaf_id]
    parent = np.concatenate([tree.parent, [0]])
    weights = np.concatenate([new_weights, [float(new_weight)]])
    levels = np.concatenate([tree.levels, [2]])
    leaf_order = [new_leaf_id] + list(tree.leaf_order)
    return RootedWeightedTree(ids, parent, weights, levels, leaf_order)


def mask_semi_synthetic(dataset, tree, fraction=0.2, mode="uniform", seed=0,
                        new_leaf_id="synthetic_target"):
    """Carve a synthetic target domain out of a fully labeled dataset.

    uniform mode moves a ``fraction`` share of every domain into the target;
    beta-mixture mode draws a per-cause fraction from
    0.5 Beta(1,5) + 0.5 Beta(1,20) and moves that share of each cause's deaths.
    Moved subjects keep their responses, lose their labels in the returned
    dataset, and are re-labeled to the new leaf of the extended tree.
    Returns (masked dataset, extended tree, moved row indices, true labels).
    """
    if np.any(dataset.Y < 0):
        raise ConfigError("semi-synthetic masking needs a fully labeled dataset")
    if mode == "uniform" and not 0.0 < fraction < 1.0:
        raise ConfigError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    N = dataset.n_subjects
    take = np.zeros(N, dtype=bool)
    if mode == "uniform":
        for g in range(dataset.n_domains):
            rows = np.nonzero(dataset.D == g)[0]
            n_take = int(round(fraction * rows.size))
            if n_take:
                take[rng.choice(rows, size=n_take, replace=False)] = True
    elif mode == "beta-mixture":
        for c in range(dataset.n_causes):
            rows = np.nonzero(dataset.Y == c)[0]
            if rows.size == 0:
                continue
            part = rng.beta(1.0, 5.0) if rng.random() < 0.5 else rng.beta(1.0, 20.0)
            n_take = int(round(part * rows.size))
            if n_take:
                take[rng.choice(rows, size=n_take, replace=False)] = True
    else:
        raise ConfigError(f"unknown masking mode {mode!r}")
    if not take.any():
        raise ConfigError("masking produced an empty target domain")

    extended = extend_tree_with_target(tree, new_leaf_id)
    new_D = dataset.D + 1
    new_D[take] = 0
    new_Y = dataset.Y.copy()
    new_Y[take] = -1
    masked = Dataset(
        X=dataset.X.copy(),
        observed=dataset.observed.copy(),
        Y=new_Y,
        D=new_D,
        subject_ids=dataset.subject_ids,
        item_names=dataset.item_names,
        domain_leaves=tuple(extended.leaf_order),
        cause_leaves=dataset.cause_leaves,
    )
    return masked, extended, np.nonzero(take)[0], dataset.Y[take].copy()


def beta_mixture_mean():
    """Expected per-cause resampling fraction of the beta-mixture mode."""
    return 0.5 * (1.0 / 6.0) + 0.5 * (1.0 / 21.0)
