"""Shared fixtures and instance generators.

Trees used throughout:

  eight_node_tree
      root "1"; internal "2" (children "5","6"), internal "3" (children
      "7","8"); leaf "4" directly under the root.  Five leaves, unit weights.

  four_domain_tree
      root "r"; internal "a" over leaves "d0","d1"; leaves "d2","d3" at the
      root.  Domain 0 is "d0".

Random instances are drawn from the generative family itself (diffusion
increments, slab flips, stick-breaking weights), so every diffusion level has
an interior variance and fits converge; misspecified data is still used where
only monotonicity matters.
"""

import numpy as np
import pytest
from scipy.special import expit

import lcmtree as lt
from lcmtree.params import stick_break
from lcmtree.tree import flat_tree, parse_tree

EIGHT_NODE_DOC = """id,parent,weight,level
1,,1,1
2,1,1,2
3,1,1,2
4,1,1,2
5,2,1,2
6,2,1,2
7,3,1,2
8,3,1,2
"""

FOUR_DOMAIN_DOC = """id,parent,weight,level
r,,1,1
a,r,1,2
d0,a,1,2
d1,a,1,2
d2,r,1,2
d3,r,1,2
"""


@pytest.fixture
def eight_node_tree():
    return parse_tree(EIGHT_NODE_DOC, leaf_order=["4", "5", "6", "7", "8"])


@pytest.fixture
def four_domain_tree():
    return parse_tree(FOUR_DOMAIN_DOC, leaf_order=["d0", "d1", "d2", "d3"])


def build_dataset(X, observed, Y, D, domain_leaves, cause_leaves):
    X = np.asarray(X, dtype=np.int8)
    return lt.Dataset(
        X=X,
        observed=np.asarray(observed, dtype=bool),
        Y=np.asarray(Y, dtype=np.int64),
        D=np.asarray(D, dtype=np.int64),
        subject_ids=tuple(f"s{i}" for i in range(X.shape[0])),
        item_names=tuple(f"item_{j + 1}" for j in range(X.shape[1])),
        domain_leaves=tuple(domain_leaves),
        cause_leaves=tuple(cause_leaves),
    )


def model_instance(seed, N=200, J=10, C=3, K=2, missing_rate=0.1, domain_doc=FOUR_DOMAIN_DOC,
                   domain_leaves=("d0", "d1", "d2", "d3")):
    """Dataset drawn from the generative family on the four-domain tree."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(99,)))
    dtree = parse_tree(domain_doc, leaf_order=list(domain_leaves))
    ctree = flat_tree([f"c{c + 1}" for c in range(C)])
    G1 = dtree.n_leaves
    anc = dtree.leaf_anc.astype(float)
    alpha = rng.normal(0, 1, (C, dtree.n_nodes, K - 1))
    s = np.concatenate([np.ones((C, 1)), rng.integers(0, 2, (C, dtree.n_nodes - 1))], axis=1)
    lam = stick_break(np.einsum("gu,cuk->cgk", anc, s[:, :, None] * alpha))
    gamma = rng.normal(0, 1, (ctree.n_nodes, J, K))
    theta = expit(np.einsum("cu,ujk->cjk", ctree.leaf_anc.astype(float), gamma))
    pi = rng.dirichlet(np.ones(C), size=G1)
    D = rng.integers(0, G1, N)
    Y = np.array([rng.choice(C, p=pi[g]) for g in D])
    Z = np.array([rng.choice(K, p=lam[c, g]) for c, g in zip(Y, D)])
    X = (rng.random((N, J)) < theta[Y, :, Z]).astype(np.int8)
    observed = np.ones((N, J), dtype=bool)
    if missing_rate > 0:
        observed = rng.random((N, J)) >= missing_rate
        X[~observed] = 0
    Y_masked = Y.copy()
    Y_masked[D == 0] = -1
    dataset = build_dataset(X, observed, Y_masked, D, dtree.leaf_order, ctree.leaf_order)
    truth = {"pi": pi, "lam": lam, "theta": theta, "Y": Y, "Z": Z}
    return dataset, dtree, ctree, truth


def tiny_instance(seed, N=5, J=3, C=2, K=2, missing_rate=0.2):
    """Small two-domain instance for oracle and bound checks."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
    dtree = flat_tree(["d0", "d1"], root_id="rd")
    ctree = flat_tree([f"c{c + 1}" for c in range(C)], root_id="rc")
    X = rng.integers(0, 2, (N, J)).astype(np.int8)
    observed = rng.random((N, J)) >= missing_rate
    X[~observed] = 0
    D = np.sort(rng.integers(0, 2, N))
    D[0], D[-1] = 0, 1  # both domains always present
    Y = rng.integers(0, C, N)
    Y[D == 0] = -1
    dataset = build_dataset(X, observed, Y, D, dtree.leaf_order, ctree.leaf_order)
    return dataset, dtree, ctree


def random_tree(rng, n_nodes, multi_level=True):
    """Random rooted weighted tree for property tests."""
    ids = [f"n{i}" for i in range(n_nodes)]
    parent = np.full(n_nodes, -1, dtype=np.int64)
    for i in range(1, n_nodes):
        parent[i] = rng.integers(0, i)
    weights = np.concatenate([[1.0], rng.uniform(0.2, 3.0, n_nodes - 1)])
    if multi_level:
        levels = np.concatenate([[1], rng.integers(1, 4, n_nodes - 1)]).astype(np.int64)
    else:
        levels = np.concatenate([[1], np.full(n_nodes - 1, 2)]).astype(np.int64)
    has_child = np.zeros(n_nodes, dtype=bool)
    has_child[parent[parent >= 0]] = True
    leaves = [ids[i] for i in range(n_nodes) if not has_child[i]]
    order = list(rng.permutation(leaves))
    return lt.RootedWeightedTree(ids, parent, weights, levels, order)
