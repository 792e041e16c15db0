"""Evaluation metrics and the fused-domain dissimilarity measure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


def csmf_accuracy(estimate, truth):
    """Normalized L1 agreement between two category-fraction vectors.

    1 means exact agreement, 0 the worst possible estimate given the truth.
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape or estimate.ndim != 1:
        raise ConfigError("estimate and truth must be equal-length vectors")
    for name, vec in (("estimate", estimate), ("truth", truth)):
        if np.any(vec < -1e-12) or abs(vec.sum() - 1.0) > 1e-8:
            raise ConfigError(f"{name} is not a probability simplex vector")
    if truth.size < 2:
        raise ConfigError("at least two categories are required")
    denom = 2.0 * (1.0 - truth.min())
    return 1.0 - np.abs(estimate - truth).sum() / denom


def top_cause_accuracy(cause_probs, truth_labels, k=1, return_ties=False):
    """Fraction of rows whose true label is among the top-k predicted ones.

    Argmax ties break toward the smallest category index; tied rows are
    reported separately when ``return_ties`` is set.
    """
    probs = np.asarray(cause_probs, dtype=np.float64)
    truth = np.asarray(truth_labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != truth.shape[0]:
        raise ConfigError("cause_probs rows must match truth_labels length")
    if k < 1 or k > probs.shape[1]:
        raise ConfigError("k must be in 1..C")
    order = np.argsort(-probs, axis=1, kind="stable")  # stable: ties to smaller index
    topk = order[:, :k]
    hits = (topk == truth[:, None]).any(axis=1)
    value = float(hits.mean())
    if not return_ties:
        return value
    row_max = probs.max(axis=1, keepdims=True)
    tie_rows = np.nonzero((probs == row_max).sum(axis=1) > 1)[0]
    return value, tie_rows


def cophenetic_dissimilarity(node_p_row, domain_tree, source_position):
    """Path length between the target leaf and one source leaf under fused weights.

    Edge weights are scaled by the per-node slab probabilities, so an edge with
    probability 0 contributes nothing (the domains are fused across it).
    """
    if not 1 <= source_position < domain_tree.n_leaves:
        raise ConfigError("source_position must index a source leaf (1..G)")
    override = np.asarray(node_p_row, dtype=np.float64) * domain_tree.weights
    return domain_tree.path_distance(
        domain_tree.leaf_order[0], domain_tree.leaf_order[source_position], override
    )


def cophenetic_table(node_p, domain_tree):
    """(C, G) distances between the target and every source, per category."""
    n_causes = node_p.shape[0]
    n_sources = domain_tree.n_leaves - 1
    out = np.empty((n_causes, n_sources))
    for c in range(n_causes):
        for g in range(n_sources):
            out[c, g] = cophenetic_dissimilarity(node_p[c], domain_tree, g + 1)
    return out


def rmse_by_cause(estimates, truths):
    """Per-category root mean square error over replicates.

    ``estimates`` and ``truths`` are (R, C) arrays of fraction vectors.
    """
    estimates = np.asarray(estimates, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if estimates.shape != truths.shape:
        raise ConfigError("estimates and truths must have matching shapes")
    return np.sqrt(((estimates - truths) ** 2).mean(axis=0))


@dataclass
class EvaluationReport:
    csmf_accuracy: float | None
    top_cause_accuracy: float | None
    per_cause_abs_error: np.ndarray | None
    cophenetic: np.ndarray | None
    cause_leaves: tuple
    source_leaves: tuple

    def to_json_dict(self):
        out = {
            "csmf_accuracy": None if self.csmf_accuracy is None else float(self.csmf_accuracy),
            "top_cause_accuracy": (
                None if self.top_cause_accuracy is None else float(self.top_cause_accuracy)
            ),
        }
        if self.per_cause_abs_error is not None:
            out["per_cause_abs_error"] = {
                cause: float(v) for cause, v in zip(self.cause_leaves, self.per_cause_abs_error)
            }
        if self.cophenetic is not None:
            out["cophenetic"] = {
                cause: {
                    leaf: float(self.cophenetic[c, g]) for g, leaf in enumerate(self.source_leaves)
                }
                for c, cause in enumerate(self.cause_leaves)
            }
        return out


def evaluate_fit(result, truth_pi0=None, truth_labels=None):
    """Build an :class:`EvaluationReport` from a fit result and optional truth.

    ``truth_labels`` are internal cause codes for the target-domain subjects in
    the order of ``result.target_ids``; without truth only posterior summaries
    are reported.
    """
    acc = None
    errors = None
    if truth_pi0 is not None:
        truth_pi0 = np.asarray(truth_pi0, dtype=np.float64)
        acc = csmf_accuracy(result.pi0_mean, truth_pi0)
        errors = np.abs(result.pi0_mean - truth_pi0)
    top = None
    if truth_labels is not None:
        top = top_cause_accuracy(result.cause_probs, truth_labels)
    return EvaluationReport(
        csmf_accuracy=acc,
        top_cause_accuracy=top,
        per_cause_abs_error=errors,
        cophenetic=result.cophenetic,
        cause_leaves=result.cause_leaves,
        source_leaves=tuple(result.domain_leaves[1:]),
    )
