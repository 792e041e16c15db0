"""Parameter containers and the deterministic reparameterizations of the model.

Everything here is a pure function of explicit inputs: logistic stick-breaking
between class weights and real sticks, ancestor sums along the two trees,
the quadratic lower bound on the sigmoid that yields closed-form variational
updates, and scalar evaluations of the complete-data log joint density and of
its bounded counterpart.  Derived quantities (eta, beta, theta, lambda) are
recomputed from the primitives on demand so their defining identities cannot
be violated by stale state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, expit, gammaln, xlog1py, xlogy

from .errors import ConfigError, NumericalError

# Sigmoid arguments are clamped here before exponentiation; beyond this point
# sigma() is 1 or 0 at double precision anyway.
SIGMOID_CLAMP = 35.0


def _clamp(x):
    return np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)


def log_sigmoid(x):
    """log sigma(x), stable for large |x|."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# -- stick breaking ---------------------------------------------------------


def stick_break(eta):
    """Map (..., K-1) real sticks to (..., K) simplex weights.

    Weight k is sigma(eta_k) times the product of sigma(-eta_s) over s < k;
    the last weight consumes the remainder.  Computed in log space.
    """
    eta = np.asarray(eta, dtype=np.float64)
    if not np.all(np.isfinite(eta)):
        raise NumericalError("stick_break: non-finite stick value")
    eta = _clamp(eta)
    log_pos = log_sigmoid(eta)
    log_neg_cum = np.cumsum(log_sigmoid(-eta), axis=-1)
    shape = eta.shape[:-1] + (eta.shape[-1] + 1,)
    log_lam = np.zeros(shape)
    log_lam[..., 0] = log_pos[..., 0] if eta.shape[-1] else 0.0
    if eta.shape[-1]:
        log_lam[..., 1:-1] = log_pos[..., 1:] + log_neg_cum[..., :-1]
        log_lam[..., -1] = log_neg_cum[..., -1]
    return np.exp(log_lam)


def stick_break_inverse(lam):
    """Inverse of :func:`stick_break` on the interior of the simplex."""
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam <= 0):
        raise ConfigError("stick_break_inverse requires an interior simplex point")
    k = lam.shape[-1]
    remainder = 1.0 - np.cumsum(lam[..., :-1], axis=-1) + lam[..., :-1]
    v = lam[..., :-1] / remainder
    if np.any(v >= 1.0) or np.any(v <= 0.0) or np.any(remainder <= 0):
        raise ConfigError("stick_break_inverse: point is on the simplex boundary")
    return logit(v) if k > 1 else np.zeros(lam.shape[:-1] + (0,))


# -- quadratic sigmoid bound -------------------------------------------------


def jj_g(psi):
    """Curvature (sigma(psi) - 1/2) / (2 psi) of the quadratic sigmoid bound.

    A series is used for |psi| < 1e-4 where the ratio is 0/0; the limit at
    zero is 1/8.
    """
    psi = np.asarray(psi, dtype=np.float64)
    small = np.abs(psi) < 1e-4
    safe = np.where(small, 1.0, psi)
    out = np.where(small, 0.125 - psi * psi / 96.0, (expit(safe) - 0.5) / (2.0 * safe))
    return out if out.ndim else float(out)


def jj_lower_bound(x, psi):
    """h(x, psi) = sigma(psi) exp{(x-psi)/2 - g(psi)(x^2-psi^2)} <= sigma(x)."""
    return np.exp(log_jj_bound(x, psi))


def log_jj_bound(x, psi):
    x = np.asarray(x, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    return log_sigmoid(psi) + (x - psi) / 2.0 - jj_g(psi) * (x * x - psi * psi)


# -- parameter containers -----------------------------------------------------


@dataclass
class DomainMixingParams:
    """Stick-breaking increments on the domain tree, one set per cause.

    alpha : (C, p, K-1) Gaussian increments per cause, node, stick
    s     : (C, p) 0/1 slab indicators; column 0 (root) must be 1
    rho   : (C, L) slab probabilities per cause and node level
    """

    alpha: np.ndarray
    s: np.ndarray
    rho: np.ndarray

    def xi(self):
        return self.s[:, :, None] * self.alpha


@dataclass
class ResponseProfileParams:
    """Gaussian increments on the cause tree for the logit response profiles.

    gamma : (p*, J, K) increments per cause-tree node, item, class
    """

    gamma: np.ndarray


@dataclass
class CsmfParams:
    """Per-domain category fractions; rows of pi live on the C-simplex."""

    pi: np.ndarray


def eta_from_tree(params: DomainMixingParams, tree, leaf_id, cause):
    """Ancestor sum of the slab-masked increments at one domain leaf."""
    if not tree.is_leaf(leaf_id):
        raise ConfigError(f"{leaf_id!r} is not a leaf of the domain tree")
    g = tree.leaf_order.index(leaf_id)
    mask = tree.leaf_anc[g]
    return params.xi()[cause][mask].sum(axis=0)


def eta_table(params: DomainMixingParams, tree):
    """(C, G+1, K-1) stick table: ancestor sums at every leaf for every cause."""
    xi = params.xi()
    return np.tensordot(tree.leaf_anc.astype(np.float64), xi, axes=([1], [1])).transpose(1, 0, 2)


def lambda_table(params: DomainMixingParams, tree):
    """(C, G+1, K) class-weight table implied by the stick table."""
    return stick_break(eta_table(params, tree))


def beta_table(params: ResponseProfileParams, tree):
    """(C, J, K) logit response profiles: ancestor sums of gamma at cause leaves."""
    return np.tensordot(tree.leaf_anc.astype(np.float64), params.gamma, axes=([1], [0]))


def theta_from_gamma(params: ResponseProfileParams, cause_tree, cause_leaf_id):
    """J x K response probabilities for one cause leaf."""
    if not cause_tree.is_leaf(cause_leaf_id):
        raise ConfigError(f"{cause_leaf_id!r} is not a leaf of the cause tree")
    c = cause_tree.leaf_order.index(cause_leaf_id)
    mask = cause_tree.leaf_anc[c]
    return expit(params.gamma[mask].sum(axis=0))


def class_conditional_loglik(x_row, observed, theta, lam):
    """log of the class-mixture likelihood of one response row.

    The Bernoulli product runs over observed items only; an empty observed
    set yields exactly 0.  Computed with log-sum-exp.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta <= 0) or np.any(theta >= 1):
        raise ConfigError("theta entries must lie strictly inside (0, 1)")
    obs = np.asarray(observed)
    if obs.dtype != bool:
        mask = np.zeros(theta.shape[0], dtype=bool)
        mask[obs] = True
        obs = mask
    x = np.asarray(x_row, dtype=np.float64)[obs]
    th = theta[obs]
    per_class = xlogy(x[:, None], th).sum(axis=0) + xlog1py(1.0 - x[:, None], -th).sum(axis=0)
    a = np.log(np.asarray(lam, dtype=np.float64)) + per_class
    amax = a.max()
    return float(amax + np.log(np.exp(a - amax).sum()))


# -- complete-data joint density and its lower bound --------------------------


def _log_normal(x, var):
    return -0.5 * np.log(2.0 * np.pi * var) - 0.5 * x * x / var


def _hyper_arrays(dataset, domain_tree, cause_tree, a, b, d, tau, tau_star):
    C = dataset.n_causes
    L = domain_tree.n_levels
    a = np.broadcast_to(np.asarray(a, dtype=np.float64), (C, L))
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), (C, L))
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), (dataset.n_domains, C))
    tau = np.asarray(tau, dtype=np.float64)
    tau_star = np.asarray(tau_star, dtype=np.float64)
    return a, b, d, tau, tau_star


def _prior_terms(mix, resp, csmf, dataset, domain_tree, cause_tree, a, b, d, tau, tau_star):
    a, b, d, tau, tau_star = _hyper_arrays(dataset, domain_tree, cause_tree, a, b, d, tau, tau_star)
    lev = domain_tree.levels - 1
    var_dom = tau[lev] * domain_tree.weights  # (p,)
    total = _log_normal(mix.alpha, var_dom[None, :, None]).sum()
    lev_star = cause_tree.levels - 1
    var_cause = tau_star[lev_star] * cause_tree.weights
    total += _log_normal(resp.gamma, var_cause[:, None, None]).sum()
    rho_at_node = mix.rho[:, lev]  # (C, p)
    total += (xlogy(mix.s, rho_at_node) + xlog1py(1 - mix.s, -rho_at_node)).sum()
    total += (xlogy(a - 1.0, mix.rho) + xlog1py(b - 1.0, -mix.rho) - betaln(a, b)).sum()
    logB_d = gammaln(d).sum(axis=1) - gammaln(d.sum(axis=1))
    total += (xlogy(d - 1.0, csmf.pi)).sum() - logB_d.sum()
    return float(total)


def log_joint(dataset, domain_tree, cause_tree, mix, resp, csmf, Z, Y, a, b, d, tau, tau_star):
    """Complete-data log joint density of data and all unknowns.

    Y and Z complete the missing labels and the class assignments; responses
    enter through observed entries only.
    """
    lam = lambda_table(mix, domain_tree)
    beta = beta_table(resp, cause_tree)
    theta = expit(beta)
    total = 0.0
    for i in range(dataset.n_subjects):
        g, c, k = dataset.D[i], int(Y[i]), int(Z[i])
        total += np.log(csmf.pi[g, c]) + np.log(lam[c, g, k])
        obs = dataset.observed[i]
        x = dataset.X[i, obs].astype(np.float64)
        th = theta[c, obs, k]
        total += float(xlogy(x, th).sum() + xlog1py(1.0 - x, -th).sum())
    return total + _prior_terms(
        mix, resp, csmf, dataset, domain_tree, cause_tree, a, b, d, tau, tau_star
    )


def log_h(dataset, domain_tree, cause_tree, mix, resp, csmf, Z, Y, psi, phi, a, b, d, tau, tau_star):
    """Complete-data log of the bounded joint density H.

    Sigmoid factors of the class weights and of the Bernoulli responses are
    replaced by their quadratic lower bounds with tuning parameters phi
    (C, G+1, K-1) and psi (C, J, K).  With phi = |eta| and psi = |beta| the
    likelihood portion equals the exact one.
    """
    eta = eta_table(mix, domain_tree)
    beta = beta_table(resp, cause_tree)
    xstar = 2.0 * dataset.X.astype(np.float64) - 1.0
    K = eta.shape[-1] + 1
    total = 0.0
    for i in range(dataset.n_subjects):
        g, c, k = dataset.D[i], int(Y[i]), int(Z[i])
        total += np.log(csmf.pi[g, c])
        for m in range(min(k, K - 1)):
            total += float(log_jj_bound(-eta[c, g, m], phi[c, g, m]))
        if k < K - 1:
            total += float(log_jj_bound(eta[c, g, k], phi[c, g, k]))
        for j in np.nonzero(dataset.observed[i])[0]:
            total += float(log_jj_bound(xstar[i, j] * beta[c, j, k], psi[c, j, k]))
    return total + _prior_terms(
        mix, resp, csmf, dataset, domain_tree, cause_tree, a, b, d, tau, tau_star
    )


# -- prior diagnostics ---------------------------------------------------------


def prior_correlation(tree, leaf_v, leaf_w):
    """Prior correlation between two leaf sums of the tree diffusion.

    Assumes all slabs on and a single diffusion variance; the root-path sums
    in the denominator include the root's own unit weight, matching the
    ancestor sums that define the leaf parameters.
    """
    for v in (leaf_v, leaf_w):
        if not tree.is_leaf(v):
            raise ConfigError(f"{v!r} is not a leaf")
    gi = tree.leaf_order.index(leaf_v)
    gj = tree.leaf_order.index(leaf_w)
    common = tree.leaf_anc[gi] & tree.leaf_anc[gj]
    num = float(tree.weights[common].sum())
    den = np.sqrt(tree.root_path_weight(leaf_v) * tree.root_path_weight(leaf_w))
    return num / den
