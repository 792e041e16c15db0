"""Coordinate-ascent variational Bayes for the tree-guided nested latent class model.

The variational family factorizes over per-domain category fractions, per-subject
category and class assignments, per-(cause, domain-tree-node) slab indicator and
Gaussian stick increments, per-cause-tree-node Gaussian profile increments, and
per-(cause, level) slab probabilities.  Each update is the exact maximizer of the
bounded objective over its factor, so the tracked objective never decreases; the
tests rely on that property rather than on any reference values.

Update order within a sweep is fixed: category assignments (missing-label rows),
class assignments (all rows), Dirichlet parameters, slab/stick factors in dense
node order, profile increments in dense node order, slab-probability Betas, then
the local bound parameters every ``bound_interval`` sweeps and the diffusion
variances every ``hyper_interval`` sweeps.  Within a step, subjects and causes
are block-updated at once when their factors are mutually independent; node
factors are sequential because they read each other's moments through ancestor
sums.

Comparator modes clamp slab indicators instead of learning them: complete
pooling turns every non-root indicator off (one shared weight vector), no
grouping turns every indicator on (one free weight vector per domain), and a
fixed grouping clamps a supplied 0/1 pattern.  The objective remains a valid
bound within the constrained family and all remaining updates stay exact.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import betaln, digamma, expit, gammaln, xlogy

from .errors import ConfigError, NumericalError
from .params import jj_g, log_sigmoid

COMPARATOR_MODES = (
    "domain_adaptive",
    "fixed_grouping",
    "complete_pooling",
    "no_domain_grouping",
)


@dataclass
class ModelConfig:
    """Model structure and prior hyperparameters.

    slab_a, slab_b broadcast to (C, L) over causes and domain-tree levels;
    csmf_prior broadcasts to (G+1, C).  ``grouping`` maps non-root domain-tree
    node ids to 0/1 and is required (for every non-root node) in
    fixed_grouping mode.  ``allow_single_class`` unlocks the conditional
    independence diagnostic (K=1), otherwise K >= 2 is enforced.
    """

    n_classes: int
    slab_a: object = 1.0
    slab_b: object = 1.0
    csmf_prior: object = 1.0
    comparator: str = "domain_adaptive"
    grouping: dict | None = None
    allow_single_class: bool = False


@dataclass
class FitControls:
    """Convergence and restart policy.

    The objective change is monitored per sweep; convergence needs an absolute
    (or relative, by flag) change below ``tol``.  Diffusion-variance updates run
    every ``hyper_interval`` sweeps until their sweep-level change drops below
    ``hyper_tol``, after which they freeze and the ordinary updates run to
    ``tol``.  Local bound parameters refresh every ``bound_interval`` sweeps.
    """

    tol: float = 1e-8
    hyper_tol: float = 1e-4
    hyper_interval: int = 10
    bound_interval: int = 1
    max_iters: int = 2000
    n_restarts: int = 5
    seed: int = 0
    update_hyper: bool = True
    relative_tol: bool = False
    init_scale: float = 0.1
    n_jobs: int = 1


@dataclass
class VariationalState:
    """All variational parameters and the objective trace.

    e        (N, C)       q(Y_i); one-hot and pinned where the label is observed
    r        (N, K)       q(Z_i)
    dir_params (G+1, C)   Dirichlet parameters of q(pi)
    node_p   (C, p)       slab probabilities; column of the root is 1
    node_mu1 (C, p, K-1)  slab-conditional stick means
    node_var1 (C, p, K-1) slab-conditional stick variances
    node_var0 (C, p)      spike-conditional variance (prior variance at last refresh)
    gam_mu   (p*, J, K)   profile increment means
    gam_var  (p*, J, K)   profile increment variances
    rho_a, rho_b (C, L)   Beta parameters of q(rho)
    phi      (C, G+1, K-1) stick bound parameters
    psi      (C, J, K)    response bound parameters
    tau      (L,)         domain-tree diffusion variances
    tau_star (L*,)        cause-tree diffusion variances
    """

    e: np.ndarray
    r: np.ndarray
    dir_params: np.ndarray
    node_p: np.ndarray
    node_mu1: np.ndarray
    node_var1: np.ndarray
    node_var0: np.ndarray
    gam_mu: np.ndarray
    gam_var: np.ndarray
    rho_a: np.ndarray
    rho_b: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    tau: np.ndarray
    tau_star: np.ndarray
    elbo_trace: list = field(default_factory=list)

    def copy(self):
        return VariationalState(
            e=self.e.copy(),
            r=self.r.copy(),
            dir_params=self.dir_params.copy(),
            node_p=self.node_p.copy(),
            node_mu1=self.node_mu1.copy(),
            node_var1=self.node_var1.copy(),
            node_var0=self.node_var0.copy(),
            gam_mu=self.gam_mu.copy(),
            gam_var=self.gam_var.copy(),
            rho_a=self.rho_a.copy(),
            rho_b=self.rho_b.copy(),
            phi=self.phi.copy(),
            psi=self.psi.copy(),
            tau=self.tau.copy(),
            tau_star=self.tau_star.copy(),
            elbo_trace=list(self.elbo_trace),
        )


@dataclass
class FitResult:
    elbo_trace: list
    converged: bool
    n_iterations: int
    final_elbo: float
    pi0_dirichlet: np.ndarray
    pi0_mean: np.ndarray
    cause_probs: np.ndarray
    target_ids: tuple
    p_cu: np.ndarray
    cophenetic: np.ndarray
    seed: int
    restart_summaries: list
    n_classes: int
    comparator: str
    cause_leaves: tuple
    domain_leaves: tuple
    node_ids: tuple
    state: VariationalState

    def to_json_dict(self):
        """JSON-ready summary (deterministic key order handled by the writer)."""
        return {
            "elbo_trace": [float(v) for v in self.elbo_trace],
            "converged": bool(self.converged),
            "iterations": int(self.n_iterations),
            "final_elbo": float(self.final_elbo),
            "n_classes": int(self.n_classes),
            "comparator": self.comparator,
            "seed": int(self.seed),
            "restarts": self.restart_summaries,
            "pi0_dirichlet_params": [float(v) for v in self.pi0_dirichlet],
            "pi0_mean": [float(v) for v in self.pi0_mean],
            "cause_leaves": list(self.cause_leaves),
            "domain_leaves": list(self.domain_leaves),
            "cause_probs": {
                sid: [float(v) for v in row]
                for sid, row in zip(self.target_ids, self.cause_probs)
            },
            "p_cu": {
                cause: {node: float(self.p_cu[c, u]) for u, node in enumerate(self.node_ids)}
                for c, cause in enumerate(self.cause_leaves)
            },
            "cophenetic": {
                cause: {
                    self.domain_leaves[g + 1]: float(self.cophenetic[c, g])
                    for g in range(self.cophenetic.shape[1])
                }
                for c, cause in enumerate(self.cause_leaves)
            },
        }


def _logB(vec):
    vec = np.asarray(vec, dtype=np.float64)
    return gammaln(vec).sum(axis=-1) - gammaln(vec.sum(axis=-1))


def _softmax_rows(logits):
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    return ex / ex.sum(axis=1, keepdims=True)


class NestedLcmVB:
    """One dataset + trees + config bound together with precomputed index masks."""

    def __init__(self, dataset, domain_tree, cause_tree, config: ModelConfig):
        if tuple(domain_tree.leaf_order) != dataset.domain_leaves:
            raise ConfigError("dataset domain labels do not match the domain tree leaf order")
        if tuple(cause_tree.leaf_order) != dataset.cause_leaves:
            raise ConfigError("dataset cause labels do not match the cause tree leaf order")
        if config.comparator not in COMPARATOR_MODES:
            raise ConfigError(f"unknown comparator mode {config.comparator!r}")
        if config.n_classes < 1:
            raise ConfigError("n_classes must be at least 1")
        if config.n_classes < 2 and not config.allow_single_class:
            raise ConfigError(
                "K=1 forces conditional independence of the responses; "
                "set allow_single_class=True to fit it as a diagnostic"
            )

        self.dataset = dataset
        self.domain_tree = domain_tree
        self.cause_tree = cause_tree
        self.config = config

        self.N = dataset.n_subjects
        self.J = dataset.n_items
        self.C = dataset.n_causes
        self.K = config.n_classes
        self.Km1 = self.K - 1
        self.G1 = dataset.n_domains
        self.p = domain_tree.n_nodes
        self.pc = cause_tree.n_nodes
        self.L = domain_tree.n_levels
        self.Lc = cause_tree.n_levels

        # masked data matrices; a missing entry contributes exact 0.0 regardless
        # of the placeholder stored in X
        self.MB = dataset.observed.astype(np.float64)
        self.MX = self.MB * (2.0 * dataset.X.astype(np.float64) - 1.0)

        self.A_dom = domain_tree.leaf_anc.astype(np.float64)  # (G1, p)
        self.Ldesc_dom = domain_tree.leaf_desc  # (p, G1) bool
        self.A_cau = cause_tree.leaf_anc.astype(np.float64)  # (C, pc)
        self.Ldesc_cau = cause_tree.leaf_desc  # (pc, C) bool

        self.lev_dom = domain_tree.levels - 1
        self.lev_cau = cause_tree.levels - 1
        self.w_dom = domain_tree.weights
        self.w_cau = cause_tree.weights

        self.dom_rows = [np.nonzero(dataset.D == g)[0] for g in range(self.G1)]
        self.missing_rows = np.nonzero(dataset.Y < 0)[0]

        self.slab_a = np.ascontiguousarray(
            np.broadcast_to(np.asarray(config.slab_a, dtype=np.float64), (self.C, self.L))
        )
        self.slab_b = np.ascontiguousarray(
            np.broadcast_to(np.asarray(config.slab_b, dtype=np.float64), (self.C, self.L))
        )
        self.d_prior = np.ascontiguousarray(
            np.broadcast_to(np.asarray(config.csmf_prior, dtype=np.float64), (self.G1, self.C))
        )
        if np.any(self.slab_a <= 0) or np.any(self.slab_b <= 0) or np.any(self.d_prior <= 0):
            raise ConfigError("prior hyperparameters must be strictly positive")

        self.s_clamp = self._build_clamp()

    def _build_clamp(self):
        mode = self.config.comparator
        if mode == "domain_adaptive":
            return None
        clamp = np.ones(self.p, dtype=np.float64)
        if mode == "complete_pooling":
            clamp[1:] = 0.0
        elif mode == "no_domain_grouping":
            pass
        else:  # fixed_grouping
            pattern = self.config.grouping or {}
            root = self.domain_tree.root
            if pattern.get(root, 1) != 1:
                raise ConfigError("grouping pattern must keep the root indicator at 1")
            missing = [u for u in self.domain_tree.ids[1:] if u not in pattern]
            if missing:
                raise ConfigError(f"grouping pattern misses nodes: {missing}")
            for node_id, value in pattern.items():
                if value not in (0, 1):
                    raise ConfigError("grouping pattern values must be 0 or 1")
                clamp[self.domain_tree.index(node_id)] = float(value)
        return clamp

    # -- moments -----------------------------------------------------------

    def _xi_mean(self, st):
        return st.node_p[:, :, None] * st.node_mu1

    def _eta_moments(self, st):
        xi = self._xi_mean(st)
        mean = np.einsum("gu,cuk->cgk", self.A_dom, xi)
        var_xi = st.node_p[:, :, None] * (
            st.node_var1 + (1.0 - st.node_p[:, :, None]) * st.node_mu1**2
        )
        second = np.einsum("gu,cuk->cgk", self.A_dom, var_xi) + mean**2
        return mean, second

    def _alpha_second(self, st):
        return st.node_p[:, :, None] * (st.node_var1 + st.node_mu1**2) + (
            1.0 - st.node_p[:, :, None]
        ) * st.node_var0[:, :, None]

    def _beta_moments(self, st):
        mean = np.einsum("cu,ujk->cjk", self.A_cau, st.gam_mu)
        second = np.einsum("cu,ujk->cjk", self.A_cau, st.gam_var) + mean**2
        return mean, second

    def _elog_pi(self, st):
        return digamma(st.dir_params) - digamma(st.dir_params.sum(axis=1))[:, None]

    def _elog_rho(self, st):
        tot = digamma(st.rho_a + st.rho_b)
        return digamma(st.rho_a) - tot, digamma(st.rho_b) - tot

    # -- the bound statistic F --------------------------------------------

    def _stick_block(self, st, eta_mean, eta_second):
        """(C, G+1, K) per-class stick contributions of the bounded weights."""
        sb = np.zeros((self.C, self.G1, self.K))
        if self.Km1 == 0:
            return sb
        gphi = jj_g(st.phi)
        common = log_sigmoid(st.phi) - st.phi / 2.0 - gphi * (eta_second - st.phi**2)
        neg = common - eta_mean / 2.0
        pos = common + eta_mean / 2.0
        sb[:, :, 1:] = np.cumsum(neg, axis=-1)
        sb[:, :, : self.Km1] += pos
        return sb

    def _item_base(self, st, beta_second):
        gpsi = jj_g(st.psi)
        return log_sigmoid(st.psi) - st.psi / 2.0 - gpsi * (beta_second - st.psi**2)

    def _F(self, st, moments=None):
        """(N, C, K) statistic combining stick terms and observed-item terms."""
        if moments is None:
            eta_mean, eta_second = self._eta_moments(st)
            beta_mean, beta_second = self._beta_moments(st)
        else:
            eta_mean, eta_second, beta_mean, beta_second = moments
        sb = self._stick_block(st, eta_mean, eta_second)
        base = self._item_base(st, beta_second)
        flat = base.transpose(1, 0, 2).reshape(self.J, self.C * self.K)
        ib = self.MB @ flat
        flat_mean = beta_mean.transpose(1, 0, 2).reshape(self.J, self.C * self.K)
        ib += 0.5 * (self.MX @ flat_mean)
        ib = ib.reshape(self.N, self.C, self.K)
        return sb[:, self.dataset.D, :].transpose(1, 0, 2) + ib

    # -- individual updates --------------------------------------------------

    def update_e(self, st):
        """Categorical factors of the missing labels; observed rows stay pinned."""
        rows = self.missing_rows
        if rows.size == 0:
            return
        F = self._F(st)
        elog_pi = self._elog_pi(st)
        logits = elog_pi[self.dataset.D[rows]] + np.einsum(
            "nk,nck->nc", st.r[rows], F[rows]
        )
        st.e[rows] = _softmax_rows(logits)

    def update_r(self, st):
        """Categorical factors of the class assignments, all subjects."""
        F = self._F(st)
        logits = np.einsum("nc,nck->nk", st.e, F)
        st.r = _softmax_rows(logits)

    def update_pi(self, st):
        """Dirichlet factors: per-domain soft label counts plus the prior."""
        for g in range(self.G1):
            st.dir_params[g] = self.d_prior[g] + st.e[self.dom_rows[g]].sum(axis=0)

    def _spike_slab_pre(self, st):
        """Per-(cause, domain, stick) aggregates shared by all node updates."""
        if self.Km1 == 0:
            z = np.zeros((self.C, self.G1, 0))
            return z, z
        gphi = jj_g(st.phi)
        # suffix responsibilities: probability the class index is >= the stick index
        R = np.cumsum(st.r[:, ::-1], axis=1)[:, ::-1][:, : self.Km1]
        S1 = np.empty((self.C, self.G1, self.Km1))
        S2 = np.empty((self.C, self.G1, self.Km1))
        for g in range(self.G1):
            rows = self.dom_rows[g]
            if rows.size:
                eg = st.e[rows]
                S1[:, g, :] = eg.T @ R[rows]
                S2[:, g, :] = eg.T @ (2.0 * st.r[rows][:, : self.Km1] - R[rows])
            else:
                S1[:, g, :] = 0.0
                S2[:, g, :] = 0.0
        return gphi * S1, 0.5 * S2

    def update_spike_slab(self, st, nodes=None):
        """Joint slab/stick factors, sequentially over nodes in dense order."""
        W1, W2 = self._spike_slab_pre(st)
        eta_mean, _ = self._eta_moments(st)
        xi = self._xi_mean(st)
        elog_rho, elog_1mrho = self._elog_rho(st)
        elog_odds = elog_rho - elog_1mrho
        node_list = range(self.p) if nodes is None else nodes
        for u in node_list:
            lev = self.lev_dom[u]
            prior_var = st.tau[lev] * self.w_dom[u]
            leaves = self.Ldesc_dom[u]
            Ck = 1.0 / prior_var + 2.0 * W1[:, leaves, :].sum(axis=1)
            excl = eta_mean[:, leaves, :] - xi[:, u, None, :]
            Dk = (W2[:, leaves, :] - 2.0 * W1[:, leaves, :] * excl).sum(axis=1)
            mu1 = Dk / Ck
            var1 = 1.0 / Ck
            if u == 0:
                p_new = np.ones(self.C)
            elif self.s_clamp is not None:
                p_new = np.full(self.C, self.s_clamp[u])
            else:
                eps = (
                    elog_odds[:, lev]
                    + (Dk**2 / (2.0 * Ck)).sum(axis=1)
                    - 0.5 * (np.log(prior_var) + np.log(Ck)).sum(axis=1)
                )
                p_new = expit(eps)
            st.node_mu1[:, u, :] = mu1
            st.node_var1[:, u, :] = var1
            st.node_var0[:, u] = prior_var
            st.node_p[:, u] = p_new
            new_xi = p_new[:, None] * mu1
            eta_mean[:, leaves, :] += (new_xi - xi[:, u, :])[:, None, :]
            xi[:, u, :] = new_xi

    def _gamma_pre(self, st):
        """Per-(cause, item, class) weighted counts shared by all node updates."""
        er = (st.e[:, :, None] * st.r[:, None, :]).reshape(self.N, self.C * self.K)
        wsum = (self.MB.T @ er).reshape(self.J, self.C, self.K).transpose(1, 0, 2)
        xsum = (self.MX.T @ er).reshape(self.J, self.C, self.K).transpose(1, 0, 2)
        return jj_g(st.psi) * wsum, xsum

    def update_gamma(self, st, nodes=None):
        """Gaussian profile factors, sequentially over cause-tree nodes."""
        GW, xsum = self._gamma_pre(st)
        beta_mean, _ = self._beta_moments(st)
        node_list = range(self.pc) if nodes is None else nodes
        for u in node_list:
            prior_var = st.tau_star[self.lev_cau[u]] * self.w_cau[u]
            causes = self.Ldesc_cau[u]
            A = 1.0 / prior_var + 2.0 * GW[causes].sum(axis=0)
            excl = beta_mean[causes] - st.gam_mu[u][None, :, :]
            B = (0.5 * xsum[causes] - 2.0 * GW[causes] * excl).sum(axis=0)
            mu = B / A
            beta_mean[causes] += (mu - st.gam_mu[u])[None, :, :]
            st.gam_mu[u] = mu
            st.gam_var[u] = 1.0 / A

    def update_rho(self, st):
        """Beta factors of the slab probabilities from current node posteriors."""
        for lev in range(self.L):
            cols = np.nonzero(self.lev_dom == lev)[0]
            if cols.size == 0:
                continue
            st.rho_a[:, lev] = self.slab_a[:, lev] + st.node_p[:, cols].sum(axis=1)
            st.rho_b[:, lev] = self.slab_b[:, lev] + (1.0 - st.node_p[:, cols]).sum(axis=1)

    def update_local_bounds(self, st):
        """Bound parameters at the root of the current second moments."""
        _, eta_second = self._eta_moments(st)
        _, beta_second = self._beta_moments(st)
        st.phi = np.sqrt(eta_second)
        st.psi = np.sqrt(beta_second)

    def update_hyperparams(self, st):
        """Level-wise diffusion variances as averages of scaled second moments."""
        if self.Km1 > 0:
            alpha2 = self._alpha_second(st)
            for lev in range(self.L):
                cols = np.nonzero(self.lev_dom == lev)[0]
                if cols.size == 0:
                    warnings.warn(f"domain tree level {lev + 1} has no nodes; tau unchanged")
                    continue
                st.tau[lev] = (alpha2[:, cols, :] / self.w_dom[cols][None, :, None]).mean()
        gamma2 = st.gam_var + st.gam_mu**2
        for lev in range(self.Lc):
            rows = np.nonzero(self.lev_cau == lev)[0]
            if rows.size == 0:
                warnings.warn(f"cause tree level {lev + 1} has no nodes; tau* unchanged")
                continue
            st.tau_star[lev] = (gamma2[rows] / self.w_cau[rows][:, None, None]).mean()

    # -- objective ------------------------------------------------------------

    def compute_elbo(self, st):
        """Bounded evidence objective with all normalizing constants included.

        Raises NumericalError carrying the label of the first non-finite term.
        """
        eta_mean, eta_second = self._eta_moments(st)
        beta_mean, beta_second = self._beta_moments(st)
        F = self._F(st, (eta_mean, eta_second, beta_mean, beta_second))
        elog_pi = self._elog_pi(st)
        elog_rho, elog_1mrho = self._elog_rho(st)

        terms = {}
        per_subject = elog_pi[self.dataset.D] + np.einsum("nk,nck->nc", st.r, F)
        terms["likelihood_bound"] = float((st.e * per_subject).sum())

        if self.Km1 > 0:
            var_dom = st.tau[self.lev_dom] * self.w_dom  # (p,)
            alpha2 = self._alpha_second(st)
            terms["domain_tree_gaussian"] = float(
                (
                    -0.5 * np.log(2.0 * np.pi * var_dom)[None, :, None]
                    - alpha2 / (2.0 * var_dom[None, :, None])
                ).sum()
            )
        else:
            terms["domain_tree_gaussian"] = 0.0

        var_cau = st.tau_star[self.lev_cau] * self.w_cau
        gamma2 = st.gam_var + st.gam_mu**2
        terms["cause_tree_gaussian"] = float(
            (
                -0.5 * np.log(2.0 * np.pi * var_cau)[:, None, None]
                - gamma2 / (2.0 * var_cau[:, None, None])
            ).sum()
        )

        terms["slab_bernoulli"] = float(
            (
                st.node_p * elog_rho[:, self.lev_dom]
                + (1.0 - st.node_p) * elog_1mrho[:, self.lev_dom]
            ).sum()
        )
        terms["beta_prior"] = float(
            (
                (self.slab_a - 1.0) * elog_rho
                + (self.slab_b - 1.0) * elog_1mrho
                - betaln(self.slab_a, self.slab_b)
            ).sum()
        )
        terms["dirichlet_prior"] = float(
            ((self.d_prior - 1.0) * elog_pi).sum() - _logB(self.d_prior).sum()
        )

        terms["entropy_pi"] = float(
            -(((st.dir_params - 1.0) * elog_pi).sum() - _logB(st.dir_params).sum())
        )
        p = st.node_p
        bern = -(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p)).sum()
        if self.Km1 > 0:
            gauss_mix = (
                p[:, :, None] * 0.5 * (1.0 + np.log(2.0 * np.pi * st.node_var1))
                + (1.0 - p[:, :, None])
                * 0.5
                * (1.0 + np.log(2.0 * np.pi * st.node_var0[:, :, None]))
            ).sum()
        else:
            gauss_mix = 0.0
        terms["entropy_slab_sticks"] = float(bern + gauss_mix)
        terms["entropy_gamma"] = float(
            (0.5 * (1.0 + np.log(2.0 * np.pi * st.gam_var))).sum()
        )
        terms["entropy_assignments"] = float(
            -(xlogy(st.e, st.e).sum() + xlogy(st.r, st.r).sum())
        )
        terms["entropy_rho"] = float(
            -(
                (st.rho_a - 1.0) * elog_rho
                + (st.rho_b - 1.0) * elog_1mrho
                - betaln(st.rho_a, st.rho_b)
            ).sum()
        )

        total = 0.0
        for name, value in terms.items():
            if not math.isfinite(value):
                raise NumericalError(f"non-finite objective term: {name}")
            total += value
        return total

    # -- sweeps and fitting -----------------------------------------------------

    def sweep(self, st, do_bounds=True, do_hyper=False, on_step=None):
        """One full update sweep in the fixed order; on_step(name) after each op."""
        steps = [
            ("e", self.update_e),
            ("r", self.update_r),
            ("pi", self.update_pi),
            ("spike_slab", self.update_spike_slab),
            ("gamma", self.update_gamma),
            ("rho", self.update_rho),
        ]
        if do_bounds:
            steps.append(("local_bounds", self.update_local_bounds))
        if do_hyper:
            steps.append(("hyperparams", self.update_hyperparams))
        for name, op in steps:
            op(st)
            if on_step is not None:
                on_step(name, st)

    def init_state(self, seed, init_scale=0.1):
        """Fresh variational state; identical seeds give byte-identical states."""
        rng = np.random.default_rng(seed)
        tau = np.ones(self.L)
        tau_star = np.ones(self.Lc)
        var_dom = tau[self.lev_dom] * self.w_dom
        var_cau = tau_star[self.lev_cau] * self.w_cau

        node_mu1 = rng.normal(0.0, init_scale, size=(self.C, self.p, self.Km1))
        node_var1 = np.broadcast_to(var_dom[None, :, None], (self.C, self.p, self.Km1)).copy()
        node_var0 = np.broadcast_to(var_dom[None, :], (self.C, self.p)).copy()
        gam_mu = rng.normal(0.0, init_scale, size=(self.pc, self.J, self.K))
        gam_var = np.broadcast_to(var_cau[:, None, None], (self.pc, self.J, self.K)).copy()

        node_p = self.slab_a[:, self.lev_dom] / (
            self.slab_a[:, self.lev_dom] + self.slab_b[:, self.lev_dom]
        )
        node_p = np.ascontiguousarray(node_p)
        node_p[:, 0] = 1.0
        if self.s_clamp is not None:
            node_p[:, 1:] = self.s_clamp[None, 1:]

        e = np.full((self.N, self.C), 1.0 / self.C)
        observed = self.dataset.Y >= 0
        e[observed] = 0.0
        e[observed, self.dataset.Y[observed]] = 1.0
        r = np.full((self.N, self.K), 1.0 / self.K)

        st = VariationalState(
            e=e,
            r=r,
            dir_params=self.d_prior.copy(),
            node_p=node_p,
            node_mu1=node_mu1,
            node_var1=node_var1,
            node_var0=node_var0,
            gam_mu=gam_mu,
            gam_var=gam_var,
            rho_a=self.slab_a.copy(),
            rho_b=self.slab_b.copy(),
            phi=np.zeros((self.C, self.G1, self.Km1)),
            psi=np.zeros((self.C, self.J, self.K)),
            tau=tau,
            tau_star=tau_star,
        )
        self.update_local_bounds(st)
        return st

    def run(self, controls: FitControls, seed):
        """One restart: sweep to convergence from a fresh state."""
        st = self.init_state(seed, init_scale=controls.init_scale)
        hyper_active = controls.update_hyper
        prev = None
        converged = False
        iterations = 0
        for t in range(1, controls.max_iters + 1):
            do_hyper = hyper_active and (t % controls.hyper_interval == 0)
            do_bounds = t % controls.bound_interval == 0
            self.sweep(st, do_bounds=do_bounds, do_hyper=do_hyper)
            cur = self.compute_elbo(st)
            st.elbo_trace.append(cur)
            iterations = t
            if prev is not None:
                delta = abs(cur - prev)
                if controls.relative_tol:
                    delta = delta / max(abs(prev), 1e-300)
                if do_hyper and delta < controls.hyper_tol:
                    hyper_active = False
                if delta < controls.tol and not hyper_active:
                    converged = True
                    break
            prev = cur
        return st, converged, iterations


def _run_restart(model, controls, seed):
    try:
        st, converged, iterations = model.run(controls, seed)
        return {"seed": seed, "elbo": st.elbo_trace[-1], "converged": converged,
                "iterations": iterations, "state": st, "error": None}
    except NumericalError as exc:
        return {"seed": seed, "elbo": None, "converged": False,
                "iterations": 0, "state": None, "error": str(exc)}


def fit(dataset, domain_tree, cause_tree, config, controls=None):
    """Fit the model: best of ``n_restarts`` coordinate-ascent runs.

    Restart seeds derive from ``controls.seed`` through a counter-based
    splitting scheme, so reruns with the same controls reproduce the result
    exactly.  A restart whose objective turns non-finite is dropped; failing
    to reach ``tol`` within ``max_iters`` flags the result instead of raising.
    """
    controls = controls or FitControls()
    model = NestedLcmVB(dataset, domain_tree, cause_tree, config)
    seeds = [
        np.random.SeedSequence(entropy=controls.seed, spawn_key=(idx,))
        for idx in range(controls.n_restarts)
    ]
    if controls.n_jobs > 1 and controls.n_restarts > 1:
        from joblib import Parallel, delayed

        outcomes = Parallel(n_jobs=controls.n_jobs)(
            delayed(_run_restart)(model, controls, seed) for seed in seeds
        )
    else:
        outcomes = [_run_restart(model, controls, seed) for seed in seeds]

    best = None
    for outcome in outcomes:
        if outcome["state"] is None:
            continue
        if best is None or outcome["elbo"] > best["elbo"]:
            best = outcome
    if best is None:
        raise NumericalError(
            "all restarts failed: " + "; ".join(str(o["error"]) for o in outcomes)
        )

    st = best["state"]
    target_rows = model.dom_rows[0]
    pi0 = st.dir_params[0]
    from .metrics import cophenetic_table

    summaries = [
        {
            "restart": idx,
            "final_elbo": None if o["elbo"] is None else float(o["elbo"]),
            "converged": bool(o["converged"]),
            "iterations": int(o["iterations"]),
            "error": o["error"],
        }
        for idx, o in enumerate(outcomes)
    ]
    return FitResult(
        elbo_trace=list(st.elbo_trace),
        converged=best["converged"],
        n_iterations=best["iterations"],
        final_elbo=float(st.elbo_trace[-1]),
        pi0_dirichlet=pi0.copy(),
        pi0_mean=pi0 / pi0.sum(),
        cause_probs=st.e[target_rows].copy(),
        target_ids=tuple(dataset.subject_ids[i] for i in target_rows),
        p_cu=st.node_p.copy(),
        cophenetic=cophenetic_table(st.node_p, domain_tree),
        seed=controls.seed,
        restart_summaries=summaries,
        n_classes=config.n_classes,
        comparator=config.comparator,
        cause_leaves=dataset.cause_leaves,
        domain_leaves=dataset.domain_leaves,
        node_ids=tuple(domain_tree.ids),
        state=st,
    )


@dataclass
class KSelection:
    selected_k: int
    criteria: dict
    results: dict

    def to_json_dict(self):
        return {
            "selected_k": int(self.selected_k),
            "criteria": {str(k): float(v) for k, v in self.criteria.items()},
        }


def select_k(dataset, domain_tree, cause_tree, config, k_candidates, controls=None):
    """Fit every candidate K and keep the one maximizing objective + log K!.

    Ties break toward the smaller K; per-K criterion values are always
    reported alongside the winning fit.
    """
    candidates = sorted(set(int(k) for k in k_candidates))
    if not candidates:
        raise ConfigError("k_candidates must be a non-empty collection")
    criteria = {}
    results = {}
    best_k = None
    for k in candidates:
        res = fit(dataset, domain_tree, cause_tree, replace(config, n_classes=k), controls)
        crit = res.final_elbo + math.lgamma(k + 1)
        criteria[k] = crit
        results[k] = res
        if best_k is None or crit > criteria[best_k]:
            best_k = k
    return KSelection(selected_k=best_k, criteria=criteria, results=results)
