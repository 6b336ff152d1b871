"""Poisson-augmented EM for the penalized interval-censored fit.

Latent Poisson counts attached to each (subject, jump-time) pair turn the
interval-censored likelihood into a weighted Poisson form: the E-step has
closed-form posterior means, the baseline jumps have a closed-form M-step
update, and the remaining parameters take a single damped Newton step on
the working objective.  Step halving makes every cycle a generalized-EM
ascent step for the penalized observed log likelihood.

Risk sets over jump times are nested, so all risk-set sums are computed as
suffix sums over subjects sorted by R*; the Newton gradient and Hessian
then reduce to two weighted Gram products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .data import DesignSet, linear_predictor, observed_loglik

__all__ = [
    "EStepResult",
    "FitState",
    "NumericalError",
    "e_step",
    "fit",
    "m_step_lambda",
    "m_step_zeta",
]

# Diagonal jitter escalation for near-singular working information.
JITTER_START = 1e-8
JITTER_MAX = 1e-2
MAX_HALVINGS = 30
# Ceiling on a single baseline jump.  The nonparametric maximizer sends a
# jump to infinity whenever every subject still at risk there wants mass in
# that spot (the per-jump likelihood gradient is then strictly positive);
# beyond the ceiling the likelihood is flat to e^(-mass).  Divergent jumps
# are detected structurally and pinned at the ceiling up front, and the
# capped closed-form update still increases the concave per-jump objective,
# so generalized-EM ascent is preserved.
LAMBDA_CEILING = 1000.0


class NumericalError(RuntimeError):
    """Linear algebra failed beyond what jitter can absorb."""


@dataclass(frozen=True, eq=False)
class EStepResult:
    """Posterior means of the latent counts, one row per subject.

    ep[i, k-1] holds E(P_ik); entries vanish outside (L_i, R_i] and for
    right-censored subjects, so rows are sparse in effect.
    """

    ep: np.ndarray

    def subject_means(self, i: int) -> np.ndarray:
        return self.ep[i]

    @property
    def column_totals(self) -> np.ndarray:
        return self.ep.sum(axis=0)


@dataclass
class FitState:
    """Result of an EM run (or a snapshot used to warm-start one)."""

    zeta: np.ndarray
    lam: np.ndarray
    n_iter: int = 0
    pll_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    converged: bool = False
    clamp_count: int = 0
    loglik: float = np.nan
    penalized: float = np.nan
    frozen: np.ndarray | None = None
    max_constraint_violation: float | None = None


def _suffix_sums(design: DesignSet, w: np.ndarray, wx: np.ndarray | None = None):
    """Risk-set sums S_k = sum_{R*_i >= t_k} w_i (and optionally of rows wx).

    Valid for per-subject weights w (time-constant designs); returns (q,)
    and optionally (q, d) arrays indexed by jump k = 1..q.
    """
    order, pos = design.risk_order, design.risk_pos
    rc = np.concatenate([np.cumsum(w[order][::-1])[::-1], [0.0]])
    S = rc[pos]
    if wx is None:
        return S, None
    rcx = np.vstack(
        [np.cumsum(wx[order][::-1], axis=0)[::-1], np.zeros((1, wx.shape[1]))]
    )
    return S, rcx[pos]


def _weights_vector(design: DesignSet, subject_weights) -> np.ndarray | None:
    if subject_weights is None:
        return None
    w = np.asarray(subject_weights, dtype=float)
    if w.shape != (design.n_subjects,):
        raise ValueError("subject_weights must have one entry per subject")
    return w


def e_step(design: DesignSet, state: FitState) -> EStepResult:
    """Posterior means of the latent Poisson counts at the current fit.

    For each subject with a finite right endpoint the means inside
    (L_i, R_i] are lambda_k exp(zeta' X_ik) / (1 - exp(-S_i)) with S_i the
    total bracketed intensity; the series limit S_i is substituted for the
    denominator when S_i falls below 1e-12 to avoid 0/0.
    """
    lam = np.asarray(state.lam, dtype=float)
    if np.any(lam < 0.0):
        raise ValueError("baseline jumps must be nonnegative")
    mask = design.bracket_mask
    eta, _ = linear_predictor(design, state.zeta)
    if design.time_constant:
        w = np.exp(eta)
        lamw = mask * (lam[None, :] * w[:, None])
    else:
        lamw = mask * (lam[None, :] * np.exp(eta))
    mass = lamw.sum(axis=1)
    denom = -np.expm1(-mass)
    # series limit 1 - exp(-m) ~ m avoids 0/0 for vanishing bracket mass
    denom = np.where(mass < 1e-12, mass, denom)
    safe = np.where(denom > 0.0, denom, 1.0)
    ep = np.where(denom[:, None] > 0.0, lamw / safe[:, None], 0.0)
    return EStepResult(ep=ep)


def _working_value(design, zeta, E, ehat, gamma, weights):
    """Working objective (penalized expected Poisson partial form)."""
    eta, _ = linear_predictor(design, zeta)
    active = E > 0.0
    if design.time_constant:
        w = np.exp(eta) if weights is None else np.exp(eta) * weights
        S, _ = _suffix_sums(design, w)
        lin = float(ehat @ eta)
    else:
        w = np.exp(eta) if weights is None else np.exp(eta) * weights[:, None]
        S = (w * design.risk_mask).sum(axis=0)
        lin = float((ehat * eta).sum())
    logS = np.zeros_like(S)
    np.log(S, out=logS, where=active & (S > 0.0))
    c = design.c_block(zeta)
    value = (lin - float(E[active] @ logS[active])) / design.n_subjects
    return value - gamma * float(c @ design.Q @ c)


def _working_grad_hess(design, zeta, E, ehat, gamma, weights):
    """Gradient and negated Hessian of the working objective at zeta."""
    n = design.n_subjects
    eta, _ = linear_predictor(design, zeta)
    pen_grad = 2.0 * gamma * (design.penalty_mat @ zeta)
    if design.time_constant:
        w = np.exp(eta) if weights is None else np.exp(eta) * weights
        wx = w[:, None] * design.xtil
        S, V = _suffix_sums(design, w, wx)
        active = S > 0.0
        ratio = np.where(active, E / np.where(active, S, 1.0), 0.0)
        xbar = np.where(active[:, None], V / np.where(active, S, 1.0)[:, None], 0.0)
        grad = (ehat @ design.xtil - ratio @ V) / n - pen_grad
        # sum_k (E_k/S_k) M_k collapses to one weighted Gram through the
        # per-subject cumulative coefficient.
        cfull = np.concatenate([[0.0], np.cumsum(ratio)])
        coef = w * cfull[design.rstar_idx]
        g1 = (design.xtil * coef[:, None]).T @ design.xtil
        w2 = xbar * np.sqrt(E)[:, None]
        g2 = w2.T @ w2
        hess_neg = (g1 - g2) / n + 2.0 * gamma * design.penalty_mat
        return grad, hess_neg
    # general time-dependent path: loop-free einsums over the risk mask
    mask = design.risk_mask
    w = (np.exp(eta) if weights is None else np.exp(eta) * weights[:, None]) * mask
    S = w.sum(axis=0)
    active = S > 0.0
    Ssafe = np.where(active, S, 1.0)
    V = np.einsum("ik,ikd->kd", w, design.xtil)
    xbar = np.where(active[:, None], V / Ssafe[:, None], 0.0)
    ratio = np.where(active, E / Ssafe, 0.0)
    grad = (np.einsum("ik,ikd->d", ehat, design.xtil) - ratio @ V) / n - pen_grad
    m2 = np.einsum("ik,ikd,ike->kde", w, design.xtil, design.xtil)
    g1 = np.einsum("k,kde->de", ratio, m2)
    g2 = np.einsum("k,kd,ke->de", E, xbar, xbar)
    hess_neg = (g1 - g2) / n + 2.0 * gamma * design.penalty_mat
    return grad, hess_neg


def _factor_with_jitter(mat: np.ndarray):
    """Cholesky-factor a symmetric PSD matrix, escalating diagonal jitter."""
    d = mat.shape[0]
    try:
        return cho_factor(mat, lower=True)
    except LinAlgError:
        pass
    base = float(np.trace(mat)) / d
    if base <= 0.0:
        base = 1.0
    scale = JITTER_START
    eye = np.eye(d)
    while scale <= JITTER_MAX * (1.0 + 1e-12):
        try:
            return cho_factor(mat + scale * base * eye, lower=True)
        except LinAlgError:
            scale *= 10.0
    raise NumericalError(
        "working information singular after maximum jitter"
        f" (condition estimate {np.linalg.cond(mat):.3e})"
    )


def solve_with_jitter(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve a symmetric PSD system, escalating diagonal jitter on failure."""
    return cho_solve(_factor_with_jitter(mat), rhs)


def _zeta_step(design, estep, zeta, gamma, weights, constraint=None):
    """One damped Newton step on the working objective.

    Returns the accepted iterate; with a constraint the direction is
    restricted to the span of the null-space basis so feasibility is
    preserved algebraically.
    """
    if weights is None:
        E = estep.ep.sum(axis=0)
        if design.time_constant:
            ehat = estep.ep.sum(axis=1)
        else:
            ehat = estep.ep
    else:
        E = weights @ estep.ep
        if design.time_constant:
            ehat = estep.ep.sum(axis=1) * weights
        else:
            ehat = estep.ep * weights[:, None]
    grad, hess_neg = _working_grad_hess(design, zeta, E, ehat, gamma, weights)
    if constraint is None:
        if not np.any(grad):
            return zeta
        direction = solve_with_jitter(hess_neg, grad)
    else:
        a0 = constraint.A0
        grad_r = a0.T @ grad
        if not np.any(grad_r):
            return zeta
        direction = a0 @ solve_with_jitter(a0.T @ hess_neg @ a0, grad_r)
    base = _working_value(design, zeta, E, ehat, gamma, weights)
    tol = 1e-12 * (1.0 + abs(base))
    step = 1.0
    for _ in range(MAX_HALVINGS + 1):
        cand = zeta + step * direction
        if _working_value(design, cand, E, ehat, gamma, weights) >= base - tol:
            return cand
        step *= 0.5
    return zeta


def m_step_zeta(design, estep, state, gamma, subject_weights=None, constraint=None):
    """Update the concatenated parameter vector by one damped Newton step."""
    weights = _weights_vector(design, subject_weights)
    return _zeta_step(design, estep, state.zeta, gamma, weights, constraint)


def m_step_lambda(design, estep, zeta, subject_weights=None):
    """Closed-form update of the baseline jumps at the new parameters."""
    weights = _weights_vector(design, subject_weights)
    if weights is None:
        E = estep.ep.sum(axis=0)
    else:
        E = weights @ estep.ep
    eta, _ = linear_predictor(design, zeta)
    if design.time_constant:
        w = np.exp(eta) if weights is None else np.exp(eta) * weights
        S, _ = _suffix_sums(design, w)
    else:
        w = np.exp(eta) if weights is None else np.exp(eta) * weights[:, None]
        S = (w * design.risk_mask).sum(axis=0)
    lam = np.where(S > 0.0, E / np.where(S > 0.0, S, 1.0), 0.0)
    return np.minimum(lam, LAMBDA_CEILING)


def _divergent_jumps(design: DesignSet, active: np.ndarray) -> np.ndarray:
    """Jumps whose nonparametric maximizer is infinite, given active subjects.

    A jump diverges exactly when its risk set is nonempty and every member
    holds t_k inside its own censoring interval: each such subject's
    likelihood strictly increases in the jump, so the supremum is at
    infinity and the EM would crawl upward forever.
    """
    risk = design.risk_mask & active[:, None]
    outside = risk & ~design.bracket_mask
    return ~outside.any(axis=0) & risk.any(axis=0)


def _parameter_delta(design, zeta_new, zeta_old):
    """Maximum absolute parameter change, with the kernel block measured
    through its action Qc.

    The likelihood, the penalty and the fitted coefficient curve all
    depend on c only through Qc, so raw c coordinates lying in the
    near-null space of Q can drift for thousands of iterations without
    changing the fit; measuring the c block through Q stops at the point
    where every observable quantity has stabilized.
    """
    diff = zeta_new - zeta_old
    head = diff[: design.p + design.m]
    tail = design.Q @ diff[design.p + design.m :]
    return max(
        float(np.max(np.abs(head), initial=0.0)),
        float(np.max(np.abs(tail), initial=0.0)),
    )


def _project_feasible(zeta, constraint, rho):
    A = constraint.A
    resid = rho - A @ zeta
    return zeta + A.T @ np.linalg.solve(A @ A.T, resid)


def fit(
    design: DesignSet,
    gamma: float,
    tol: float = 5e-3,
    max_iter: int = 5000,
    *,
    init_zeta: np.ndarray | None = None,
    init_lam: np.ndarray | None = None,
    subject_weights: np.ndarray | None = None,
    constraint=None,
    rho: np.ndarray | None = None,
) -> FitState:
    """Run the EM to convergence in the maximum-absolute-change norm.

    Starts from zeta = 0 and uniform jumps 1/q unless warm-start values are
    supplied.  Jumps at grid points with an empty risk set are frozen at
    zero and excluded from the convergence norm.  Non-convergence within
    ``max_iter`` is reported through the ``converged`` flag.
    """
    weights = _weights_vector(design, subject_weights)
    q = design.q
    zeta = (
        np.zeros(design.dim) if init_zeta is None else np.array(init_zeta, dtype=float)
    )
    lam = np.full(q, 1.0 / q) if init_lam is None else np.array(init_lam, dtype=float)

    risk_w = np.ones(design.n_subjects) if weights is None else weights
    structural, _ = _suffix_sums(design, risk_w)
    empty = structural <= 0.0
    divergent = _divergent_jumps(design, risk_w > 0.0)
    frozen = empty | divergent
    lam[empty] = 0.0
    lam[divergent] = LAMBDA_CEILING

    max_violation = None
    if constraint is not None:
        if rho is None:
            raise ValueError("a constrained fit needs the target vector rho")
        rho = np.asarray(rho, dtype=float)
        zeta = _project_feasible(zeta, constraint, rho)
        max_violation = float(np.max(np.abs(constraint.A @ zeta - rho), initial=0.0))

    trace = []
    clamps = 0
    _, eta_clamps = linear_predictor(design, zeta)
    clamps += eta_clamps
    _, pll = observed_loglik(design, zeta, lam, gamma, subject_weights=weights)
    trace.append(pll)

    state = FitState(zeta=zeta, lam=lam)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        estep = e_step(design, state)
        zeta_new = _zeta_step(design, estep, state.zeta, gamma, weights, constraint)
        lam_new = m_step_lambda(design, estep, zeta_new, subject_weights=weights)
        lam_new[empty] = 0.0
        lam_new[divergent] = LAMBDA_CEILING
        if constraint is not None:
            viol = float(np.max(np.abs(constraint.A @ zeta_new - rho), initial=0.0))
            max_violation = max(max_violation, viol)
        delta = max(
            _parameter_delta(design, zeta_new, state.zeta),
            float(np.max(np.abs(lam_new[~frozen] - state.lam[~frozen]), initial=0.0)),
        )
        state.zeta, state.lam = zeta_new, lam_new
        _, eta_clamps = linear_predictor(design, zeta_new)
        clamps += eta_clamps
        ll, pll = observed_loglik(
            design, zeta_new, lam_new, gamma, subject_weights=weights
        )
        trace.append(pll)
        if delta < tol:
            converged = True
            break

    state.n_iter = it
    state.pll_trace = np.array(trace)
    state.converged = converged
    state.clamp_count = clamps
    state.loglik, state.penalized = observed_loglik(
        design, state.zeta, state.lam, gamma, subject_weights=weights
    )
    state.frozen = frozen
    state.max_constraint_violation = max_violation
    return state
