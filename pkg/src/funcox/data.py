"""Interval-censored observations, the jump-time grid, and design vectors.

The cumulative baseline hazard is treated as a step function with
nonnegative jumps at the distinct finite censoring endpoints.  Each subject
contributes a stacked design vector combining scalar covariates with its
columns of the B and Q Gram matrices; the observed log likelihood only ever
sees cumulative sums of jumps weighted by per-subject relative risks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .kernel import FunctionalCurve, GramMatrices

__all__ = [
    "DegenerateLikelihoodError",
    "DesignSet",
    "Observation",
    "TimeGrid",
    "build_design",
    "build_time_grid",
    "observed_loglik",
]

# Exponent guard bounds for relative risks (spec'd diagnostic clamp).
ETA_CLAMP = 700.0


class DegenerateLikelihoodError(ValueError):
    """A subject carries zero probability mass under the current fit."""

    def __init__(self, ids):
        self.ids = list(ids)
        super().__init__(
            "zero probability mass for subject(s): " + ", ".join(map(str, self.ids))
        )


@dataclass(frozen=True, eq=False)
class Observation:
    """One subject: censoring interval, scalar covariates, covariate curve.

    L is the last examination time before the event (0 when left-censored)
    and R the first examination at or after it (math.inf when
    right-censored), so the event time lies in (L, R].
    """

    id: str
    L: float
    R: float
    x: np.ndarray
    z: FunctionalCurve

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "L", float(self.L))
        object.__setattr__(self, "R", float(self.R))
        if not (0.0 <= self.L < self.R):
            raise ValueError(f"subject {self.id}: need 0 <= L < R")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"subject {self.id}: scalar covariates must be finite")

    @property
    def right_censored(self) -> bool:
        return math.isinf(self.R)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Jump support 0 = t_0 < t_1 < ... < t_q of the baseline hazard."""

    t: np.ndarray
    q: int

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, "t", t)
        if t[0] != 0.0 or np.any(np.diff(t) <= 0.0):
            raise ValueError("time grid must start at 0 and strictly increase")
        if len(t) != self.q + 1:
            raise ValueError("grid length must equal q + 1")


def build_time_grid(obs) -> TimeGrid:
    """Sorted deduplicated union of {0}, positive L's, and finite R's."""
    if not obs:
        raise ValueError("no observations")
    points = set()
    for o in obs:
        if o.L > 0.0:
            points.add(o.L)
        if not math.isinf(o.R):
            points.add(o.R)
    if not points:
        raise ValueError(
            "degenerate likelihood: every subject has L = 0 and R = infinity"
        )
    t = np.concatenate([[0.0], np.sort(np.array(list(points), dtype=float))])
    return TimeGrid(t=t, q=len(points))


@dataclass(frozen=True, eq=False)
class DesignSet:
    """Immutable fitting inputs shared by the EM, tuning and inference code.

    xtil is (n, dim) when scalar covariates are time-constant, or
    (n, q, dim) when per-(subject, jump-time) values were injected.  Index
    arrays locate each subject's censoring endpoints on the grid: li_idx /
    ri_idx point at the largest t_k <= L_i / R_i (ri_idx == -1 encodes an
    infinite R), and rstar_idx locates R*_i = R_i if finite else L_i.
    """

    grid: TimeGrid
    xtil: np.ndarray
    p: int
    m: int
    n_curves: int
    li_idx: np.ndarray
    ri_idx: np.ndarray
    rstar: np.ndarray
    rstar_idx: np.ndarray
    penalty_mat: np.ndarray
    Q: np.ndarray
    ids: tuple = field(default=())

    @property
    def n_subjects(self) -> int:
        return self.xtil.shape[0]

    @property
    def dim(self) -> int:
        return self.xtil.shape[-1]

    @property
    def q(self) -> int:
        return self.grid.q

    @property
    def time_constant(self) -> bool:
        return self.xtil.ndim == 2

    def c_block(self, zeta: np.ndarray) -> np.ndarray:
        """Kernel-coefficient slice of a concatenated parameter vector."""
        return zeta[self.p + self.m :]

    def xtil_at(self, k: int) -> np.ndarray:
        """Design rows at jump time t_k (k is 1-based on the grid)."""
        if self.time_constant:
            return self.xtil
        return self.xtil[:, k - 1, :]

    # Risk sets over jump times are nested; these static orderings let all
    # risk-set sums be taken as suffix sums over subjects sorted by R*.
    @cached_property
    def risk_order(self) -> np.ndarray:
        return np.argsort(self.rstar_idx, kind="stable")

    @cached_property
    def risk_pos(self) -> np.ndarray:
        sorted_idx = self.rstar_idx[self.risk_order]
        return np.searchsorted(sorted_idx, np.arange(1, self.q + 1), side="left")

    @cached_property
    def bracket_mask(self) -> np.ndarray:
        """(n, q) indicator of L_i < t_k <= R_i with R_i finite."""
        k = np.arange(1, self.q + 1)
        return (
            (self.ri_idx[:, None] >= 0)
            & (k[None, :] > self.li_idx[:, None])
            & (k[None, :] <= self.ri_idx[:, None])
        )

    @cached_property
    def risk_mask(self) -> np.ndarray:
        """(n, q) indicator of R*_i >= t_k."""
        k = np.arange(1, self.q + 1)
        return self.rstar_idx[:, None] >= k[None, :]


def _grid_index(t: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Index of the largest grid point <= value, for each value."""
    return np.searchsorted(t, values, side="right") - 1


def build_design(
    obs,
    gram: GramMatrices,
    grid: TimeGrid,
    x_of_t: np.ndarray | None = None,
) -> DesignSet:
    """Stack covariates with Gram columns into per-subject design vectors.

    Parameters
    ----------
    obs : list of Observation
        Same subjects, in the same order, used to compute ``gram``.
    gram : GramMatrices
        B and Q from the subjects' covariate curves.
    grid : TimeGrid
        Jump support of the baseline hazard.
    x_of_t : ndarray, optional
        (n, q, p) array of piecewise-constant scalar-covariate values at
        each jump time, for programmatic time-dependent designs.  When
        omitted the per-subject ``x`` is used at every jump time.
    """
    n = len(obs)
    m, n_curves = gram.B.shape
    if n != n_curves:
        raise ValueError(
            f"observation count {n} does not match gram columns {n_curves}"
        )
    p = obs[0].x.size
    if any(o.x.size != p for o in obs):
        raise ValueError("all subjects must share the scalar covariate dimension")

    L = np.array([o.L for o in obs])
    R = np.array([o.R for o in obs])
    li_idx = _grid_index(grid.t, L)
    finite_R = np.isfinite(R)
    ri_idx = np.where(finite_R, _grid_index(grid.t, np.where(finite_R, R, 0.0)), -1)
    rstar = np.where(finite_R, R, L)
    rstar_idx = np.where(finite_R, ri_idx, li_idx)

    bq = np.hstack([gram.B.T, gram.Q.T])
    if x_of_t is None:
        X = np.stack([o.x for o in obs])
        xtil = np.hstack([X, bq])
    else:
        x_of_t = np.asarray(x_of_t, dtype=float)
        if x_of_t.shape != (n, grid.q, p):
            raise ValueError("x_of_t must have shape (n, q, p)")
        xtil = np.concatenate(
            [x_of_t, np.broadcast_to(bq[:, None, :], (n, grid.q, m + n_curves))],
            axis=2,
        )

    dim = p + m + n_curves
    penalty = np.zeros((dim, dim))
    penalty[p + m :, p + m :] = gram.Q
    return DesignSet(
        grid=grid,
        xtil=xtil,
        p=p,
        m=m,
        n_curves=n_curves,
        li_idx=li_idx,
        ri_idx=ri_idx.astype(int),
        rstar=rstar,
        rstar_idx=rstar_idx.astype(int),
        penalty_mat=penalty,
        Q=gram.Q,
        ids=tuple(o.id for o in obs),
    )


def linear_predictor(design: DesignSet, zeta: np.ndarray):
    """Clamped linear predictors and the number of clamped entries.

    Returns an (n,) array for time-constant designs, (n, q) otherwise.
    """
    eta = design.xtil @ zeta
    clamped = int(np.count_nonzero(np.abs(eta) > ETA_CLAMP))
    if clamped:
        eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    return eta, clamped


def cumulative_hazards(design: DesignSet, zeta: np.ndarray, lam: np.ndarray):
    """Per-subject cumulative hazards at L_i and R_i plus clamp count.

    The hazard at R_i is +inf for right-censored subjects.
    """
    eta, clamped = linear_predictor(design, zeta)
    if design.time_constant:
        w = np.exp(eta)
        cum = np.concatenate([[0.0], np.cumsum(lam)])
        haz_L = w * cum[design.li_idx]
        haz_R = np.where(
            design.ri_idx >= 0, w * cum[np.maximum(design.ri_idx, 0)], np.inf
        )
    else:
        terms = lam[None, :] * np.exp(eta)
        cum = np.concatenate(
            [np.zeros((design.n_subjects, 1)), np.cumsum(terms, axis=1)], axis=1
        )
        rows = np.arange(design.n_subjects)
        haz_L = cum[rows, design.li_idx]
        haz_R = np.where(design.ri_idx >= 0, cum[rows, design.ri_idx], np.inf)
    return haz_L, haz_R, clamped


def subject_logliks(design: DesignSet, zeta: np.ndarray, lam: np.ndarray):
    """Observed log likelihood of each subject (may contain -inf)."""
    haz_L, haz_R, clamped = cumulative_hazards(design, zeta, lam)
    gap = haz_R - haz_L
    with np.errstate(divide="ignore", invalid="ignore"):
        interval_term = np.log(-np.expm1(-gap))
    ll = -haz_L + np.where(np.isinf(haz_R), 0.0, interval_term)
    return ll, clamped


def observed_loglik(
    design: DesignSet,
    zeta: np.ndarray,
    lam: np.ndarray,
    gamma: float,
    subject_weights: np.ndarray | None = None,
):
    """Average observed log likelihood and its penalized counterpart.

    The subject average is accumulated with ``math.fsum`` so the result is
    exactly invariant to subject permutations.  Subjects whose censoring
    interval carries no probability mass are reported by id.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0.0):
        raise ValueError("baseline jumps must be nonnegative")
    ll, _ = subject_logliks(design, zeta, lam)
    if subject_weights is None:
        active = np.ones(design.n_subjects, dtype=bool)
        terms = ll
    else:
        subject_weights = np.asarray(subject_weights, dtype=float)
        active = subject_weights > 0.0
        terms = subject_weights * np.where(active, ll, 0.0)
    bad = active & ~np.isfinite(ll)
    if np.any(bad):
        ids = design.ids if design.ids else tuple(range(design.n_subjects))
        raise DegenerateLikelihoodError([ids[i] for i in np.flatnonzero(bad)])
    loglik = math.fsum(terms.tolist()) / design.n_subjects
    c = design.c_block(np.asarray(zeta, dtype=float))
    penalized = loglik - gamma * float(c @ design.Q @ c)
    return loglik, penalized
