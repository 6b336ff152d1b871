import numpy as np
import pytest

from funcox.data import Observation, build_design, build_time_grid
from funcox.kernel import FunctionalCurve, KernelContext, compute_gram
from funcox.simulation import SimConfig, _subject_rng, gen_dataset


@pytest.fixture
def grid101():
    return np.linspace(0.0, 1.0, 101)


def make_curve(values, grid=None):
    if grid is None:
        grid = np.linspace(0.0, 1.0, len(values))
    return FunctionalCurve(grid=np.asarray(grid, float), values=np.asarray(values, float))


def constant_curve(value, size=101):
    return make_curve(np.full(size, float(value)))


def sim_design(n, v, seed, m=2, omega=1.0):
    """Simulated dataset assembled into a ready-to-fit design."""
    cfg = SimConfig(n=n, v=v, replicates=1, seed=seed, omega=omega, m=m)
    rng = _subject_rng(seed, 0)
    obs, _ = gen_dataset(cfg, rng)
    curves = [o.z for o in obs]
    ctx = KernelContext.for_grid(m, obs[0].z.grid)
    gram = compute_gram(ctx, curves)
    design = build_design(obs, gram, build_time_grid(obs))
    return design, ctx, curves, obs


def scalar_design(L, R, x, lam_grid=None):
    """Hand-built design with scalar covariates only (no functional part).

    Useful for instances small enough to verify against hand arithmetic;
    the kernel blocks are absent (m and n_curves read as zero-dim blocks).
    """
    from funcox.data import DesignSet, TimeGrid

    L = np.asarray(L, float)
    R = np.asarray(R, float)
    x = np.atleast_2d(np.asarray(x, float))
    n, p = x.shape
    points = sorted(
        {float(v) for v in L if v > 0.0} | {float(v) for v in R if np.isfinite(v)}
    )
    t = np.concatenate([[0.0], points]) if lam_grid is None else np.asarray(lam_grid)
    grid = TimeGrid(t=t, q=len(t) - 1)
    li = np.searchsorted(grid.t, L, side="right") - 1
    finite = np.isfinite(R)
    ri = np.where(finite, np.searchsorted(grid.t, np.where(finite, R, 0.0), side="right") - 1, -1)
    rstar_idx = np.where(finite, ri, li)
    return DesignSet(
        grid=grid,
        xtil=x,
        p=p,
        m=0,
        n_curves=0,
        li_idx=li.astype(int),
        ri_idx=ri.astype(int),
        rstar=np.where(finite, R, L),
        rstar_idx=rstar_idx.astype(int),
        penalty_mat=np.zeros((p, p)),
        Q=np.zeros((0, 0)),
        ids=tuple(str(i) for i in range(n)),
    )
