"""Joint-distribution validation of the Gibbs sweep (Geweke-style).

Two samplers target the same joint law of (parameters, latent paths,
locations): the marginal-conditional one draws everything forward from the
prior; the successive-conditional one alternates a full Gibbs sweep with
regeneration of the locations given the current latent state.  If every
update is correct, tracked scalar functionals have identical marginals
under both samplers.

Only feasible at small truncation levels: the forward simulator
materializes transition rows over the whole label space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .base_measure import PriorConfig, apply_mode, dirichlet_weights
from .hmm import Registry, RowContext, RowSet, Trajectory, sample_initial_state
from .sampler import (
    AnimalState,
    ChainState,
    HyperState,
    McmcConfig,
    SpaceState,
    _draw_tables,
    _refresh_contexts,
    _rng,
    run_sweep,
)
from .stap import StapParams, bearing_angle, stap_sample

__all__ = ["TrackShell", "geweke_functionals", "marginal_conditional", "successive_conditional", "geweke_zscores"]

_MAX_DENSE_LABELS = 100_000


@dataclass
class TrackShell:
    """Fixed skeleton of one simulated track: id, length, first location."""

    animal_id: str
    T: int
    start: np.ndarray


def _comp_beta_full(space, beta: np.ndarray) -> np.ndarray:
    """Composite weights of every label in lexicographic order."""
    n = space.n_labels
    if n > _MAX_DENSE_LABELS:
        raise ValueError("label space too large for dense prior simulation")
    out = np.ones(n)
    for r in range(n):
        lab = space.unrank(r + 1)
        for f, c in enumerate(lab):
            out[r] *= beta[f][c]
    return out


def _simulate_prior_state(shells, priors: PriorConfig, cfg: McmcConfig, rng) -> ChainState:
    """One exact draw of (hyperparameters, sticks, atoms, rows, paths,
    locations) from the forward model, loaded into a chain state."""
    spaces_raw, owner = apply_mode(cfg.mode, len(shells), priors.L)
    n_fams = spaces_raw[0].n_families
    a, b = priors.gamma_prior
    gammas = [rng.gamma(a, 1.0 / b, size=n_fams) for _ in range(len(spaces_raw))]
    ca, cb = priors.conc_prior
    conc = float(rng.gamma(ca, 1.0 / cb))
    fa, fb = priors.frac_prior
    frac = float(rng.beta(fa, fb))
    hyper = HyperState(gammas, conc, frac)
    alpha, nu = hyper.alpha, hyper.nu

    spaces = []
    comp_full = []
    for si, sp in enumerate(spaces_raw):
        atoms = _draw_tables(sp, priors, rng)
        beta = np.stack([dirichlet_weights(float(g), priors.L, rng) for g in gammas[si]])
        spaces.append(SpaceState(sp, Registry(sp), atoms, beta))
        comp_full.append(_comp_beta_full(sp, beta))

    x0, x1, y0, y1 = priors.domain
    animals = []
    dense_rows: list[dict] = [dict() for _ in spaces]
    for ai, shell in enumerate(shells):
        si = owner[ai]
        sp = spaces[si]
        space = sp.space
        n = space.n_labels

        def row_of(src_rank0: int) -> np.ndarray:
            row = dense_rows[si].get((ai, src_rank0))
            if row is None:
                c = alpha * comp_full[si].copy()
                c[src_rank0] += nu
                g = rng.gamma(np.maximum(c, 1e-300))
                tot = g.sum()
                if tot <= 0:
                    g = np.zeros(n)
                    g[int(np.argmax(c))] = 1.0
                    tot = 1.0
                row = g / tot
                dense_rows[si][(ai, src_rank0)] = row
            return row

        T = shell.T
        zr = np.empty(T, dtype=np.int64)  # 0-based ranks
        zr[0] = sample_initial_state(priors.epsilon, rng, max_rank=n) - 1
        for t in range(1, T):
            row = row_of(int(zr[t - 1]))
            zr[t] = int(np.searchsorted(np.cumsum(row), rng.uniform() * row.sum()))
            zr[t] = min(zr[t], n - 1)

        s0 = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        locs = np.zeros((T, 2))
        locs[0] = shell.start
        comps = sp.registry  # filled below
        phi_prev = bearing_angle(s0, locs[0], fallback=0.0)
        for t in range(1, T):
            lab = space.unrank(int(zr[t]) + 1)
            pmu, peta, psig, ptau, prho = space.project(lab)
            theta = StapParams(
                sp.atoms["mu"][pmu], sp.atoms["eta"][peta], sp.atoms["sigma"][psig],
                float(sp.atoms["tau"][ptau]), float(sp.atoms["rho"][prho]),
            )
            locs[t] = stap_sample(theta, locs[t - 1], phi_prev, rng)
            phi_prev = bearing_angle(locs[t - 1], locs[t], fallback=phi_prev)

        traj = Trajectory(shell.animal_id, np.arange(T, dtype=np.int64) * 60, locs.copy())
        z = np.array([sp.registry.gid(space.unrank(int(r) + 1)) for r in zr], dtype=np.int64)
        animals.append(
            AnimalState(traj, ai, si, locs, s0, np.array([], dtype=np.int64), z)
        )

    state = ChainState(spaces, animals, hyper, priors, cfg)
    _refresh_contexts(state)
    for an in state.animals:
        sp = state.spaces[an.space_idx]
        reg = sp.registry
        K = len(reg)
        rs = RowSet(sp.ctx)
        rs._grow(K)
        rs.cols_done = K
        comp = sp.ctx.comp_beta()
        sources = {int(g) for g in an.z[:-1]}
        for g in sources:
            rank0 = reg.space.rank(reg.labels[g]) - 1
            dense = dense_rows[an.space_idx][(an.idx, rank0)]
            for g2 in range(K):
                rs.probs[g, g2] = dense[reg.space.rank(reg.labels[g2]) - 1]
            rs.rest[g] = max(0.0, 1.0 - rs.probs[g, :K].sum())
            rs.rest_conc[g] = hyper.alpha * max(0.0, 1.0 - comp[:K].sum())
            rs.alive[g] = True
        an.rowset = rs
    return state


def _regenerate_locations(state: ChainState, rng) -> None:
    """Redraw every location after the first, holding paths and parameters."""
    from .stap import bearing_angles

    for an in state.animals:
        sp = state.spaces[an.space_idx]
        comps = sp.registry.physical_components()
        phi_prev = bearing_angle(an.s0, an.locs[0], fallback=0.0)
        for t in range(1, an.T):
            pmu, peta, psig, ptau, prho = comps[an.z[t]]
            theta = StapParams(
                sp.atoms["mu"][pmu], sp.atoms["eta"][peta], sp.atoms["sigma"][psig],
                float(sp.atoms["tau"][ptau]), float(sp.atoms["rho"][prho]),
            )
            an.locs[t] = stap_sample(theta, an.locs[t - 1], phi_prev, rng)
            phi_prev = bearing_angle(an.locs[t - 1], an.locs[t], fallback=phi_prev)
        an.phi = bearing_angles(an.locs, an.s0)


def geweke_functionals(state: ChainState) -> dict:
    """Scalar functionals tracked by the two-sampler comparison."""
    out = {}
    for si, g in enumerate(state.hyper.gammas):
        for f, name in enumerate(state.spaces[si].space.family_names):
            out[f"gamma_{name}_{si}"] = float(g[f])
    out["conc_total"] = float(state.hyper.conc_total)
    out["sticky_frac"] = float(state.hyper.sticky_frac)
    sp0 = state.spaces[0]
    out["tau_atom0"] = float(sp0.atoms["tau"][0])
    rho = sp0.atoms["rho"]
    out["rho_spike_frac"] = float(np.mean((rho == 0.0) | (rho == 1.0)))
    for an in state.animals:
        out[f"k_{an.traj.animal_id}"] = float(np.unique(an.z).size)
        _, cnt = np.unique(an.z[1:], return_counts=True)
        out[f"top_{an.traj.animal_id}"] = float(cnt.max() / (an.T - 1))
    return out


def marginal_conditional(shells, priors: PriorConfig, cfg: McmcConfig, n: int, seed: int):
    """Independent prior-forward draws of the tracked functionals."""
    rows = []
    for i in range(n):
        rng = _rng(seed, 1, i)
        state = _simulate_prior_state(shells, priors, cfg, rng)
        rows.append(geweke_functionals(state))
    return rows


def successive_conditional(shells, priors: PriorConfig, cfg: McmcConfig, n: int, seed: int):
    """Gibbs sweeps alternated with location regeneration, started from an
    exact prior draw."""
    rng0 = _rng(seed, 2, 0)
    state = _simulate_prior_state(shells, priors, cfg, rng0)
    rows = []
    for sweep in range(1, n + 1):
        run_sweep(state, sweep)
        _regenerate_locations(state, _rng(cfg.seed, sweep, 99))
        rows.append(geweke_functionals(state))
    return rows


def _batch_se(x: np.ndarray, n_batches: int = 30) -> float:
    m = len(x) // n_batches
    if m < 2:
        return float(x.std(ddof=1) / math.sqrt(len(x)))
    means = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches))


def geweke_zscores(mc_rows, sc_rows, burn_frac: float = 0.1) -> dict:
    """Two-sample z-scores per functional: iid SE on the prior side,
    batch-means SE on the chain side."""
    burn = int(len(sc_rows) * burn_frac)
    sc_rows = sc_rows[burn:]
    out = {}
    for key in mc_rows[0]:
        a = np.array([r[key] for r in mc_rows], dtype=float)
        b = np.array([r[key] for r in sc_rows], dtype=float)
        se = math.sqrt(a.var(ddof=1) / len(a) + _batch_se(b) ** 2)
        if se == 0.0:
            out[key] = 0.0 if a.mean() == b.mean() else np.inf
        else:
            out[key] = float((a.mean() - b.mean()) / se)
    return out
