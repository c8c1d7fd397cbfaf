"""Blocked Gibbs / Metropolis-within-Gibbs sampler for the shared-behavior model.

One sweep updates, in order: every animal's latent path (one beam refresh
plus one single-site scan per parameter family), the sparse transition
rows, the table/override auxiliaries, the five stick-weight vectors, the
stick concentrations, the self-transition fraction and total concentration,
every occupied atom (conjugate or Metropolis), and finally the imputed
locations and pre-initial points.

Within a sweep, slice drawing and label instantiation run in a shared phase
so that per-animal path updates depend only on their own RNG streams;
updates for different animals therefore commute bitwise.  RNG streams are
derived from (seed, sweep, phase, entity), never from call order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import hmm as hmm_mod
from .base_measure import FAMILIES, LabelSpace, PriorConfig, apply_mode, draw_atom
from .hmm import (
    Registry,
    RowContext,
    RowSet,
    Trajectory,
    run_beam,
    run_split,
    truncated_geometric_log_pmf,
)
from .stap import StapParams, bearing_angle, bearing_angles, stap_logpdf, stap_logpdf_series

__all__ = [
    "McmcConfig",
    "HyperState",
    "AuxiliaryVars",
    "ChainState",
    "DrawRecord",
    "PosteriorDraws",
    "EmissionAssignments",
    "init_state",
    "run_chain",
    "run_sweep",
    "sample_aux_tables",
    "sample_beta_vectors",
    "sample_gamma",
    "escobar_west_mixture_odds",
    "sample_sticky_fraction",
    "sample_concentration_total",
    "sample_mu_atom",
    "sample_eta_atom",
    "sample_tau_atom",
    "sample_sigma_atom",
    "sample_rho_atom",
    "rho_log_target",
    "missing_location_log_target",
    "sample_missing_location",
    "complete_loglik",
    "n_recorded_draws",
]


# ---------------------------------------------------------------------------
# configuration and state containers
# ---------------------------------------------------------------------------


@dataclass
class McmcConfig:
    iterations: int = 15000
    burnin: int = 7500
    thin: int = 3
    seed: int = 0
    mode: str = "m1"
    rho_proposal_scale: float = 0.1
    missing_proposal_scale: float = 1.0
    init_rank_cap: int = hmm_mod.DEFAULT_INIT_RANK_CAP
    expand_budget: int = 64
    gamma_method: str = "exact"
    init_hyper_floor: float = 0.1
    init_k: int = 8
    progress_every: int = 0

    def validate(self) -> None:
        if not 0 <= self.burnin < self.iterations:
            raise ValueError("burnin must be smaller than iterations")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.mode not in ("m1", "m2", "m3"):
            raise ValueError("mode must be m1, m2 or m3")
        if self.gamma_method not in ("exact", "escobar_west"):
            raise ValueError("gamma_method must be 'exact' or 'escobar_west'")
        if self.rho_proposal_scale <= 0 or self.missing_proposal_scale <= 0:
            raise ValueError("proposal scales must be positive")


def n_recorded_draws(iterations: int, burnin: int, thin: int) -> int:
    """How many states a run stores: sweeps past burn-in, every thin-th."""
    return max(0, (iterations - burnin)) // thin


@dataclass
class HyperState:
    """Stick concentrations plus the sticky decomposition of alpha + nu."""

    gammas: list  # per space: (n_families,) array
    conc_total: float
    sticky_frac: float

    @property
    def alpha(self) -> float:
        return self.conc_total * (1.0 - self.sticky_frac)

    @property
    def nu(self) -> float:
        return self.conc_total * self.sticky_frac


@dataclass
class SpaceState:
    space: LabelSpace
    registry: Registry
    atoms: dict  # physical family name -> (L, ...) array
    beta: np.ndarray  # (n_families, L)
    ctx: RowContext | None = None


@dataclass
class AnimalState:
    traj: Trajectory
    idx: int
    space_idx: int
    locs: np.ndarray  # (T, 2) working copy, missing values imputed
    s0: np.ndarray
    missing_idx: np.ndarray
    z: np.ndarray  # (T,) label gids
    rowset: RowSet | None = None
    phi: np.ndarray | None = None
    emis: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.locs.shape[0]


@dataclass
class ChainState:
    spaces: list
    animals: list
    hyper: HyperState
    priors: PriorConfig
    cfg: McmcConfig

    @property
    def alpha(self):
        return self.hyper.alpha

    @property
    def nu(self):
        return self.hyper.nu


@dataclass
class AuxiliaryVars:
    """Tally aggregates from the table/override augmentation."""

    tables: list  # per animal: dict (src_gid, dst_gid) -> table count b
    overrides: list  # per animal: dict src_gid -> override count w
    bbar: list  # per space: (n_families, L) dish tallies
    total_tables: float
    total_overrides: float
    row_totals: list  # per animal: dict src_gid -> transition count


@dataclass
class DrawRecord:
    sweep: int
    labels: list
    betas: list
    gammas: list
    atoms: list
    conc_total: float
    sticky_frac: float
    paths: list
    rows: list
    s0: list
    imputed: list
    loglik: float
    k_nonempty: list


@dataclass
class PosteriorDraws:
    records: list
    meta: dict

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# rng discipline
# ---------------------------------------------------------------------------


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, *key))))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _interpolate_missing(locs: np.ndarray) -> np.ndarray:
    """Fill NaN fixes by straight-line interpolation between observed ones."""
    out = locs.copy()
    tgrid = np.arange(out.shape[0], dtype=float)
    good = np.isfinite(out).all(axis=1)
    for c in range(2):
        out[~good, c] = np.interp(tgrid[~good], tgrid[good], out[good, c])
    return out


def _draw_hyper(priors: PriorConfig, n_spaces: int, n_fams: int, rng, floor: float):
    a, b = priors.gamma_prior
    gammas = [np.maximum(rng.gamma(a, 1.0 / b, size=n_fams), floor) for _ in range(n_spaces)]
    ca, cb = priors.conc_prior
    conc = max(float(rng.gamma(ca, 1.0 / cb)), floor)
    fa, fb = priors.frac_prior
    frac = float(rng.beta(fa, fb))
    if floor > 0.0:
        frac = min(max(frac, 0.01), 0.99)
    return gammas, conc, frac


def _draw_tables(space: LabelSpace, priors: PriorConfig, rng) -> dict:
    L = priors.L
    atoms = {
        "mu": np.stack([draw_atom("mu", priors, rng) for _ in range(L)]),
        "eta": np.stack([draw_atom("eta", priors, rng) for _ in range(L)]),
        "sigma": np.stack([draw_atom("sigma", priors, rng) for _ in range(L)]),
        "tau": np.array([draw_atom("tau", priors, rng) for _ in range(L)]),
        "rho": np.array([draw_atom("rho", priors, rng) for _ in range(L)]),
    }
    return atoms


def _draw_beta(gammas: np.ndarray, L: int, rng) -> np.ndarray:
    from .base_measure import dirichlet_weights

    return np.stack([dirichlet_weights(float(g), L, rng) for g in gammas])


def init_state(data: list, priors: PriorConfig, cfg: McmcConfig) -> ChainState:
    """Prior-seeded chain state with paths parked on the rank-1 label."""
    priors.validate()
    cfg.validate()
    spaces_raw, owner = apply_mode(cfg.mode, len(data), priors.L)
    seed = cfg.seed
    n_fams = spaces_raw[0].n_families
    rng0 = _rng(seed, 0, 0)
    gammas, conc, frac = _draw_hyper(priors, len(spaces_raw), n_fams, rng0, cfg.init_hyper_floor)
    hyper = HyperState(gammas, conc, frac)

    spaces = []
    for si, sp in enumerate(spaces_raw):
        rng_s = _rng(seed, 0, 1, si)
        atoms = _draw_tables(sp, priors, rng_s)
        beta = _draw_beta(gammas[si], priors.L, rng_s)
        spaces.append(SpaceState(sp, Registry(sp), atoms, beta))

    x0, x1, y0, y1 = priors.domain
    animals = []
    for ai, traj in enumerate(data):
        traj.validate()
        locs = _interpolate_missing(traj.locs)
        missing = np.where(~traj.observed)[0].astype(np.int64)
        if traj.s0 is not None:
            s0 = traj.s0.copy()
        else:
            s0 = 2.0 * locs[0] - locs[1]
        s0 = np.clip(s0, [x0, y0], [x1, y1])
        sp = spaces[owner[ai]]
        # disperse the initial path over a handful of low-rank labels; a
        # single-label start loads all self-transition counts onto one row
        # and the slice sampler then struggles to admit anything fresh
        rng_z = _rng(seed, 0, 3, ai)
        k0 = max(1, min(cfg.init_k, sp.space.n_labels))
        gids = np.array([sp.registry.gid(sp.space.unrank(r)) for r in range(1, k0 + 1)])
        z = gids[rng_z.integers(k0, size=len(traj))]
        animals.append(AnimalState(traj, ai, owner[ai], locs, s0, missing, z))

    state = ChainState(spaces, animals, hyper, priors, cfg)
    _refresh_contexts(state)
    for an in state.animals:
        rng_a = _rng(seed, 0, 2, an.idx)
        counts = _path_counts(an.z)
        an.rowset = RowSet(state.spaces[an.space_idx].ctx)
        an.rowset.ensure_rows(sorted({s for s, _ in counts}), rng_a, counts)
    return state


def _refresh_contexts(state: ChainState) -> None:
    for si, sp in enumerate(state.spaces):
        sp.ctx = RowContext(sp.beta, state.alpha, state.nu, sp.registry)


def _path_counts(z: np.ndarray) -> dict:
    pairs, counts = np.unique(np.stack([z[:-1], z[1:]]), axis=1, return_counts=True)
    return {(int(s), int(d)): int(n) for (s, d), n in zip(pairs.T, counts)}


# ---------------------------------------------------------------------------
# emission cache
# ---------------------------------------------------------------------------


def _emission_columns(an: AnimalState, sp: SpaceState, gids) -> np.ndarray:
    comps = sp.registry.physical_components()
    T = an.T
    out = np.zeros((T, len(gids)))
    for j, g in enumerate(gids):
        pmu, peta, psig, ptau, prho = comps[g]
        col = stap_logpdf_series(
            sp.atoms["mu"][pmu],
            sp.atoms["eta"][peta],
            sp.atoms["sigma"][psig],
            float(sp.atoms["tau"][ptau]),
            float(sp.atoms["rho"][prho]),
            an.locs[1:],
            an.locs[:-1],
            an.phi[:-1],
        )
        if not np.isfinite(col).all():
            t_bad = int(np.where(~np.isfinite(col))[0][0]) + 1
            raise RuntimeError(
                f"non-finite emission log-density: animal {an.traj.animal_id!r}, "
                f"time index {t_bad}, label {sp.registry.labels[g]}"
            )
        out[1:, j] = col
    return out


def _refresh_emissions(state: ChainState) -> None:
    for an in state.animals:
        sp = state.spaces[an.space_idx]
        an.phi = bearing_angles(an.locs, an.s0)
        K = len(sp.registry)
        an.emis = _emission_columns(an, sp, range(K))


def _extend_emissions(an: AnimalState, sp: SpaceState) -> None:
    K = len(sp.registry)
    have = an.emis.shape[1]
    if K > have:
        extra = _emission_columns(an, sp, range(have, K))
        an.emis = np.concatenate([an.emis, extra], axis=1)


# ---------------------------------------------------------------------------
# path phase
# ---------------------------------------------------------------------------


def _paths_pass(state: ChainState, kind, sweep: int, pass_idx: int) -> None:
    """One path pass (beam refresh or one family's split scan) for all animals."""
    cfg = state.cfg
    eps = state.priors.epsilon
    by_space: dict = {}
    for an in state.animals:
        by_space.setdefault(an.space_idx, []).append(an)

    slices = {}
    for si, ans in by_space.items():
        for an in ans:
            rng_a = _rng(cfg.seed, sweep, 10 + pass_idx, an.idx)
            u, bound = hmm_mod.draw_slices(an.z, an.rowset, eps, rng_a)
            slices[an.idx] = (u, bound, rng_a)

    for si, ans in by_space.items():
        sp = state.spaces[si]
        rng_x = _rng(cfg.seed, sweep, 10 + pass_idx, 100000 + si)
        ans_stable = sorted(ans, key=lambda a: a.idx)
        for an in ans_stable:
            hmm_mod.instantiate_ranks(sp.registry, min(slices[an.idx][1], cfg.init_rank_cap))
        rowsets = [an.rowset for an in ans_stable]
        u_mins = [slices[an.idx][0][1:].min() if an.T > 1 else 1.0 for an in ans_stable]
        hmm_mod.expand_labels(sp.registry, rowsets, u_mins, rng_x, cfg.expand_budget)

    for si, ans in by_space.items():
        sp = state.spaces[si]
        for an in ans:
            u, bound, rng_a = slices[an.idx]
            _extend_emissions(an, sp)
            for attempt in range(hmm_mod._MAX_SLICE_RETRIES):
                zprop = an.z.copy()
                if kind == "beam":
                    ok = run_beam(zprop, an.emis, an.rowset, u, bound, rng_a)
                else:
                    ok = run_split(zprop, an.emis, an.rowset, int(kind), u, bound, rng_a)
                if ok:
                    an.z = zprop
                    break
                u, bound = hmm_mod.draw_slices(an.z, an.rowset, eps, rng_a)
            else:
                raise RuntimeError(
                    f"path update kept failing for animal {an.traj.animal_id!r}"
                )


def _garbage_collect(state: ChainState) -> None:
    """Drop labels no path references and remap everything that indexes them."""
    for si, sp in enumerate(state.spaces):
        used = sorted(
            {int(g) for an in state.animals if an.space_idx == si for g in np.unique(an.z)}
        )
        if len(used) == len(sp.registry):
            continue
        remap = {g: i for i, g in enumerate(used)}
        new_reg = Registry(sp.space)
        for g in used:
            new_reg.gid(sp.registry.labels[g])
        sp.registry = new_reg
        for an in state.animals:
            if an.space_idx == si:
                an.z = np.array([remap[int(g)] for g in an.z], dtype=np.int64)
                an.rowset = None
                an.emis = None


def _resample_rows(state: ChainState, sweep: int) -> None:
    _refresh_contexts(state)
    for an in state.animals:
        rng_a = _rng(state.cfg.seed, sweep, 30, an.idx)
        counts = _path_counts(an.z)
        an.rowset = RowSet(state.spaces[an.space_idx].ctx)
        an.rowset.ensure_rows(sorted({s for s, _ in counts}), rng_a, counts)


# ---------------------------------------------------------------------------
# auxiliary tables and stick updates
# ---------------------------------------------------------------------------


def table_count(n: int, conc: float, rng) -> int:
    """Number of urn tables serving ``n`` customers at concentration ``conc``.

    Sequential seat indicators: customer h opens a table with probability
    conc / (h - 1 + conc); the first always does.
    """
    if n <= 0:
        return 0
    if n == 1 or conc <= 0.0:
        return 1
    h = np.arange(1, n, dtype=float)
    return 1 + int((rng.uniform(size=n - 1) < conc / (h + conc)).sum())


def sample_aux_tables(state: ChainState, rng) -> AuxiliaryVars:
    """Table counts, sticky overrides, and per-family dish tallies.

    Table counts follow the urn construction (success odds alpha*beta_k +
    nu on the diagonal against h - 1), overrides are binomial with odds
    nu : alpha*beta_l, and the de-overridden tallies aggregate into one
    (family, atom) matrix per space.
    """
    alpha, nu = state.alpha, state.nu
    tables, overrides, row_totals = [], [], []
    bbar = [np.zeros((sp.space.n_families, state.priors.L)) for sp in state.spaces]
    total_tables = 0.0
    total_overrides = 0.0
    for an in state.animals:
        sp = state.spaces[an.space_idx]
        comp = sp.ctx.comp_beta()
        comps = sp.registry.components()
        counts = _path_counts(an.z)
        tab: dict = {}
        over: dict = {}
        totals: dict = {}
        for (src, dst), n in counts.items():
            c = alpha * comp[dst] + (nu if src == dst else 0.0)
            tab[(src, dst)] = table_count(n, c, rng)
            totals[src] = totals.get(src, 0) + n
        for (src, dst), b in tab.items():
            total_tables += b
            if src == dst and nu > 0.0:
                p = nu / (nu + comp[src] * alpha)
                w = int(rng.binomial(b, p))
            else:
                w = 0
            if src == dst:
                over[src] = w
                total_overrides += w
            barred = b - (w if src == dst else 0)
            if barred > 0:
                for f in range(sp.space.n_families):
                    bbar[an.space_idx][f, comps[dst, f]] += barred
        tables.append(tab)
        overrides.append(over)
        row_totals.append(totals)
    return AuxiliaryVars(tables, overrides, bbar, total_tables, total_overrides, row_totals)


def sample_beta_vectors(bbar: np.ndarray, gammas: np.ndarray, L: int, rng) -> np.ndarray:
    """Weak-limit stick posterior: Dirichlet(gamma/L + dish tallies) per family."""
    out = np.empty((bbar.shape[0], L))
    for f in range(bbar.shape[0]):
        conc = gammas[f] / L + bbar[f]
        g = rng.gamma(np.maximum(conc, 1e-300))
        tot = g.sum()
        if tot <= 0 or not np.isfinite(tot):
            g = np.zeros(L)
            g[int(np.argmax(conc))] = 1.0
            tot = 1.0
        out[f] = g / tot
    return out


def escobar_west_mixture_odds(a_gamma: float, K: int, b_minus_logxi: float, total: float) -> float:
    """Odds of the high-shape component in the concentration mixture update."""
    return (a_gamma + K - 1.0) / (b_minus_logxi * total)


def _gamma_log_posterior(g: float, a: float, b: float, occ: np.ndarray, n: float, L: int) -> float:
    """Exact collapsed log density of one stick concentration given tallies.

    Marginalizes the finite Dirichlet stick: Gamma(a, b) prior times the
    Dirichlet-multinomial mass of the dish tallies (``occ`` holds the
    nonzero tallies, ``n`` their sum).
    """
    from scipy.special import gammaln

    if g <= 0:
        return -np.inf
    lp = (a - 1.0) * math.log(g) - b * g
    lp += gammaln(g) - gammaln(g + n)
    lp += float(np.sum(gammaln(g / L + occ))) - occ.size * gammaln(g / L)
    return lp


def _slice_sample_log(logf, x0: float, rng, width: float = 1.0, iters: int = 30) -> float:
    """Stepping-out slice sampler on an unbounded 1-d log density."""
    x = x0
    for _ in range(iters):
        ly = logf(x) + math.log(rng.uniform())
        lo = x - width * rng.uniform()
        hi = lo + width
        for _ in range(50):
            if logf(lo) <= ly:
                break
            lo -= width
        for _ in range(50):
            if logf(hi) <= ly:
                break
            hi += width
        while True:
            xp = rng.uniform(lo, hi)
            if logf(xp) > ly:
                x = xp
                break
            if xp < x:
                lo = xp
            else:
                hi = xp
    return x


def sample_gamma(
    bbar_f: np.ndarray,
    current: float,
    prior: tuple,
    L: int,
    rng,
    method: str = "exact",
) -> float:
    """Update one family's stick concentration.

    ``exact`` slice-samples the collapsed Dirichlet-multinomial posterior,
    which is correct at any truncation level.  ``escobar_west`` runs the
    classical beta-auxiliary two-Gamma mixture (the infinite-limit form),
    with the mixture weight taken as odds/(1 + odds).  No tallies at all
    means the conditional is the prior.
    """
    a, b = prior
    total = float(bbar_f.sum())
    if total <= 0:
        return float(rng.gamma(a, 1.0 / b))
    if method == "escobar_west":
        xi = rng.beta(current + 1.0, total)
        K = int((bbar_f > 0).sum())
        odds = escobar_west_mixture_odds(a, K, b - math.log(xi), total)
        w = odds / (1.0 + odds)
        shape = a + K if rng.uniform() < w else a + K - 1.0
        return float(rng.gamma(shape, 1.0 / (b - math.log(xi))))
    occ = bbar_f[bbar_f > 0]
    x0 = math.log(max(current, 1e-6))
    logf = lambda x: _gamma_log_posterior(math.exp(x), a, b, occ, total, L) + x
    return math.exp(_slice_sample_log(logf, x0, rng, iters=2))


def sample_sticky_fraction(total_overrides: float, total_tables: float, prior: tuple, rng) -> float:
    """Beta full conditional of nu/(alpha+nu) from override and table tallies."""
    a, b = prior
    return float(rng.beta(total_overrides + a, total_tables - total_overrides + b))


def sample_concentration_total(
    aux: AuxiliaryVars, current: float, prior: tuple, rng
) -> float:
    """Gamma full conditional of alpha + nu via the beta/Bernoulli augmentation."""
    a, b = prior
    shape = a + aux.total_tables
    rate = b
    for totals in aux.row_totals:
        for n in totals.values():
            r1 = rng.beta(current + 1.0, n)
            r2 = rng.uniform() < n / (n + current)
            shape -= float(r2)
            rate -= math.log(r1)
    if shape <= 0:
        shape = max(shape + 1.0, 0.01)  # guard: can only trip through float error
    return float(rng.gamma(shape, 1.0 / rate))


# ---------------------------------------------------------------------------
# atom full conditionals
# ---------------------------------------------------------------------------


@dataclass
class EmissionAssignments:
    """Gathered per-time quantities for the emissions assigned to one atom.

    The family being updated reads every other component from here; arrays
    are aligned over the assigned time points (possibly across animals).
    """

    s_next: np.ndarray
    s_curr: np.ndarray
    phi: np.ndarray
    mu: np.ndarray
    eta: np.ndarray
    sigma: np.ndarray
    tau: np.ndarray
    rho: np.ndarray

    @property
    def n(self) -> int:
        return self.s_next.shape[0]

    def vinv(self) -> np.ndarray:
        """Per-time emission precisions R(rho phi) Sigma^{-1} R(rho phi)'."""
        n = self.n
        det = (
            self.sigma[:, 0, 0] * self.sigma[:, 1, 1]
            - self.sigma[:, 0, 1] * self.sigma[:, 1, 0]
        )
        si = np.empty((n, 2, 2))
        si[:, 0, 0] = self.sigma[:, 1, 1] / det
        si[:, 1, 1] = self.sigma[:, 0, 0] / det
        si[:, 0, 1] = si[:, 1, 0] = -self.sigma[:, 0, 1] / det
        a = self.rho * self.phi
        ca, sa = np.cos(a), np.sin(a)
        R = np.empty((n, 2, 2))
        R[:, 0, 0] = ca
        R[:, 0, 1] = -sa
        R[:, 1, 0] = sa
        R[:, 1, 1] = ca
        return np.einsum("nij,njk,nlk->nil", R, si, R)

    def rotated_drift(self) -> np.ndarray:
        """rho * R(phi) @ eta per time."""
        cp, sp = np.cos(self.phi), np.sin(self.phi)
        return self.rho[:, None] * np.stack(
            [cp * self.eta[:, 0] - sp * self.eta[:, 1],
             sp * self.eta[:, 0] + cp * self.eta[:, 1]],
            axis=1,
        )


def _mvn_draw(mean: np.ndarray, cov: np.ndarray, rng) -> np.ndarray:
    return mean + np.linalg.cholesky(cov) @ rng.standard_normal(2)


def mu_atom_posterior(assign: EmissionAssignments | None, prior: PriorConfig):
    """Posterior (mean, cov) of one attractor atom via precision-weighted sums."""
    prior_prec = np.linalg.inv(prior.mu_cov)
    if assign is None or assign.n == 0:
        return prior.mu_mean.copy(), prior.mu_cov.copy()
    c = (1.0 - assign.rho) * assign.tau
    vinv = assign.vinv()
    m = assign.s_next - assign.s_curr + c[:, None] * assign.s_curr - assign.rotated_drift()
    prec = prior_prec + np.einsum("n,nij->ij", c * c, vinv)
    lin = prior_prec @ prior.mu_mean + np.einsum("n,nij,nj->i", c, vinv, m)
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    return cov @ lin, cov


def sample_mu_atom(assign: EmissionAssignments | None, prior: PriorConfig, rng) -> np.ndarray:
    """Conjugate bivariate-normal update of one attractor atom."""
    mean, cov = mu_atom_posterior(assign, prior)
    return _mvn_draw(mean, cov, rng)


def eta_atom_posterior(assign: EmissionAssignments | None, prior: PriorConfig):
    """Posterior (mean, cov) of one drift atom (rotated regressors)."""
    prior_prec = np.linalg.inv(prior.eta_cov)
    if assign is None or assign.n == 0:
        return prior.eta_mean.copy(), prior.eta_cov.copy()
    vinv = assign.vinv()
    cp, sp = np.cos(assign.phi), np.sin(assign.phi)
    n = assign.n
    R = np.empty((n, 2, 2))
    R[:, 0, 0] = cp
    R[:, 0, 1] = -sp
    R[:, 1, 0] = sp
    R[:, 1, 1] = cp
    m = (
        assign.s_next
        - assign.s_curr
        - ((1.0 - assign.rho) * assign.tau)[:, None] * (assign.mu - assign.s_curr)
    )
    rvr = np.einsum("nji,njk,nkl->nil", R, vinv, R)  # R' Vinv R
    prec = prior_prec + np.einsum("n,nij->ij", assign.rho**2, rvr)
    lin = prior_prec @ prior.eta_mean + np.einsum(
        "n,nji,njk,nk->i", assign.rho, R, vinv, m
    )
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    return cov @ lin, cov


def sample_eta_atom(assign: EmissionAssignments | None, prior: PriorConfig, rng) -> np.ndarray:
    """Conjugate bivariate-normal update of one drift atom."""
    mean, cov = eta_atom_posterior(assign, prior)
    return _mvn_draw(mean, cov, rng)


def tau_atom_posterior(assign: EmissionAssignments | None, prior: PriorConfig):
    """Scalar (mean, var) of the untruncated tau conditional, or None when
    the assignments carry no information (empty, or all at rho = 1)."""
    if assign is None or assign.n == 0:
        return None
    g = assign.mu - assign.s_curr
    vinv = assign.vinv()
    m = assign.s_next - assign.s_curr - assign.rotated_drift()
    c = 1.0 - assign.rho
    prec = float(np.einsum("n,ni,nij,nj->", c * c, g, vinv, g))
    if prec <= 0.0:
        return None
    lin = float(np.einsum("n,ni,nij,nj->", c, g, vinv, m))
    return lin / prec, 1.0 / prec


def sample_tau_atom(assign: EmissionAssignments | None, prior: PriorConfig, rng) -> float:
    """Truncated-normal update of one attraction-strength atom on (lo, hi)."""
    lo, hi = prior.tau_bounds
    eps = 1e-12
    post = tau_atom_posterior(assign, prior)
    if post is None:
        return float(np.clip(rng.uniform(lo, hi), eps, 1.0 - eps))
    mean, var = post
    sd = math.sqrt(var)
    a, b = (lo - mean) / sd, (hi - mean) / sd
    t = float(stats.truncnorm.rvs(a, b, loc=mean, scale=sd, random_state=rng))
    return float(np.clip(t, eps, 1.0 - eps))


def sigma_atom_posterior(assign: EmissionAssignments | None, prior: PriorConfig):
    """Posterior (df, scale) of one step-covariance atom."""
    if assign is None or assign.n == 0:
        return prior.sigma_df, prior.sigma_scale.copy()
    resid = (
        assign.s_next
        - assign.s_curr
        - ((1.0 - assign.rho) * assign.tau)[:, None] * (assign.mu - assign.s_curr)
        - assign.rotated_drift()
    )
    a = assign.rho * assign.phi
    ca, sa = np.cos(a), np.sin(a)
    back = np.stack(
        [ca * resid[:, 0] + sa * resid[:, 1], -sa * resid[:, 0] + ca * resid[:, 1]],
        axis=1,
    )
    return prior.sigma_df + assign.n, prior.sigma_scale + back.T @ back


def sample_sigma_atom(assign: EmissionAssignments | None, prior: PriorConfig, rng) -> np.ndarray:
    """Inverse-Wishart update of one step-covariance atom from back-rotated residuals."""
    df, scale = sigma_atom_posterior(assign, prior)
    for _ in range(100):
        s = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
        s = np.asarray(s, dtype=float).reshape(2, 2)
        s = 0.5 * (s + s.T)
        if np.isfinite(s).all() and np.linalg.eigvalsh(s).min() > 1e-12:
            return s
    raise RuntimeError("inverse-Wishart update kept producing numerically invalid draws")


def rho_log_target(rho: float, assign: EmissionAssignments | None, prior: PriorConfig) -> float:
    """Log density (w.r.t. spikes-at-{0,1} plus Lebesgue) of one rho atom."""
    w0, w1, wu = prior.rho_weights
    if rho == 0.0:
        lp = math.log(w0) if w0 > 0 else -np.inf
    elif rho == 1.0:
        lp = math.log(w1) if w1 > 0 else -np.inf
    elif 0.0 < rho < 1.0:
        lp = math.log(wu) if wu > 0 else -np.inf
    else:
        return -np.inf
    if not np.isfinite(lp) or assign is None or assign.n == 0:
        return lp
    drift = rho * np.stack(
        [
            np.cos(assign.phi) * assign.eta[:, 0] - np.sin(assign.phi) * assign.eta[:, 1],
            np.sin(assign.phi) * assign.eta[:, 0] + np.cos(assign.phi) * assign.eta[:, 1],
        ],
        axis=1,
    )
    mean = assign.s_curr + ((1.0 - rho) * assign.tau)[:, None] * (assign.mu - assign.s_curr) + drift
    resid = assign.s_next - mean
    a = rho * assign.phi
    ca, sa = np.cos(a), np.sin(a)
    bx = ca * resid[:, 0] + sa * resid[:, 1]
    by = -sa * resid[:, 0] + ca * resid[:, 1]
    det = (
        assign.sigma[:, 0, 0] * assign.sigma[:, 1, 1]
        - assign.sigma[:, 0, 1] * assign.sigma[:, 1, 0]
    )
    i00 = assign.sigma[:, 1, 1] / det
    i11 = assign.sigma[:, 0, 0] / det
    i01 = -assign.sigma[:, 0, 1] / det
    quad = i00 * bx * bx + 2 * i01 * bx * by + i11 * by * by
    lp += float(np.sum(-np.log(2 * np.pi) - 0.5 * np.log(det) - 0.5 * quad))
    return lp


def _reflect01(x: float) -> float:
    y = abs(x) % 2.0
    return 2.0 - y if y > 1.0 else y


def _reflected_normal_logpdf(y: float, x: float, scale: float) -> float:
    """Density of a Gaussian step from x folded into [0, 1] (symmetric in x, y)."""
    tot = 0.0
    for m in range(-3, 4):
        tot += math.exp(-0.5 * ((y - x + 2 * m) / scale) ** 2)
        tot += math.exp(-0.5 * ((-y - x + 2 * m) / scale) ** 2)
    return math.log(tot) - math.log(scale) - 0.5 * math.log(2 * math.pi)


_RHO_SPIKE_PROB = 0.2


def _rho_proposal_logpdf(y: float, x: float, scale: float) -> float:
    if y == 0.0 or y == 1.0:
        return math.log(_RHO_SPIKE_PROB)
    return math.log(1.0 - 2 * _RHO_SPIKE_PROB) + _reflected_normal_logpdf(y, x, scale)


def sample_rho_atom(
    assign: EmissionAssignments | None,
    current: float,
    prior: PriorConfig,
    scale: float,
    rng,
) -> float:
    """Metropolis update of one persistence atom under the spike-slab prior.

    Proposals jump to each spike with probability 0.2 and otherwise take a
    reflected Gaussian step; acceptance uses densities with respect to the
    spikes-plus-Lebesgue base measure, so moves between the point masses
    and the continuum balance exactly.
    """
    u = rng.uniform()
    if u < _RHO_SPIKE_PROB:
        prop = 0.0
    elif u < 2 * _RHO_SPIKE_PROB:
        prop = 1.0
    else:
        prop = _reflect01(current + scale * rng.standard_normal())
        if prop in (0.0, 1.0):  # measure-zero fold corner; nudge inside
            prop = min(max(prop, 1e-12), 1.0 - 1e-12)
    if prop == current:
        return current
    log_acc = (
        rho_log_target(prop, assign, prior)
        - rho_log_target(current, assign, prior)
        + _rho_proposal_logpdf(current, prop, scale)
        - _rho_proposal_logpdf(prop, current, scale)
    )
    if math.log(rng.uniform()) < log_acc:
        return prop
    return current


# ---------------------------------------------------------------------------
# missing locations and the pre-initial point
# ---------------------------------------------------------------------------


def missing_location_log_target(
    locs: np.ndarray,
    s0: np.ndarray,
    i: int,
    value: np.ndarray,
    thetas,
) -> float:
    """Sum of the STAP factors a location parameter enters.

    ``i`` is the time index of the location (``-1`` addresses the
    pre-initial point, which appears only through the first bearing).
    ``thetas`` maps each emission time index t >= 1 to its StapParams.
    """
    T = locs.shape[0]
    work = locs.copy()
    s0w = np.asarray(s0, dtype=float)
    if i == -1:
        s0w = np.asarray(value, dtype=float)
    else:
        work[i] = np.asarray(value, dtype=float)

    def prev_bearing(t):  # bearing of the step ending at work[t-1]
        if t == 1:
            return bearing_angle(s0w, work[0], fallback=0.0)
        return bearing_angle(work[t - 2], work[t - 1], fallback=0.0)

    total = 0.0
    touched = {i, i + 1, i + 2} if i >= 0 else {1}
    for t in touched:
        if 1 <= t <= T - 1:
            total += stap_logpdf(thetas[t], work[t], work[t - 1], prev_bearing(t))
    return total


def sample_missing_location(
    locs: np.ndarray,
    s0: np.ndarray,
    i: int,
    thetas,
    scale: float,
    domain,
    rng,
) -> np.ndarray:
    """Random-walk Metropolis refresh of one missing location (or s0 for i=-1)."""
    current = s0 if i == -1 else locs[i]
    prop = current + scale * rng.standard_normal(2)
    if i == -1:
        x0, x1, y0, y1 = domain
        if not (x0 <= prop[0] <= x1 and y0 <= prop[1] <= y1):
            return current.copy()
    la = missing_location_log_target(locs, s0, i, prop, thetas)
    lb = missing_location_log_target(locs, s0, i, current, thetas)
    if math.log(rng.uniform()) < la - lb:
        return prop
    return current.copy()


class _ThetaLookup:
    """Lazy per-time parameter view over the current atoms and path."""

    def __init__(self, sp: SpaceState, z: np.ndarray):
        self.comps = sp.registry.physical_components()
        self.atoms = sp.atoms
        self.z = z
        self._cache: dict = {}

    def __getitem__(self, t: int) -> StapParams:
        th = self._cache.get(t)
        if th is None:
            pmu, peta, psig, ptau, prho = self.comps[self.z[t]]
            th = StapParams(
                self.atoms["mu"][pmu], self.atoms["eta"][peta], self.atoms["sigma"][psig],
                float(self.atoms["tau"][ptau]), float(self.atoms["rho"][prho]),
            )
            self._cache[t] = th
        return th


def _update_missing(state: ChainState, sweep: int) -> None:
    for an in state.animals:
        sp = state.spaces[an.space_idx]
        rng_a = _rng(state.cfg.seed, sweep, 60, an.idx)
        thetas = _ThetaLookup(sp, an.z)
        for i in an.missing_idx:
            sc = state.cfg.missing_proposal_scale * math.sqrt(
                max(np.trace(thetas[max(int(i), 1)].sigma), 1e-12)
            )
            an.locs[int(i)] = sample_missing_location(
                an.locs, an.s0, int(i), thetas, sc, state.priors.domain, rng_a
            )
        sc0 = state.cfg.missing_proposal_scale * math.sqrt(
            max(np.trace(thetas[1].sigma), 1e-12)
        )
        an.s0 = sample_missing_location(
            an.locs, an.s0, -1, thetas, sc0, state.priors.domain, rng_a
        )
        an.phi = bearing_angles(an.locs, an.s0)


# ---------------------------------------------------------------------------
# atom sweep
# ---------------------------------------------------------------------------


def _gather_assignments(state: ChainState, si: int):
    """Per-emission gathered arrays for one space, concatenated over its animals."""
    sp = state.spaces[si]
    segs = []
    for an in state.animals:
        if an.space_idx != si or an.T < 2:
            continue
        comps = sp.registry.physical_components()[an.z[1:]]
        segs.append(
            dict(
                s_next=an.locs[1:],
                s_curr=an.locs[:-1],
                phi=an.phi[:-1],
                comps=comps,
            )
        )
    if not segs:
        return None
    return dict(
        s_next=np.concatenate([s["s_next"] for s in segs]),
        s_curr=np.concatenate([s["s_curr"] for s in segs]),
        phi=np.concatenate([s["phi"] for s in segs]),
        comps=np.concatenate([s["comps"] for s in segs]),
    )


_PHYS = ("mu", "eta", "sigma", "tau", "rho")


def _assignments_for(gathered, sp: SpaceState, fam_idx: int, p: int) -> EmissionAssignments | None:
    mask = gathered["comps"][:, fam_idx] == p
    if not mask.any():
        return None
    comps = gathered["comps"][mask]
    return EmissionAssignments(
        s_next=gathered["s_next"][mask],
        s_curr=gathered["s_curr"][mask],
        phi=gathered["phi"][mask],
        mu=sp.atoms["mu"][comps[:, 0]],
        eta=sp.atoms["eta"][comps[:, 1]],
        sigma=sp.atoms["sigma"][comps[:, 2]],
        tau=sp.atoms["tau"][comps[:, 3]],
        rho=sp.atoms["rho"][comps[:, 4]],
    )


def _update_atoms(state: ChainState, sweep: int) -> None:
    """Occupied atoms get their full conditionals, the rest fresh prior draws."""
    priors = state.priors
    for si, sp in enumerate(state.spaces):
        rng_s = _rng(state.cfg.seed, sweep, 50, si)
        for fam_idx, fam in enumerate(_PHYS):
            gathered = _gather_assignments(state, si)
            occupied = (
                set(np.unique(gathered["comps"][:, fam_idx]).tolist()) if gathered else set()
            )
            for p in range(priors.L):
                if p in occupied:
                    assign = _assignments_for(gathered, sp, fam_idx, p)
                else:
                    assign = None
                if fam == "mu":
                    sp.atoms["mu"][p] = sample_mu_atom(assign, priors, rng_s)
                elif fam == "eta":
                    sp.atoms["eta"][p] = sample_eta_atom(assign, priors, rng_s)
                elif fam == "sigma":
                    sp.atoms["sigma"][p] = sample_sigma_atom(assign, priors, rng_s)
                elif fam == "tau":
                    sp.atoms["tau"][p] = sample_tau_atom(assign, priors, rng_s)
                else:
                    sp.atoms["rho"][p] = sample_rho_atom(
                        assign, float(sp.atoms["rho"][p]), priors,
                        state.cfg.rho_proposal_scale, rng_s,
                    )


# ---------------------------------------------------------------------------
# likelihood bookkeeping
# ---------------------------------------------------------------------------


def complete_loglik(state: ChainState) -> float:
    """Joint log density of paths and locations given current parameters."""
    total = 0.0
    for an in state.animals:
        sp = state.spaces[an.space_idx]
        ranks = sp.registry.ranks()
        total += truncated_geometric_log_pmf(
            state.priors.epsilon, int(ranks[an.z[0]]), sp.space.n_labels
        )
        pi = an.rowset.pi()
        with np.errstate(divide="ignore"):
            steps = np.log(pi[an.z[:-1], an.z[1:]])
        total += float(steps.sum())
        comps = sp.registry.physical_components()
        for g in np.unique(an.z[1:]):
            mask = an.z[1:] == g
            pmu, peta, psig, ptau, prho = comps[g]
            total += float(
                stap_logpdf_series(
                    sp.atoms["mu"][pmu], sp.atoms["eta"][peta], sp.atoms["sigma"][psig],
                    float(sp.atoms["tau"][ptau]), float(sp.atoms["rho"][prho]),
                    an.locs[1:][mask], an.locs[:-1][mask], an.phi[:-1][mask],
                ).sum()
            )
    return total


# ---------------------------------------------------------------------------
# the sweep and the chain driver
# ---------------------------------------------------------------------------


def run_sweep(state: ChainState, sweep: int) -> None:
    """One full Gibbs sweep.

    The table/override auxiliaries are defined with the transition rows
    integrated out, so the rows must be redrawn only after every update
    that consumes those auxiliaries; the row refresh therefore comes after
    the stick and concentration updates, right before the atoms.
    """
    cfg = state.cfg
    priors = state.priors
    _refresh_emissions(state)

    n_fams = state.spaces[0].space.n_families
    _paths_pass(state, "beam", sweep, 0)
    for f in range(n_fams):
        _paths_pass(state, f, sweep, 1 + f)

    _garbage_collect(state)

    rng_aux = _rng(cfg.seed, sweep, 40)
    aux = sample_aux_tables(state, rng_aux)

    for si, sp in enumerate(state.spaces):
        rng_b = _rng(cfg.seed, sweep, 41, si)
        sp.beta = sample_beta_vectors(aux.bbar[si], state.hyper.gammas[si], priors.L, rng_b)
        rng_g = _rng(cfg.seed, sweep, 42, si)
        for f in range(sp.space.n_families):
            state.hyper.gammas[si][f] = sample_gamma(
                aux.bbar[si][f], float(state.hyper.gammas[si][f]),
                priors.gamma_prior, priors.L, rng_g, cfg.gamma_method,
            )

    rng_h = _rng(cfg.seed, sweep, 43)
    state.hyper.sticky_frac = sample_sticky_fraction(
        aux.total_overrides, aux.total_tables, priors.frac_prior, rng_h
    )
    state.hyper.conc_total = sample_concentration_total(
        aux, state.hyper.conc_total, priors.conc_prior, rng_h
    )

    _resample_rows(state, sweep)
    _update_atoms(state, sweep)
    _update_missing(state, sweep)


def _record(state: ChainState, sweep: int) -> DrawRecord:
    labels, betas, gammas, atoms = [], [], [], []
    for si, sp in enumerate(state.spaces):
        labels.append(sp.registry.components().copy())
        betas.append(sp.beta.copy())
        gammas.append(state.hyper.gammas[si].copy())
        atoms.append({k: v.copy() for k, v in sp.atoms.items()})
    paths, rows, s0s, imputed, ks = [], [], [], [], []
    for an in state.animals:
        paths.append(an.z.copy())
        K = len(state.spaces[an.space_idx].registry)
        r = np.zeros((K, K + 1))
        pi = an.rowset.pi()
        alive = an.rowset.alive[:K]
        r[:, :K] = pi
        r[:, K] = an.rowset.rest[:K]
        r[~alive] = np.nan
        rows.append(r)
        s0s.append(an.s0.copy())
        imputed.append(an.locs[an.missing_idx].copy())
        ks.append(int(np.unique(an.z).size))
    return DrawRecord(
        sweep=sweep,
        labels=labels,
        betas=betas,
        gammas=gammas,
        atoms=atoms,
        conc_total=state.hyper.conc_total,
        sticky_frac=state.hyper.sticky_frac,
        paths=paths,
        rows=rows,
        s0=s0s,
        imputed=imputed,
        loglik=complete_loglik(state),
        k_nonempty=ks,
    )


def run_chain(
    data: list,
    priors: PriorConfig,
    cfg: McmcConfig,
    progress=None,
) -> PosteriorDraws:
    """Run the sampler and return thinned post-burn-in draws.

    ``progress`` may be a callable or a writable text stream; it receives
    one ``iter,loglik,K_1..K_m`` line per ``cfg.progress_every`` sweeps.
    Fully reproducible from ``cfg.seed``.
    """
    state = init_state(data, priors, cfg)
    records = []
    for sweep in range(1, cfg.iterations + 1):
        run_sweep(state, sweep)
        keep = sweep > cfg.burnin and (sweep - cfg.burnin) % cfg.thin == 0
        emit = cfg.progress_every and sweep % cfg.progress_every == 0
        if keep or emit:
            rec = _record(state, sweep)
            if keep:
                records.append(rec)
            if emit and progress is not None:
                line = f"{sweep},{rec.loglik:.6f}," + ",".join(str(k) for k in rec.k_nonempty)
                if callable(progress):
                    progress(line)
                else:
                    progress.write(line + "\n")
    meta = {
        "mode": cfg.mode,
        "L": priors.L,
        "seed": cfg.seed,
        "iterations": cfg.iterations,
        "burnin": cfg.burnin,
        "thin": cfg.thin,
        "n_families": state.spaces[0].space.n_families,
        "family_names": [list(sp.space.family_names) for sp in state.spaces],
        "animal_ids": [an.traj.animal_id for an in state.animals],
        "space_of_animal": [an.space_idx for an in state.animals],
        "T": [an.T for an in state.animals],
        "missing_idx": [an.missing_idx.tolist() for an in state.animals],
        "epsilon": priors.epsilon,
    }
    draws = PosteriorDraws(records, meta)
    draws.meta["trajectories"] = [an.traj for an in state.animals]
    return draws
