"""Per-animal latent behavior machinery.

Sparse sticky transition rows over composite labels, the geometric initial
state, transition counting, and the beam (slice) samplers for latent paths.

Rows are Dirichlet draws over the full label space represented sparsely:
explicit probabilities for every instantiated label plus one remainder mass
for everything else.  Aggregation properties of the Dirichlet make lazy
materialization exact; breaking a label out of the remainder is a Beta
split with that label's share of the leftover concentration.

Path updates for distinct animals commute: slice drawing and label
instantiation happen in a shared phase with deterministic per-task RNG
streams, after which each animal's sampler touches only its own state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import ffbs_pass, split_scan
from .base_measure import LabelSpace
from .stap import bearing_angles, stap_logpdf_series

__all__ = [
    "Trajectory",
    "LatentPath",
    "TransitionCounts",
    "TransitionRow",
    "Registry",
    "RowContext",
    "RowSet",
    "count_transitions",
    "count_nonempty",
    "expected_transition",
    "geometric_log_pmf",
    "truncated_geometric_log_pmf",
    "sample_initial_state",
    "initial_rank_bound",
    "sample_transition_row",
    "beam_sample_path",
    "split_update_path",
]

DEFAULT_INIT_RANK_CAP = 64
_MAX_SLICE_RETRIES = 50


# ---------------------------------------------------------------------------
# trajectories and paths
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """One animal's equally spaced track.

    ``locs`` is (T, 2) with NaN rows at missing fixes; ``observed`` flags
    the recorded ones.  The first location must be observed (the model
    conditions on it).  ``s0`` optionally seeds the pre-initial location
    parameter that defines the first bearing.
    """

    animal_id: str
    times: np.ndarray
    locs: np.ndarray
    observed: np.ndarray | None = None
    s0: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.locs = np.asarray(self.locs, dtype=float)
        if self.observed is None:
            self.observed = np.isfinite(self.locs).all(axis=1)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.s0 is not None:
            self.s0 = np.asarray(self.s0, dtype=float).reshape(2)

    def __len__(self) -> int:
        return self.locs.shape[0]

    def validate(self, step: int | None = None) -> None:
        if len(self) < 3:
            raise ValueError(f"trajectory {self.animal_id!r} needs at least 3 time points")
        gaps = np.diff(self.times)
        if gaps.min() <= 0:
            raise ValueError(f"trajectory {self.animal_id!r} has non-increasing timestamps")
        if np.unique(gaps).size != 1:
            raise ValueError(f"trajectory {self.animal_id!r} is not on a constant time step")
        if step is not None and gaps[0] != step:
            raise ValueError(
                f"trajectory {self.animal_id!r} step {gaps[0]} differs from declared {step}"
            )
        if not self.observed[0]:
            raise ValueError(f"trajectory {self.animal_id!r} must start with an observed fix")
        obs = self.locs[self.observed]
        if not np.isfinite(obs).all():
            raise ValueError(f"trajectory {self.animal_id!r} has non-finite observed coordinates")


@dataclass
class LatentPath:
    """Composite labels over time; index 0 is the pre-initial state."""

    states: list

    def __post_init__(self):
        self.states = [tuple(s) for s in self.states]

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self):
        return iter(self.states)


@dataclass
class TransitionCounts:
    """Sparse tally of observed label-to-label transitions."""

    counts: dict

    def row_total(self, source) -> int:
        return sum(n for (src, _), n in self.counts.items() if src == source)

    def sources(self):
        return {src for (src, _) in self.counts}


def count_transitions(path) -> TransitionCounts:
    """Exact tally over consecutive state pairs of a path."""
    states = list(path)
    counts: dict = {}
    for a, b in zip(states[:-1], states[1:]):
        key = (tuple(a), tuple(b))
        counts[key] = counts.get(key, 0) + 1
    return TransitionCounts(counts)


def count_nonempty(path) -> int:
    """Number of distinct labels present in a path."""
    return len({tuple(s) for s in path})


def expected_transition(alpha: float, nu: float, beta_k: float, is_self: bool) -> float:
    """Prior mean transition probability (alpha*beta_k + nu*[self]) / (alpha+nu)."""
    if alpha < 0 or nu < 0 or alpha + nu == 0:
        raise ValueError("alpha and nu must be nonnegative and not both zero")
    return (alpha * beta_k + (nu if is_self else 0.0)) / (alpha + nu)


# ---------------------------------------------------------------------------
# geometric initial state
# ---------------------------------------------------------------------------


def geometric_log_pmf(epsilon: float, rank: int) -> float:
    """log of (1-eps)^(rank-1) * eps, the untruncated geometric mass."""
    if rank < 1:
        raise ValueError("rank must be a positive integer")
    if epsilon >= 1.0:
        return 0.0 if rank == 1 else -np.inf
    return (rank - 1) * math.log1p(-epsilon) + math.log(epsilon)


def _log1mexp(x: float) -> float:
    """log(1 - exp(x)) for x < 0, stable near both ends."""
    if x >= 0.0:
        return -np.inf
    if x > -0.693:
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


def truncated_geometric_log_pmf(epsilon: float, rank: int, n_labels: int) -> float:
    """Geometric mass renormalized to the finite label universe."""
    if rank > n_labels:
        return -np.inf
    lp = geometric_log_pmf(epsilon, rank)
    if epsilon >= 1.0:
        return lp
    log_tail = n_labels * math.log1p(-epsilon)
    return lp - _log1mexp(log_tail)


def sample_initial_state(epsilon: float, rng, max_rank: int | None = None) -> int:
    """Draw a positive integer rank with pmf (1-eps)^(k-1) * eps.

    With ``max_rank`` the distribution is renormalized to 1..max_rank.
    """
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("epsilon must lie in (0, 1]")
    if epsilon == 1.0:
        return 1
    u = rng.uniform()
    if max_rank is not None:
        u *= -math.expm1(max_rank * math.log1p(-epsilon))
    r = 1 + int(math.floor(math.log1p(-u) / math.log1p(-epsilon)))
    r = max(r, 1)
    if max_rank is not None:
        r = min(r, max_rank)
    return r


def initial_rank_bound(epsilon: float, rank_cur: int, n_labels: int, rng) -> int:
    """Slice the geometric initial-state factor and return the admissible
    rank bound.

    The slice u ~ U(0, pmf(rank_cur)) admits exactly the ranks whose
    geometric mass exceeds u, i.e. ranks 1..R; the incumbent rank always
    qualifies.  Callers decide separately how many of the admissible ranks
    to actually instantiate as labels.
    """
    if epsilon >= 1.0:
        return 1
    w = rng.uniform()
    while w <= 0.0:
        w = rng.uniform()
    # pmf(r) > w * pmf(rank_cur)  iff  r - 1 < (rank_cur - 1) + log(w)/log(1-eps)
    bound = (rank_cur - 1) + math.log(w) / math.log1p(-epsilon)
    r = int(math.ceil(bound))
    r = max(r, rank_cur)
    return min(r, n_labels)


# ---------------------------------------------------------------------------
# sparse sticky transition rows
# ---------------------------------------------------------------------------


@dataclass
class TransitionRow:
    """One source label's sparse transition distribution."""

    source: tuple
    probs: dict
    remainder: float

    def prob(self, target) -> float:
        return self.probs.get(tuple(target), 0.0)

    def validate(self) -> None:
        total = sum(self.probs.values()) + self.remainder
        if min(self.probs.values(), default=0.0) < 0 or self.remainder < -1e-12:
            raise ValueError("transition probabilities must be nonnegative")
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"row mass {total} differs from 1")


def _draw_dirichlet_block(conc: np.ndarray, rest_conc: float, rng):
    """Sample (probs, rest) of an aggregated Dirichlet via gamma draws.

    Falls back to a point mass on the largest concentration when every
    gamma draw underflows (possible for astronomically small totals).
    """
    conc = np.asarray(conc, dtype=float)
    g = rng.gamma(np.maximum(conc, 1e-300))
    g[conc <= 0.0] = 0.0
    grest = float(rng.gamma(rest_conc)) if rest_conc > 0.0 else 0.0
    tot = g.sum() + grest
    if tot <= 0.0 or not np.isfinite(tot):
        probs = np.zeros_like(conc)
        if rest_conc > conc.max(initial=0.0):
            return probs, 1.0
        probs[int(np.argmax(conc))] = 1.0
        return probs, 0.0
    return g / tot, grest / tot


def sample_transition_row(
    source,
    counts: TransitionCounts | dict,
    alpha: float,
    nu: float,
    composite_weights: dict,
    rng,
) -> TransitionRow:
    """Dirichlet full-conditional draw of one transition row.

    ``composite_weights`` maps every explicitly represented label to its
    composite base weight; the remaining base mass feeds the remainder.
    Sources and counted targets must be present among the explicit labels.
    """
    source = tuple(source)
    if isinstance(counts, TransitionCounts):
        cdict = {k: n for (src, k), n in counts.counts.items() if src == source}
    else:
        cdict = {tuple(k): int(n) for k, n in counts.items()}
    labels = list(composite_weights.keys())
    index = {lab: i for i, lab in enumerate(labels)}
    if source not in index:
        raise ValueError("source label must be among the explicit labels")
    for k in cdict:
        if k not in index:
            raise ValueError(f"counted target {k} missing from explicit labels")
    beta = np.array([composite_weights[lab] for lab in labels], dtype=float)
    conc = alpha * beta
    conc[index[source]] += nu
    for k, n in cdict.items():
        conc[index[k]] += n
    rest_conc = alpha * max(0.0, 1.0 - beta.sum())
    probs, rest = _draw_dirichlet_block(conc, rest_conc, rng)
    return TransitionRow(source, {lab: float(p) for lab, p in zip(labels, probs)}, float(rest))


# ---------------------------------------------------------------------------
# label registry and dense row storage used by the sampler
# ---------------------------------------------------------------------------


class Registry:
    """Instantiated labels of one label space, in instantiation order.

    Ranks come from the lexicographic position of the tuple, so they do not
    depend on when a label was first touched.
    """

    def __init__(self, space: LabelSpace):
        self.space = space
        self.labels: list[tuple] = []
        self.index: dict[tuple, int] = {}
        self._comps: list[tuple] = []
        self._ranks: list[int] = []

    def __len__(self) -> int:
        return len(self.labels)

    def gid(self, label) -> int:
        label = tuple(label)
        g = self.index.get(label)
        if g is None:
            g = len(self.labels)
            self.index[label] = g
            self.labels.append(label)
            self._comps.append(label)
            self._ranks.append(self.space.rank(label))
        return g

    def components(self) -> np.ndarray:
        return np.asarray(self._comps, dtype=np.int64).reshape(len(self.labels), -1)

    def ranks(self) -> np.ndarray:
        return np.asarray(self._ranks, dtype=np.int64)

    def physical_components(self) -> np.ndarray:
        """(K, 5) physical atom indices (mu, eta, sigma, tau, rho)."""
        return np.asarray(
            [self.space.project(lab) for lab in self.labels], dtype=np.int64
        ).reshape(len(self.labels), 5)


class RowContext:
    """Snapshot of the quantities a batch of rows was drawn against.

    Rows stay conditioned on the stick weights and concentrations current
    at their draw; lazily materializing more of a row later must reuse this
    snapshot, not whatever the chain has moved on to.
    """

    def __init__(self, beta: np.ndarray, alpha: float, nu: float, registry: Registry):
        self.beta = np.array(beta, dtype=float, copy=True)
        self.alpha = float(alpha)
        self.nu = float(nu)
        self.registry = registry
        self._comp = np.zeros(0)

    def comp_beta(self) -> np.ndarray:
        """Composite base weights of all instantiated labels."""
        K = len(self.registry)
        if self._comp.shape[0] < K:
            comps = self.registry.components()[self._comp.shape[0]: K]
            new = np.ones(comps.shape[0])
            for f in range(comps.shape[1]):
                new *= self.beta[f][comps[:, f]]
            self._comp = np.concatenate([self._comp, new])
        return self._comp


class RowSet:
    """All transition rows of one animal, dense over instantiated labels.

    ``alive`` marks rows that have actually been drawn; column
    materialization is shared so ``probs[:K, :K]`` is directly usable as a
    transition matrix once every row is alive.
    """

    def __init__(self, ctx: RowContext):
        self.ctx = ctx
        self.probs = np.zeros((0, 0))
        self.rest = np.zeros(0)
        self.rest_conc = np.zeros(0)
        self.alive = np.zeros(0, dtype=bool)
        self.cols_done = 0

    def _grow(self, K: int) -> None:
        old = self.probs.shape[0]
        if K <= old:
            return
        probs = np.zeros((K, K))
        probs[:old, :old] = self.probs
        self.probs = probs
        self.rest = np.concatenate([self.rest, np.zeros(K - old)])
        self.rest_conc = np.concatenate([self.rest_conc, np.zeros(K - old)])
        self.alive = np.concatenate([self.alive, np.zeros(K - old, dtype=bool)])

    def ensure_cols(self, rng) -> None:
        """Split remainders so every alive row covers all instantiated labels."""
        K = len(self.ctx.registry)
        self._grow(K)
        if self.cols_done >= K:
            return
        comp = self.ctx.comp_beta()
        idx = np.where(self.alive)[0]
        for gid in range(self.cols_done, K):
            if idx.size:
                conc = self.ctx.alpha * comp[gid]
                b = self.rest_conc[idx] - conc
                v = np.zeros(idx.size)
                if conc > 0.0:
                    ok = b > 1e-12
                    if ok.any():
                        v[ok] = rng.beta(conc, b[ok])
                    v[~ok] = 1.0
                share = self.rest[idx] * v
                self.probs[idx, gid] = share
                self.rest[idx] -= share
                self.rest_conc[idx] = np.maximum(b, 0.0)
            # rows whose source is this new gid do not exist yet, so the
            # sticky mass never hides in a remainder
        self.cols_done = K

    def ensure_rows(self, gids, rng, counts: dict | None = None) -> None:
        """Draw rows for the given sources (prior unless counts given)."""
        self.ensure_cols(rng)
        K = self.cols_done
        todo = [g for g in gids if not self.alive[g]]
        if not todo:
            return
        comp = self.ctx.comp_beta()[:K]
        base_rest = self.ctx.alpha * max(0.0, 1.0 - comp.sum())
        for g in todo:
            conc = self.ctx.alpha * comp.copy()
            conc[g] += self.ctx.nu
            if counts:
                for (src, dst), n in counts.items():
                    if src == g:
                        conc[dst] += n
            probs, rest = _draw_dirichlet_block(conc, base_rest, rng)
            self.probs[g, :K] = probs
            self.rest[g] = rest
            self.rest_conc[g] = base_rest
            self.alive[g] = True

    def ensure_all_rows(self, rng) -> None:
        self.ensure_rows(range(len(self.ctx.registry)), rng)

    def max_alive_rest(self) -> float:
        if not self.alive.any():
            return 0.0
        return float(self.rest[self.alive].max())

    def pi(self) -> np.ndarray:
        K = self.cols_done
        return self.probs[:K, :K]


# ---------------------------------------------------------------------------
# shared pass plumbing (slice draws, label expansion, kernel dispatch)
# ---------------------------------------------------------------------------


def draw_slices(z: np.ndarray, rowset: RowSet, epsilon: float, rng):
    """Slice variables for one pass: transition slices plus the initial
    rank bound."""
    T = z.shape[0]
    pi = rowset.pi()
    p = pi[z[:-1], z[1:]]
    if not (p > 0.0).all():
        raise RuntimeError("incumbent path transition has zero probability")
    u = np.zeros(T)
    u[1:] = rng.uniform(size=T - 1) * p
    registry = rowset.ctx.registry
    rank_cur = registry.ranks()[z[0]]
    bound = initial_rank_bound(epsilon, int(rank_cur), registry.space.n_labels, rng)
    return u, bound


def instantiate_ranks(registry: Registry, upto: int) -> None:
    """Make sure the labels of lexicographic ranks 1..upto exist."""
    for r in range(1, min(upto, registry.space.n_labels) + 1):
        registry.gid(registry.space.unrank(r))


FULL_MATERIALIZE_MAX = 512


def expand_labels(
    registry: Registry, rowsets, u_mins, rng, budget: int = 64, tries_per_label: int = 100
):
    """Instantiate fresh labels while some row remainder could still hide
    an admissible candidate (remainder at or above the animal's smallest
    slice variable).

    Spaces of at most ``FULL_MATERIALIZE_MAX`` labels are materialized
    completely when triggered, which drains every remainder exactly.  In a
    large product space the remainder drains only as fast as the
    unallocated base mass, so full draining is infeasible; ``budget``
    bounds the fresh labels per call (drawn from the unallocated measure),
    trading a slightly reduced birth rate of brand-new labels in sweeps
    whose slices are unusually small.
    """
    space = registry.space
    ctx = rowsets[0].ctx if rowsets else None

    def pending():
        for rs in rowsets:
            rs.ensure_all_rows(rng)
        return any(
            rs.alive.any() and rs.max_alive_rest() >= u_min
            for rs, u_min in zip(rowsets, u_mins)
        )

    if not pending() or len(registry) >= space.n_labels:
        return
    if space.n_labels <= FULL_MATERIALIZE_MAX:
        instantiate_ranks(registry, space.n_labels)
        for rs in rowsets:
            rs.ensure_all_rows(rng)
        return
    beta = ctx.beta
    cums = [np.cumsum(beta[f]) for f in range(beta.shape[0])]
    tots = [c[-1] for c in cums]
    born = 0
    while born < budget:
        found = None
        for _ in range(tries_per_label):
            label = tuple(
                min(int(np.searchsorted(cums[f], rng.uniform() * tots[f])), space.L - 1)
                for f in range(len(cums))
            )
            if label not in registry.index:
                found = label
                break
        if found is None:
            return  # unallocated mass is effectively out of reach
        registry.gid(found)
        born += 1
        if not pending() or len(registry) >= space.n_labels:
            return


def run_beam(z, logemis, rowset, u, bound, rng):
    registry = rowset.ctx.registry
    K = len(registry)
    allowed0 = registry.ranks() <= bound
    status = ffbs_pass(
        np.ascontiguousarray(logemis[:, :K]),
        np.ascontiguousarray(rowset.pi()),
        u,
        allowed0,
        rng.uniform(size=z.shape[0]),
        z,
    )
    return bool(status)


def run_split(z, logemis, rowset, fam, u, bound, rng):
    registry = rowset.ctx.registry
    K = len(registry)
    status = split_scan(
        registry.components(),
        fam,
        z,
        np.ascontiguousarray(logemis[:, :K]),
        np.ascontiguousarray(rowset.pi()),
        u,
        bound,
        registry.ranks(),
        rng.uniform(size=z.shape[0]),
    )
    return bool(status)


# ---------------------------------------------------------------------------
# fixed-universe wrappers: path updates against fully specified rows
# ---------------------------------------------------------------------------


class _FixedInstance:
    """Small dense instance built from explicit rows and atom tables."""

    def __init__(self, traj: Trajectory, rows: dict, tables, epsilon: float):
        from .base_measure import FAMILIES, composite_atoms

        self.space = LabelSpace(
            tuple(t.family for t in tables) if tables is not None else FAMILIES,
            max(t.weights.shape[0] for t in tables),
        )
        self.registry = Registry(self.space)
        labels = list(rows.keys())
        for lab in labels:
            self.registry.gid(tuple(lab))
        for row in rows.values():
            for lab in row.probs:
                self.registry.gid(tuple(lab))
        K = len(self.registry)
        self.pi = np.zeros((K, K))
        for lab, row in rows.items():
            src = self.registry.index[tuple(lab)]
            for dst_lab, p in row.probs.items():
                self.pi[src, self.registry.index[tuple(dst_lab)]] = p
        self.epsilon = epsilon
        T = len(traj)
        locs = traj.locs
        s0 = traj.s0 if traj.s0 is not None else locs[0]
        phi = bearing_angles(locs, s0)
        self.logemis = np.zeros((T, K))
        for g, lab in enumerate(self.registry.labels):
            theta = composite_atoms(lab, tables)
            self.logemis[1:, g] = stap_logpdf_series(
                theta.mu, theta.eta, theta.sigma, theta.tau, theta.rho,
                locs[1:], locs[:-1], phi[:-1],
            )

    def slices(self, z, rng):
        T = z.shape[0]
        u = np.zeros(T)
        for t in range(1, T):
            p = self.pi[z[t - 1], z[t]]
            if not p > 0.0:
                raise RuntimeError("incumbent transition has zero probability")
            u[t] = rng.uniform(0.0, p)
        rank_cur = int(self.registry.ranks()[z[0]])
        bound = initial_rank_bound(self.epsilon, rank_cur, self.space.n_labels, rng)
        return u, bound

    def path_from(self, path: LatentPath) -> np.ndarray:
        return np.array([self.registry.index[tuple(s)] for s in path], dtype=np.int64)

    def path_to(self, z: np.ndarray) -> LatentPath:
        return LatentPath([self.registry.labels[g] for g in z])


def beam_sample_path(
    traj: Trajectory,
    path: LatentPath,
    rows: dict,
    tables,
    epsilon: float,
    rng,
    n_sweeps: int = 1,
    trace: list | None = None,
) -> LatentPath:
    """Beam (slice + forward-backward) refreshes of a whole latent path
    against fully specified transition rows and atom tables.

    Only labels carried by ``rows`` exist in this fixed universe; row
    remainders are treated as mass on labels that can never be visited.
    With ``n_sweeps > 1`` the update is applied repeatedly (one shared
    instance), appending each visited path to ``trace`` when given.
    """
    inst = _FixedInstance(traj, rows, tables, epsilon)
    z = inst.path_from(path)
    ranks = inst.registry.ranks()
    for _ in range(n_sweeps):
        for _ in range(_MAX_SLICE_RETRIES):
            u, bound = inst.slices(z, rng)
            zprop = z.copy()
            ok = ffbs_pass(
                inst.logemis, inst.pi, u, ranks <= bound,
                rng.uniform(size=z.shape[0]), zprop,
            )
            if ok:
                z = zprop
                break
        else:
            raise RuntimeError("beam sampler found no admissible path; slices kept collapsing")
        if trace is not None:
            trace.append(tuple(inst.registry.labels[g] for g in z))
    return inst.path_to(z)


def split_update_path(
    traj: Trajectory, path: LatentPath, family, rows: dict, tables, epsilon: float, rng
) -> LatentPath:
    """Resample one family's label component at every time point, holding
    the other components fixed (fixed-universe form)."""
    inst = _FixedInstance(traj, rows, tables, epsilon)
    fams = inst.space.family_names
    fam_idx = family if isinstance(family, int) else fams.index(family)
    z = inst.path_from(path)
    for _ in range(_MAX_SLICE_RETRIES):
        u, bound = inst.slices(z, rng)
        zprop = z.copy()
        ok = split_scan(
            inst.registry.components(), fam_idx, zprop, inst.logemis, inst.pi,
            u, bound, inst.registry.ranks(), rng.uniform(size=z.shape[0]),
        )
        if ok:
            return inst.path_to(zprop)
    raise RuntimeError("split update found no admissible component; slices kept collapsing")
