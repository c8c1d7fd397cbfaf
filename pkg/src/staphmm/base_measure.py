"""Factorized shared base measure over behavior parameters.

A behavior is identified by a composite label: one atom index per parameter
family.  In the full factorization (mode ``m1``) there are five families
(mu, eta, sigma, tau, rho), each carrying its own truncated stick of weights
and its own atom table, so behaviors can share any subset of movement
parameters.  Mode ``m2`` collapses the label to a single index over joint
parameter vectors; mode ``m3`` additionally gives every animal its own
tables.

Labels are ordered lexicographically (mixed-radix over their component
indices); that fixed enumeration is what the geometric initial-state
distribution ranks against.

Atom tables are read-shared during likelihood evaluation and owned
exclusively by their Gibbs update; nothing here mutates a table it did not
receive exclusively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .stap import StapParams

__all__ = [
    "FAMILIES",
    "PriorConfig",
    "AtomTable",
    "BaseMeasureMode",
    "LabelSpace",
    "stick_breaking_weights",
    "dirichlet_weights",
    "draw_atom",
    "composite_weight",
    "composite_atoms",
    "decompose_atoms",
    "apply_mode",
]

FAMILIES = ("mu", "eta", "sigma", "tau", "rho")


@dataclass
class PriorConfig:
    """Hyperparameters of the shared base measure and the chain priors.

    Defaults give weakly informative choices: N(0, 20 I) location priors,
    IW(3, I) covariance prior, uniform tau, a rho prior mixing point masses
    at 0 and 1 with a uniform slab, G(0.01, 0.01) on every concentration,
    B(1, 1) on the self-transition fraction, a [-5, 5]^2 domain, and a
    near-flat geometric initial state.
    """

    mu_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    mu_cov: np.ndarray = field(default_factory=lambda: 20.0 * np.eye(2))
    eta_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    eta_cov: np.ndarray = field(default_factory=lambda: 20.0 * np.eye(2))
    sigma_df: float = 3.0
    sigma_scale: np.ndarray = field(default_factory=lambda: np.eye(2))
    tau_bounds: tuple[float, float] = (0.0, 1.0)
    rho_weights: tuple[float, float, float] = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    gamma_prior: tuple[float, float] = (0.01, 0.01)
    conc_prior: tuple[float, float] = (0.01, 0.01)
    frac_prior: tuple[float, float] = (1.0, 1.0)
    domain: tuple[float, float, float, float] = (-5.0, 5.0, -5.0, 5.0)
    epsilon: float = 1e-5
    L: int = 100

    def __post_init__(self):
        self.mu_mean = np.asarray(self.mu_mean, dtype=float).reshape(2)
        self.mu_cov = np.asarray(self.mu_cov, dtype=float).reshape(2, 2)
        self.eta_mean = np.asarray(self.eta_mean, dtype=float).reshape(2)
        self.eta_cov = np.asarray(self.eta_cov, dtype=float).reshape(2, 2)
        self.sigma_scale = np.asarray(self.sigma_scale, dtype=float).reshape(2, 2)

    def validate(self) -> None:
        if self.L < 2:
            raise ValueError("truncation level L must be at least 2")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        w = np.asarray(self.rho_weights, dtype=float)
        if w.min() < 0 or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("rho mixture weights must be nonnegative and sum to 1")
        for name in ("gamma_prior", "conc_prior", "frac_prior"):
            a, b = getattr(self, name)
            if a <= 0 or b <= 0:
                raise ValueError(f"{name} must have strictly positive shape and rate")
        if self.sigma_df <= 1.0:
            raise ValueError("sigma_df must exceed dim - 1 = 1")
        lo, hi = self.tau_bounds
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError("tau bounds must satisfy 0 <= lo < hi <= 1")
        x0, x1, y0, y1 = self.domain
        if not (x0 < x1 and y0 < y1):
            raise ValueError("domain bounds must be ordered")
        if np.linalg.eigvalsh(self.mu_cov).min() <= 0 or np.linalg.eigvalsh(self.eta_cov).min() <= 0:
            raise ValueError("location prior covariances must be positive definite")
        if np.linalg.eigvalsh(self.sigma_scale).min() <= 0:
            raise ValueError("sigma prior scale must be positive definite")


@dataclass
class AtomTable:
    """One family's truncated draw: L atom values plus L stick weights."""

    family: str
    atoms: list
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)

    def validate(self) -> None:
        if len(self.atoms) != self.weights.shape[0]:
            raise ValueError("atom and weight counts differ")
        if self.weights.min() < 0 or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        for a in self.atoms:
            _check_atom(self.family, a)


def _check_atom(family: str, value) -> None:
    if family == "sigma":
        v = np.asarray(value, dtype=float)
        if v.shape != (2, 2) or not np.allclose(v, v.T, atol=1e-10):
            raise ValueError("sigma atoms must be symmetric 2x2 matrices")
        if np.linalg.eigvalsh(v).min() <= 0:
            raise ValueError("sigma atoms must be positive definite")
    elif family == "tau":
        if not 0.0 < float(value) < 1.0:
            raise ValueError("tau atoms must lie strictly inside (0, 1)")
    elif family == "rho":
        if not 0.0 <= float(value) <= 1.0:
            raise ValueError("rho atoms must lie in [0, 1]")


def stick_breaking_weights(gamma: float, L: int, rng) -> np.ndarray:
    """Truncated stick-breaking weights from Beta(1, gamma) sticks.

    The last weight absorbs the leftover stick so the vector sums to one.
    Used by the generative simulator; posterior inference uses the
    weak-limit :func:`dirichlet_weights` instead.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if L < 2:
        raise ValueError("L must be at least 2")
    w = np.empty(L)
    remaining = 1.0
    for i in range(L - 1):
        v = rng.beta(1.0, gamma)
        w[i] = v * remaining
        remaining *= 1.0 - v
    w[L - 1] = remaining
    return w


def dirichlet_weights(gamma: float, L: int, rng) -> np.ndarray:
    """Symmetric Dirichlet(gamma/L, ..., gamma/L) weights (weak-limit form)."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    g = rng.gamma(gamma / L, 1.0, size=L)
    tot = g.sum()
    if tot <= 0.0 or not np.isfinite(tot):
        # concentration so small every gamma draw underflowed: the limit law
        # is a point mass on a single uniformly chosen coordinate
        w = np.zeros(L)
        w[rng.integers(L)] = 1.0
        return w
    return g / tot


def draw_atom(family: str, prior: PriorConfig, rng):
    """One atom from the family's base distribution H."""
    if family == "mu":
        return prior.mu_mean + np.linalg.cholesky(prior.mu_cov) @ rng.standard_normal(2)
    if family == "eta":
        return prior.eta_mean + np.linalg.cholesky(prior.eta_cov) @ rng.standard_normal(2)
    if family == "sigma":
        for _ in range(100):
            s = stats.invwishart.rvs(df=prior.sigma_df, scale=prior.sigma_scale, random_state=rng)
            s = np.asarray(s, dtype=float).reshape(2, 2)
            s = 0.5 * (s + s.T)
            if np.isfinite(s).all() and np.linalg.eigvalsh(s).min() > 0:
                return s
        raise RuntimeError("inverse-Wishart sampler kept returning invalid matrices")
    if family == "tau":
        lo, hi = prior.tau_bounds
        # keep strictly inside (0, 1) so downstream validation holds
        t = rng.uniform(lo, hi)
        eps = 1e-12
        return min(max(t, eps), 1.0 - eps)
    if family == "rho":
        w0, w1, _ = prior.rho_weights
        u = rng.uniform()
        if u < w0:
            return 0.0
        if u < w0 + w1:
            return 1.0
        return rng.uniform()
    raise ValueError(f"unknown family {family!r}")


def composite_weight(label: tuple[int, ...], tables) -> float:
    """Product of the per-family stick weights selected by the label."""
    w = 1.0
    for table, idx in zip(tables, label):
        w *= float(table.weights[idx])
    return w


def composite_atoms(label: tuple[int, ...], tables) -> StapParams:
    """Assemble a behavior's parameter vector from the five indexed atoms.

    Components are returned by reference, so two labels agreeing on a family
    share that component as the same object.
    """
    byfam = {t.family: t.atoms[idx] for t, idx in zip(tables, label)}
    return StapParams(
        mu=byfam["mu"], eta=byfam["eta"], sigma=byfam["sigma"],
        tau=byfam["tau"], rho=byfam["rho"],
    )


def decompose_atoms(theta: StapParams, tables) -> tuple[int, ...]:
    """Recover the label of an assembled parameter vector by table lookup."""
    label = []
    for table in tables:
        target = getattr(theta, table.family)
        hit = None
        for idx, atom in enumerate(table.atoms):
            if atom is target or np.array_equal(np.asarray(atom), np.asarray(target)):
                hit = idx
                break
        if hit is None:
            raise ValueError(f"no {table.family} atom matches the given value")
        label.append(hit)
    return tuple(label)


@dataclass(frozen=True)
class BaseMeasureMode:
    """Which base-measure construction a fit uses: m1, m2, or m3."""

    mode: str

    def __post_init__(self):
        if self.mode not in ("m1", "m2", "m3"):
            raise ValueError("mode must be one of m1, m2, m3")


class LabelSpace:
    """Label algebra for one group of animals sharing a set of tables.

    ``n_families`` is 5 under the full factorization and 1 when labels index
    whole parameter vectors.  Ranks are the 1-based lexicographic positions
    of label tuples; they are intrinsic to the tuple, independent of the
    order in which labels get touched.
    """

    def __init__(self, family_names: tuple[str, ...], L: int):
        self.family_names = tuple(family_names)
        self.n_families = len(self.family_names)
        self.L = int(L)
        self.n_labels = self.L ** self.n_families

    def rank(self, label: tuple[int, ...]) -> int:
        r = 0
        for c in label:
            if not 0 <= c < self.L:
                raise ValueError(f"label component {c} outside [0, {self.L})")
            r = r * self.L + c
        return r + 1

    def unrank(self, rank: int) -> tuple[int, ...]:
        if not 1 <= rank <= self.n_labels:
            raise ValueError(f"rank {rank} outside 1..{self.n_labels}")
        r = rank - 1
        out = []
        for _ in range(self.n_families):
            out.append(r % self.L)
            r //= self.L
        return tuple(reversed(out))

    def project(self, label: tuple[int, ...]) -> tuple[int, int, int, int, int]:
        """Map a label to physical (mu, eta, sigma, tau, rho) atom indices.

        With a single joint family every physical component uses the same
        index.
        """
        if self.n_families == 5:
            return tuple(label)
        p = label[0]
        return (p, p, p, p, p)


def apply_mode(mode: BaseMeasureMode | str, n_animals: int, L: int):
    """Resolve a base-measure mode into its label spaces.

    Returns ``(spaces, animal_to_space)``: mode m1 and m2 use one shared
    space (5 families vs 1); mode m3 builds a disjoint space per animal.
    """
    m = mode.mode if isinstance(mode, BaseMeasureMode) else str(mode).lower()
    if m == "m1":
        return [LabelSpace(FAMILIES, L)], [0] * n_animals
    if m == "m2":
        return [LabelSpace(("theta",), L)], [0] * n_animals
    if m == "m3":
        return (
            [LabelSpace(("theta",), L) for _ in range(n_animals)],
            list(range(n_animals)),
        )
    raise ValueError(f"unknown base-measure mode {mode!r}")
