"""STAP movement kernel: bearing angles, rotations, conditional moments, density, sampling.

The STAP (step-and-turn with attractive point) conditional law for the next
location blends attraction toward a point ``mu`` (weight ``(1 - rho) * tau``)
with rotated drift ``R(phi) @ eta`` (weight ``rho``); the step covariance is
``Sigma`` rotated by ``rho * phi``.  ``rho = 0`` gives a biased random walk
(2-d AR(1) toward ``mu``), ``rho = 1`` a correlated random walk.

All functions here are pure in their inputs plus an explicit ``rng`` handle,
so they are safe to call from any number of threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "StapParams",
    "ZeroDisplacementError",
    "wrap_angle",
    "bearing_angle",
    "bearing_angles",
    "rotation_matrix",
    "stap_conditional_moments",
    "stap_logpdf",
    "stap_sample",
    "stap_logpdf_series",
]

_LOG_2PI = np.log(2.0 * np.pi)


class ZeroDisplacementError(ValueError):
    """Raised when a bearing is requested for two coincident locations."""


def wrap_angle(x: float) -> float:
    """Reduce an angle into [-pi, pi).  pi itself maps to -pi."""
    return float((x + np.pi) % (2.0 * np.pi) - np.pi)


def bearing_angle(src, dst, fallback: float | None = None) -> float:
    """Direction of the displacement ``src -> dst``, in [-pi, pi).

    By default a zero displacement is an error (the movement model gives it
    probability zero).  Data-ingestion callers can pass ``fallback`` instead,
    usually the previous bearing, to keep a stalled track well defined.
    """
    dx = float(dst[0]) - float(src[0])
    dy = float(dst[1]) - float(src[1])
    if dx == 0.0 and dy == 0.0:
        if fallback is None:
            raise ZeroDisplacementError(
                f"bearing undefined for coincident locations {tuple(src)}"
            )
        return wrap_angle(fallback)
    return wrap_angle(np.arctan2(dy, dx))


def bearing_angles(locs: np.ndarray, s0: np.ndarray) -> np.ndarray:
    """Bearings of consecutive displacements along a track, carrying the
    previous bearing across zero-displacement steps.

    ``locs`` is the (T, 2) track; ``s0`` the pre-initial location.  Entry i
    is the direction of the step ending at ``locs[i]`` (entry 0 uses
    ``s0 -> locs[0]``), which is exactly the lagged bearing the emission at
    state i+1 conditions on.
    """
    pts = np.vstack([np.asarray(s0, dtype=float)[None, :], np.asarray(locs, dtype=float)])
    d = np.diff(pts, axis=0)
    phi = np.arctan2(d[:, 1], d[:, 0])
    phi = (phi + np.pi) % (2.0 * np.pi) - np.pi
    still = (d[:, 0] == 0.0) & (d[:, 1] == 0.0)
    if still.any():
        last = 0.0
        for i in range(phi.shape[0]):
            if still[i]:
                phi[i] = last
            else:
                last = phi[i]
    return phi


def rotation_matrix(x: float) -> np.ndarray:
    """Anticlockwise 2x2 rotation by angle ``x`` (orthogonal, det 1)."""
    c, s = np.cos(x), np.sin(x)
    return np.array([[c, -s], [s, c]])


@dataclass
class StapParams:
    """One behavior's five movement parameters (mu, eta, Sigma, tau, rho).

    mu : (2,) attractive point.
    eta : (2,) drift in the frame rotated by the previous bearing.
    sigma : (2, 2) symmetric positive-definite step covariance.
    tau : in (0, 1), fraction of the distance to ``mu`` covered per step.
    rho : in [0, 1], weight of the correlated-walk component.
    """

    mu: np.ndarray
    eta: np.ndarray
    sigma: np.ndarray
    tau: float
    rho: float

    def __post_init__(self):
        # keep canonical arrays untouched so shared atoms stay identical objects
        self.mu = self._canon(self.mu, (2,))
        self.eta = self._canon(self.eta, (2,))
        self.sigma = self._canon(self.sigma, (2, 2))
        self.tau = float(self.tau)
        self.rho = float(self.rho)

    @staticmethod
    def _canon(x, shape):
        if isinstance(x, np.ndarray) and x.shape == shape and x.dtype == np.float64:
            return x
        return np.asarray(x, dtype=float).reshape(shape)

    def validate(self) -> None:
        if not (np.isfinite(self.mu).all() and np.isfinite(self.eta).all()):
            raise ValueError("mu and eta must be finite")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-12):
            raise ValueError("sigma must be symmetric")
        if np.linalg.eigvalsh(self.sigma).min() <= 0.0:
            raise ValueError("sigma must be positive definite")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie strictly inside (0, 1)")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")


def stap_conditional_moments(theta: StapParams, s_curr, phi_prev: float):
    """Mean and covariance of the next location given the current one.

    mean = s + (1-rho)*tau*(mu - s) + rho*R(phi)*eta
    cov  = R(rho*phi) Sigma R(rho*phi)'
    """
    s = np.asarray(s_curr, dtype=float).reshape(2)
    rho, tau = theta.rho, theta.tau
    mean = s + (1.0 - rho) * tau * (theta.mu - s) + rho * (rotation_matrix(phi_prev) @ theta.eta)
    rr = rotation_matrix(rho * phi_prev)
    cov = rr @ theta.sigma @ rr.T
    return mean, cov


def _chol2(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"conditional covariance not positive definite: {cov!r}") from exc


def stap_logpdf(theta: StapParams, s_next, s_curr, phi_prev: float) -> float:
    """Log density of ``s_next`` under the STAP conditional bivariate normal."""
    mean, cov = stap_conditional_moments(theta, s_curr, phi_prev)
    chol = _chol2(cov)
    resid = np.asarray(s_next, dtype=float).reshape(2) - mean
    # forward-substitute the 2x2 lower triangle directly
    y0 = resid[0] / chol[0, 0]
    y1 = (resid[1] - chol[1, 0] * y0) / chol[1, 1]
    quad = y0 * y0 + y1 * y1
    logdet = 2.0 * (np.log(chol[0, 0]) + np.log(chol[1, 1]))
    return float(-_LOG_2PI - 0.5 * logdet - 0.5 * quad)


def stap_sample(theta: StapParams, s_curr, phi_prev: float, rng: np.random.Generator) -> np.ndarray:
    """Draw the next location from the STAP conditional law."""
    mean, cov = stap_conditional_moments(theta, s_curr, phi_prev)
    chol = _chol2(cov)
    return mean + chol @ rng.standard_normal(2)


def stap_logpdf_series(
    mu: np.ndarray,
    eta: np.ndarray,
    sigma: np.ndarray,
    tau: float,
    rho: float,
    s_next: np.ndarray,
    s_curr: np.ndarray,
    phi_prev: np.ndarray,
) -> np.ndarray:
    """Vectorized STAP log density over a whole series for one parameter set.

    ``s_next``/``s_curr`` are (n, 2), ``phi_prev`` is (n,).  Exploits that the
    rotated covariance has the same determinant as ``sigma`` and that the
    quadratic form can be evaluated on back-rotated residuals.
    """
    s_next = np.asarray(s_next, dtype=float)
    s_curr = np.asarray(s_curr, dtype=float)
    phi_prev = np.asarray(phi_prev, dtype=float)

    cp, sp = np.cos(phi_prev), np.sin(phi_prev)
    drift = rho * np.stack([cp * eta[0] - sp * eta[1], sp * eta[0] + cp * eta[1]], axis=1)
    mean = s_curr + (1.0 - rho) * tau * (mu[None, :] - s_curr) + drift
    resid = s_next - mean

    # back-rotate residuals by rho*phi, then apply the fixed Sigma^{-1}
    a = rho * phi_prev
    ca, sa = np.cos(a), np.sin(a)
    bx = ca * resid[:, 0] + sa * resid[:, 1]
    by = -sa * resid[:, 0] + ca * resid[:, 1]

    det = sigma[0, 0] * sigma[1, 1] - sigma[0, 1] * sigma[1, 0]
    if det <= 0.0 or not np.isfinite(det):
        raise ValueError("sigma must be positive definite")
    i00 = sigma[1, 1] / det
    i11 = sigma[0, 0] / det
    i01 = -sigma[0, 1] / det
    quad = i00 * bx * bx + 2.0 * i01 * bx * by + i11 * by * by
    return -_LOG_2PI - 0.5 * np.log(det) - 0.5 * quad
