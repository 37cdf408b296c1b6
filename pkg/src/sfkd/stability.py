"""ISS certification of the learned latent dynamics.

The certificate uses the identity Lyapunov witness: when every ``A(e)``
satisfies ``||A(e)|| <= alpha - beta`` the decay inequality
``A^T A - I <= -(1 - alpha^2) I`` holds, so ``c1 = c2 = 1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import SfkdModel
from .nn import spectral_norm
from .trainer import env_grid


class CertificateError(ValueError):
    """Raised when a model cannot be certified."""


@dataclass
class IssCertificate:
    alpha: float
    beta: float
    P: np.ndarray
    c1: float
    c2: float
    dbar: float
    env_grid: np.ndarray
    A_norms: np.ndarray  # ||A(e)||_2 per grid point
    margins: np.ndarray  # max eigenvalue of A^T P A - P + (1 - alpha^2) I per grid point

    @property
    def ultimate(self) -> float:
        return ultimate_bound(self)


@dataclass
class ResidualBoundEstimate:
    dbar: float
    rho0: float
    eta_max: float
    sample_count: int
    quantile: float
    tail_count: int  # samples above dbar
    max_norm: float


@dataclass
class TrackingBoundInputs:
    eps_mppi: float
    L_phi: float
    eps_phi: float

    def __post_init__(self):
        if min(self.eps_mppi, self.L_phi, self.eps_phi) < 0:
            raise ValueError("tracking-bound inputs must be non-negative")


# --------------------------------------------------------------------------- alpha and P


def operator_norms(m: SfkdModel, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Projected ``A(e)`` stack over ``grid`` and the dense spectral norm of each."""
    A, _ = m.operators(m.embed(grid))
    A = A.reshape(len(grid), m.r, m.r)
    return A, spectral_norm(A)


def compute_alpha(m: SfkdModel, grid: np.ndarray | None = None, beta: float | None = None) -> float:
    """``max_e ||A(e)||_2 + beta`` over the grid (default 9 x 9).

    Raises :class:`CertificateError` naming the worst environment when the
    result is not below 1.
    """
    grid = env_grid(9) if grid is None else np.asarray(grid, dtype=float)
    beta = m.beta if beta is None else beta
    _, norms = operator_norms(m, grid)
    i = int(np.argmax(norms))
    alpha = float(norms[i] + beta)
    if not alpha < 1.0:
        mu, w = grid[i]
        raise CertificateError(f"alpha = {alpha:.6f} >= 1 at e = (mu={mu:.3f}, w={w:.3f})")
    return alpha


def lyapunov_margins(A: np.ndarray, P: np.ndarray, alpha: float) -> np.ndarray:
    """Largest eigenvalue of ``A^T P A - P + (1 - alpha^2) I`` for each ``A`` in a stack."""
    r = P.shape[0]
    M = np.einsum("nji,jk,nkl->nil", A, P, A) - P + (1.0 - alpha ** 2) * np.eye(r)
    M = 0.5 * (M + np.swapaxes(M, 1, 2))
    return np.linalg.eigvalsh(M)[:, -1]


def certify(
    m: SfkdModel,
    dbar: float,
    grid: np.ndarray | None = None,
    P: np.ndarray | None = None,
    tol: float = 1e-8,
) -> IssCertificate:
    """Build and verify the ISS certificate (``P = I`` unless given)."""
    if dbar < 0:
        raise ValueError("dbar must be >= 0")
    grid = env_grid(9) if grid is None else np.asarray(grid, dtype=float)
    alpha = compute_alpha(m, grid)
    P = np.eye(m.r) if P is None else np.asarray(P, dtype=float)
    if not np.allclose(P, P.T, atol=1e-12):
        raise CertificateError("P is not symmetric")
    lam = np.linalg.eigvalsh(P)
    if lam[0] <= 0:
        raise CertificateError(f"P is not positive definite (min eigenvalue {lam[0]:.3e})")
    A, norms = operator_norms(m, grid)
    margins = lyapunov_margins(A, P, alpha)
    bad = np.flatnonzero(margins > tol)
    if bad.size:
        i = bad[np.argmax(margins[bad])]
        raise CertificateError(
            f"decay inequality fails at {bad.size} grid point(s); worst e = {tuple(grid[i])}, "
            f"max eigenvalue {margins[i]:.3e}"
        )
    return IssCertificate(
        alpha, m.beta, P, float(np.sqrt(lam[-1] / lam[0])), float(1.0 / np.sqrt(lam[0])),
        float(dbar), grid, norms, margins,
    )


# --------------------------------------------------------------------------- bounds


def iss_trajectory_bound(cert: IssCertificate, e0_norm: float, k) -> np.ndarray | float:
    k = np.asarray(k)
    if np.any(k < 0):
        raise ValueError("k must be >= 0")
    out = cert.c1 * cert.alpha ** k * e0_norm + cert.c2 * cert.dbar / (1.0 - cert.alpha)
    return float(out) if out.ndim == 0 else out


def ultimate_bound(cert: IssCertificate) -> float:
    if not cert.alpha < 1:
        raise CertificateError("ultimate bound needs alpha < 1")
    return cert.c2 * cert.dbar / (1.0 - cert.alpha)


def violation_rate(series, delta_max: float) -> float:
    """Fraction of entries strictly above ``delta_max``."""
    s = np.asarray(series, dtype=float).reshape(-1)
    if s.size == 0:
        raise ValueError("empty series")
    if not delta_max > 0:
        raise ValueError("delta_max must be positive")
    return float(np.count_nonzero(s > delta_max)) / s.size


def tracking_bound(cert: IssCertificate, inputs: TrackingBoundInputs) -> float:
    """Physical tracking error bound; the reconstruction term enters with unit constant."""
    if not inputs.L_phi > 0:
        raise ValueError("L_phi must be positive")
    return (inputs.eps_mppi + ultimate_bound(cert)) / inputs.L_phi + inputs.eps_phi


# --------------------------------------------------------------------------- data-driven estimates


def one_step_residuals(m: SfkdModel, X, U, E, Xn, use_residual: bool = True):
    """``(d, Delta, Z)`` per tuple: model mismatch with and without ``r``."""
    psi = m.embed(E)
    Z = m.encode_batch(X, E, psi)
    Zn = m.encode_batch(Xn, E, psi)
    _, first, inv = np.unique(E, axis=0, return_index=True, return_inverse=True)
    A_u, B_u = m.operators(psi[first])
    A_u = A_u.reshape(len(first), m.r, m.r)
    B_u = B_u.reshape(len(first), m.r, -1)
    inv = inv.reshape(-1)
    lin = np.einsum("nij,nj->ni", A_u[inv], Z) + np.einsum("nij,nj->ni", B_u[inv], U)
    delta = Zn - lin
    d = delta - m.residual_batch(Z, U, psi) if use_residual else delta
    return d, delta, Z


def estimate_dbar(m: SfkdModel, d, quantile: float = 0.995, use_residual: bool = True) -> ResidualBoundEstimate:
    """Quantile of ``||d_k||`` over a (held-out) dataset, plus the envelope fit.

    The envelope ``||Delta|| <= rho0 ||z|| + eta`` takes ``rho0`` from a
    non-negative least-squares line and raises ``eta`` until every sample
    is covered.
    """
    if not 0.9 < quantile <= 1.0:
        raise ValueError("quantile must lie in (0.9, 1]")
    X, U, E, Xn = d.flat()
    if len(X) == 0:
        raise ValueError("dataset is empty")
    res, delta, Z = one_step_residuals(m, X, U, E, Xn, use_residual)
    norms = np.linalg.norm(res, axis=1)
    dbar = float(np.max(norms)) if quantile == 1.0 else float(np.quantile(norms, quantile))
    zn = np.linalg.norm(Z, axis=1)
    dn = np.linalg.norm(delta, axis=1)
    F = np.stack([zn, np.ones_like(zn)], axis=1)
    rho0 = max(0.0, float(np.linalg.lstsq(F, dn, rcond=None)[0][0]))
    eta = float(np.max(dn - rho0 * zn))
    return ResidualBoundEstimate(
        dbar, rho0, max(eta, 0.0), len(X), quantile, int(np.count_nonzero(norms > dbar)), float(norms.max())
    )


def estimate_lipschitz(m: SfkdModel, n_pairs: int = 100_000, radius: float = 0.05, seed: int = 0) -> float:
    """Empirical encoder Lipschitz constant from random nearby state pairs.

    States and environments are drawn over the operating box; partners are
    offset by up to ``radius`` in normalised units.
    """
    rng = np.random.default_rng(seed)
    lo = m.x_offset - m.x_scale
    hi = m.x_offset + m.x_scale
    X = rng.uniform(lo, hi, size=(n_pairs, 4))
    E = np.stack([rng.uniform(0.3, 0.9, n_pairs), rng.uniform(-8.0, 8.0, n_pairs)], axis=1)
    dX = rng.uniform(-radius, radius, size=X.shape) * m.x_scale
    psi = m.embed(E)
    dz = m.encode_batch(X + dX, E, psi) - m.encode_batch(X, E, psi)
    return float(np.max(np.linalg.norm(dz, axis=1) / np.linalg.norm(dX, axis=1)))


def reconstruction_error(m: SfkdModel, d, quantile: float = 0.995) -> float:
    X, _, E, _ = d.flat()
    Z = m.encode_batch(X, E)
    err = X - m.decode_raw(Z)
    return float(np.quantile(np.linalg.norm(err, axis=1), quantile))


# --------------------------------------------------------------------------- output


def certificate_text(cert: IssCertificate, est: ResidualBoundEstimate | None = None, extra: dict | None = None) -> str:
    lines = [
        "ISS certificate",
        f"alpha           {cert.alpha:.10f}",
        f"beta            {cert.beta:.6f}",
        f"max ||A(e)||_2  {float(cert.A_norms.max()):.10f}",
        f"P               {'identity' if np.array_equal(cert.P, np.eye(len(cert.P))) else 'custom'} ({len(cert.P)} x {len(cert.P)})",
        f"c1              {cert.c1:.6f}",
        f"c2              {cert.c2:.6f}",
        f"dbar            {cert.dbar:.10g}",
        f"ultimate bound  {ultimate_bound(cert):.10g}",
        f"grid points     {len(cert.env_grid)}",
        f"worst margin    {float(cert.margins.max()):.3e}",
    ]
    if est is not None:
        lines += [
            f"dbar quantile   {est.quantile}",
            f"samples         {est.sample_count} ({est.tail_count} above dbar, max {est.max_norm:.6g})",
            f"envelope        ||Delta|| <= {est.rho0:.6g} ||z|| + {est.eta_max:.6g}",
        ]
    for k, v in (extra or {}).items():
        lines.append(f"{k:<15} {v}")
    return "\n".join(lines) + "\n"


def write_certificate_csv(cert: IssCertificate, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mu", "w", "A_norm", "min_eig_decay"])
        for (mu, wind), n, mg in zip(cert.env_grid, cert.A_norms, cert.margins):
            # min eigenvalue of P - A^T P A - (1 - alpha^2) I equals -margin
            w.writerow([f"{mu:.17g}", f"{wind:.17g}", f"{n:.17g}", f"{-mg:.17g}"])


def write_violation_csv(norms, bounds, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "err_norm", "bound", "violated"])
        for k, (n, b) in enumerate(zip(norms, bounds)):
            w.writerow([k, f"{n:.17g}", f"{b:.17g}", int(n > b)])
