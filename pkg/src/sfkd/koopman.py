"""Environment-conditioned linear operators A(e), B(e) and their warm-start identification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import spectral_project_with_info


@dataclass
class OperatorGen:
    """Affine maps from an environment embedding to ``A`` (r x r) and ``B`` (r x n_u).

    In ``global`` mode the weight matrices are ignored and the biases alone
    give a single environment-independent pair.
    """

    W_A: np.ndarray  # (r*r, d_e)
    b_A: np.ndarray  # (r*r,)
    W_B: np.ndarray  # (r*n_u, d_e)
    b_B: np.ndarray  # (r*n_u,)
    r: int
    n_u: int
    bound: float  # spectral bound 1 - beta - eps0 applied to every A(e)
    mode: str = "conditioned"

    def __post_init__(self):
        if self.mode not in ("conditioned", "global"):
            raise ValueError(f"unknown operator mode {self.mode!r}")
        if self.W_A.shape[0] != self.r * self.r or self.W_B.shape[0] != self.r * self.n_u:
            raise ValueError("generator output sizes do not match r and n_u")

    @classmethod
    def zeros(cls, r: int, n_u: int, d_e: int, bound: float, mode: str = "conditioned") -> "OperatorGen":
        return cls(
            np.zeros((r * r, d_e)), np.zeros(r * r), np.zeros((r * n_u, d_e)), np.zeros(r * n_u),
            r, n_u, bound, mode,
        )

    @property
    def d_e(self) -> int:
        return self.W_A.shape[1]

    def params(self) -> list[np.ndarray]:
        if self.mode == "global":
            return [self.b_A, self.b_B]
        return [self.W_A, self.b_A, self.W_B, self.b_B]

    def copy(self) -> "OperatorGen":
        return OperatorGen(
            self.W_A.copy(), self.b_A.copy(), self.W_B.copy(), self.b_B.copy(),
            self.r, self.n_u, self.bound, self.mode,
        )

    def astype(self, dtype) -> "OperatorGen":
        return OperatorGen(
            self.W_A.astype(dtype), self.b_A.astype(dtype), self.W_B.astype(dtype), self.b_B.astype(dtype),
            self.r, self.n_u, self.bound, self.mode,
        )

    def raw(self, psi_e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unprojected ``(A, B)`` for a batch of embeddings ``(N, d_e)``."""
        psi_e = np.atleast_2d(psi_e)
        N = psi_e.shape[0]
        if self.mode == "global":
            A = np.broadcast_to(self.b_A, (N, self.r * self.r))
            B = np.broadcast_to(self.b_B, (N, self.r * self.n_u))
        else:
            A = psi_e @ self.W_A.T + self.b_A
            B = psi_e @ self.W_B.T + self.b_B
        return A.reshape(N, self.r, self.r), B.reshape(N, self.r, self.n_u)


def eval_operators(g: OperatorGen, psi_e: np.ndarray, **proj_kw) -> tuple[np.ndarray, np.ndarray]:
    """Projected ``(A, B)``; a single embedding gives 2-D outputs, a batch gives stacks."""
    psi_e = np.asarray(psi_e, dtype=float)
    if not np.all(np.isfinite(psi_e)):
        raise ValueError("non-finite environment embedding")
    single = psi_e.ndim == 1
    A_raw, B = g.raw(psi_e)
    A = spectral_project_with_info(A_raw, g.bound, **proj_kw)[0]
    if single:
        return A[0], np.array(B[0])
    return A, np.array(B)


# --------------------------------------------------------------------------- identification


def ridge_fit(Z: np.ndarray, U: np.ndarray, Zn: np.ndarray, mu_reg: float) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``min ||Zn - A Z - B U||^2 + mu_reg ||A||_F^2`` by the normal equations.

    Rows are samples.  Only ``A`` is penalised.
    """
    if mu_reg < 0:
        raise ValueError("mu_reg must be non-negative")
    r = Z.shape[1]
    R = np.hstack([Z, U])  # (N, r + n_u)
    G = R.T @ R
    reg = np.zeros(G.shape[0])
    reg[:r] = mu_reg
    G = G + np.diag(reg)
    if mu_reg == 0 and np.linalg.matrix_rank(G) < G.shape[0]:
        raise ValueError(
            f"regressor matrix is rank deficient ({np.linalg.matrix_rank(G)} < {G.shape[0]}); "
            "use a positive mu_reg"
        )
    theta = np.linalg.solve(G, R.T @ Zn).T  # (r, r + n_u)
    return theta[:, :r], theta[:, r:]


def cluster_envs(E: np.ndarray, mu_step: float = 0.1, w_step: float = 2.0) -> np.ndarray:
    """Integer cluster labels from quantized (mu, w) levels."""
    keys = np.stack([np.round(E[:, 0] / mu_step), np.round(E[:, 1] / w_step)], axis=1)
    _, labels = np.unique(keys, axis=0, return_inverse=True)
    return labels.reshape(-1)


def identify_from_latents(
    Z: np.ndarray,
    U: np.ndarray,
    Zn: np.ndarray,
    labels: np.ndarray,
    psi_rows: np.ndarray,
    g: OperatorGen,
    mu_reg: float,
    gen_reg: float = 0.1,
) -> tuple[OperatorGen, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Per-cluster ridge fits, then a ridge fit of the generator to them.

    ``psi_rows`` are the embeddings of each sample; a cluster uses the mean
    embedding of its members.  ``gen_reg`` penalises the generator weights
    (not the biases); with few clusters or a nearly constant embedding an
    unpenalised fit produces huge weights.  Returns the fitted generator (a
    copy of ``g``) and the per-cluster ``(A, B)`` solutions.
    """
    if len(Z) == 0:
        raise ValueError("no samples to identify from")
    out = g.copy()
    if g.mode == "global":
        A, B = ridge_fit(Z, U, Zn, mu_reg)
        out.b_A = A.reshape(-1).copy()
        out.b_B = B.reshape(-1).copy()
        return out, {0: (A, B)}
    sols: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    feats, targets_A, targets_B = [], [], []
    for c in np.unique(labels):
        m = labels == c
        A, B = ridge_fit(Z[m], U[m], Zn[m], mu_reg)
        sols[int(c)] = (A, B)
        feats.append(psi_rows[m].mean(axis=0))
        targets_A.append(A.reshape(-1))
        targets_B.append(B.reshape(-1))
    out.W_A, out.b_A = _ridge_affine(np.array(feats), np.array(targets_A), gen_reg)
    out.W_B, out.b_B = _ridge_affine(np.array(feats), np.array(targets_B), gen_reg)
    return out, sols


def _ridge_affine(F: np.ndarray, T: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """``T ~ F W^T + b`` with an L2 penalty on ``W`` only."""
    fm, tm = F.mean(axis=0), T.mean(axis=0)
    Fc, Tc = F - fm, T - tm
    if lam > 0:
        W = np.linalg.solve(Fc.T @ Fc + lam * np.eye(F.shape[1]), Fc.T @ Tc).T
    else:
        W = np.linalg.lstsq(Fc, Tc, rcond=None)[0].T
    return W.copy(), tm - W @ fm


@dataclass
class LiftedData:
    """Flat latent transitions ``z -> z_next`` under ``u`` in environment ``e``."""

    z: np.ndarray
    u: np.ndarray
    z_next: np.ndarray
    e: np.ndarray


def identify_warmstart(data, model, mu_reg: float = 1e-3, gen_reg: float = 0.1):
    """Warm-start the model's operator generator.

    ``data`` is either a trajectory ``Dataset``, encoded with the model's
    current encoder, or :class:`LiftedData` used as is.  Transitions are
    fitted per environment cluster and the generator is regressed onto the
    cluster solutions.  Returns the new generator (the model is not modified).
    """
    if isinstance(data, LiftedData):
        Z, U, Zn, E = data.z, data.u, data.z_next, data.e
        psi = model.embed(E)
    else:
        X, U, E, Xn = data.flat()
        if len(X) == 0:
            raise ValueError("dataset is empty")
        psi = model.embed(E)
        Z = model.encode_batch(X, E, psi)
        Zn = model.encode_batch(Xn, E, psi)
    g, _ = identify_from_latents(Z, U, Zn, cluster_envs(E), psi, model.opgen, mu_reg, gen_reg)
    return g


def dump_operators_csv(A: np.ndarray, B: np.ndarray, path_prefix: str) -> tuple[str, str]:
    pa, pb = f"{path_prefix}_A.csv", f"{path_prefix}_B.csv"
    np.savetxt(pa, A, delimiter=",", fmt="%.17g")
    np.savetxt(pb, B, delimiter=",", fmt="%.17g")
    return pa, pb
