"""Dense tanh networks with hand-written reverse and forward-mode passes.

Everything is batched over the leading axis.  ``Mlp.forward_cache`` records
the activations needed by ``backward`` (ordinary reverse mode), ``jvp``
(tangent propagation) and ``jvp_backward`` (reverse mode through the
tangent, used to differentiate Jacobian-vector products with respect to
parameters and inputs).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class Mlp:
    """``y = W_L tanh(... tanh(W_1 x + b_1) ...) + b_L``; linear output layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} vs weight {W.shape}")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim {W.shape[1]} != previous output dim")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [W.shape[0] for W in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.activation)

    def astype(self, dtype) -> "Mlp":
        return Mlp([W.astype(dtype) for W in self.weights], [b.astype(dtype) for b in self.biases], self.activation)

    # ------------------------------------------------------------------ primal

    def forward(self, x: np.ndarray) -> np.ndarray:
        a = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W.T + b
            if i < last:
                a = np.tanh(a)
        return a

    def forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns the output and ``[a_0, a_1, ..., a_{L-1}]`` (inputs of each layer)."""
        acts = [x]
        a = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W.T + b
            if i < last:
                a = np.tanh(a)
                acts.append(a)
        return a, acts

    def backward(self, acts: list[np.ndarray], gy: np.ndarray, need_params: bool = True):
        """Reverse pass for the output cotangent ``gy``.

        Returns ``(grads, gx)`` where ``grads`` follows ``params()`` ordering
        (``None`` when ``need_params`` is false).
        """
        L = len(self.weights)
        gW = [None] * L
        gb = [None] * L
        g = gy
        for i in range(L - 1, -1, -1):
            if need_params:
                gW[i] = g.T @ acts[i]
                gb[i] = g.sum(axis=0)
            g = g @ self.weights[i]
            if i > 0:
                g = g * (1.0 - acts[i] ** 2)
        grads = _interleave(gW, gb) if need_params else None
        return grads, g

    # ------------------------------------------------------------------ tangent

    def jvp(self, acts: list[np.ndarray], v: np.ndarray):
        """Jacobian-vector product at the cached point for input tangent ``v``.

        Returns ``(J v, tangents)``; ``tangents`` holds the hidden tangents
        before (``t``) and after (``q``) the activation derivative.
        """
        q = v
        qs, ts = [v], [None]
        L = len(self.weights)
        for i in range(L - 1):
            t = q @ self.weights[i].T
            q = t * (1.0 - acts[i + 1] ** 2)
            ts.append(t)
            qs.append(q)
        return q @ self.weights[-1].T, (qs, ts)

    def jvp_backward(self, acts: list[np.ndarray], tangents, g: np.ndarray):
        """Gradient of ``sum(g * J v)`` with the input tangent ``v`` held fixed.

        Returns ``(grads, gx)``: parameter gradients in ``params()`` order and
        the gradient with respect to the network input, which enters through
        the activation derivatives.
        """
        qs, ts = tangents
        L = len(self.weights)
        gW = [np.zeros_like(W) for W in self.weights]
        gb = [np.zeros_like(b) for b in self.biases]
        gW[-1] += g.T @ qs[L - 1]
        gq = g @ self.weights[-1]
        ga = np.zeros_like(acts[L - 1])
        for i in range(L - 1, 0, -1):
            a = acts[i]
            d = 1.0 - a ** 2
            gt = gq * d
            ga = ga - 2.0 * gq * ts[i] * a
            gs = ga * d
            W = self.weights[i - 1]
            gW[i - 1] += gt.T @ qs[i - 1] + gs.T @ acts[i - 1]
            gb[i - 1] += gs.sum(axis=0)
            gq = gt @ W
            ga = gs @ W
        return _interleave(gW, gb), ga


def _interleave(gW, gb):
    out = []
    for W, b in zip(gW, gb):
        out += [W, b]
    return out


def init_mlp(sizes: list[int], rng: np.random.Generator, zero_last: bool = False) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    Ws, bs = [], []
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero_last and i == len(sizes) - 2:
            W = np.zeros((fo, fi))
        else:
            lim = np.sqrt(6.0 / (fi + fo))
            W = rng.uniform(-lim, lim, size=(fo, fi))
        Ws.append(W)
        bs.append(np.zeros(fo))
    return Mlp(Ws, bs)


# --------------------------------------------------------------------------- spectral norms


@dataclass
class PowerIterResult:
    sigma: np.ndarray
    u: np.ndarray
    v: np.ndarray
    converged: np.ndarray
    iterations: int = 0


def power_iteration(mats: np.ndarray, n_iter: int = 20, tol: float = 1e-8, v0=None) -> PowerIterResult:
    """Largest singular triplet of each matrix in a ``(..., m, n)`` stack."""
    mats = np.asarray(mats, dtype=float)
    batch = mats.shape[:-2]
    n = mats.shape[-1]
    if v0 is None:
        v = np.ones(batch + (n,)) + 0.01 * np.arange(n)
    else:
        v = np.array(v0, dtype=float)
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    sigma = np.zeros(batch)
    converged = np.zeros(batch, dtype=bool)
    it = 0
    for it in range(1, n_iter + 1):
        u = np.einsum("...ij,...j->...i", mats, v)
        s_new = np.linalg.norm(u, axis=-1)
        u = u / np.where(s_new > 0, s_new, 1.0)[..., None]
        w = np.einsum("...ij,...i->...j", mats, u)
        nw = np.linalg.norm(w, axis=-1)
        v = w / np.where(nw > 0, nw, 1.0)[..., None]
        s_new = nw  # ||A^T u|| >= ||A v_old||, both lower bounds of sigma_max
        converged = np.abs(s_new - sigma) <= tol * np.maximum(s_new, 1e-300)
        sigma = s_new
        if np.all(converged):
            break
    u = np.einsum("...ij,...j->...i", mats, v)
    s_fin = np.linalg.norm(u, axis=-1)
    u = u / np.where(s_fin > 0, s_fin, 1.0)[..., None]
    sigma = np.maximum(sigma, s_fin)
    return PowerIterResult(sigma, u, v, converged | (sigma == 0), it)


def spectral_project(W: np.ndarray, bound: float, n_iter: int = 20, tol: float = 1e-8) -> np.ndarray:
    """Rescale ``W`` so its spectral norm does not exceed ``bound``.

    Works on a single matrix or a stack.  Power iteration supplies the
    estimate; a dense check guards against slow convergence on clustered
    singular values so the output always satisfies the bound.
    """
    return spectral_project_with_info(W, bound, n_iter, tol)[0]


def spectral_project_with_info(
    W: np.ndarray, bound: float, n_iter: int = 20, tol: float = 1e-8, guard: bool = True
):
    """Like :func:`spectral_project` but also returns ``(scale, sigma, u, v)``.

    With ``guard`` the power-iteration triplet is replaced by the dense SVD
    one, so the bound holds exactly and ``u``, ``v`` are accurate enough
    for gradients; the return of ``power_iteration`` is used alone
    otherwise.
    """
    if not bound > 0:
        raise ValueError(f"projection bound must be positive, got {bound}")
    W = np.asarray(W, dtype=float)
    stack = W.reshape((-1,) + W.shape[-2:])
    if guard:
        Uf, Sf, Vt = np.linalg.svd(stack)
        sigma, u, v = Sf[:, 0], Uf[:, :, 0], Vt[:, 0, :]
    else:
        pi = power_iteration(stack, n_iter, tol)
        sigma, u, v = pi.sigma, pi.u, pi.v
    scale = np.where(sigma > bound, bound / np.where(sigma > 0, sigma, 1.0), 1.0)
    out = stack * scale[:, None, None]
    shape = W.shape[:-2]
    return (
        out.reshape(W.shape),
        scale.reshape(shape),
        sigma.reshape(shape),
        u.reshape(shape + u.shape[-1:]),
        v.reshape(shape + v.shape[-1:]),
    )


def spectral_norm(W: np.ndarray) -> np.ndarray:
    """Exact largest singular value (dense SVD) of a matrix or stack."""
    return np.linalg.norm(np.asarray(W, dtype=float), ord=2, axis=(-2, -1))


def warn_nonconverged(what: str, count: int) -> None:
    if count:
        warnings.warn(f"{what}: power iteration did not converge for {count} point(s)", RuntimeWarning)
