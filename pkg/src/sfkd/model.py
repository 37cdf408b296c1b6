"""SFKD model container: embedding, conditioned encoder, decoder, residual, operators."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .koopman import OperatorGen, eval_operators
from .nn import Mlp, init_mlp, warn_nonconverged
from .vehicle import wrap_angle

N_X, N_U, N_E = 4, 2, 2
CHECKPOINT_VERSION = 1
_MAGIC = b"SFKDCKPT"


@dataclass(frozen=True)
class ModelConfig:
    r: int = 32
    d_e: int = 8
    psi_hidden: tuple[int, ...] = (32,)
    enc_hidden: tuple[int, ...] = (64, 64)
    dec_hidden: tuple[int, ...] = (64, 64)
    res_hidden: tuple[int, ...] = (64, 64, 64)
    beta: float = 0.15
    eps0: float = 0.02
    fiber: bool = True  # False: encoder ignores e and operators are global


# fixed input/output scalings; the model frame puts the vehicle near the origin
X_OFFSET = np.array([10.0, 0.0, 0.0, 5.0])
X_SCALE = np.array([10.0, 5.0, 1.0, 3.0])
E_OFFSET = np.array([0.6, 0.0])
E_SCALE = np.array([0.3, 8.0])
U_SCALE = np.array([0.5, 3.0])


@dataclass
class SfkdModel:
    psi_net: Mlp
    encoder: Mlp
    decoder: Mlp
    residual: Mlp
    opgen: OperatorGen
    beta: float
    eps0: float
    fiber: bool = True
    x_offset: np.ndarray = field(default_factory=lambda: X_OFFSET.copy())
    x_scale: np.ndarray = field(default_factory=lambda: X_SCALE.copy())
    e_offset: np.ndarray = field(default_factory=lambda: E_OFFSET.copy())
    e_scale: np.ndarray = field(default_factory=lambda: E_SCALE.copy())
    u_scale: np.ndarray = field(default_factory=lambda: U_SCALE.copy())

    def __post_init__(self):
        if not (0 < self.beta < 1 and self.eps0 > 0 and self.beta + self.eps0 < 1):
            raise ValueError(f"need beta in (0,1), eps0 > 0, beta + eps0 < 1; got {self.beta}, {self.eps0}")
        r, d_e = self.r, self.d_e
        enc_in = N_X + (d_e if self.fiber else 0)
        checks = [
            (self.psi_net.in_dim, N_E, "psi_net input"),
            (self.encoder.in_dim, enc_in, "encoder input"),
            (self.decoder.in_dim, r, "decoder input"),
            (self.decoder.out_dim, N_X, "decoder output"),
            (self.residual.in_dim, r + N_U + d_e, "residual input"),
            (self.residual.out_dim, r, "residual output"),
            (self.opgen.r, r, "operator dimension"),
            (self.opgen.d_e, d_e, "operator embedding"),
        ]
        for got, want, what in checks:
            if got != want:
                raise ValueError(f"{what}: expected {want}, got {got}")

    @property
    def r(self) -> int:
        return self.encoder.out_dim

    @property
    def d_e(self) -> int:
        return self.psi_net.out_dim

    @property
    def spectral_bound(self) -> float:
        return 1.0 - self.beta - self.eps0

    def nets(self) -> dict[str, Mlp]:
        return {"psi_net": self.psi_net, "encoder": self.encoder, "decoder": self.decoder, "residual": self.residual}

    def copy(self) -> "SfkdModel":
        return SfkdModel(
            self.psi_net.copy(), self.encoder.copy(), self.decoder.copy(), self.residual.copy(),
            self.opgen.copy(), self.beta, self.eps0, self.fiber,
            self.x_offset.copy(), self.x_scale.copy(), self.e_offset.copy(), self.e_scale.copy(),
            self.u_scale.copy(),
        )

    def astype(self, dtype) -> "SfkdModel":
        """Copy with every array cast (float32 copies make controller rollouts faster)."""
        return SfkdModel(
            self.psi_net.astype(dtype), self.encoder.astype(dtype), self.decoder.astype(dtype),
            self.residual.astype(dtype), self.opgen.astype(dtype), self.beta, self.eps0, self.fiber,
            *(a.astype(dtype) for a in (self.x_offset, self.x_scale, self.e_offset, self.e_scale, self.u_scale)),
        )

    @property
    def dtype(self):
        return self.encoder.weights[0].dtype

    # ------------------------------------------------------------------ batched evaluation

    def psi_input(self, E):
        return (np.atleast_2d(E) - self.e_offset) / self.e_scale

    def embed(self, E) -> np.ndarray:
        return self.psi_net.forward(self.psi_input(E))

    def encoder_input(self, X, psi):
        xn = (np.atleast_2d(X) - self.x_offset) / self.x_scale
        if not self.fiber:
            return xn
        psi = np.broadcast_to(psi, (xn.shape[0], psi.shape[-1]))
        return np.hstack([xn, psi])

    def encode_batch(self, X, E, psi=None) -> np.ndarray:
        if psi is None:
            psi = self.embed(E)
        return self.encoder.forward(self.encoder_input(X, psi))

    def decode_raw(self, Z) -> np.ndarray:
        """Decoder output in physical units, heading not wrapped."""
        return self.decoder.forward(np.atleast_2d(Z)) * self.x_scale + self.x_offset

    def decode_batch(self, Z) -> np.ndarray:
        X = self.decode_raw(Z)
        X[:, 2] = wrap_angle(X[:, 2])
        return X

    def residual_input(self, Z, U, psi):
        Z = np.atleast_2d(Z)
        N = Z.shape[0]
        return np.hstack([
            Z,
            np.broadcast_to(np.atleast_2d(U) / self.u_scale, (N, N_U)),
            np.broadcast_to(np.atleast_2d(psi), (N, self.d_e)),
        ])

    def residual_batch(self, Z, U, psi) -> np.ndarray:
        return self.residual.forward(self.residual_input(Z, U, psi))

    def operators(self, psi, **kw):
        return eval_operators(self.opgen, psi, **kw)

    def step_latent(self, Z, U, psi, A=None, B=None) -> np.ndarray:
        """One SFKD step ``A z + B u + r(z, u, e)`` for a batch sharing one environment."""
        if A is None:
            A, B = self.operators(np.asarray(psi).reshape(-1))
        return Z @ A.T + np.atleast_2d(U) @ B.T + self.residual_batch(Z, U, psi)

    def residual_jacobian_sigma(self, Z, U, psi, n_iter: int = 500, tol: float = 1e-12, v0=None):
        """Batched ``||d r / d z||_2`` by power iteration on ``J^T J``.

        Returns ``(sigma, u, v, converged, acts)``; ``u``/``v`` are the left and
        right singular vectors at convergence and ``acts`` is the forward
        cache of the residual network at the given points.  Unconverged rows
        carry the Frobenius norm of ``J``, an upper bound on ``sigma``.
        ``v0`` warm-starts the right singular vectors.
        """
        X = self.residual_input(Z, U, psi)
        _, acts = self.residual.forward_cache(X)
        N, r = X.shape[0], self.r
        pad = np.zeros((N, X.shape[1] - r))
        v = np.ones((N, r)) + 0.01 * np.arange(r) if v0 is None else np.array(v0, dtype=float)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        sigma = np.zeros(N)
        converged = np.zeros(N, dtype=bool)
        for _ in range(n_iter):
            Jv, _ = self.residual.jvp(acts, np.hstack([v, pad]))
            s1 = np.linalg.norm(Jv, axis=1)
            u = Jv / np.where(s1 > 0, s1, 1.0)[:, None]
            _, gx = self.residual.backward(acts, u, need_params=False)
            w = gx[:, :r]
            s2 = np.linalg.norm(w, axis=1)
            v = w / np.where(s2 > 0, s2, 1.0)[:, None]
            converged = np.abs(s2 - sigma) <= tol * np.maximum(s2, 1e-300)
            sigma = s2
            if np.all(converged):
                break
        Jv, _ = self.residual.jvp(acts, np.hstack([v, pad]))
        s_fin = np.linalg.norm(Jv, axis=1)
        u = Jv / np.where(s_fin > 0, s_fin, 1.0)[:, None]
        sigma = np.maximum(sigma, s_fin)
        converged |= sigma == 0
        if not np.all(converged):
            bad = np.flatnonzero(~converged)
            J = self.residual_jacobian_dense(Z, U, psi)[bad]
            sigma[bad] = np.linalg.norm(J, axis=(1, 2))
            warn_nonconverged("residual Jacobian norm", len(bad))
        return sigma, u, v, converged, acts

    def residual_jacobian_dense(self, Z, U, psi) -> np.ndarray:
        """``d r / d z`` built column by column with exact JVPs, shape (N, r, r)."""
        X = self.residual_input(Z, U, psi)
        _, acts = self.residual.forward_cache(X)
        N, r = X.shape[0], self.r
        cols = []
        for j in range(r):
            t = np.zeros_like(X)
            t[:, j] = 1.0
            cols.append(self.residual.jvp(acts, t)[0])
        return np.stack(cols, axis=2)


def build_model(cfg: ModelConfig, seed: int) -> SfkdModel:
    rng = np.random.default_rng(seed)
    enc_in = N_X + (cfg.d_e if cfg.fiber else 0)
    psi_net = init_mlp([N_E, *cfg.psi_hidden, cfg.d_e], rng)
    encoder = init_mlp([enc_in, *cfg.enc_hidden, cfg.r], rng)
    decoder = init_mlp([cfg.r, *cfg.dec_hidden, N_X], rng)
    residual = init_mlp([cfg.r + N_U + cfg.d_e, *cfg.res_hidden, cfg.r], rng, zero_last=True)
    mode = "conditioned" if cfg.fiber else "global"
    opgen = OperatorGen.zeros(cfg.r, N_U, cfg.d_e, 1.0 - cfg.beta - cfg.eps0, mode)
    return SfkdModel(psi_net, encoder, decoder, residual, opgen, cfg.beta, cfg.eps0, cfg.fiber)


# --------------------------------------------------------------------------- single-point API


def embed_env(m: SfkdModel, e) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    _finite(e, "environment")
    return m.embed(e)[0]


def encode(m: SfkdModel, x, e) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _finite(x, "state")
    _finite(np.asarray(e, dtype=float), "environment")
    return m.encode_batch(x, np.asarray(e, dtype=float))[0]


def decode(m: SfkdModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    _finite(z, "latent")
    return m.decode_batch(z)[0]


def residual_forward(m: SfkdModel, z, u, e) -> np.ndarray:
    return m.residual_batch(np.asarray(z, dtype=float), np.asarray(u, dtype=float), embed_env(m, e))[0]


def residual_jacobian_norm(m: SfkdModel, z, u, e, n_iter: int = 500, tol: float = 1e-12):
    """Spectral norm of ``d r / d z`` at one point, plus a convergence flag."""
    sigma, _, _, conv, _ = m.residual_jacobian_sigma(
        np.asarray(z, dtype=float), np.asarray(u, dtype=float), embed_env(m, e), n_iter, tol
    )
    return float(sigma[0]), bool(conv[0])


def transport(m: SfkdModel, z, e_from, e_to) -> np.ndarray:
    """Carry a latent state to another environment's fiber by re-encoding.

    ``e_from`` is accepted for interface symmetry; the decoder does not take
    the environment.
    """
    del e_from
    return encode(m, decode(m, z), e_to)


def _finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite {what}: {a}")


# --------------------------------------------------------------------------- checkpoints


def _tensors(m: SfkdModel) -> dict[str, np.ndarray]:
    out = {}
    for name, net in m.nets().items():
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            out[f"{name}.W{i}"] = W
            out[f"{name}.b{i}"] = b
    for k in ("W_A", "b_A", "W_B", "b_B"):
        out[f"opgen.{k}"] = getattr(m.opgen, k)
    for k in ("x_offset", "x_scale", "e_offset", "e_scale", "u_scale"):
        out[f"norm.{k}"] = getattr(m, k)
    return out


def save_checkpoint(m: SfkdModel, path: str | Path, extra: dict | None = None) -> None:
    """Write a self-describing binary checkpoint.

    Layout: magic, little-endian u64 header length, JSON header, then the raw
    float64 tensors in header order.  No timestamps, so identical models give
    identical files.
    """
    tensors = _tensors(m)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "r": m.r,
        "d_e": m.d_e,
        "beta": m.beta,
        "eps0": m.eps0,
        "fiber": m.fiber,
        "opgen_mode": m.opgen.mode,
        "opgen_bound": m.opgen.bound,
        "activation": "tanh",
        "layers": {name: len(net.weights) for name, net in m.nets().items()},
        "tensors": [[k, list(v.shape)] for k, v in tensors.items()],
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[SfkdModel, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path} is not an SFKD checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    off = 16 + n
    t = {}
    for name, shape in header["tensors"]:
        cnt = int(np.prod(shape)) if shape else 1
        t[name] = np.frombuffer(data, dtype="<f8", count=cnt, offset=off).reshape(shape).astype(float)
        off += 8 * cnt
    nets = {}
    for name, nl in header["layers"].items():
        nets[name] = Mlp([t[f"{name}.W{i}"] for i in range(nl)], [t[f"{name}.b{i}"] for i in range(nl)])
    r = header["r"]
    opgen = OperatorGen(
        t["opgen.W_A"], t["opgen.b_A"], t["opgen.W_B"], t["opgen.b_B"],
        r, N_U, header["opgen_bound"], header["opgen_mode"],
    )
    m = SfkdModel(
        nets["psi_net"], nets["encoder"], nets["decoder"], nets["residual"], opgen,
        header["beta"], header["eps0"], header["fiber"],
        t["norm.x_offset"], t["norm.x_scale"], t["norm.e_offset"], t["norm.e_scale"], t["norm.u_scale"],
    )
    return m, header.get("extra", {})
