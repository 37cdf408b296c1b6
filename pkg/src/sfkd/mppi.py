"""Sampling-based MPPI control over SFKD latent rollouts."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .model import SfkdModel
from .vehicle import DEFAULT_PARAMS, PathConfig, VehicleParams, reference_state, wrap_angle


@dataclass(frozen=True)
class MppiConfig:
    M: int = 512
    T: int = 20
    sigma_u: tuple[float, float] = (0.05, 0.3)  # std per control channel (delta rad, a m/s^2)
    lambda_temp: float = 1.0
    lambda_latent: float = 1.0
    w_lat: float = 10.0
    w_head: float = 2.0
    w_u: float = 0.1
    terminal_scale: float = 5.0  # terminal pose weights = scale * stage pose weights
    dt: float = 0.1
    anchor_decode: bool = True  # cancel decoder bias against the measured state
    u_min: tuple[float, float] = (-DEFAULT_PARAMS.delta_max, -DEFAULT_PARAMS.a_max)
    u_max: tuple[float, float] = (DEFAULT_PARAMS.delta_max, DEFAULT_PARAMS.a_max)

    def __post_init__(self):
        if self.M < 1 or self.T < 1:
            raise ValueError("M and T must be >= 1")
        if min(self.sigma_u) <= 0:
            raise ValueError("sigma_u entries must be positive")
        if not self.lambda_temp > 0:
            raise ValueError("lambda_temp must be positive")
        if len(self.u_min) != len(self.sigma_u) or len(self.u_max) != len(self.sigma_u):
            raise ValueError("control limits and sigma_u must have one entry per channel")

    @classmethod
    def for_params(cls, params: VehicleParams, **kw) -> "MppiConfig":
        return cls(u_min=(-params.delta_max, -params.a_max), u_max=(params.delta_max, params.a_max), **kw)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ControllerState:
    U: np.ndarray  # (T, n_u) nominal sequence
    prev_u: np.ndarray
    rng: np.random.Generator = field(repr=False)

    @classmethod
    def initial(cls, cfg: MppiConfig, seed: int) -> "ControllerState":
        n_u = len(cfg.sigma_u)
        return cls(np.zeros((cfg.T, n_u)), np.zeros(n_u), np.random.default_rng(seed))


@dataclass
class UpdateResult:
    U: np.ndarray
    weights: np.ndarray
    ok: bool
    min_cost: float
    mean_cost: float
    ess: float


# --------------------------------------------------------------------------- generic core


def saturate(U: np.ndarray, cfg: MppiConfig) -> np.ndarray:
    return np.clip(U, np.asarray(cfg.u_min), np.asarray(cfg.u_max))


def softmax_weights(costs: np.ndarray, lambda_temp: float) -> np.ndarray:
    """Min-subtracted softmax of ``-costs / lambda_temp``; infinite costs get weight 0."""
    costs = np.asarray(costs, dtype=float)
    finite = np.isfinite(costs)
    w = np.zeros_like(costs)
    if not finite.any():
        return w
    c = costs[finite]
    e = np.exp(-(c - c.min()) / lambda_temp)
    w[finite] = e / e.sum()
    return w


def mppi_weighted_update(U: np.ndarray, perturbations: np.ndarray, costs: np.ndarray, cfg: MppiConfig) -> UpdateResult:
    """``u_t += sum_m w_m du_t^(m)``, then saturate.

    When every cost is infinite the nominal sequence is returned unchanged
    with ``ok`` false.
    """
    costs = np.asarray(costs, dtype=float)
    costs = np.where(np.isnan(costs), np.inf, costs)
    finite = np.isfinite(costs)
    if not finite.any():
        return UpdateResult(U.copy(), np.zeros_like(costs), False, math.inf, math.inf, 0.0)
    w = softmax_weights(costs, cfg.lambda_temp)
    dU = np.tensordot(w[finite], perturbations[finite], axes=(0, 0))
    new = saturate(U + dU, cfg)
    return UpdateResult(new, w, True, float(costs[finite].min()), float(costs[finite].mean()), float(1.0 / np.sum(w ** 2)))


def sample_perturbations(rng: np.random.Generator, U: np.ndarray, cfg: MppiConfig) -> tuple[np.ndarray, np.ndarray]:
    """Saturated perturbed sequences ``(M, T, n_u)`` and the effective perturbations."""
    noise = rng.standard_normal((cfg.M,) + U.shape) * np.asarray(cfg.sigma_u)
    U_pert = saturate(U[None] + noise, cfg)
    return U_pert, U_pert - U[None]


def mppi_iteration(
    U: np.ndarray, rng: np.random.Generator, cfg: MppiConfig, evaluate: Callable[[np.ndarray], np.ndarray]
) -> UpdateResult:
    """One sample / evaluate / reweight pass for an arbitrary rollout cost."""
    U_pert, dU = sample_perturbations(rng, U, cfg)
    return mppi_weighted_update(U, dU, evaluate(U_pert), cfg)


def shift_sequence(U: np.ndarray) -> np.ndarray:
    """Receding-horizon warm start: drop the first control, repeat the last."""
    return np.vstack([U[1:], U[-1:]])


# --------------------------------------------------------------------------- latent rollouts


@dataclass
class RolloutRefs:
    """Reference sequence of length ``T + 1`` in the controller frame.

    With ``path`` set, lateral and heading errors are taken against the path
    curve at the decoded position (``origin`` maps the controller frame back
    to path coordinates); otherwise against the time-indexed poses ``X``.
    """

    X: np.ndarray  # (T+1, 4) physical poses
    Z: np.ndarray  # (T+1, r) latent encodings
    path: PathConfig | None = None
    origin: tuple[float, float] = (0.0, 0.0)

    def errors(self, Xd: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        if self.path is None:
            return pose_errors(Xd, self.X[k])
        return path_errors(Xd, self.path, self.origin)


def pose_errors(Xd: np.ndarray, Xr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lateral offset in the reference frame and wrapped heading error."""
    dx = Xd[..., 0] - Xr[..., 0]
    dy = Xd[..., 1] - Xr[..., 1]
    lat = -np.sin(Xr[..., 2]) * dx + np.cos(Xr[..., 2]) * dy
    return lat, wrap_angle(Xd[..., 2] - Xr[..., 2])


def path_errors(Xd: np.ndarray, path: PathConfig, origin=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """First-order signed offset from the path curve and heading error to its tangent."""
    px = Xd[..., 0] + origin[0]
    theta = np.arctan(path.slope(px))
    lat = (Xd[..., 1] + origin[1] - path.lateral(px)) * np.cos(theta)
    return lat, wrap_angle(Xd[..., 2] - theta)


def rollout_cost(
    m: SfkdModel,
    z0: np.ndarray,
    U_pert: np.ndarray,
    refs: RolloutRefs,
    cfg: MppiConfig,
    psi: np.ndarray,
    ops: tuple[np.ndarray, np.ndarray] | None = None,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Cost of each control sequence in ``U_pert`` (``(M, T, n_u)`` or ``(T, n_u)``).

    Stage ``k = 0..T-1`` charges the decoded pose of ``z_k`` against
    ``refs[k]`` plus ``w_u ||u_k||^2`` and the latent penalty; the terminal
    term charges ``z_T``.  With ``x0`` and ``cfg.anchor_decode`` decoded
    poses are shifted by ``x0 - decode(z0)``.  Non-finite rollouts cost
    ``inf``.
    """
    dt = m.dtype
    single = U_pert.ndim == 2
    U_pert = (U_pert[None] if single else U_pert).astype(dt, copy=False)
    Mn, T, _ = U_pert.shape
    A, B = ops if ops is not None else m.operators(np.asarray(psi).reshape(-1))
    A, B, psi = A.astype(dt, copy=False), B.astype(dt, copy=False), np.asarray(psi, dtype=dt)
    z0 = np.asarray(z0, dtype=dt)
    offset = 0.0
    if cfg.anchor_decode and x0 is not None:
        offset = np.asarray(x0, dtype=dt) - m.decode_raw(z0[None])[0]
    Z = np.broadcast_to(z0, (Mn, len(z0))).copy()
    J = np.zeros(Mn, dtype=dt)
    with np.errstate(all="ignore"):
        for k in range(T + 1):
            Xd = m.decode_raw(Z) + offset
            lat, head = refs.errors(Xd, k)
            pose = cfg.w_lat * lat ** 2 + cfg.w_head * head ** 2
            lat_pen = cfg.lambda_latent * np.sum((Z - refs.Z[k]) ** 2, axis=1)
            if k == T:
                J += cfg.terminal_scale * pose + lat_pen
                break
            u = U_pert[:, k]
            J += pose + lat_pen + cfg.w_u * np.sum(u ** 2, axis=1)
            Z = Z @ A.T + u @ B.T + m.residual_batch(Z, u, psi)
    J = np.where(np.isfinite(J), J.astype(float), np.inf)
    return J[0] if single else J


def local_frame(x: np.ndarray) -> np.ndarray:
    """Shift a state so the vehicle sits at the origin (heading unchanged)."""
    out = np.array(x, dtype=float)
    out[..., :2] = 0.0
    return out


def build_refs(m: SfkdModel, x_t, e_t, path: PathConfig, t: float, cfg: MppiConfig, psi=None) -> RolloutRefs:
    ts = t + cfg.dt * np.arange(cfg.T + 1)
    Xr = reference_state(path, ts).astype(m.dtype)
    Xr[:, :2] -= np.asarray(x_t, dtype=float)[:2]
    psi = m.embed(np.asarray(e_t, dtype=float)) if psi is None else psi
    Zr = m.encode_batch(Xr, None, np.broadcast_to(psi, (len(Xr), m.d_e)))
    return RolloutRefs(Xr, Zr, path, (float(x_t[0]), float(x_t[1])))


def control_step(
    ctrl: ControllerState,
    m: SfkdModel,
    x_t,
    e_t,
    path: PathConfig,
    t: float,
    cfg: MppiConfig,
) -> tuple[np.ndarray, ControllerState, UpdateResult]:
    """One receding-horizon MPPI step in the vehicle-centred frame.

    The environment is held at ``e_t`` over the horizon.  Returns the
    applied control, the advanced controller state and the update
    diagnostics.
    """
    e_t = np.asarray(e_t, dtype=m.dtype)
    psi = m.embed(e_t)
    ops = m.operators(psi.reshape(-1))
    x_loc = local_frame(np.asarray(x_t, dtype=float)).astype(m.dtype)
    z0 = m.encode_batch(x_loc, None, psi)[0]
    refs = build_refs(m, x_t, e_t, path, t, cfg, psi)
    evaluate = lambda Up: rollout_cost(m, z0, Up, refs, cfg, psi, ops, x_loc)
    res = mppi_iteration(ctrl.U, ctrl.rng, cfg, evaluate)
    u = res.U[0].copy()
    nxt = ControllerState(shift_sequence(res.U), u, ctrl.rng)
    return u, nxt, res


# --------------------------------------------------------------------------- LQR benchmark


@dataclass(frozen=True)
class DoubleIntegrator:
    dt: float = 0.1
    q: tuple[float, float] = (1.0, 0.1)
    r: float = 0.1
    x0: tuple[float, float] = (1.0, 0.0)
    steps: int = 60

    @property
    def A(self) -> np.ndarray:
        return np.array([[1.0, self.dt], [0.0, 1.0]])

    @property
    def B(self) -> np.ndarray:
        return np.array([[0.5 * self.dt ** 2], [self.dt]])

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.q)

    def riccati(self) -> tuple[np.ndarray, np.ndarray]:
        from scipy.linalg import solve_discrete_are

        P = solve_discrete_are(self.A, self.B, self.Q, np.array([[self.r]]))
        K = np.linalg.solve(self.r + self.B.T @ P @ self.B, self.B.T @ P @ self.A)
        return P, K


def episode_cost(sys: DoubleIntegrator, X: np.ndarray, U: np.ndarray, P: np.ndarray) -> float:
    """Stage costs over the episode plus the LQR cost-to-go of the final state."""
    stage = np.einsum("ni,ij,nj->", X[:-1], sys.Q, X[:-1]) + sys.r * np.sum(U ** 2)
    return float(stage + X[-1] @ P @ X[-1])


def lqr_episode(sys: DoubleIntegrator) -> float:
    P, K = sys.riccati()
    x = np.array(sys.x0, dtype=float)
    X, U = [x], []
    for _ in range(sys.steps):
        u = -(K @ x)
        x = sys.A @ x + sys.B @ u
        X.append(x)
        U.append(u)
    return episode_cost(sys, np.array(X), np.array(U), P)


def mppi_double_integrator(sys: DoubleIntegrator, cfg: MppiConfig, seed: int) -> float:
    """Realised episode cost of MPPI using the true linear model for rollouts.

    The rollout cost mirrors the LQR objective with the Riccati matrix as
    terminal weight.
    """
    P, _ = sys.riccati()
    rng = np.random.default_rng(seed)
    A, B, Q = sys.A, sys.B, sys.Q

    def evaluate(Up: np.ndarray, x0: np.ndarray) -> np.ndarray:
        X = np.broadcast_to(x0, (len(Up), 2)).copy()
        J = np.zeros(len(Up))
        for k in range(Up.shape[1]):
            J += np.einsum("ni,ij,nj->n", X, Q, X) + sys.r * Up[:, k, 0] ** 2
            X = X @ A.T + Up[:, k] @ B.T
        return J + np.einsum("ni,ij,nj->n", X, P, X)

    x = np.array(sys.x0, dtype=float)
    U = np.zeros((cfg.T, 1))
    Xs, Us = [x], []
    for _ in range(sys.steps):
        res = mppi_iteration(U, rng, cfg, lambda Up: evaluate(Up, x))
        u = res.U[0].copy()
        x = A @ x + B @ u
        Xs.append(x)
        Us.append(u)
        U = shift_sequence(res.U)
    return episode_cost(sys, np.array(Xs), np.array(Us), P)
