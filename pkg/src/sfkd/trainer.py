"""Joint training under prediction + contraction + reconstruction losses."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .koopman import identify_warmstart
from .model import N_U, N_X, ModelConfig, SfkdModel, build_model, save_checkpoint
from .nn import spectral_norm, spectral_project_with_info

ABLATIONS = ("full", "no_fiber", "no_contr")


class TrainingError(RuntimeError):
    def __init__(self, msg: str, log: "TrainLog | None" = None):
        super().__init__(msg)
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    lambda_c: float = 10.0
    lambda_r: float = 1.0
    lambda_roll: float = 1.0  # decoded multi-step rollout weight
    rollout_horizon: int = 20
    rollout_batch: int = 32
    mu_reg: float = 1e-3
    learning_rate: float = 1e-3
    epochs: int = 60
    batch_size: int = 256
    contraction_sample_count: int = 16
    ablation: str = "full"
    seed: int = 0
    momentum: float = 0.9
    optimizer: str = "momentum"  # "momentum" | "adam"
    grad_clip: float = 10.0  # global gradient-norm cap; 0 disables
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    audit_grid: int = 9
    audit_points: int = 64

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        for k in ("lambda_c", "lambda_r", "lambda_roll", "mu_reg", "learning_rate", "grad_clip"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def effective(self) -> "TrainConfig":
        """Apply the ablation switches."""
        cfg = self
        if cfg.ablation == "no_contr":
            cfg = replace(cfg, lambda_c=0.0)
        if cfg.ablation == "no_fiber":
            cfg = replace(cfg, model=replace(cfg.model, fiber=False))
        return cfg


@dataclass
class EpochRecord:
    epoch: int
    l_pred: float
    l_contr: float
    l_recon: float
    l_roll: float
    max_specnorm_A: float
    max_jac_norm: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    COLUMNS = ("epoch", "l_pred", "l_contr", "l_recon", "l_roll", "max_specnorm_A", "max_jac_norm", "seconds")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for rec in self.records:
                w.writerow([rec.epoch] + [f"{getattr(rec, c):.17g}" for c in self.COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), *(float(r[c]) for c in cls.COLUMNS[1:])) for r in rows])


# --------------------------------------------------------------------------- parameters


def model_params(m: SfkdModel) -> list[np.ndarray]:
    """Trainable arrays in a fixed order (mutated in place by the optimizer)."""
    out = []
    for net in (m.psi_net, m.encoder, m.decoder, m.residual):
        out += net.params()
    out += m.opgen.params()
    return out


@dataclass
class Batch:
    x: np.ndarray
    u: np.ndarray
    e: np.ndarray
    x_next: np.ndarray

    def __len__(self):
        return len(self.x)


@dataclass
class Windows:
    """Multi-step windows in a frame centred on each window's first position."""

    x: np.ndarray  # (W, H+1, 4)
    u: np.ndarray  # (W, H, 2)
    e: np.ndarray  # (W, H, 2)

    def __len__(self):
        return len(self.x)

    @property
    def horizon(self) -> int:
        return self.u.shape[1]


def sample_windows(d: Dataset, horizon: int, count: int, rng: np.random.Generator) -> Windows:
    S, L = d.x.shape[:2]
    H = min(horizon, L)
    seg = rng.integers(S, size=count)
    start = rng.integers(L - H + 1, size=count)
    steps = start[:, None] + np.arange(H)
    X = np.concatenate([d.x[seg[:, None], steps], d.x_next[seg, start + H - 1][:, None]], axis=1)
    X[:, :, :2] -= X[:, :1, :2]
    return Windows(X, d.u[seg[:, None], steps], d.e[seg[:, None], steps])


@dataclass
class LossResult:
    total: float
    parts: dict[str, float]
    grads: list[np.ndarray] | None = None
    jac_norms: np.ndarray | None = None
    jac_v: np.ndarray | None = None


def _check_finite(parts: dict[str, float]) -> None:
    for k, v in parts.items():
        if not math.isfinite(v):
            raise TrainingError(f"non-finite loss component {k} = {v}")


@dataclass
class _OpCache:
    inv: np.ndarray
    first: np.ndarray
    psi_u: np.ndarray
    A_raw: np.ndarray
    scale: np.ndarray
    sigma: np.ndarray
    u: np.ndarray
    v: np.ndarray


def _operators_forward(m: SfkdModel, E: np.ndarray, Psi: np.ndarray):
    """Projected operators per row, evaluated once per distinct environment."""
    if m.opgen.mode == "global":
        inv = np.zeros(len(E), dtype=int)
        first = np.zeros(1, dtype=int)
    else:
        _, first, inv = np.unique(E, axis=0, return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
    psi_u = Psi[first]
    A_raw, B_u = m.opgen.raw(psi_u)
    A_u, scale, sigma, uA, vA = spectral_project_with_info(A_raw, m.opgen.bound, n_iter=50, tol=1e-12)
    return A_u[inv], B_u[inv], _OpCache(inv, first, psi_u, A_raw, scale, sigma, uA, vA)


def _operators_backward(m: SfkdModel, c: _OpCache, gA: np.ndarray, gB: np.ndarray, gPsi: np.ndarray):
    """Generator gradients; embedding gradients are added into ``gPsi`` in place."""
    n, r = len(c.psi_u), m.r
    gA_u = np.zeros((n, r, r))
    gB_u = np.zeros((n, r, N_U))
    np.add.at(gA_u, c.inv, gA)
    np.add.at(gB_u, c.inv, gB)
    gA_raw = gA_u * c.scale[:, None, None]
    hit = c.scale < 1.0
    if np.any(hit):
        # d(b A / sigma) with sigma = u^T A v
        inner = np.sum(gA_u[hit] * c.A_raw[hit], axis=(1, 2))
        outer = c.u[hit][:, :, None] * c.v[hit][:, None, :]
        gA_raw[hit] -= (m.opgen.bound * inner / c.sigma[hit] ** 2)[:, None, None] * outer
    gA_flat = gA_raw.reshape(n, -1)
    gB_flat = gB_u.reshape(n, -1)
    if m.opgen.mode == "global":
        return [gA_flat.sum(axis=0), gB_flat.sum(axis=0)]
    np.add.at(gPsi, c.first, gA_flat @ m.opgen.W_A + gB_flat @ m.opgen.W_B)
    return [gA_flat.T @ c.psi_u, gA_flat.sum(axis=0), gB_flat.T @ c.psi_u, gB_flat.sum(axis=0)]


def _bmv(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("nij,nj->ni", M, x)


def _add(acc: list[np.ndarray] | None, g: list[np.ndarray]) -> list[np.ndarray]:
    return g if acc is None else [a + b for a, b in zip(acc, g)]


def total_loss(
    m: SfkdModel,
    batch: Batch,
    lambda_c: float = 10.0,
    lambda_r: float = 1.0,
    contr_idx: np.ndarray | None = None,
    need_grad: bool = True,
    pi_iter: int = 500,
    pi_tol: float = 1e-12,
    lambda_p: float = 1.0,
    contr_v0: np.ndarray | None = None,
    lambda_roll: float = 0.0,
    windows: Windows | None = None,
) -> LossResult:
    """Composite loss and its exact gradient.

    Components are batch means: ``l_pred`` of ``||z' - A z - B u - r||^2``,
    ``l_contr`` of ``max(0, ||dr/dz|| - beta)^2`` over ``contr_idx`` and
    ``l_recon`` of ``||x - decode(z)||^2``.  Both ``z`` and ``z'`` are encoder
    outputs, so the encoder receives gradient through both.  With
    ``contr_idx`` of None or empty the contraction term is skipped.

    ``l_roll`` is the per-step mean of ``||x_k - decode(z_k)||^2`` along
    latent rollouts of ``windows`` started from the encoded first state; it
    enters with weight ``lambda_roll`` and is skipped when either is unset.
    ``lambda_p`` weights the prediction term (1 in training); ``contr_v0``
    warm-starts the Jacobian power iteration.
    """
    X, U, E, Xn = batch.x, batch.u, batch.e, batch.x_next
    N, r, d_e = len(X), m.r, m.d_e
    roll = windows is not None and lambda_roll > 0 and len(windows) > 0
    W, H = (len(windows), windows.horizon) if roll else (0, 0)
    # rollout rows are laid out window-major: row N + w*H + k
    E_all = np.vstack([E, windows.e.reshape(-1, 2)]) if roll else E

    Psi_all, psi_acts = m.psi_net.forward_cache(m.psi_input(E_all))
    Psi = Psi_all[:N]
    A_all, B_all, opc = _operators_forward(m, E_all, Psi_all)

    enc_parts = [m.encoder_input(X, Psi), m.encoder_input(Xn, Psi)]
    if roll:
        w0 = N + np.arange(W) * H
        enc_parts.append(m.encoder_input(windows.x[:, 0], Psi_all[w0]))
    Zall, enc_acts = m.encoder.forward_cache(np.vstack(enc_parts))
    Z, Zn = Zall[:N], Zall[N:2 * N]

    A, B = A_all[:N], B_all[:N]
    Rz, res_acts = m.residual.forward_cache(m.residual_input(Z, U, Psi))
    pred = _bmv(A, Z) + _bmv(B, U) + Rz
    diff = Zn - pred
    l_pred = float(np.sum(diff ** 2) / N)

    zs, roll_acts = [], []
    if roll:
        z = Zall[2 * N:]
        zs.append(z)
        for k in range(H):
            rows = w0 + k
            rk, acts = m.residual.forward_cache(m.residual_input(z, windows.u[:, k], Psi_all[rows]))
            z = _bmv(A_all[rows], z) + _bmv(B_all[rows], windows.u[:, k]) + rk
            zs.append(z)
            roll_acts.append(acts)

    dec_in = np.vstack([Z] + zs[1:])
    dec_out, dec_acts = m.decoder.forward_cache(dec_in)
    xhat = dec_out * m.x_scale + m.x_offset
    rdiff = X - xhat[:N]
    l_recon = float(np.sum(rdiff ** 2) / N)
    l_roll = 0.0
    if roll:
        # decoder rows after N are step-major: N + (k-1)*W + w
        target = np.swapaxes(windows.x[:, 1:], 0, 1).reshape(-1, N_X)
        wdiff = target - xhat[N:]
        l_roll = float(np.sum(wdiff ** 2) / (W * H))

    use_contr = contr_idx is not None and len(contr_idx) > 0
    l_contr = 0.0
    jac = vv = None
    if use_contr:
        idx = np.asarray(contr_idx)
        S = len(idx)
        jac, uu, vv, _, cacts = m.residual_jacobian_sigma(Z[idx], U[idx], Psi[idx], pi_iter, pi_tol, contr_v0)
        hinge = np.maximum(0.0, jac - m.beta)
        l_contr = float(np.sum(hinge ** 2) / S)

    parts = {"l_pred": l_pred, "l_contr": l_contr, "l_recon": l_recon, "l_roll": l_roll}
    _check_finite(parts)
    total = lambda_p * l_pred + lambda_c * l_contr + lambda_r * l_recon + (lambda_roll * l_roll if roll else 0.0)
    if not need_grad:
        return LossResult(total, parts, None, jac, vv)

    # ---------------------------------------------------------------- backward
    g_dec = [-2.0 * lambda_r * rdiff / N]
    if roll:
        g_dec.append(-2.0 * lambda_roll * wdiff / (W * H))
    dec_grads, g_dec_in = m.decoder.backward(dec_acts, np.vstack(g_dec) * m.x_scale)

    gA_all = np.zeros_like(A_all)
    gB_all = np.zeros_like(B_all)
    gPsi_all = np.zeros_like(Psi_all)

    gZn = 2.0 * lambda_p * diff / N
    g_pred = -gZn
    gA_all[:N] = g_pred[:, :, None] * Z[:, None, :]
    gB_all[:N] = g_pred[:, :, None] * U[:, None, :]
    gZ = _bmv(np.swapaxes(A, 1, 2), g_pred) + g_dec_in[:N]
    res_grads, g_res_in = m.residual.backward(res_acts, g_pred)
    gZ += g_res_in[:, :r]
    gPsi_all[:N] += g_res_in[:, r + N_U:]

    if use_contr and lambda_c > 0:
        coef = lambda_c * 2.0 * hinge / S
        if np.any(coef):
            pad = np.zeros((S, N_U + d_e))
            _, tang = m.residual.jvp(cacts, np.hstack([vv, pad]))
            c_grads, gx = m.residual.jvp_backward(cacts, tang, coef[:, None] * uu)
            res_grads = _add(res_grads, c_grads)
            np.add.at(gZ, idx, gx[:, :r])
            np.add.at(gPsi_all, idx, gx[:, r + N_U:])

    g_enc = [gZ, gZn]
    if roll:
        g_steps = g_dec_in[N:].reshape(H, W, r)
        g = g_steps[H - 1].copy()
        for k in range(H - 1, -1, -1):
            rows = w0 + k
            uk = windows.u[:, k]
            gA_all[rows] += g[:, :, None] * zs[k][:, None, :]
            gB_all[rows] += g[:, :, None] * uk[:, None, :]
            rg, gin = m.residual.backward(roll_acts[k], g)
            res_grads = _add(res_grads, rg)
            gPsi_all[rows] += gin[:, r + N_U:]
            g = _bmv(np.swapaxes(A_all[rows], 1, 2), g) + gin[:, :r]
            if k > 0:
                g += g_steps[k - 1]
        g_enc.append(g)

    op_grads = _operators_backward(m, opc, gA_all, gB_all, gPsi_all)
    enc_grads, g_enc_in = m.encoder.backward(enc_acts, np.vstack(g_enc))
    if m.fiber:
        gPsi_all[:N] += g_enc_in[:N, N_X:] + g_enc_in[N:2 * N, N_X:]
        if roll:
            gPsi_all[w0] += g_enc_in[2 * N:, N_X:]
    psi_grads, _ = m.psi_net.backward(psi_acts, gPsi_all)

    grads = psi_grads + enc_grads + dec_grads + res_grads + op_grads
    return LossResult(total, parts, grads, jac, vv)


def gradient_check(
    m: SfkdModel,
    batch: Batch,
    step: float = 1e-5,
    lambda_c: float = 10.0,
    lambda_r: float = 1.0,
    contr_idx=None,
    components: str = "all",
    lambda_roll: float = 0.0,
    windows: Windows | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``components='recon'`` checks the reconstruction term alone.  Every entry
    of every trainable array is perturbed.
    """
    weights = dict(lambda_c=lambda_c, lambda_r=lambda_r, contr_idx=contr_idx, lambda_roll=lambda_roll, windows=windows)
    if components == "recon":
        weights = dict(lambda_c=0.0, lambda_r=1.0, contr_idx=None, lambda_p=0.0)
    elif components != "all":
        raise ValueError(f"components must be 'all' or 'recon', got {components!r}")
    # tight, warm-started power iteration keeps sigma noise far below step**2
    pi = dict(pi_iter=5000, pi_tol=1e-14)
    base = total_loss(m, batch, need_grad=True, **weights, **pi)
    analytic = base.grads
    value = lambda: total_loss(m, batch, need_grad=False, contr_v0=base.jac_v, **weights, **pi).total
    worst = 0.0
    for P, G in zip(model_params(m), analytic):
        flat = P.reshape(-1)
        gflat = G.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            rel = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-8)
            worst = max(worst, rel)
    return worst


# --------------------------------------------------------------------------- audits


def env_grid(n: int) -> np.ndarray:
    mu = np.linspace(0.3, 0.9, n)
    w = np.linspace(-8.0, 8.0, n)
    return np.array([(a, b) for a in mu for b in w])


def max_operator_norm(m: SfkdModel, n: int = 9) -> float:
    E = env_grid(n)
    A, _ = m.operators(m.embed(E))
    return float(np.max(spectral_norm(A)))


def audit_jacobian(m: SfkdModel, d: Dataset, n_points: int, seed: int) -> np.ndarray:
    X, U, E, _ = d.flat()
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(X), size=min(n_points, len(X)), replace=False)
    psi = m.embed(E[idx])
    Z = m.encode_batch(X[idx], E[idx], psi)
    return m.residual_jacobian_sigma(Z, U[idx], psi)[0]


# --------------------------------------------------------------------------- training


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class _Momentum:
    def __init__(self, params, lr, momentum=0.9):
        self.mu = momentum
        self.buf = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr):
        for p, g, b in zip(params, grads, self.buf):
            b *= self.mu
            b += g
            p -= lr * b


def cosine_lr(base: float, it: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * min(it, total) / max(total, 1)))


def train(d: Dataset, cfg: TrainConfig, model: SfkdModel | None = None, verbose: bool = False):
    """Warm start then minibatch training; returns ``(model, opgen, log)``.

    Deterministic for a given seed.  Raises :class:`TrainingError` on a
    non-finite loss or when the loss exceeds 1e6 times its initial value.
    """
    if len(d) == 0:
        raise ValueError("dataset is empty")
    cfg = cfg.effective()
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        m = build_model(cfg.model, int(rng.integers(2**31)))
        m.opgen = identify_warmstart(d, m, cfg.mu_reg)
    else:
        m = model.copy()
    X, U, E, Xn = d.flat()
    n = len(X)
    params = model_params(m)
    opt = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else _Momentum(params, cfg.learning_rate, cfg.momentum)
    steps_per_epoch = max(1, int(math.ceil(n / cfg.batch_size)))
    total_steps = cfg.epochs * steps_per_epoch
    log = TrainLog(config=_config_dict(cfg))
    initial = None
    it = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        sums = {"l_pred": 0.0, "l_contr": 0.0, "l_recon": 0.0, "l_roll": 0.0}
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = Batch(X[idx], U[idx], E[idx], Xn[idx])
            windows = None
            if cfg.lambda_roll > 0 and cfg.rollout_batch > 0:
                windows = sample_windows(d, cfg.rollout_horizon, cfg.rollout_batch, rng)
            contr_idx = None
            if cfg.lambda_c > 0 and cfg.contraction_sample_count > 0:
                contr_idx = rng.choice(len(idx), size=min(cfg.contraction_sample_count, len(idx)), replace=False)
            try:
                res = total_loss(
                    m, batch, cfg.lambda_c, cfg.lambda_r, contr_idx, True, pi_iter=200, pi_tol=1e-9,
                    lambda_roll=cfg.lambda_roll, windows=windows,
                )
            except TrainingError as exc:
                raise TrainingError(str(exc), log) from None
            if initial is None:
                initial = max(res.total, 1e-12)
            if res.total > 1e6 * initial:
                raise TrainingError(f"training diverged at epoch {epoch}: loss {res.total:.3e}", log)
            grads = res.grads
            if cfg.grad_clip > 0:
                gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if gnorm > cfg.grad_clip:
                    grads = [g * (cfg.grad_clip / gnorm) for g in grads]
            opt.step(params, grads, cosine_lr(cfg.learning_rate, it, total_steps))
            it += 1
            for k in sums:
                sums[k] += res.parts[k] * len(idx)
        rec = EpochRecord(
            epoch,
            sums["l_pred"] / n,
            sums["l_contr"] / n,
            sums["l_recon"] / n,
            sums["l_roll"] / n,
            max_operator_norm(m, cfg.audit_grid),
            float(np.max(audit_jacobian(m, d, cfg.audit_points, cfg.seed + epoch))),
            time.perf_counter() - t0,
        )
        log.records.append(rec)
        if verbose:
            print(
                f"epoch {epoch:4d}  pred {rec.l_pred:.4e}  contr {rec.l_contr:.3e}  recon {rec.l_recon:.4e}  roll {rec.l_roll:.4e}"
                f"  |A| {rec.max_specnorm_A:.4f}  |J| {rec.max_jac_norm:.3f}  {rec.seconds:.1f}s",
                flush=True,
            )
        if cfg.checkpoint_every and cfg.checkpoint_dir and (epoch + 1) % cfg.checkpoint_every == 0:
            Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(m, Path(cfg.checkpoint_dir) / f"epoch{epoch + 1:04d}.ckpt", {"epoch": epoch + 1})
    return m, m.opgen, log


def _config_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["model"] = asdict(cfg.model)
    return out
