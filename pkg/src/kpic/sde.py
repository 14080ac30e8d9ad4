"""Euler-Maruyama simulation of control-affine SDEs ``dx = f dt + B (u dt + dxi)``.

All dynamics callables are batched: they receive states of shape ``(n, d_x)``
and a scalar time.  Policies follow the same convention and are indexed by the
grid step ``i`` (time ``t_i = i * dt``).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .kernels import as_points

__all__ = [
    "ControlAffineModel",
    "Policy",
    "ZeroPolicy",
    "LinearPolicy",
    "OpenLoopPolicy",
    "Prior",
    "UniformBox",
    "GaussianPrior",
    "DeltaPrior",
    "EmpiricalPrior",
    "TransitionDataset",
    "Trajectory",
    "SimulationError",
    "step",
    "simulate",
    "sample_transitions",
    "sample_trajectories",
    "trajectories_to_dataset",
    "transition_density",
    "transition_logpdf",
    "check_compatibility",
]

BLOCK = 4096  # items per derived random stream in sample_transitions


class SimulationError(RuntimeError):
    pass


def _fn_or_const(value):
    """Wrap a constant matrix as a batched callable."""
    if callable(value):
        return value
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    return lambda x, t: np.broadcast_to(arr, (np.shape(x)[0],) + arr.shape)


@dataclass
class ControlAffineModel:
    """Dynamics ``f``, control matrix ``B``, noise covariance ``Q`` (state^2/time),
    control cost ``H`` and temperature ``lam``.

    ``B`` and ``Q`` may be constant arrays or batched callables ``(x, t) -> (n, ...)``.
    ``drift=None`` means ``f = 0``.
    """

    control_matrix: np.ndarray | Callable
    noise_cov: np.ndarray | Callable
    control_cost: np.ndarray
    temperature: float
    drift: Callable | None = None

    def __post_init__(self):
        self.control_cost = np.atleast_2d(np.asarray(self.control_cost, dtype=float))
        H = self.control_cost
        if not np.allclose(H, H.T) or np.linalg.eigvalsh(H).min() <= 0:
            raise ValueError("control cost H must be symmetric positive definite")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        self._B_const = None if callable(self.control_matrix) else np.atleast_2d(np.asarray(self.control_matrix, float))
        self._Q_const = None if callable(self.noise_cov) else np.atleast_2d(np.asarray(self.noise_cov, float))
        self._B = _fn_or_const(self._B_const if self._B_const is not None else self.control_matrix)
        self._Q = _fn_or_const(self._Q_const if self._Q_const is not None else self.noise_cov)
        self.H_inv = np.linalg.inv(H)
        self.du = H.shape[0]
        if self._B_const is not None:
            self.dx = self._B_const.shape[0]
        elif self._Q_const is not None:
            self.dx = self._Q_const.shape[0]
        else:
            raise ValueError("state dimension cannot be inferred; pass a constant B or Q")

    def f(self, x: np.ndarray, t: float) -> np.ndarray:
        if self.drift is None:
            return np.zeros_like(x)
        return np.asarray(self.drift(x, t), dtype=float).reshape(x.shape)

    def B(self, x: np.ndarray, t: float) -> np.ndarray:
        return self._B(x, t)

    def Q(self, x: np.ndarray, t: float) -> np.ndarray:
        return self._Q(x, t)

    def noise_factor(self, x: np.ndarray, t: float, dt: float) -> np.ndarray:
        """Batched Cholesky factor of ``Q dt``."""
        if self._Q_const is not None:
            c = np.linalg.cholesky(self._Q_const * dt)
            return np.broadcast_to(c, (x.shape[0],) + c.shape)
        return np.linalg.cholesky(self.Q(x, t) * dt)

    def control_drift(self, x: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
        if self._B_const is not None:
            return u @ self._B_const.T
        return np.einsum("nij,nj->ni", self.B(x, t), u)


class Policy:
    """Batched feedback law ``act(x, i) -> u``; 1-D ``x`` returns a 1-D control."""

    tag = "policy"
    du: int = 1

    def _act(self, x: np.ndarray, i: int) -> np.ndarray:
        raise NotImplementedError

    def act(self, x, i: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self._act(x[None, :], i)[0]
        return self._act(x, i)


class ZeroPolicy(Policy):
    tag = "zero"

    def __init__(self, du: int = 1):
        self.du = du

    def _act(self, x, i):
        return np.zeros((x.shape[0], self.du))


class LinearPolicy(Policy):
    """``u = K_i x + b_i``; ``K`` is ``(n, d_u, d_x)`` or a single ``(d_u, d_x)``."""

    tag = "linear"

    def __init__(self, K, b, tag: str | None = None):
        self.K = np.asarray(K, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.du = self.b.shape[-1]
        if tag:
            self.tag = tag

    def _act(self, x, i):
        K = self.K if self.K.ndim == 2 else self.K[min(i, len(self.K) - 1)]
        b = self.b if self.b.ndim == 1 else self.b[min(i, len(self.b) - 1)]
        return x @ K.T + b


class OpenLoopPolicy(Policy):
    """A fixed control sequence ``u_i`` applied regardless of state."""

    tag = "open-loop"

    def __init__(self, controls):
        self.controls = np.atleast_2d(np.asarray(controls, dtype=float))
        if self.controls.shape[0] == 1 and np.ndim(controls) == 1:
            self.controls = self.controls.T
        self.du = self.controls.shape[1]

    def _act(self, x, i):
        u = self.controls[min(i, len(self.controls) - 1)]
        return np.broadcast_to(u, (x.shape[0], self.du)).copy()


# ---------------------------------------------------------------- priors


class Prior:
    tag = "prior"

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


@dataclass
class UniformBox(Prior):
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        self.low = np.atleast_1d(np.asarray(self.low, dtype=float))
        self.high = np.atleast_1d(np.asarray(self.high, dtype=float))
        if self.low.shape != self.high.shape or np.any(self.high <= self.low):
            raise ValueError("uniform box needs low < high componentwise")
        self.tag = f"uniform[{','.join(map(repr, self.low.tolist()))}:{','.join(map(repr, self.high.tolist()))}]"

    def sample(self, n, rng):
        return self.low + (self.high - self.low) * rng.random((n, self.low.size))


@dataclass
class GaussianPrior(Prior):
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        self.cov = np.diag(np.broadcast_to(cov, self.mean.shape)) if cov.ndim < 2 else cov
        self._chol = np.linalg.cholesky(self.cov)
        self.tag = "gaussian"

    def sample(self, n, rng):
        return self.mean + rng.standard_normal((n, self.mean.size)) @ self._chol.T


@dataclass
class DeltaPrior(Prior):
    point: np.ndarray

    def __post_init__(self):
        self.point = np.atleast_1d(np.asarray(self.point, dtype=float))
        self.tag = f"delta[{','.join(map(repr, self.point.tolist()))}]"

    def sample(self, n, rng):
        return np.tile(self.point, (n, 1))


@dataclass
class EmpiricalPrior(Prior):
    points: np.ndarray

    def __post_init__(self):
        self.points = as_points(self.points)
        self.tag = "empirical"

    def sample(self, n, rng):
        return self.points[rng.integers(0, len(self.points), size=n)]


# ---------------------------------------------------------------- data


@dataclass
class TransitionDataset:
    """Pairs ``(x, x')`` one step ``dt`` apart.

    ``time_index`` marks the grid step of each pair for trajectory data and
    ``controls`` the applied control, when it was not zero.
    """

    X: np.ndarray
    Xp: np.ndarray
    dt: float
    policy_tag: str = "zero"
    prior_tag: str = ""
    seed: int | None = None
    time_index: np.ndarray | None = None
    controls: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = as_points(self.X)
        self.Xp = as_points(self.Xp)
        if self.X.shape != self.Xp.shape:
            raise ValueError(f"state shapes differ: {self.X.shape} vs {self.Xp.shape}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.time_index is not None:
            self.time_index = np.asarray(self.time_index, dtype=int)
        if self.controls is not None:
            self.controls = as_points(self.controls)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def pairs(self) -> np.ndarray:
        return np.hstack([self.X, self.Xp])

    def subset(self, idx) -> "TransitionDataset":
        idx = np.asarray(idx)
        return TransitionDataset(
            self.X[idx], self.Xp[idx], self.dt, self.policy_tag, self.prior_tag, self.seed,
            None if self.time_index is None else self.time_index[idx],
            None if self.controls is None else self.controls[idx],
            dict(self.meta),
        )

    def at_step(self, i: int) -> "TransitionDataset":
        if self.time_index is None:
            raise ValueError("dataset carries no time index")
        return self.subset(np.flatnonzero(self.time_index == i))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.Xp).tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        """CSV of ``x_*, xp_*`` (plus ``step``/``u_*`` when present) and a JSON sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        d = self.dim
        header = [f"x_{k}" for k in range(d)] + [f"xp_{k}" for k in range(d)]
        cols = [self.X, self.Xp]
        if self.time_index is not None:
            header.append("step")
            cols.append(self.time_index[:, None].astype(float))
        if self.controls is not None:
            header += [f"u_{k}" for k in range(self.controls.shape[1])]
            cols.append(self.controls)
        data = np.hstack(cols)
        n_float = 2 * d
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in data:
                w.writerow(
                    [format_float(v) if (j < n_float or header[j] != "step") else str(int(v)) for j, v in enumerate(row)]
                )
        meta = {
            "dt": self.dt,
            "seed": self.seed,
            "policy_tag": self.policy_tag,
            "prior_tag": self.prior_tag,
            "n": len(self),
            "dim": d,
            **self.meta,
        }
        sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TransitionDataset":
        path = Path(path)
        meta = json.loads(sidecar(path).read_text())
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            rows = [list(map(float, row)) for row in r]
        data = np.asarray(rows, dtype=float).reshape(len(rows), len(header))
        xs = [j for j, h in enumerate(header) if h.startswith("x_")]
        xps = [j for j, h in enumerate(header) if h.startswith("xp_")]
        us = [j for j, h in enumerate(header) if h.startswith("u_")]
        step_col = header.index("step") if "step" in header else None
        extra = {k: v for k, v in meta.items() if k not in ("dt", "seed", "policy_tag", "prior_tag", "n", "dim")}
        return cls(
            data[:, xs], data[:, xps], float(meta["dt"]), meta.get("policy_tag", ""), meta.get("prior_tag", ""),
            meta.get("seed"),
            None if step_col is None else data[:, step_col].astype(int),
            data[:, us] if us else None,
            extra,
        )


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def format_float(v: float) -> str:
    return format(float(v), ".17g")


@dataclass
class Trajectory:
    states: np.ndarray  # (n_steps + 1, d_x)
    controls: np.ndarray  # (n_steps, d_u)
    dt: float
    accumulated_cost: float = float("nan")

    def __post_init__(self):
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ValueError("states must have one more row than controls")

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]


# ---------------------------------------------------------------- simulation


def step(model: ControlAffineModel, x, u, dt: float, noise=None, t: float = 0.0, rng=None) -> np.ndarray:
    """One Euler-Maruyama step ``x + f dt + B u dt + w``, ``w ~ N(0, Q dt)``.

    ``noise`` is the increment ``w`` itself; when omitted it is drawn from
    ``rng`` (a fresh default generator if that is omitted too).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    single = np.ndim(x) <= 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if single and X.shape[0] != 1:
        X = X.reshape(1, -1)
    U = np.asarray(u, dtype=float).reshape(X.shape[0], -1)
    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        z = rng.standard_normal(X.shape)
        W = np.einsum("nij,nj->ni", model.noise_factor(X, t, dt), z)
    else:
        W = np.asarray(noise, dtype=float).reshape(X.shape)
    out = X + model.f(X, t) * dt + model.control_drift(X, U, t) * dt + W
    if not np.all(np.isfinite(out)):
        raise SimulationError("non-finite state produced by step")
    return out[0] if single else out


def _em_step(model, X, U, dt, t, z):
    L = model.noise_factor(X, t, dt)
    W = np.einsum("nij,nj->ni", L, z)
    out = X + model.f(X, t) * dt + model.control_drift(X, U, t) * dt + W
    if not np.all(np.isfinite(out)):
        raise SimulationError(f"non-finite state at t={t}")
    return out


def sample_transitions(
    model: ControlAffineModel,
    policy: Policy,
    prior: Prior,
    m: int,
    dt: float,
    seed: int,
    step_index: int = 0,
    zero_noise: bool = False,
) -> TransitionDataset:
    """``m`` i.i.d. pairs with ``x ~ prior`` and ``x'`` one Euler step later.

    Items are drawn in fixed blocks of ``BLOCK`` from streams seeded by
    ``(seed, block)``, so output does not depend on how blocks are scheduled.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    dx = model.dx
    X = np.empty((m, dx))
    Z = np.empty((m, dx))
    for b, start in enumerate(range(0, m, BLOCK)):
        n = min(BLOCK, m - start)
        rng = np.random.default_rng([seed, b])
        X[start : start + n] = prior.sample(n, rng)
        Z[start : start + n] = rng.standard_normal((n, dx))
    if zero_noise:
        Z[:] = 0.0
    t = step_index * dt
    U = policy.act(X, step_index)
    Xp = _em_step(model, X, U, dt, t, Z)
    controls = None if isinstance(policy, ZeroPolicy) else U
    return TransitionDataset(X, Xp, dt, policy.tag, getattr(prior, "tag", ""), seed, None, controls)


def simulate(
    model: ControlAffineModel,
    policy: Policy,
    x0: np.ndarray,
    n_steps: int,
    dt: float,
    z: np.ndarray,
    first_step: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched rollouts from ``x0`` (``(n, d_x)``) with standard normals ``z``
    of shape ``(n, n_steps, d_x)``.  Returns states and controls arrays."""
    X = as_points(x0).copy()
    n = X.shape[0]
    states = np.empty((n, n_steps + 1, model.dx))
    controls = np.empty((n, n_steps, model.du))
    states[:, 0] = X
    for k in range(n_steps):
        i = first_step + k
        U = np.asarray(policy.act(X, i), dtype=float).reshape(n, model.du)
        X = _em_step(model, X, U, dt, i * dt, z[:, k])
        states[:, k + 1] = X
        controls[:, k] = U
    return states, controls


def trajectory_noise(seed: int, n_traj: int, n_steps: int, dx: int, starts: Prior | None = None):
    """Per-trajectory streams seeded by ``(seed, j)``; optionally draws starts too."""
    z = np.empty((n_traj, n_steps, dx))
    x0 = np.empty((n_traj, dx)) if starts is not None else None
    for j in range(n_traj):
        rng = np.random.default_rng([seed, j])
        if starts is not None:
            x0[j] = starts.sample(1, rng)[0]
        z[j] = rng.standard_normal((n_steps, dx))
    return z, x0


def sample_trajectories(
    model: ControlAffineModel,
    policy: Policy,
    x0,
    n_steps: int,
    n_traj: int,
    dt: float,
    seed: int,
    zero_noise: bool = False,
) -> list[Trajectory]:
    """Roll out ``n_traj`` trajectories from ``x0`` (a state, or a ``Prior`` of start states)."""
    starts = x0 if isinstance(x0, Prior) else None
    z, X0 = trajectory_noise(seed, n_traj, n_steps, model.dx, starts)
    if starts is None:
        X0 = np.tile(np.atleast_1d(np.asarray(x0, dtype=float)), (n_traj, 1))
    if zero_noise:
        z[:] = 0.0
    states, controls = simulate(model, policy, X0, n_steps, dt, z)
    return [Trajectory(states[j], controls[j], dt) for j in range(n_traj)]


def trajectories_to_dataset(
    trajs: Sequence[Trajectory], policy_tag: str = "zero", prior_tag: str = "", seed=None, keep_controls: bool | None = None
) -> TransitionDataset:
    """Flatten trajectories into time-indexed transitions (trajectory-major order)."""
    X = np.concatenate([tr.states[:-1] for tr in trajs])
    Xp = np.concatenate([tr.states[1:] for tr in trajs])
    steps = np.concatenate([np.arange(tr.n_steps) for tr in trajs])
    U = np.concatenate([tr.controls for tr in trajs])
    if keep_controls is None:
        keep_controls = bool(np.any(U != 0))
    return TransitionDataset(X, Xp, trajs[0].dt, policy_tag, prior_tag, seed, steps, U if keep_controls else None)


def _state_points(model: ControlAffineModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and x.size == model.dx:
        return x.reshape(1, -1)  # one state, not dx scalar states
    return as_points(x)


def transition_logpdf(model: ControlAffineModel, x, xp, u, dt: float, t: float = 0.0) -> np.ndarray:
    X = _state_points(model, x)
    Xp = as_points(xp).reshape(X.shape)
    U = np.asarray(u, dtype=float).reshape(X.shape[0], -1)
    mean = X + (model.f(X, t) + model.control_drift(X, U, t)) * dt
    S = model.Q(X, t) * dt
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValueError("transition covariance Q dt is singular") from None
    r = Xp - mean
    sol = np.linalg.solve(L, r[..., None])[..., 0]
    logdet = 2 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    d = X.shape[1]
    return -0.5 * (np.sum(sol**2, axis=1) + logdet + d * np.log(2 * np.pi))


def transition_density(model: ControlAffineModel, x, xp, u, dt: float, t: float = 0.0):
    """Gaussian density of ``x'`` given ``x``, mean ``x + (f + B u) dt``, covariance ``Q dt``."""
    out = np.exp(transition_logpdf(model, x, xp, u, dt, t))
    return float(out[0]) if np.ndim(x) <= 1 and out.size == 1 and np.size(x) == model.dx else out


@dataclass
class CompatibilityReport:
    max_relative_deviation: float
    tolerance: float = 1e-8

    @property
    def passed(self) -> bool:
        return self.max_relative_deviation <= self.tolerance


def check_compatibility(model: ControlAffineModel, probes, times=(0.0,)) -> CompatibilityReport:
    """Max over probes of ``|Q - lam B H^-1 B^T| / |lam B H^-1 B^T|`` (Frobenius)."""
    P = as_points(probes)
    worst = 0.0
    for t in times:
        B = model.B(P, t)
        target = model.temperature * np.einsum("nij,jk,nlk->nil", B, model.H_inv, B)
        diff = np.linalg.norm(model.Q(P, t) - target, axis=(1, 2))
        scale = np.maximum(np.linalg.norm(target, axis=(1, 2)), np.finfo(float).tiny)
        worst = max(worst, float(np.max(diff / scale)))
    return CompatibilityReport(worst)
