"""Double-slit problem: a 1-D particle ``dx = u dt + dxi`` has to pass one of two
slits at ``t = T/2`` and end near a target at ``T``.

Also hosts the 1-D grid oracle (usable for any drift-free 1-D problem with
constant noise) and the two baselines: the open-loop path-weighted Monte
Carlo policy and the Laplace (variational) policy fitted to the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..sde import (
    ControlAffineModel,
    LinearPolicy,
    OpenLoopPolicy,
    Policy,
    ZeroPolicy,
    check_compatibility,
    simulate,
    trajectory_noise,
)
from .problem import ProblemSpec

OBSTACLES = ((-4.0, -3.3), (-2.5, 2.5), (3.3, 4.0))
START_A = -3.0
START_B = 1.75
MAX_ORACLE_SPACING = 0.01


def make_double_slit(
    omega: float = 5.0,
    noise: float = 1.0,
    H: float = 1.0,
    obstacle_cost: float = 1e4,
    target: float = 0.0,
    T: float = 2.0,
    dt: float = 0.02,
    box=(-6.0, 6.0),
    obstacles=OBSTACLES,
) -> ProblemSpec:
    """Build the problem; the temperature follows from ``Q = lam H^-1``."""
    if not omega > 0:
        raise ValueError("omega must be positive")
    lam = noise * H
    model = ControlAffineModel(np.eye(1), noise * np.eye(1), H * np.eye(1), lam)
    report = check_compatibility(model, np.linspace(box[0], box[1], 7))
    if not report.passed:
        raise ValueError(f"noise/control-cost mismatch: {report.max_relative_deviation}")
    n_steps = int(round(T / dt))
    half = 0.5 * T
    obstacles = tuple((float(a), float(b)) for a, b in obstacles)

    def in_obstacle(x):
        hit = np.zeros(x.shape[0], dtype=bool)
        for a, b in obstacles:
            hit |= (x >= a) & (x <= b)
        return hit

    def state_cost(X, t):
        X = np.asarray(X, float).reshape(-1)
        if abs(t - half) > 1e-9 * max(1.0, T):
            return np.zeros(X.shape[0])
        return np.where(in_obstacle(X), obstacle_cost, 0.0)

    def terminal_cost(X):
        return omega * (np.asarray(X, float).reshape(-1) - target) ** 2

    params = dict(omega=omega, noise=noise, H=H, lam=lam, obstacle_cost=obstacle_cost, target=target,
                  T=T, dt=dt, box=list(box), obstacles=[list(o) for o in obstacles])
    return ProblemSpec(model, T, dt, n_steps, state_cost, terminal_cost, (box[0], box[1]), "double_slit", params=params)


REFERENCE_SCALE = 20.0


def make_double_slit_scaled(scale: float = REFERENCE_SCALE, **kw) -> ProblemSpec:
    """Same geometry with ``H = lam = scale`` and ``omega = 5 scale`` at unit noise.

    Control and terminal costs grow together, so costs come out on a larger
    absolute scale while the noise level stays fixed.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    return make_double_slit(omega=5.0 * scale, noise=1.0, H=scale, **kw)


# ---------------------------------------------------------------- oracle


@dataclass
class OracleTable:
    """Tabulated ``psi(x, t_i)`` on a uniform 1-D grid, ``psi`` of shape ``(n+1, G)``.

    ``psi_ahead[i]`` is ``psi[i]`` without the cost factor of the current
    state; controls are derived from it.
    """

    grid: np.ndarray
    psi: np.ndarray
    psi_ahead: np.ndarray
    times: np.ndarray
    lam: float
    H_inv: float = 1.0

    @property
    def spacing(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def at(self, i: int, x) -> np.ndarray:
        return np.interp(np.asarray(x, float).reshape(-1), self.grid, self.psi[i])

    def log_psi(self, i: int, ahead: bool = False) -> np.ndarray:
        return np.log(np.maximum((self.psi_ahead if ahead else self.psi)[i], 1e-300))

    def control_table(self) -> np.ndarray:
        """``lam H^-1 d/dx log psi_ahead_i`` for ``i < n`` on the grid."""
        h = self.spacing
        n = len(self.times) - 1
        return np.stack([self.lam * self.H_inv * np.gradient(self.log_psi(i, True), h) for i in range(n)])


def _cost_factor(state_cost, grid, t, h, lam, dt):
    """Half-step factor ``exp(-dt C / (2 lam))`` averaged over four sub-cells."""
    offsets = np.array([-0.375, -0.125, 0.125, 0.375]) * h
    f = np.zeros(grid.shape[0])
    for o in offsets:
        f += np.exp(-dt * np.asarray(state_cost((grid + o)[:, None], t), float) / (2.0 * lam))
    return f / len(offsets)


def oracle_psi(spec: ProblemSpec, spacing: float = MAX_ORACLE_SPACING, margin: float | None = None) -> OracleTable:
    """Grid-quadrature backward recursion for a drift-free 1-D problem.

    ``psi_i(x_j) = c_i(x_j) sum_k h N(x_k; x_j, Q dt) c_{i+1}(x_k) psi_{i+1}(x_k)``,
    with ``c_i`` the trapezoidal half-step cost factor, matching the local
    desirability used by the estimators.
    """
    model = spec.model
    if model.dx != 1 or model.drift is not None or model._Q_const is None or model._B_const is None:
        raise ValueError("grid oracle supports drift-free 1-D problems with constant noise only")
    if spacing > MAX_ORACLE_SPACING + 1e-15:
        raise ValueError(f"oracle grid spacing {spacing} is coarser than {MAX_ORACLE_SPACING}")
    q = float(model._Q_const[0, 0])
    if margin is None:
        margin = 6.0 * np.sqrt(q * spec.T) + 1.0
    lo, hi = float(spec.box[0][0]) - margin, float(spec.box[1][0]) + margin
    n_cells = int(np.ceil((hi - lo) / spacing))
    grid = lo + spacing * np.arange(n_cells + 1)
    h = spacing
    sigma2 = q * spec.dt
    diff = grid[None, :] - grid[:, None]
    K = h * np.exp(-0.5 * diff**2 / sigma2) / np.sqrt(2 * np.pi * sigma2)
    del diff
    lam = spec.lam
    times = spec.times
    n = spec.n_steps
    psi = np.empty((n + 1, grid.size))
    ahead = np.empty((n + 1, grid.size))
    psi[n] = ahead[n] = np.exp(-np.asarray(spec.terminal_cost(grid[:, None]), float) / lam)
    for i in reversed(range(n)):
        c_next = _cost_factor(spec.state_cost, grid, times[i + 1], h, lam, spec.dt)
        c_here = _cost_factor(spec.state_cost, grid, times[i], h, lam, spec.dt)
        ahead[i] = K @ (c_next * psi[i + 1])
        psi[i] = c_here * ahead[i]
    H_inv = float(model.H_inv[0, 0]) * float(model._B_const[0, 0])
    return OracleTable(grid, psi, ahead, times, lam, H_inv)


oracle_psi_double_slit = oracle_psi


class TabulatedPolicy(Policy):
    """Controls interpolated from a per-step table on a 1-D grid."""

    tag = "tabulated"

    def __init__(self, grid, table, tag: str | None = None):
        self.grid = np.asarray(grid, float)
        self.table = np.asarray(table, float)
        self.du = 1
        if tag:
            self.tag = tag

    def _act(self, x, i):
        i = min(int(i), len(self.table) - 1)
        return np.interp(x[:, 0], self.grid, self.table[i])[:, None]


def oracle_policy(oracle: OracleTable) -> TabulatedPolicy:
    return TabulatedPolicy(oracle.grid, oracle.control_table(), tag="oracle")


# ---------------------------------------------------------------- baselines


def mc_psi_samples(spec: ProblemSpec, x, step_index: int, n_traj: int, seed: int, zero_noise: bool = False) -> np.ndarray:
    """Per-rollout path weights ``exp(-(running + terminal cost) / lam)`` from ``x`` at ``t_i``."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    k = spec.n_steps - step_index
    x = np.atleast_1d(np.asarray(x, float))
    z, _ = trajectory_noise(seed, n_traj, k, spec.model.dx)
    if zero_noise:
        z[:] = 0.0
    states, _ = simulate(spec.model, ZeroPolicy(spec.model.du), np.tile(x, (n_traj, 1)), k, spec.dt, z, step_index)
    S = spec.path_state_cost(states, step_index) + spec.terminal_cost(states[:, -1])
    return np.exp(-S / spec.lam)


def mc_psi_estimate(spec: ProblemSpec, x, step_index: int, n_traj: int, seed: int, zero_noise: bool = False) -> float:
    return float(np.mean(mc_psi_samples(spec, x, step_index, n_traj, seed, zero_noise)))


def mc_baseline_policy(spec: ProblemSpec, x0, n_traj: int, seed: int) -> OpenLoopPolicy:
    """Open-loop control: path-cost-weighted mean of uncontrolled increments from ``x0``."""
    model = spec.model
    x0 = np.atleast_1d(np.asarray(x0, float))
    z, _ = trajectory_noise(seed, n_traj, spec.n_steps, model.dx)
    states, _ = simulate(model, ZeroPolicy(model.du), np.tile(x0, (n_traj, 1)), spec.n_steps, spec.dt, z)
    S = spec.path_state_cost(states) + spec.terminal_cost(states[:, -1])
    w = np.exp(-(S - S.min()) / spec.lam)
    w /= w.sum()
    incr = np.diff(states, axis=1) / spec.dt  # (n, k, dx)
    drift = np.stack([model.f(states[:, k], spec.times[k]) for k in range(spec.n_steps)], axis=1)
    mean_incr = np.einsum("n,nkd->kd", w, incr - drift)
    Bp = np.linalg.pinv(np.atleast_2d(model._B_const))
    u = mean_incr @ Bp.T
    pol = OpenLoopPolicy(u)
    pol.tag = "mc"
    return pol


def _local_max(values: np.ndarray, j: int) -> int:
    while True:
        nb = [k for k in (j - 1, j + 1) if 0 <= k < values.size]
        best = max(nb, key=lambda k: values[k])
        if values[best] > values[j]:
            j = best
        else:
            return j


def variational_baseline(oracle: OracleTable, spec: ProblemSpec, x0=None) -> LinearPolicy:
    """Per-step linear policy from a Laplace fit of ``-lam log psi_i`` at a mode.

    With ``x0`` the mode is tracked by hill climbing from ``x0`` and then from
    the previous step's mode; without it the global maximizer is used.
    """
    h = oracle.spacing
    n = len(oracle.times) - 1
    K = np.zeros((n, 1, 1))
    b = np.zeros((n, 1))
    j_prev = None if x0 is None else int(np.argmin(np.abs(oracle.grid - float(np.atleast_1d(x0)[0]))))
    modes = []
    for i in range(n):
        lp = oracle.log_psi(i, ahead=True)
        j = int(np.argmax(lp)) if x0 is None else _local_max(lp, j_prev)
        j_prev = j
        jj = min(max(j, 1), lp.size - 2)
        curv = -(lp[jj + 1] - 2 * lp[jj] + lp[jj - 1]) / h**2
        A = max(oracle.lam * curv, 1e-8)
        gain = -oracle.H_inv * A
        K[i, 0, 0] = gain
        b[i, 0] = -gain * oracle.grid[j]
        modes.append(oracle.grid[j])
    pol = LinearPolicy(K, b, tag="variational")
    pol.modes = np.asarray(modes)
    return pol
