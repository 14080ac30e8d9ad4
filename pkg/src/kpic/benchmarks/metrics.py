"""Evaluation metrics: Monte-Carlo expected cost and grid L1 distance."""

from __future__ import annotations

import numpy as np

from ..sde import Policy, simulate, trajectory_noise
from .problem import ProblemSpec

L1_NORMALIZATION = "none"  # plain integral over the box, no division by its measure


def rollout_costs(policy: Policy, spec: ProblemSpec, x0, n_rollouts: int, seed: int) -> np.ndarray:
    """Per-rollout cost: trapezoidal running cost + ``0.5 u^T H u dt`` + terminal cost."""
    model = spec.model
    x0 = np.atleast_1d(np.asarray(x0, float))
    z, _ = trajectory_noise(seed, n_rollouts, spec.n_steps, model.dx)
    states, controls = simulate(model, policy, np.tile(x0, (n_rollouts, 1)), spec.n_steps, spec.dt, z)
    control_cost = 0.5 * spec.dt * np.einsum("nki,ij,nkj->n", controls, model.control_cost, controls)
    return spec.path_state_cost(states) + control_cost + spec.terminal_cost(states[:, -1])


def expected_cost(policy: Policy, spec: ProblemSpec, x0, n_rollouts: int, seed: int) -> tuple[float, float]:
    """Mean and standard error of the rollout cost from ``x0`` at ``t = 0``."""
    if n_rollouts < 2:
        raise ValueError("n_rollouts must be >= 2")
    c = rollout_costs(policy, spec, x0, n_rollouts, seed)
    return float(c.mean()), float(c.std(ddof=1) / np.sqrt(n_rollouts))


def l1_error(est, reference, grid, box=None) -> float:
    """Trapezoidal ``int_box |est - reference| dx`` on a common 1-D grid.

    ``est`` may be a callable on ``(G, 1)`` points or an array of grid values;
    ``reference`` is an array of grid values.
    """
    grid = np.asarray(grid, float).reshape(-1)
    ref = np.asarray(reference, float).reshape(-1)
    vals = np.asarray(est(grid[:, None]) if callable(est) else est, float).reshape(-1)
    if box is not None:
        lo, hi = float(np.ravel(box[0])[0]), float(np.ravel(box[1])[0])
        sel = (grid >= lo - 1e-12) & (grid <= hi + 1e-12)
        grid, ref, vals = grid[sel], ref[sel], vals[sel]
    return float(np.trapezoid(np.abs(vals - ref), grid))
