"""Finite-horizon problem description shared by the benchmarks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..estimators import PhiEvaluator, phi_schedule, terminal_psi
from ..sde import ControlAffineModel


@dataclass
class ProblemSpec:
    """Dynamics plus costs on the grid ``t_i = i * dt``, ``i = 0 .. n_steps``.

    ``state_cost(X, t)`` and ``terminal_cost(X)`` are batched over states.
    """

    model: ControlAffineModel
    T: float
    dt: float
    n_steps: int
    state_cost: Callable[[np.ndarray, float], np.ndarray]
    terminal_cost: Callable[[np.ndarray], np.ndarray]
    box: tuple[np.ndarray, np.ndarray]
    name: str = "problem"
    theta: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isclose(self.n_steps * self.dt, self.T, rtol=1e-9, atol=0):
            raise ValueError(f"n_steps * dt = {self.n_steps * self.dt} != T = {self.T}")
        self.box = (np.atleast_1d(np.asarray(self.box[0], float)), np.atleast_1d(np.asarray(self.box[1], float)))

    @property
    def lam(self) -> float:
        return self.model.temperature

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def phi(self) -> list[PhiEvaluator]:
        return phi_schedule(self.state_cost, self.lam, self.times)

    def terminal(self, Xp) -> np.ndarray:
        return terminal_psi(self.terminal_cost, self.lam, Xp)

    def path_state_cost(self, states: np.ndarray, first_step: int = 0) -> np.ndarray:
        """Trapezoidal running cost of batched paths ``(n, k+1, d)`` starting at ``first_step``."""
        n, k1, _ = states.shape
        total = np.zeros(n)
        for k in range(k1 - 1):
            i = first_step + k
            total += 0.5 * self.dt * (self.state_cost(states[:, k], self.times[i]) + self.state_cost(states[:, k + 1], self.times[i + 1]))
        return total
