"""1-D linear-quadratic toy ``dx = u dt + dxi`` with terminal cost ``omega x^2``.

Desirability and feedback gains are known in closed form, which makes it the
reference problem for estimator and policy checks.
"""

from __future__ import annotations

import numpy as np

from ..sde import ControlAffineModel, Policy
from .problem import ProblemSpec


def make_lq_toy(omega: float = 1.0, T: float = 1.0, n_steps: int = 2, box=(-4.0, 4.0), noise: float = 1.0) -> ProblemSpec:
    """Unit control cost, ``lam = noise`` and no running cost."""
    if not omega >= 0:
        raise ValueError("omega must be nonnegative")
    model = ControlAffineModel(np.eye(1), noise * np.eye(1), np.eye(1), noise)

    def state_cost(X, t):
        return np.zeros(np.asarray(X).shape[0])

    def terminal_cost(X):
        return omega * np.asarray(X, float).reshape(-1) ** 2

    params = dict(omega=omega, T=T, n_steps=n_steps, box=list(box), noise=noise)
    return ProblemSpec(model, T, T / n_steps, n_steps, state_cost, terminal_cost, box, "lq_toy", params=params)


def _omega_noise(spec: ProblemSpec) -> tuple[float, float]:
    return float(spec.params["omega"]), float(spec.params.get("noise", 1.0))


def lq_psi(spec: ProblemSpec, x, step: int) -> np.ndarray:
    """``psi(x, t_k) = s^{-1/2} exp(-omega x^2 / (lam s))``, ``s = 1 + 2 omega q tau / lam``, ``tau = T - t_k``.

    Gaussian convolution of the terminal factor; exact for the Euler chain too
    since the increments are Gaussian with variance ``q dt``.
    """
    omega, q = _omega_noise(spec)
    tau = spec.T - spec.times[step]
    s = 1.0 + 2.0 * omega * q * tau / spec.lam
    x = np.asarray(x, float).reshape(-1)
    return s**-0.5 * np.exp(-omega * x**2 / (spec.lam * s))


def riccati_gains(spec: ProblemSpec) -> np.ndarray:
    """Feedback gains ``u_k = g_k x`` from the discrete Riccati recursion.

    With ``V_k = P_k x^2 / 2``: ``P_n = 2 omega`` and
    ``P_k = P_{k+1} / (1 + P_{k+1} dt)``; the step-``k`` gain is ``-P_k``.
    """
    omega, _ = _omega_noise(spec)
    H = float(spec.model.control_cost[0, 0])
    P = np.empty(spec.n_steps + 1)
    P[-1] = 2.0 * omega
    for k in reversed(range(spec.n_steps)):
        P[k] = P[k + 1] / (1.0 + P[k + 1] * spec.dt / H)
    return -P[:-1] / H


def fitted_gain(policy: Policy, step: int, xs=None) -> float:
    """Least-squares slope of ``u(x)`` over ``xs`` (intercept fitted too)."""
    xs = np.linspace(-2.0, 2.0, 81) if xs is None else np.asarray(xs, float)
    u = policy.act(xs[:, None], step)[:, 0]
    slope, _ = np.polyfit(xs, u, 1)
    return float(slope)
