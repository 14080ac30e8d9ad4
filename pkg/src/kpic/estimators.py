"""Backward kernel recursion for the desirability function and policy extraction.

Every estimator fits, for ``i = n-1 ... 0``, weights ``alpha_i`` such that

    psi_i(x) = sum_j alpha_ij k(x_j, x),
    alpha_i = (G_XX + eps m I)^{-1} [phi_i(X, X') * psi_{i+1}(X')]

and differs only in how the right-hand side is formed or the solve is
approximated.  ``psi_n`` is the exact terminal desirability.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, optimize

from .kernels import (
    KernelSpec,
    RidgeFactor,
    as_points,
    gram,
    incomplete_gram_schmidt,
)
from .sde import ControlAffineModel, Policy, TransitionDataset, format_float, transition_logpdf

log = logging.getLogger(__name__)

__all__ = [
    "EstimationError",
    "PsiEstimate",
    "PhiEvaluator",
    "ValueModel",
    "LaplaceFallback",
    "KernelPolicy",
    "terminal_psi",
    "phi_one_step",
    "phi_schedule",
    "backward_basic",
    "backward_lowrank",
    "backward_reuse",
    "backward_importance",
    "importance_weights",
    "eval_psi",
    "grad_psi",
    "hess_psi",
    "laplace_fallback",
    "extract_policy",
]

DEFAULT_EPS = 1e-3
DEFAULT_TAU = 1e-4
HESSIAN_FLOOR = 1e-8
MAX_IMPORTANCE_WEIGHT = 1e6


class EstimationError(ArithmeticError):
    pass


# ---------------------------------------------------------------- estimates


@dataclass
class PsiEstimate:
    """Finite kernel expansion ``psi(x) = sum_j alpha_j k(x_j, x)``."""

    kernel: KernelSpec
    support: np.ndarray
    alpha: np.ndarray
    time_index: int

    def __post_init__(self):
        self.support = as_points(self.support)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        if self.alpha.shape[0] != self.support.shape[0]:
            raise ValueError("alpha and support sizes differ")

    def __call__(self, x) -> np.ndarray:
        return gram(self.kernel, x, self.support) @ self.alpha

    def grad(self, x) -> np.ndarray:
        X = as_points(x)
        K = gram(self.kernel, X, self.support) * self.alpha  # (n, m)
        # d/dx k(x_j, x) = -2 (x - x_j) / bw * k(x_j, x)
        return -2.0 / self.kernel.bandwidth * (K.sum(1)[:, None] * X - K @ self.support)

    def hess(self, x) -> np.ndarray:
        X = as_points(x)
        bw = self.kernel.bandwidth
        K = gram(self.kernel, X, self.support) * self.alpha
        diff = X[:, None, :] - self.support[None, :, :]  # (n, m, d)
        outer = np.einsum("nm,nmi,nmj->nij", K, diff, diff)
        eye = np.eye(X.shape[1])[None]
        return 4.0 / bw**2 * outer - 2.0 / bw * K.sum(1)[:, None, None] * eye

    def support_values(self) -> np.ndarray:
        return self(self.support)


def eval_psi(est: PsiEstimate, x):
    out = est(x)
    return float(out[0]) if np.ndim(x) <= 1 and est.support.shape[1] == np.size(x) else out


def grad_psi(est: PsiEstimate, x):
    g = est.grad(x)
    return g[0] if np.ndim(x) <= 1 and est.support.shape[1] == np.size(x) else g


def hess_psi(est: PsiEstimate, x):
    h = est.hess(x)
    return h[0] if np.ndim(x) <= 1 and est.support.shape[1] == np.size(x) else h


@dataclass
class PhiEvaluator:
    """Trapezoidal one-segment local desirability on ``[t0, t1]``."""

    state_cost: Callable[[np.ndarray, float], np.ndarray]
    lam: float
    t0: float
    t1: float

    def __call__(self, x, xp) -> np.ndarray:
        X, Xp = as_points(x), as_points(xp)
        c = np.asarray(self.state_cost(X, self.t0), float) + np.asarray(self.state_cost(Xp, self.t1), float)
        return np.exp(-(self.t1 - self.t0) * c / (2.0 * self.lam))


def phi_one_step(ev: PhiEvaluator, x, xp) -> float:
    return float(ev(np.atleast_1d(x)[None, :], np.atleast_1d(xp)[None, :])[0])


def phi_schedule(state_cost, lam: float, times: Sequence[float]) -> list[PhiEvaluator]:
    return [PhiEvaluator(state_cost, lam, float(times[i]), float(times[i + 1])) for i in range(len(times) - 1)]


def terminal_psi(terminal_cost, lam: float, points) -> np.ndarray:
    if not lam > 0:
        raise ValueError("lam must be positive")
    return np.exp(-np.asarray(terminal_cost(as_points(points)), dtype=float) / lam)


# ---------------------------------------------------------------- value model


@dataclass
class LaplaceFallback:
    """Quadratic value model ``0.5 (x - mode)^T A (x - mode)`` around a mode of psi."""

    mode: np.ndarray
    A: np.ndarray

    def to_dict(self) -> dict:
        return {"mode": self.mode.tolist(), "A": self.A.tolist()}

    @classmethod
    def from_dict(cls, d) -> "LaplaceFallback":
        return cls(np.asarray(d["mode"], float), np.asarray(d["A"], float))


@dataclass
class ValueModel:
    """Schedule of ``PsiEstimate`` for steps ``0 .. n-1`` on the grid ``times``."""

    estimates: list[PsiEstimate]
    times: np.ndarray
    lam: float
    eps: float
    tau: float = DEFAULT_TAU
    fallbacks: list[LaplaceFallback | None] | None = None
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.estimates)

    @property
    def kernel(self) -> KernelSpec:
        return self.estimates[0].kernel

    def __getitem__(self, i: int) -> PsiEstimate:
        return self.estimates[i]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "kernel": self.kernel.to_dict(),
            "eps": self.eps,
            "lam": self.lam,
            "tau": self.tau,
            "times": [float(t) for t in self.times],
            "n_steps": len(self),
            "info": self.info,
            "fallbacks": None if self.fallbacks is None else [None if f is None else f.to_dict() for f in self.fallbacks],
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        for est in self.estimates:
            _write_matrix(d / f"alpha_{est.time_index}.csv", est.alpha[:, None], ["alpha"])
            dim = est.support.shape[1]
            _write_matrix(d / f"support_{est.time_index}.csv", est.support, [f"x_{k}" for k in range(dim)])

    @classmethod
    def load(cls, directory) -> "ValueModel":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        kernel = KernelSpec.from_dict(meta["kernel"])
        ests = []
        for i in range(meta["n_steps"]):
            alpha = _read_matrix(d / f"alpha_{i}.csv")[:, 0]
            support = _read_matrix(d / f"support_{i}.csv")
            ests.append(PsiEstimate(kernel, support, alpha, i))
        fb = meta.get("fallbacks")
        return cls(
            ests, np.asarray(meta["times"]), meta["lam"], meta["eps"], meta.get("tau", DEFAULT_TAU),
            None if fb is None else [None if f is None else LaplaceFallback.from_dict(f) for f in fb],
            meta.get("info", {}),
        )


def _write_matrix(path: Path, M: np.ndarray, header: list[str]) -> None:
    lines = [",".join(header)]
    lines += [",".join(format_float(v) for v in row) for row in M]
    path.write_text("\n".join(lines) + "\n")


def _read_matrix(path: Path) -> np.ndarray:
    rows = path.read_text().strip().split("\n")[1:]
    return np.array([[float(v) for v in r.split(",")] for r in rows], dtype=float).reshape(len(rows), -1)


# ---------------------------------------------------------------- ridge solvers


class _DenseRidge:
    """``(G_XX + eps m I)^{-1}`` for one support set, factorized once."""

    def __init__(self, kernel: KernelSpec, X: np.ndarray, eps: float):
        self.kernel, self.X = kernel, X
        self.support = X
        self._factor = RidgeFactor(gram(kernel, X), eps * X.shape[0])
        self._cache: dict[int, np.ndarray] = {}

    def fit(self, w: np.ndarray) -> np.ndarray:
        return self._factor.solve(w)

    def cross(self, P: np.ndarray, key: int | None = None) -> np.ndarray:
        if key is not None and key in self._cache:
            return self._cache[key]
        G = gram(self.kernel, P, self.support)
        if key is not None:
            self._cache[key] = G
        return G


class _LowRankRidge:
    """Low-rank ridge solve; weights live on the pivot set ``Y``.

    With ``G_XX ~= L L^T`` and ``L_YY`` the pivot rows of ``L``, the weights on
    ``Y`` are ``L_YY^{-T} (eps m I + L^T L)^{-1} L^T w``.
    """

    def __init__(self, kernel: KernelSpec, X: np.ndarray, eps: float, max_rank: int, tol: float):
        self.kernel, self.X = kernel, X
        self.factor = incomplete_gram_schmidt(kernel, X, max_rank, tol)
        L = self.factor.L
        self.support = X[self.factor.pivots]
        M = eps * X.shape[0] * np.eye(L.shape[1]) + L.T @ L
        try:
            self._cho = linalg.cho_factor(M, lower=True)
        except linalg.LinAlgError as exc:
            raise EstimationError("low-rank system matrix is singular") from exc
        self._Lyy = self.factor.L_pivot
        self._cache: dict[int, np.ndarray] = {}

    def fit(self, w: np.ndarray) -> np.ndarray:
        z = linalg.cho_solve(self._cho, self.factor.L.T @ w)
        return linalg.solve_triangular(self._Lyy, z, lower=True, trans="T")

    cross = _DenseRidge.cross


def _solver(kernel, X, eps, max_rank=None, tol=0.0):
    if not eps > 0:
        raise ValueError("eps must be positive")
    if max_rank is None:
        return _DenseRidge(kernel, X, eps)
    return _LowRankRidge(kernel, X, eps, max_rank, tol)


# ---------------------------------------------------------------- recursion


def _as_steps(D, n: int) -> tuple[list[TransitionDataset], bool]:
    if isinstance(D, TransitionDataset):
        return [D] * n, True
    D = list(D)
    if len(D) != n:
        raise ValueError(f"need one dataset per step ({n}), got {len(D)}")
    return D, False


def _terminal_values(terminal, Xp: np.ndarray) -> np.ndarray:
    if callable(terminal):
        return np.asarray(terminal(Xp), dtype=float).reshape(-1)
    v = np.asarray(terminal, dtype=float).reshape(-1)
    if v.shape[0] != Xp.shape[0]:
        raise ValueError("terminal values do not match the final-step X'")
    return v


def _recurse(
    datasets: list[TransitionDataset],
    shared: bool,
    phis: list[np.ndarray],
    terminal,
    kernel: KernelSpec,
    eps: float,
    max_rank=None,
    tol=0.0,
    weights: list[np.ndarray] | None = None,
    times=None,
    lam: float = 1.0,
    info: dict | None = None,
) -> ValueModel:
    n = len(datasets)
    if shared:
        s = _solver(kernel, datasets[0].X, eps, max_rank, tol)
        solvers = [s] * n
    else:
        solvers = [_solver(kernel, d.X, eps, max_rank, tol) for d in datasets]
    estimates: list[PsiEstimate | None] = [None] * n
    v = _terminal_values(terminal, datasets[-1].Xp)
    norms = []
    for i in reversed(range(n)):
        w = phis[i] * v
        if weights is not None:
            w = w * weights[i]
        alpha = solvers[i].fit(w)
        if not np.all(np.isfinite(alpha)):
            raise EstimationError(f"non-finite alpha at step {i}")
        estimates[i] = PsiEstimate(kernel, solvers[i].support, alpha, i)
        norms.append(float(np.linalg.norm(alpha)))
        if i > 0:
            Xp_prev = datasets[i - 1].Xp
            key = 0 if shared else None
            v = solvers[i].cross(Xp_prev, key) @ alpha
    if times is None:
        times = np.arange(n + 1) * datasets[0].dt
    info = dict(info or {})
    info["alpha_norms"] = norms[::-1]
    return ValueModel(estimates, np.asarray(times, float), lam, eps, info=info)


def _phi_values(phi, datasets) -> list[np.ndarray]:
    out = []
    for i, d in enumerate(datasets):
        p = phi[i]
        out.append(np.asarray(p(d.X, d.Xp) if callable(p) else p, dtype=float).reshape(-1))
    return out


def backward_basic(
    D, phi: Sequence, terminal, kernel: KernelSpec, eps: float = DEFAULT_EPS, times=None, lam: float | None = None
) -> ValueModel:
    """Empirical estimator with exact local desirability on the training pairs.

    ``D`` is one dataset shared by all steps or a list with one dataset per
    step; ``phi[i]`` is a ``PhiEvaluator`` (or precomputed values) for step
    ``i``; ``terminal`` is the terminal desirability as a callable or its
    values at the last step's ``X'``.
    """
    datasets, shared = _as_steps(D, len(phi))
    lam = _lam(phi, lam)
    return _recurse(datasets, shared, _phi_values(phi, datasets), terminal, kernel, eps,
                    times=times, lam=lam, info={"estimator": "basic", "m": len(datasets[0])})


def backward_lowrank(
    D, phi: Sequence, terminal, kernel: KernelSpec, eps: float = DEFAULT_EPS,
    max_rank: int = 500, tol: float = 1e-10, times=None, lam: float | None = None,
) -> ValueModel:
    """Low-rank variant: support restricted to Gram-Schmidt pivots (at most ``max_rank``)."""
    datasets, shared = _as_steps(D, len(phi))
    lam = _lam(phi, lam)
    return _recurse(datasets, shared, _phi_values(phi, datasets), terminal, kernel, eps, max_rank, tol,
                    times=times, lam=lam,
                    info={"estimator": "lowrank", "m": len(datasets[0]), "max_rank": max_rank, "tol": tol})


def backward_reuse(
    D: TransitionDataset,
    D_prime,
    phi: Sequence,
    terminal,
    kernel: KernelSpec,
    pair_kernel: KernelSpec,
    eps: float = DEFAULT_EPS,
    eps_prime: float = 1e-6,
    max_rank: int | None = None,
    tol: float = 1e-10,
    times=None,
    lam: float | None = None,
    base_phi: Sequence | None = None,
) -> ValueModel:
    """Estimator needing the local desirability only on a separate pair set ``D'``.

    The values on ``D`` are replaced by the pair-kernel projection
    ``G_{D D'} (G_{D'D'} + eps' m' I)^{-1} phi(D')``.  ``D_prime`` is either a
    single dataset (factorized once for all steps) or one dataset per step.
    ``phi[i]`` is evaluated on ``D'`` only.  ``base_phi[i]``, when given, is a
    known factor evaluated exactly on ``D`` and multiplied onto the projection
    (an invariant cost component absorbed into the dynamics).  Steps whose
    ``D'`` is empty then use the base factor alone.
    """
    n = len(phi)
    lam = _lam(phi, lam)
    Dp_steps, shared_p = _as_steps(D_prime, n)
    Z = D.pairs
    factors: dict[int, tuple[RidgeFactor, np.ndarray]] = {}

    def projector(i):
        key = 0 if shared_p else i
        if key not in factors:
            Zp = Dp_steps[i].pairs
            factors[key] = (RidgeFactor(gram(pair_kernel, Zp), eps_prime * Zp.shape[0]), gram(pair_kernel, Z, Zp))
        return factors[key]

    base = None if base_phi is None else _phi_values(base_phi, [D] * n)
    phis = []
    for i in range(n):
        if len(Dp_steps[i]) == 0:
            if base is None:
                raise ValueError(f"empty D' at step {i}")
            phis.append(base[i])
            continue
        p_vals = phi[i](Dp_steps[i].X, Dp_steps[i].Xp) if callable(phi[i]) else phi[i]
        p_vals = np.asarray(p_vals, dtype=float).reshape(-1)
        F, G_cross = projector(i)
        proj = G_cross @ F.solve(p_vals)
        phis.append(proj if base is None else base[i] * proj)
    datasets = [D] * n
    return _recurse(datasets, True, phis, terminal, kernel, eps, max_rank, tol, times=times, lam=lam,
                    info={"estimator": "reuse", "m": len(D), "eps_prime": eps_prime,
                          "pair_bandwidth": pair_kernel.bandwidth, "max_rank": max_rank,
                          "base_phi": base_phi is not None,
                          "dataset_fingerprint": D.fingerprint()})


def importance_weights(
    D: TransitionDataset, model: ControlAffineModel, policy: Policy | None = None, w_max: float = MAX_IMPORTANCE_WEIGHT
) -> tuple[np.ndarray, int]:
    """Density ratios ``p_0(x'|x) / p_pi(x'|x)`` with clipping at ``w_max``.

    The applied controls come from ``D.controls`` when recorded, otherwise from
    ``policy`` at each pair's time index (step 0 when none is recorded).
    """
    if D.controls is not None:
        U = D.controls
    elif policy is not None:
        steps = D.time_index if D.time_index is not None else np.zeros(len(D), dtype=int)
        U = np.empty((len(D), model.du))
        for i in np.unique(steps):
            sel = steps == i
            U[sel] = policy.act(D.X[sel], int(i))
    else:
        U = np.zeros((len(D), model.du))
    t = 0.0
    lp0 = transition_logpdf(model, D.X, D.Xp, np.zeros_like(U), D.dt, t)
    lpi = transition_logpdf(model, D.X, D.Xp, U, D.dt, t)
    if np.any(~np.isfinite(lpi)):
        raise EstimationError("sampling density is zero at an observed transition")
    W = np.exp(lp0 - lpi)
    clipped = int(np.sum(W > w_max))
    if clipped:
        log.warning("clipped %d importance weights at %g", clipped, w_max)
        W = np.minimum(W, w_max)
    return W, clipped


def backward_importance(
    D: TransitionDataset,
    model: ControlAffineModel,
    policy: Policy | None,
    phi: Sequence,
    terminal,
    kernel: KernelSpec,
    eps: float = DEFAULT_EPS,
    w_max: float = MAX_IMPORTANCE_WEIGHT,
    max_rank: int | None = None,
    tol: float = 1e-10,
    times=None,
) -> ValueModel:
    """Off-policy estimator: right-hand sides weighted by density ratios."""
    n = len(phi)
    W, clipped = importance_weights(D, model, policy, w_max)
    datasets = [D] * n
    return _recurse(datasets, True, _phi_values(phi, datasets), terminal, kernel, eps, max_rank, tol,
                    weights=[W] * n, times=times, lam=model.temperature,
                    info={"estimator": "importance", "m": len(D), "clipped_weights": clipped})


def _lam(phi, lam):
    if lam is not None:
        return float(lam)
    return float(getattr(phi[0], "lam", 1.0))


# ---------------------------------------------------------------- policy


def laplace_fallback(est: PsiEstimate, lam: float, starts=None, max_iter: int = 200) -> LaplaceFallback:
    """Mode of ``psi`` by gradient ascent plus the PSD-projected value Hessian there.

    The value is ``-lam log psi``; its Hessian at the mode is
    ``-lam (hess psi / psi - grad grad^T / psi^2)``, eigenvalues clamped at
    ``HESSIAN_FLOOR``.
    """
    vals = est.support_values()
    if not np.any(vals > 1e-300):
        raise EstimationError(f"degenerate estimate at step {est.time_index}: psi underflows on the support")
    candidates = [est.support[int(np.argmax(vals))]]
    if starts is not None:
        candidates += list(as_points(starts))

    def objective(x):
        p = est(x[None, :])[0]
        if not p > 1e-300:
            return 1e300, np.zeros_like(x)
        g = est.grad(x[None, :])[0]
        return -np.log(p), -g / p

    best_x, best_f = None, np.inf
    for x0 in candidates:
        res = optimize.minimize(objective, np.asarray(x0, float), jac=True, method="BFGS",
                                options={"maxiter": max_iter, "gtol": 1e-10})
        if res.fun < best_f:
            best_x, best_f = res.x, res.fun
    p = est(best_x[None, :])[0]
    g = est.grad(best_x[None, :])[0]
    h = est.hess(best_x[None, :])[0]
    A = -lam * (h / p - np.outer(g, g) / p**2)
    A = 0.5 * (A + A.T)
    evals, evecs = np.linalg.eigh(A)
    A = (evecs * np.maximum(evals, HESSIAN_FLOOR)) @ evecs.T
    return LaplaceFallback(best_x, A)


class KernelPolicy(Policy):
    """``u = lam H^-1 B^T grad psi / psi`` where psi is large enough, else the
    linear Laplace policy ``u = -H^-1 B^T A (x - mode)``."""

    tag = "kernel"

    def __init__(self, vm: ValueModel, model: ControlAffineModel):
        self.vm, self.model = vm, model
        self.du = model.du
        if vm.fallbacks is None:
            vm.fallbacks = []
            for est in vm.estimates:
                try:
                    vm.fallbacks.append(laplace_fallback(est, vm.lam))
                except EstimationError as exc:
                    log.warning("%s", exc)
                    vm.fallbacks.append(None)
        self._thresholds = [vm.tau * float(np.max(e.support_values())) for e in vm.estimates]

    def _act(self, x, i):
        i = min(int(i), len(self.vm) - 1)
        est = self.vm[i]
        t = float(self.vm.times[i])
        B = self.model.B(x, t)
        HB = np.einsum("ij,nkj->nik", self.model.H_inv, B)  # H^-1 B^T, (n, du, dx)
        p = est(x)
        g = est.grad(x)
        ok = p >= self._thresholds[i]
        ok &= self._thresholds[i] > 0
        u = np.zeros((x.shape[0], self.du))
        if np.any(ok):
            u[ok] = self.vm.lam * np.einsum("nij,nj->ni", HB[ok], g[ok] / p[ok, None])
        fb = self.vm.fallbacks[i]
        rest = ~ok | ~np.all(np.isfinite(u), axis=1)
        if np.any(rest):
            if fb is None:
                u[rest] = 0.0
            else:
                dx = (x[rest] - fb.mode) @ fb.A.T
                u[rest] = -np.einsum("nij,nj->ni", HB[rest], dx)
        u[~np.isfinite(u)] = 0.0
        return u


def extract_policy(vm: ValueModel, model: ControlAffineModel) -> KernelPolicy:
    return KernelPolicy(vm, model)
