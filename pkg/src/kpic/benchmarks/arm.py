"""Planar 5-link arm under kinematic position control.

The joint angles follow ``dq = u dt + dxi``.  The running cost combines a skill
term (keep the end effector on a line ``n . p = j``) and a task term (reach a
target ``theta``); the terminal cost is the task term alone.  Skill data is
gathered once and reused for new targets through the pair-projection estimator.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..estimators import ValueModel, backward_lowrank, backward_reuse, extract_policy, phi_schedule
from ..kernels import KernelSpec
from ..sde import (
    ControlAffineModel,
    GaussianPrior,
    TransitionDataset,
    ZeroPolicy,
    sample_transitions,
    sample_trajectories,
    trajectories_to_dataset,
)
from .problem import ProblemSpec

log = logging.getLogger(__name__)

DEFAULT_Q0 = (0.6, 0.5, 0.4, 0.3, 0.2)


def forward_kinematics(q, lengths) -> tuple[np.ndarray, np.ndarray]:
    """End-effector position and its Jacobian w.r.t. the joint angles.

    ``q`` is ``(n_links,)`` or batched ``(n, n_links)``; returns ``p`` of shape
    ``(..., 2)`` and ``J`` of shape ``(..., 2, n_links)``.
    """
    q = np.asarray(q, float)
    L = np.asarray(lengths, float)
    if q.shape[-1] != L.shape[-1]:
        raise ValueError(f"expected {L.shape[-1]} joint angles, got {q.shape[-1]}")
    phi = np.cumsum(q, axis=-1)
    c, s = L * np.cos(phi), L * np.sin(phi)
    p = np.stack([c.sum(-1), s.sum(-1)], axis=-1)
    # column j sums the links at or beyond joint j
    tail_c = np.cumsum(c[..., ::-1], axis=-1)[..., ::-1]
    tail_s = np.cumsum(s[..., ::-1], axis=-1)[..., ::-1]
    J = np.stack([-tail_s, tail_c], axis=-2)
    return p, J


@dataclass
class ArmSpec:
    """Arm task parameters; the task line passes through the start end-effector point."""

    n_links: int = 5
    link_length: float = 0.2
    T: float = 2.0
    dt: float = 0.02
    lam: float = 0.1
    H: float = 1.0
    w_skill: float = 20.0
    w_task: float = 2.0
    w_terminal: float = 20.0
    q0: tuple = DEFAULT_Q0
    line_angle: float = 0.0  # direction of the task line, radians
    theta: tuple | None = None
    prior_std: float = 0.35

    def __post_init__(self):
        if self.n_links < 1 or self.link_length <= 0:
            raise ValueError("arm needs at least one link of positive length")
        if len(self.q0) != self.n_links:
            raise ValueError("q0 must have one angle per link")
        for name in ("lam", "H", "prior_std"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("w_skill", "w_task", "w_terminal"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def lengths(self) -> np.ndarray:
        return np.full(self.n_links, self.link_length)

    @property
    def start_point(self) -> np.ndarray:
        return forward_kinematics(np.asarray(self.q0, float), self.lengths)[0]

    @property
    def line_direction(self) -> np.ndarray:
        return np.array([np.cos(self.line_angle), np.sin(self.line_angle)])

    @property
    def line_normal(self) -> np.ndarray:
        d = self.line_direction
        return np.array([-d[1], d[0]])

    @property
    def line_offset(self) -> float:
        return float(self.line_normal @ self.start_point)

    def target_on_line(self, s: float) -> np.ndarray:
        return self.start_point + s * self.line_direction

    def skill_only(self) -> "ArmSpec":
        return replace(self, w_task=0.0, w_terminal=0.0, theta=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q0"] = list(self.q0)
        d["theta"] = None if self.theta is None else list(self.theta)
        return d


def subspace_deviation(spec: ArmSpec, Q) -> np.ndarray:
    """``|n . phi(q) - j|`` per state."""
    p, _ = forward_kinematics(np.asarray(Q, float).reshape(-1, spec.n_links), spec.lengths)
    return np.abs(p @ spec.line_normal - spec.line_offset)


def arm_costs(spec: ArmSpec):
    """``(skill_cost(X, t), task_cost(X, t), terminal_cost(X))``, batched over joint states."""
    n = spec.n_links
    theta = None if spec.theta is None else np.asarray(spec.theta, float)
    if (spec.w_task > 0 or spec.w_terminal > 0) and theta is None:
        raise ValueError("task cost needs a target theta")
    nrm, off, L = spec.line_normal, spec.line_offset, spec.lengths

    def ee(X):
        return forward_kinematics(np.asarray(X, float).reshape(-1, n), L)[0]

    def reach(p, w):
        if w == 0:
            return np.zeros(p.shape[0])
        return w * np.sum((p - theta) ** 2, axis=-1)

    def skill_cost(X, t):
        return spec.w_skill * (ee(X) @ nrm - off) ** 2

    def task_cost(X, t):
        return reach(ee(X), spec.w_task)

    def terminal_cost(X):
        return reach(ee(X), spec.w_terminal)

    return skill_cost, task_cost, terminal_cost


def make_arm_problem(spec: ArmSpec) -> ProblemSpec:
    """Single-integrator joint model with ``Q = lam H^-1 I``; running cost skill + task."""
    n = spec.n_links
    model = ControlAffineModel(np.eye(n), (spec.lam / spec.H) * np.eye(n), spec.H * np.eye(n), spec.lam)
    skill_cost, task_cost, terminal_cost = arm_costs(spec)

    def state_cost(X, t):
        return skill_cost(X, t) + task_cost(X, t)

    n_steps = int(round(spec.T / spec.dt))
    q0 = np.asarray(spec.q0, float)
    box = (q0 - 3 * spec.prior_std, q0 + 3 * spec.prior_std)
    theta = None if spec.theta is None else np.asarray(spec.theta, float)
    return ProblemSpec(model, spec.T, spec.dt, n_steps, state_cost, terminal_cost, box, "arm",
                       theta=theta, params=spec.to_dict())


def arm_prior(spec: ArmSpec) -> GaussianPrior:
    return GaussianPrior(np.asarray(spec.q0, float), spec.prior_std**2 * np.eye(spec.n_links))


def sample_null_transitions(spec: ArmSpec, m: int, seed: int) -> TransitionDataset:
    """``m`` i.i.d. uncontrolled transitions with states drawn around ``q0``."""
    problem = make_arm_problem(spec.skill_only())
    return sample_transitions(problem.model, ZeroPolicy(spec.n_links), arm_prior(spec), m, spec.dt, seed)


def train_skill_model(spec: ArmSpec, D: TransitionDataset, kernel: KernelSpec, eps: float,
                      max_rank: int = 500) -> ValueModel:
    """Desirability of the skill-only problem, with the cost evaluated on ``D``."""
    problem = make_arm_problem(spec.skill_only())
    return backward_lowrank(D, problem.phi(), problem.terminal, kernel, eps, max_rank, times=problem.times)


def skill_policy_sampling(spec: ArmSpec, skill_vm: ValueModel, n_traj: int, seed: int) -> TransitionDataset:
    """Roll out the skill policy from ``q0`` and flatten into time-indexed transitions."""
    problem = make_arm_problem(spec.skill_only())
    policy = extract_policy(skill_vm, problem.model)
    trajs = sample_trajectories(problem.model, policy, np.asarray(spec.q0, float), problem.n_steps, n_traj, spec.dt, seed)
    return trajectories_to_dataset(trajs, policy_tag="skill", prior_tag=f"delta{list(spec.q0)}", seed=seed)


def null_policy_sampling(spec: ArmSpec, n_traj: int, seed: int) -> TransitionDataset:
    problem = make_arm_problem(spec.skill_only())
    trajs = sample_trajectories(problem.model, ZeroPolicy(spec.n_links), np.asarray(spec.q0, float),
                                problem.n_steps, n_traj, spec.dt, seed)
    return trajectories_to_dataset(trajs, policy_tag="zero", prior_tag=f"delta{list(spec.q0)}", seed=seed)


def first_trajectories(D_prime: TransitionDataset, n_traj: int) -> TransitionDataset:
    """Transitions of the first ``n_traj`` trajectories of a flattened trajectory set."""
    starts = np.flatnonzero(D_prime.time_index == 0)
    if n_traj > starts.size:
        raise ValueError(f"only {starts.size} trajectories available")
    end = starts[n_traj] if n_traj < starts.size else len(D_prime)
    return D_prime.subset(np.arange(end))


def train_task_model(spec: ArmSpec, D: TransitionDataset, D_prime: TransitionDataset | None, kernel: KernelSpec,
                     pair_kernel: KernelSpec, eps: float, eps_prime: float = 1e-6,
                     max_rank: int = 500) -> ValueModel:
    """Task desirability from the shared ``D`` under skill-augmented dynamics.

    The skill factor is evaluated exactly on ``D`` (it is part of the
    pre-computed operators); the task factor is known only on ``D'`` and is
    projected.  With an empty ``D'`` this reduces to the skill-only estimate
    with the task terminal cost.  ``D`` is frozen before use, so no new
    dynamics samples can enter.
    """
    for a in (D.X, D.Xp):
        a.setflags(write=False)
    problem = make_arm_problem(spec)
    skill_cost, task_cost, _ = arm_costs(spec)
    lam, times = problem.lam, problem.times
    if D_prime is None:
        D_prime = D.subset(np.arange(0))
        D_prime.time_index = np.zeros(0, dtype=int)
    steps = [D_prime.at_step(i) for i in range(problem.n_steps)]
    vm = backward_reuse(D, steps, phi_schedule(task_cost, lam, times), problem.terminal, kernel, pair_kernel,
                        eps, eps_prime, max_rank=max_rank, times=times,
                        base_phi=phi_schedule(skill_cost, lam, times))
    log.info("task theta=%s trained on dataset %s", list(np.round(problem.theta, 6)), vm.info["dataset_fingerprint"])
    return vm


def relative_l1(est, reference, probes) -> float:
    """``sum |est - ref| / sum |ref|`` over probe states."""
    a = np.asarray(est(probes), float)
    b = np.asarray(reference(probes), float)
    denom = np.sum(np.abs(b))
    if not denom > 0:
        raise ValueError("reference vanishes on every probe")
    return float(np.sum(np.abs(a - b)) / denom)


@dataclass
class TransferResult:
    n_traj: list
    errors: np.ndarray  # (targets, len(n_traj))
    fingerprints: list = field(default_factory=list)

    @property
    def mean_errors(self) -> np.ndarray:
        return self.errors.mean(axis=0)
