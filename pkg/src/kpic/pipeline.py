"""Config-driven experiment steps behind the command line: sample, train,
evaluate and sweep.  CSV outputs are deterministic for a fixed config."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .benchmarks import arm as arm_mod
from .benchmarks.double_slit import (
    make_double_slit,
    mc_baseline_policy,
    oracle_policy,
    oracle_psi,
    variational_baseline,
)
from .benchmarks.lq import lq_psi, make_lq_toy, riccati_gains
from .benchmarks.metrics import L1_NORMALIZATION, expected_cost, l1_error
from .benchmarks.problem import ProblemSpec
from .config import ConfigError, ExperimentConfig
from .estimators import (
    ValueModel,
    backward_basic,
    backward_importance,
    backward_lowrank,
    backward_reuse,
    extract_policy,
)
from .kernels import KernelSpec, median_heuristic
from .sde import (
    DeltaPrior,
    GaussianPrior,
    LinearPolicy,
    Policy,
    TransitionDataset,
    UniformBox,
    ZeroPolicy,
    format_float,
    sample_trajectories,
    sample_transitions,
    trajectories_to_dataset,
)

log = logging.getLogger(__name__)

DATASET_NAME = "dataset.csv"
MODEL_DIR = "model"
RESOLVED_NAME = "config.resolved.json"
L1_COLUMNS = ["samples", "seed", "estimator", "l1"]
SWEEP_COLUMNS = L1_COLUMNS + ["status"]


# ---------------------------------------------------------------- building blocks


@dataclass
class Setup:
    problem: ProblemSpec
    arm: arm_mod.ArmSpec | None = None


def build_problem(cfg: ExperimentConfig) -> Setup:
    p = cfg.problem
    if p.name == "double_slit":
        q = p.params
        return Setup(make_double_slit(q.omega, q.noise, q.H, q.obstacle_cost, q.target, q.T, q.dt, q.box))
    if p.name == "lq_toy":
        q = p.params
        return Setup(make_lq_toy(q.omega, q.T, q.n_steps, q.box, q.noise))
    q = p.params
    spec = arm_mod.ArmSpec(q.n_links, q.link_length, q.T, q.dt, q.lam, q.H, q.w_skill, q.w_task, q.w_terminal,
                           tuple(q.q0), q.line_angle, None, q.prior_std)
    spec = replace(spec, theta=tuple(spec.target_on_line(q.target)))
    return Setup(arm_mod.make_arm_problem(spec), spec)


def build_prior(cfg: ExperimentConfig, setup: Setup):
    pc = cfg.sampling.prior
    dx = setup.problem.model.dx
    if pc is None:
        if setup.arm is not None:
            return arm_mod.arm_prior(setup.arm)
        return UniformBox(setup.problem.box[0], setup.problem.box[1])
    if pc.kind == "uniform":
        prior = UniformBox(pc.low, pc.high)
        size = len(pc.low)
    elif pc.kind == "gaussian":
        prior = GaussianPrior(pc.mean, np.diag(np.square(pc.std)))
        size = len(pc.mean)
    else:
        prior = DeltaPrior(pc.point)
        size = len(pc.point)
    if size != dx:
        raise ConfigError(f"sampling.prior: dimension {size} does not match the problem state dimension {dx}")
    return prior


def build_policy(cfg: ExperimentConfig, setup: Setup) -> Policy:
    pc = cfg.sampling.policy
    model = setup.problem.model
    if pc.kind == "zero":
        return ZeroPolicy(model.du)
    K = pc.gain * np.eye(model.du, model.dx)
    return LinearPolicy(K, np.full(model.du, pc.offset), tag=f"linear(gain={pc.gain!r},offset={pc.offset!r})")


def pick_bandwidth(bw, points) -> float:
    if bw.policy == "fixed":
        return float(bw.value)
    return float(bw.scale * median_heuristic(points))


def sample_dataset(cfg: ExperimentConfig, setup: Setup | None = None) -> TransitionDataset:
    setup = setup or build_problem(cfg)
    spec = setup.problem
    s = cfg.sampling
    prior = build_prior(cfg, setup)
    policy = build_policy(cfg, setup)
    if s.mode == "transitions":
        D = sample_transitions(spec.model, policy, prior, s.m, spec.dt, s.seed)
    else:
        n_traj = s.n_traj if s.n_traj is not None else max(1, s.m // spec.n_steps)
        trajs = sample_trajectories(spec.model, policy, prior, spec.n_steps, n_traj, spec.dt, s.seed)
        D = trajectories_to_dataset(trajs, policy.tag, prior.tag, s.seed, keep_controls=not isinstance(policy, ZeroPolicy))
    D.meta.update({"problem": spec.name, "mode": s.mode})
    return D


def _check_dim(D: TransitionDataset, setup: Setup):
    if D.dim != setup.problem.model.dx:
        raise ConfigError(f"dataset dimension {D.dim} does not match the problem state dimension {setup.problem.model.dx}")


def train(cfg: ExperimentConfig, D: TransitionDataset, setup: Setup | None = None) -> tuple[ValueModel, dict]:
    """Fit the configured estimator; returns the model and a training log."""
    setup = setup or build_problem(cfg)
    _check_dim(D, setup)
    spec = setup.problem
    e = cfg.estimator
    t0 = time.perf_counter()
    kernel = KernelSpec(pick_bandwidth(e.bandwidth, D.X))
    extra = {}
    if setup.arm is not None:
        vm, extra = _train_arm(cfg, setup, D, kernel)
    else:
        phi, term, times = spec.phi(), spec.terminal, spec.times
        per_step = D.time_index is not None
        steps = [D.at_step(i) for i in range(spec.n_steps)] if per_step else D
        if e.kind == "basic":
            vm = backward_basic(steps, phi, term, kernel, e.eps, times=times)
        elif e.kind == "lowrank":
            vm = backward_lowrank(D, phi, term, kernel, e.eps, e.max_rank, e.tol, times=times)
        elif e.kind == "reuse":
            pair = KernelSpec(pick_bandwidth(e.pair_bandwidth, D.pairs))
            vm = backward_reuse(D, steps, phi, term, kernel, pair, e.eps, e.eps_prime, e.max_rank, e.tol, times=times)
        else:
            vm = backward_importance(D, spec.model, build_policy(cfg, setup), phi, term, kernel, e.eps, e.w_max,
                                     times=times)
    vm.tau = e.tau
    wall = time.perf_counter() - t0
    support = [e_.support_values() for e_ in vm.estimates]
    train_log = {
        "estimator": e.kind,
        "m": len(D),
        "bandwidth": kernel.bandwidth,
        "bandwidth_rule": "median of pairwise squared distances" if e.bandwidth.policy == "median" else "fixed",
        "eps": e.eps,
        "alpha_norms": vm.info.get("alpha_norms"),
        "support_min": [float(s.min()) for s in support],
        "support_max": [float(s.max()) for s in support],
        "dataset_fingerprint": D.fingerprint(),
        "wall_time_s": wall,
        **extra,
    }
    return vm, train_log


def _arm_kernels(cfg, D):
    e = cfg.estimator
    return KernelSpec(pick_bandwidth(e.bandwidth, D.X)), KernelSpec(pick_bandwidth(e.pair_bandwidth, D.pairs))


def _arm_skill(cfg, setup, D, kernel):
    skill_vm = arm_mod.train_skill_model(setup.arm, D, kernel, cfg.estimator.eps, cfg.estimator.max_rank)
    skill_vm.tau = cfg.estimator.tau
    return skill_vm


def _train_arm(cfg, setup, D, kernel):
    e = cfg.estimator
    if e.kind != "reuse":
        raise ConfigError("estimator.kind: the arm task is trained with the reuse estimator")
    q = cfg.problem.params
    skill_vm = _arm_skill(cfg, setup, D, kernel)
    D_prime = arm_mod.skill_policy_sampling(setup.arm, skill_vm, q.n_skill_traj, cfg.sampling.seed + 1)
    _, pair = _arm_kernels(cfg, D)
    vm = arm_mod.train_task_model(setup.arm, D, D_prime, kernel, pair, e.eps, e.eps_prime, e.max_rank)
    dev_skill = float(arm_mod.subspace_deviation(setup.arm, D_prime.X).mean())
    return vm, {"n_skill_traj": q.n_skill_traj, "skill_subspace_deviation": dev_skill,
                "pair_bandwidth": pair.bandwidth}


# ---------------------------------------------------------------- evaluation


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_float(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def write_csv(path: Path, columns, rows) -> None:
    path.write_text(_csv_text(columns, rows))


def read_csv_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class Oracle:
    """Reference desirability on a 1-D grid plus an optimal feedback policy."""

    def __init__(self, cfg: ExperimentConfig, setup: Setup):
        spec = setup.problem
        self.spec = spec
        self.table = None
        if spec.name == "double_slit":
            self.table = oracle_psi(spec, cfg.evaluation.grid_spacing)
            g = self.table.grid
            sel = (g >= spec.box[0][0] - 1e-12) & (g <= spec.box[1][0] + 1e-12)
            self.grid = g[sel]
            self._psi = lambda i: self.table.psi[i][sel]
        else:
            lo, hi = spec.box[0][0], spec.box[1][0]
            n = int(round((hi - lo) / cfg.evaluation.grid_spacing))
            self.grid = np.linspace(lo, hi, n + 1)
            self._psi = lambda i: lq_psi(spec, self.grid, i)

    def psi(self, i: int) -> np.ndarray:
        return self._psi(i)

    def policy(self) -> Policy:
        if self.table is not None:
            return oracle_policy(self.table)
        gains = riccati_gains(self.spec)
        return LinearPolicy(gains[:, None, None], np.zeros((len(gains), 1)), tag="oracle")

    def variational(self, x0) -> Policy:
        if self.table is not None:
            return variational_baseline(self.table, self.spec, x0)
        return self.policy()  # Laplace is exact for Gaussian desirability


def _step_of(spec: ProblemSpec, t: float) -> int:
    i = int(round(t / spec.dt))
    if not 0 <= i < spec.n_steps:
        raise ConfigError(f"evaluation.slice_times: {t} is outside [0, T)")
    return i


def evaluate(cfg: ExperimentConfig, vm: ValueModel, D: TransitionDataset | None = None,
             setup: Setup | None = None) -> dict[str, tuple[list, list]]:
    """Rows for ``l1_curve.csv``, ``cost_bars.csv`` and ``psi_slice.csv``."""
    setup = setup or build_problem(cfg)
    if setup.arm is not None:
        if D is None:
            raise ConfigError("the arm evaluation needs the training dataset")
        return _evaluate_arm(cfg, vm, D, setup)
    ev = cfg.evaluation
    spec = setup.problem
    oracle = Oracle(cfg, setup)
    samples = int(vm.info.get("m", 0))
    use_oracle = ev.psi_source == "oracle"

    def est_values(i):
        return oracle.psi(i) if use_oracle else vm[i](oracle.grid[:, None])

    l1 = l1_error(est_values(0), oracle.psi(0), oracle.grid)
    label = "oracle" if use_oracle else vm.info.get("estimator", cfg.estimator.kind)
    l1_rows = [[samples, cfg.sampling.seed, label, l1]]

    cost_rows = []
    mc = None
    for name in ev.policies:
        for x0 in ev.starts:
            if name == "kernel":
                pol = extract_policy(vm, spec.model)
            elif name == "oracle":
                pol = oracle.policy()
            elif name == "variational":
                pol = oracle.variational(x0)
            elif name == "mc":
                mc = mc or mc_baseline_policy(spec, ev.mc_fit_start, ev.mc_n_traj, ev.mc_seed)
                pol = mc
            else:
                pol = ZeroPolicy(spec.model.du)
            mean, se = expected_cost(pol, spec, x0, ev.n_rollouts, ev.seed)
            cost_rows.append([name, float(x0), mean, se])

    slice_rows = []
    idx = np.arange(0, oracle.grid.size, ev.slice_stride)
    for t in ev.slice_times:
        i = _step_of(spec, t)
        ref, est = oracle.psi(i)[idx], est_values(i)[idx]
        slice_rows += [[float(x), float(spec.times[i]), float(a), float(b)] for x, a, b in zip(oracle.grid[idx], ref, est)]
    return {
        "l1_curve.csv": (L1_COLUMNS, l1_rows),
        "cost_bars.csv": (["policy", "start", "mean", "se"], cost_rows),
        "psi_slice.csv": (["x", "t", "psi_oracle", "psi_est"], slice_rows),
    }


def arm_reference(cfg: ExperimentConfig, setup: Setup, D: TransitionDataset) -> ValueModel:
    """Task desirability from ``reference_n_traj`` skill trajectories (no exact oracle exists)."""
    q = cfg.problem.params
    e = cfg.estimator
    kernel, pair = _arm_kernels(cfg, D)
    skill_vm = _arm_skill(cfg, setup, D, kernel)
    D_ref = arm_mod.skill_policy_sampling(setup.arm, skill_vm, q.reference_n_traj, cfg.sampling.seed + 1)
    return arm_mod.train_task_model(setup.arm, D, D_ref, kernel, pair, e.eps, e.eps_prime, e.max_rank)


def arm_probes(cfg: ExperimentConfig, setup: Setup) -> np.ndarray:
    q = cfg.problem.params
    return arm_mod.arm_prior(setup.arm).sample(q.n_probes, np.random.default_rng(q.probe_seed))


def _evaluate_arm(cfg, vm, D, setup):
    ev = cfg.evaluation
    spec = setup.problem
    ref = arm_reference(cfg, setup, D)
    probes = arm_probes(cfg, setup)
    use_ref = ev.psi_source == "oracle"
    est = ref if use_ref else vm
    l1 = arm_mod.relative_l1(est[0], ref[0], probes)
    label = "reference" if use_ref else f"{cfg.estimator.kind}:reference"
    l1_rows = [[cfg.problem.params.n_skill_traj, cfg.sampling.seed, label, l1]]
    q0 = np.asarray(setup.arm.q0, float)
    cost_rows = []
    for name in ev.policies:
        if name == "kernel":
            pol = extract_policy(est, spec.model)
        elif name == "zero":
            pol = ZeroPolicy(spec.model.du)
        else:
            log.warning("policy %r is not available for the arm task; skipped", name)
            continue
        mean, se = expected_cost(pol, spec, q0, ev.n_rollouts, ev.seed)
        cost_rows.append([name, "q0", mean, se])
    offsets = np.linspace(-3 * setup.arm.prior_std, 3 * setup.arm.prior_std, 61)
    slice_rows = []
    for t in ev.slice_times:
        i = _step_of(spec, t)
        X = np.tile(q0, (offsets.size, 1))
        X[:, 0] += offsets
        a, b = ref[i](X), est[i](X)
        slice_rows += [[float(x), float(spec.times[i]), float(u), float(v)] for x, u, v in zip(X[:, 0], a, b)]
    return {
        "l1_curve.csv": (L1_COLUMNS, l1_rows),
        "cost_bars.csv": (["policy", "start", "mean", "se"], cost_rows),
        "psi_slice.csv": (["x", "t", "psi_oracle", "psi_est"], slice_rows),
    }


# ---------------------------------------------------------------- sweep


def sweep_entry(cfg: ExperimentConfig, m: int, seed: int, oracle: Oracle | None, setup: Setup) -> list:
    """One ``(samples, seed)`` run; failures become a row with a status message."""
    label = cfg.estimator.kind
    try:
        if setup.arm is not None:
            params = cfg.problem.params.model_copy(update={"n_skill_traj": m})
            sub = cfg.model_copy(update={"problem": cfg.problem.model_copy(update={"params": params}),
                                         "sampling": cfg.sampling.model_copy(update={"seed": seed})})
            D = sample_dataset(sub, setup)
            vm, _ = train(sub, D, setup)
            ref = arm_reference(sub, setup, D)
            l1 = arm_mod.relative_l1(vm[0], ref[0], arm_probes(sub, setup))
            return [m, seed, f"{label}:reference", l1, "ok"]
        s = cfg.sampling
        upd = {"seed": seed, "m": m}
        if s.mode == "trajectories":
            upd["n_traj"] = max(1, m // setup.problem.n_steps)
        sub = cfg.model_copy(update={"sampling": s.model_copy(update=upd)})
        D = sample_dataset(sub, setup)
        vm, _ = train(sub, D, setup)
        l1 = l1_error(vm[0](oracle.grid[:, None]), oracle.psi(0), oracle.grid)
        if not np.isfinite(l1):
            raise ArithmeticError("non-finite L1 error")
        return [m, seed, label, l1, "ok"]
    except Exception as exc:  # recorded, the sweep continues
        log.warning("sweep entry m=%d seed=%d failed: %s", m, seed, exc)
        msg = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
        return [m, seed, label, float("nan"), msg]


def _row_key(r) -> tuple:
    return (int(r[0]), int(r[1]), str(r[2]))


def run_sweep(cfg: ExperimentConfig, out: Path, samples=None, seeds=None) -> Path:
    samples = list(samples or cfg.sweep.samples)
    seeds = list(seeds or cfg.sweep.seeds)
    if not samples or not seeds:
        raise ConfigError("sweep needs nonempty sample and seed lists")
    setup = build_problem(cfg)
    path = out / "l1_curve.csv"
    rows: dict[tuple, list] = {}
    if path.exists():
        for r in read_csv_rows(path):
            row = [int(r["samples"]), int(r["seed"]), r["estimator"], float(r["l1"]), r.get("status", "ok")]
            if row[4] == "ok":
                rows[_row_key(row)] = row
    label = cfg.estimator.kind if setup.arm is None else f"{cfg.estimator.kind}:reference"
    todo = [(m, s) for m in samples for s in seeds if (m, s, label) not in rows]
    oracle = Oracle(cfg, setup) if (todo and setup.arm is None) else None
    threads = max(1, int(os.environ.get("KPIC_THREADS", "1")))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for row in pool.map(lambda a: sweep_entry(cfg, a[0], a[1], oracle, setup), todo):
            rows[_row_key(row)] = row
    ordered = [rows[k] for k in sorted(rows)]
    write_csv(path, SWEEP_COLUMNS, ordered)
    return path


def write_resolved(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    data = cfg.resolved()
    data["_conventions"] = {"l1_normalization": L1_NORMALIZATION, "bandwidth": "median of pairwise squared distances"}
    (out / RESOLVED_NAME).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
