"""Experiment configuration: one JSON document, validated with pydantic.

Unknown keys are rejected.  Validation errors are reported with the line of
the offending key in the source text.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, model_validator

PosList = Annotated[list[PositiveInt], Field(min_length=1)]


class ConfigError(ValueError):
    """Invalid configuration; the message is line-numbered when possible."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------- problems


class DoubleSlitParams(_Strict):
    omega: PositiveFloat = 5.0
    noise: PositiveFloat = 1.0
    H: PositiveFloat = 1.0
    obstacle_cost: float = Field(1e4, ge=0)
    target: float = 0.0
    T: PositiveFloat = 2.0
    dt: PositiveFloat = 0.02
    box: tuple[float, float] = (-6.0, 6.0)


class DoubleSlitProblem(_Strict):
    name: Literal["double_slit"]
    params: DoubleSlitParams = DoubleSlitParams()


class LQParams(_Strict):
    omega: float = Field(1.0, ge=0)
    T: PositiveFloat = 1.0
    n_steps: PositiveInt = 2
    box: tuple[float, float] = (-4.0, 4.0)
    noise: PositiveFloat = 1.0


class LQProblem(_Strict):
    name: Literal["lq_toy"]
    params: LQParams = LQParams()


class ArmParams(_Strict):
    n_links: PositiveInt = 5
    link_length: PositiveFloat = 0.2
    T: PositiveFloat = 2.0
    dt: PositiveFloat = 0.02
    lam: PositiveFloat = 0.1
    H: PositiveFloat = 1.0
    w_skill: float = Field(20.0, ge=0)
    w_task: float = Field(2.0, ge=0)
    w_terminal: float = Field(20.0, ge=0)
    q0: list[float] = [0.6, 0.5, 0.4, 0.3, 0.2]
    line_angle: float = 0.0
    prior_std: PositiveFloat = 0.35
    target: float = 0.15  # offset of the reach target along the task line
    n_skill_traj: PositiveInt = 100
    reference_n_traj: PositiveInt = 500
    n_probes: PositiveInt = 200
    probe_seed: int = Field(99, ge=0)

    @model_validator(mode="after")
    def _links(self):
        if len(self.q0) != self.n_links:
            raise ValueError(f"q0 has {len(self.q0)} entries but n_links = {self.n_links}")
        return self


class ArmProblem(_Strict):
    name: Literal["arm"]
    params: ArmParams = ArmParams()


Problem = Annotated[Union[DoubleSlitProblem, LQProblem, ArmProblem], Field(discriminator="name")]


# ---------------------------------------------------------------- estimator


class Bandwidth(_Strict):
    policy: Literal["median", "fixed"] = "median"
    scale: PositiveFloat = 1.0  # multiplies the median heuristic
    value: Optional[PositiveFloat] = None  # used when policy = fixed

    @model_validator(mode="after")
    def _fixed_needs_value(self):
        if self.policy == "fixed" and self.value is None:
            raise ValueError("bandwidth.value is required when policy is 'fixed'")
        return self


class EstimatorConfig(_Strict):
    kind: Literal["basic", "reuse", "lowrank", "importance"] = "lowrank"
    eps: PositiveFloat = 1e-3
    eps_prime: PositiveFloat = 1e-6
    max_rank: PositiveInt = 500
    tol: float = Field(1e-10, ge=0)
    tau: PositiveFloat = 1e-4
    bandwidth: Bandwidth = Bandwidth()
    pair_bandwidth: Bandwidth = Bandwidth()
    w_max: PositiveFloat = 1e6


# ---------------------------------------------------------------- sampling


class UniformPriorConfig(_Strict):
    kind: Literal["uniform"]
    low: list[float]
    high: list[float]

    @model_validator(mode="after")
    def _ordered(self):
        if len(self.low) != len(self.high):
            raise ValueError("prior low/high lengths differ")
        if any(h <= lo for lo, h in zip(self.low, self.high)):
            raise ValueError("prior needs low < high in every coordinate")
        return self


class GaussianPriorConfig(_Strict):
    kind: Literal["gaussian"]
    mean: list[float]
    std: list[PositiveFloat]


class DeltaPriorConfig(_Strict):
    kind: Literal["delta"]
    point: list[float]


PriorConfig = Annotated[Union[UniformPriorConfig, GaussianPriorConfig, DeltaPriorConfig], Field(discriminator="kind")]


class PolicyConfig(_Strict):
    kind: Literal["zero", "linear"] = "zero"
    gain: float = 0.0  # u = gain * x + offset, applied per coordinate
    offset: float = 0.0


class SamplingConfig(_Strict):
    mode: Literal["transitions", "trajectories"] = "transitions"
    m: Optional[PositiveInt] = None
    n_traj: Optional[PositiveInt] = None
    prior: Optional[PriorConfig] = None
    policy: PolicyConfig = PolicyConfig()
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _size(self):
        if self.mode == "transitions" and self.m is None:
            raise ValueError("sampling.m is required for mode 'transitions'")
        if self.mode == "trajectories" and self.n_traj is None and self.m is None:
            raise ValueError("sampling.n_traj (or m) is required for mode 'trajectories'")
        return self


# ---------------------------------------------------------------- evaluation


class EvaluationConfig(_Strict):
    grid_spacing: PositiveFloat = 0.01
    starts: list[float] = [-3.0, 1.75]
    n_rollouts: Annotated[int, Field(ge=2)] = 10000
    seed: int = Field(1, ge=0)
    policies: list[Literal["kernel", "oracle", "variational", "mc", "zero"]] = ["kernel", "oracle", "variational", "mc"]
    mc_fit_start: float = -3.0
    mc_n_traj: PositiveInt = 200
    mc_seed: int = Field(3, ge=0)
    psi_source: Literal["estimate", "oracle"] = "estimate"
    slice_times: list[float] = [0.0]
    slice_stride: PositiveInt = 10


class SweepConfig(_Strict):
    samples: PosList = [1000, 4000, 10000]
    seeds: Annotated[list[Annotated[int, Field(ge=0)]], Field(min_length=1)] = [0, 1, 2, 3, 4]


class ExperimentConfig(_Strict):
    problem: Problem
    estimator: EstimatorConfig = EstimatorConfig()
    sampling: SamplingConfig
    evaluation: EvaluationConfig = EvaluationConfig()
    sweep: SweepConfig = SweepConfig()
    output_dir: str = "out"

    def resolved(self) -> dict:
        return self.model_dump(mode="json")


# ---------------------------------------------------------------- loading


def _line_of(text: str, loc: tuple) -> int:
    """Best-effort line of the innermost key of ``loc`` that occurs in ``text``."""
    pos, found = 0, 0
    for part in loc:
        if not isinstance(part, str):
            continue
        at = text.find(f'"{part}"', pos)
        if at < 0:
            continue
        pos, found = at, at
    return text.count("\n", 0, found) + 1


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p in _UNION_TAGS))
            field = ".".join(str(p) for p in loc) or "<root>"
            lines.append(f"{source}:{_line_of(text, loc)}: {field}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None


# discriminated-union tags pydantic inserts into error locations
_UNION_TAGS = {"double_slit", "lq_toy", "arm", "uniform", "gaussian", "delta"}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))
