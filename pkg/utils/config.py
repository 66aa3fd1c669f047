import hashlib
import json
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.errors import ConfigError

# Process-level settings come from the environment (.env honoured)
load_dotenv()

DEFAULT_OUT_DIR = os.getenv("RCI_SYSID_OUT_DIR", "runs")
DEFAULT_SEED = int(os.getenv("RCI_SYSID_SEED", "0"))
DEFAULT_WORKERS = int(os.getenv("RCI_SYSID_WORKERS", "1"))

STAGES = ("fit_lti", "init_rci", "fit_qlpv", "reduce", "fit_concurrent", "control_sim")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PlantSpec(_Section):
    """Which plant generates the data, or which CSV files replace it."""

    kind: Literal["trigonometric", "msd_chain", "csv"] = "trigonometric"
    n_train: int = Field(5000, ge=1)
    n_test: int = Field(5000, ge=1)
    state_noise: float = Field(0.01, ge=0.0)
    output_noise: float = Field(0.01, ge=0.0)
    sample_time: float = Field(0.1, gt=0.0)
    substep: float = Field(0.01, gt=0.0)
    input_amplitude: Optional[float] = Field(None, gt=0.0)
    multisine_tones: int = Field(50, ge=1)
    multisine_f_min: float = Field(0.1, gt=0.0)
    multisine_f_max: float = Field(100.0, gt=0.0)
    n_masses: int = Field(5, ge=1)
    mass: float = Field(1.0, gt=0.0)
    damping: float = Field(1.0, ge=0.0)
    k1: float = 0.5
    k2: float = 0.5
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None

    @property
    def amplitude(self):
        if self.input_amplitude is not None:
            return self.input_amplitude
        return 2.0 if self.kind == "msd_chain" else 0.5


class ModelConfig(_Section):
    nx_hat: int = Field(2, ge=1)
    np_hat: int = Field(3, ge=1)
    hidden_layers: int = Field(1, ge=0)
    units: int = Field(3, ge=1)
    schedule_on_input: bool = True


class TrainConfig(_Section):
    """Optimizer settings for one identification stage."""

    adam_iters: int = Field(1000, ge=0)
    adam_lr: float = Field(1e-3, gt=0.0)
    lbfgs_iters: int = Field(5000, ge=0)
    seed: Optional[int] = None
    kappa_x: float = Field(0.0, ge=0.0)
    kappa_p: float = Field(0.0, ge=0.0)
    tau: float = Field(0.0, ge=0.0)
    penalty_weight: float = Field(1e3, ge=0.0)
    zero_group_threshold: float = Field(1e-6, gt=0.0)
    group_smoothing: float = Field(1e-8, gt=0.0)
    prox_iters: int = Field(200, ge=0)
    log_every: int = Field(10, ge=1)


class RciConfig(_Section):
    horizon: int = Field(50, ge=1)
    kappa: float = Field(1.1, gt=1.0)
    size_function: Literal["tracking", "l1"] = "tracking"
    qp_tol: float = Field(1e-8, gt=0.0)
    qp_max_iter: int = Field(100, ge=1)
    regularization: float = Field(1e-9, ge=0.0)
    # physical-unit boxes; None derives them from the training data
    u_lower: Optional[List[float]] = None
    u_upper: Optional[List[float]] = None
    y_lower: Optional[List[float]] = None
    y_upper: Optional[List[float]] = None
    y_fraction: float = Field(0.9, gt=0.0, le=1.0)
    # penalty NLP for the initial set
    rho_start: float = Field(1e2, gt=0.0)
    rho_stop: float = Field(1e6, gt=0.0)
    rho_factor: float = Field(10.0, gt=1.0)
    init_adam_iters: int = Field(500, ge=0)
    init_adam_lr: float = Field(1e-2, gt=0.0)
    init_lbfgs_iters: int = Field(2000, ge=0)
    init_margin: float = Field(1e-4, ge=0.0)


class ReduceConfig(_Section):
    target_np: Optional[int] = Field(None, ge=1)
    max_combinations: int = Field(1_000_000, ge=1)
    workers: int = Field(DEFAULT_WORKERS, ge=1)


class ControlConfig(_Section):
    steps: int = Field(200, ge=1)
    qx_weight: float = Field(1.0, gt=0.0)
    qq_weight: float = Field(10.0, gt=0.0)
    r_weight: float = Field(1.0, gt=0.0)
    lqr_tol: float = Field(1e-9, gt=0.0)
    lqr_max_iter: int = Field(500, ge=1)
    integrator_clamp: Optional[float] = Field(None, gt=0.0)
    # physical-unit references held for `step_length` steps each
    reference_levels: List[float] = Field(default_factory=lambda: [0.0])
    step_length: int = Field(50, ge=1)
    # n_p x n_x x n_y; None uses the identified observer gains
    filter_gains: Optional[List[List[List[float]]]] = None


class PipelineConfig(_Section):
    """Root config: stage toggles plus one section per module."""

    data: PlantSpec = Field(default_factory=PlantSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    lti: TrainConfig = Field(default_factory=TrainConfig)
    rci: RciConfig = Field(default_factory=RciConfig)
    qlpv: TrainConfig = Field(default_factory=TrainConfig)
    reduce: ReduceConfig = Field(default_factory=ReduceConfig)
    concurrent: TrainConfig = Field(
        default_factory=lambda: TrainConfig(adam_iters=2000, lbfgs_iters=0, tau=1e-4)
    )
    control: ControlConfig = Field(default_factory=ControlConfig)
    stages: Dict[str, bool] = Field(default_factory=lambda: {s: s != "reduce" for s in STAGES})
    tau_grid: List[float] = Field(default_factory=lambda: [1e-6, 1e-5, 1e-4, 1e-3])
    kp_grid: List[float] = Field(default_factory=lambda: [0.0, 1e-3, 1e-2, 1e-1, 1.0])
    seed: int = DEFAULT_SEED
    workers: int = Field(DEFAULT_WORKERS, ge=1)

    @field_validator("stages")
    @classmethod
    def _known_stages(cls, value):
        unknown = set(value) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages: {sorted(unknown)}")
        return {s: value.get(s, s != "reduce") for s in STAGES}

    @field_validator("tau_grid", "kp_grid")
    @classmethod
    def _nonempty_grid(cls, value):
        if not value:
            raise ValueError("sweep grid must be nonempty")
        if any(v < 0 for v in value):
            raise ValueError("sweep grid values must be >= 0")
        return sorted(value)

    @model_validator(mode="after")
    def _check_paths(self):
        if self.data.kind == "csv":
            for name in ("train_csv", "test_csv"):
                path = getattr(self.data, name)
                if path is None or not Path(path).exists():
                    raise ValueError(f"data.{name} must name an existing file, got {path!r}")
        return self

    def stage_enabled(self, stage):
        return self.stages.get(stage, False)


def load_config(path=None, overrides=None):
    """Load and validate a JSON config; missing path means all defaults."""
    raw = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
    # environment beats the file, explicit overrides beat both
    for env, key in (("RCI_SYSID_SEED", "seed"), ("RCI_SYSID_WORKERS", "workers")):
        if os.getenv(env):
            raw[key] = int(os.getenv(env))
    for dotted, value in (overrides or {}).items():
        _set_dotted(raw, dotted, value)
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}")


def _set_dotted(raw, dotted, value):
    keys = dotted.split(".")
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def config_hash(config):
    """sha256 over the canonical JSON dump of a validated config."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
