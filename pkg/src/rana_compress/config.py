from typing import List, Optional, Literal
from pydantic import BaseModel, Field, field_validator, model_validator
import hashlib
import json
import toml
import os
import sys

from .errors import ConfigError

AdapterKind = Literal["rana", "cats", "neuron", "fixed_svd", "llra", "oracle_topk"]


# --- Decomposition Settings ---
class DecompositionSettings(BaseModel):
    keep_ranks: Optional[int] = None  # None keeps min(o, i) and lets the allocator truncate
    rank_cutoff: float = 1e-12  # relative to the largest singular value


# --- Masker Settings ---
class MaskerSettings(BaseModel):
    kind: Literal["b", "sigmoid"] = "b"
    inner_dim: Optional[int] = None  # sigmoid masker r'; None uses min(o, i) // 4
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    decision_cutoff: Optional[float] = None  # None calibrates the cutoff to the planned active count
    masker_flop_fraction: float = 0.06  # neuron-adapter masker share of dense MLP FLOPs


# --- Allocation Settings ---
class AllocationSettings(BaseModel):
    grid_step: float = 0.1
    exhaustive_rank_limit: int = 256  # line search tries every D up to this many ranks
    geometric_schedule_size: int = 64  # otherwise this many geometrically spaced D values
    budget_tolerance: float = 0.01

    @field_validator("grid_step")
    def validate_grid_step(cls, v):
        steps = round(1.0 / v) if v > 0 else 0
        if steps < 1 or abs(steps * v - 1.0) > 1e-9:
            raise ValueError("grid_step must divide 1 evenly, e.g. 0.1, 0.125, 0.25")
        return v


# --- Evaluation Settings ---
class EvaluationSettings(BaseModel):
    holdout_fraction: float = 0.2
    histogram_bins: int = 128
    histogram_scale: Literal["log", "linear"] = "log"
    adapter_kinds: List[AdapterKind] = Field(
        default_factory=lambda: ["rana", "cats", "neuron", "fixed_svd"]
    )


# --- Benchmark Settings ---
class BenchSettings(BaseModel):
    sizes: List[int] = Field(default_factory=lambda: [512, 1024, 4096])
    densities: List[float] = Field(default_factory=lambda: [1.0, 0.5, 0.25, 0.1])
    repetitions: int = 50
    warmup: int = 10

    @field_validator("warmup")
    def validate_warmup(cls, v):
        if v < 10:
            raise ValueError("warmup must be at least 10 iterations")
        return v


# --- Global Configuration ---
class ToolkitConfig(BaseModel):
    seed: int = 0
    threads_env: str = "RANA_THREADS"  # env var capping worker threads
    model_flop_census: Optional[float] = None  # FLOPs of unadapted model parts
    decomposition: DecompositionSettings = Field(default_factory=DecompositionSettings)
    masker: MaskerSettings = Field(default_factory=MaskerSettings)
    allocation: AllocationSettings = Field(default_factory=AllocationSettings)
    evaluation: EvaluationSettings = Field(default_factory=EvaluationSettings)
    bench: BenchSettings = Field(default_factory=BenchSettings)


# --- Resolved settings for one command run ---
class RunConfig(BaseModel):
    seed: int = 0
    budget: float = 0.5  # fraction of dense FLOPs
    grid_step: float = 0.1
    calibration_paths: List[str] = Field(default_factory=list)
    masker_kind: Literal["b", "sigmoid"] = "b"
    adapter_kinds: List[AdapterKind] = Field(default_factory=lambda: ["rana"])
    output_dir: str = "out"

    @field_validator("budget")
    def validate_budget(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError("budget must be a fraction of dense FLOPs in (0, 1]")
        return v

    @model_validator(mode="after")
    def validate_paths(self):
        missing = [p for p in self.calibration_paths if not os.path.exists(p)]
        if missing:
            raise ValueError(f"calibration paths do not exist: {', '.join(missing)}")
        return self

    def config_hash(self) -> str:
        # where the artifacts are written does not change what they contain
        canonical = json.dumps(self.model_dump(exclude={"output_dir"}), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# --- Main Configuration Loader ---
CONFIG_FILE = "config.toml"  # Assuming config is at project root


def load_config(path: str = CONFIG_FILE) -> ToolkitConfig:
    try:
        if not os.path.exists(path):
            print(
                f"Warning: Config file '{path}' not found. Using default settings.",
                file=sys.stderr,
            )
            return ToolkitConfig()
        data = toml.load(path)
        return ToolkitConfig(**data)
    except Exception as e:
        raise ConfigError(f"Error loading or validating config from {path}: {e}") from e


def resolve_run_config(config: ToolkitConfig, **overrides) -> RunConfig:
    """
    Layers command-line overrides (None means "not given") on top of the config
    file values, which sit on top of the model defaults.
    """
    resolved = RunConfig().model_dump()
    resolved.update(
        {
            "seed": config.seed,
            "grid_step": config.allocation.grid_step,
            "masker_kind": config.masker.kind,
            "adapter_kinds": list(config.evaluation.adapter_kinds),
        }
    )
    resolved.update({k: v for k, v in overrides.items() if v is not None})
    try:
        run = RunConfig(**resolved)
        AllocationSettings(grid_step=run.grid_step)
    except Exception as e:
        raise ConfigError(f"Invalid run configuration: {e}") from e
    return run


def get_env_int(env_var_name: Optional[str], config_name: str) -> Optional[int]:
    """Reads a positive integer from the environment; unset means no limit."""
    if env_var_name is None:
        return None
    value = os.getenv(env_var_name)
    if value is None or value == "":
        return None
    try:
        parsed = int(value)
    except ValueError:
        raise ConfigError(
            f"Environment variable '{env_var_name}' for {config_name} must be an integer, got '{value}'"
        )
    if parsed < 1:
        raise ConfigError(
            f"Environment variable '{env_var_name}' for {config_name} must be at least 1"
        )
    return parsed


def resolve_threads(config: ToolkitConfig) -> int:
    limit = get_env_int(config.threads_env, "worker thread cap")
    available = os.cpu_count() or 1
    return min(limit, available) if limit else available
