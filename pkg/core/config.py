from __future__ import annotations

import hashlib
import json
import re
from functools import lru_cache
from pathlib import Path
from typing import Annotated, Any, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from core.errors import ConfigError
from core.models import CompressorSpec, Method, Objective

GAMMA_PATTERN = re.compile(r"^\s*theory(?:\s*[x×*]\s*\{(.*)\})?\s*$", re.IGNORECASE)


class GammaSetting(BaseModel):
    """Either an explicit stepsize or the theoretical one times a multiplier grid."""

    model_config = ConfigDict(frozen=True)

    value: float | None = None
    multipliers: tuple[float, ...] = (1.0,)

    @property
    def theory(self) -> bool:
        return self.value is None

    @classmethod
    def parse(cls, raw: Any) -> "GammaSetting":
        if isinstance(raw, GammaSetting):
            return raw
        if isinstance(raw, bool):
            raise ValueError("gamma must be a number or 'theory'")
        if isinstance(raw, (int, float)):
            if raw <= 0:
                raise ValueError(f"gamma must be positive, got {raw}")
            return cls(value=float(raw))
        if isinstance(raw, dict):
            return cls.model_validate(raw)
        match = GAMMA_PATTERN.match(str(raw))
        if not match:
            raise ValueError(f"gamma must be a number, 'theory' or 'theory x {{m1, m2}}', got {raw!r}")
        if match.group(1) is None:
            return cls()
        tokens = [token.strip() for token in match.group(1).split(",") if token.strip()]
        if not tokens:
            raise ValueError("empty multiplier list")
        multipliers = tuple(float(token) for token in tokens)
        if any(m <= 0 for m in multipliers):
            raise ValueError(f"multipliers must be positive, got {multipliers}")
        return cls(multipliers=multipliers)

    def describe(self) -> str:
        if self.value is not None:
            return repr(self.value)
        return "theory x {" + ", ".join(f"{m:g}" for m in self.multipliers) + "}"


class QuadraticTaskConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    kind: Literal["quadratic"]
    n: int = Field(ge=1)
    d: int = Field(ge=2)
    lambda_: float = Field(alias="lambda", gt=0.0)
    noise_scale: float = Field(default=0.0, ge=0.0)
    seed: int = 0


class AutoencoderTaskConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    kind: Literal["autoencoder"]
    n: int = Field(default=100, ge=1)
    d_f: int = Field(default=64, ge=1)
    d_e: int = Field(default=4, ge=1)
    lambda_: float = Field(alias="lambda", ge=0.0)
    p_hat: float = Field(default=0.0, ge=0.0, le=1.0)
    idx_path: str | None = None
    samples: int | None = Field(default=None, ge=1)
    seed: int = 0

    @field_validator("idx_path")
    @classmethod
    def _idx_exists(cls, value: str | None) -> str | None:
        if value is not None and not Path(value).exists():
            raise ValueError(f"IDX file not found: {value}")
        return value


class ArtifactTaskConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["artifact"]
    path: str

    @field_validator("path")
    @classmethod
    def _artifact_exists(cls, value: str) -> str:
        if not Path(value).exists():
            raise ValueError(f"task artifact not found: {value}")
        return value


TaskConfig = Annotated[
    Union[QuadraticTaskConfig, AutoencoderTaskConfig, ArtifactTaskConfig],
    Field(discriminator="kind"),
]


class MethodConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str | None = None
    method: Method
    compressor: CompressorSpec | None = None
    p: float | None = Field(default=None, gt=0.0, le=1.0)
    gamma: GammaSetting = Field(default_factory=GammaSetting)

    @field_validator("gamma", mode="before")
    @classmethod
    def _parse_gamma(cls, raw: Any) -> GammaSetting:
        return GammaSetting.parse(raw)

    @model_validator(mode="after")
    def _needs_compressor(self) -> "MethodConfig":
        if self.method != Method.GD and self.compressor is None:
            raise ValueError(f"method {self.method.value} needs a compressor section")
        return self

    def display_name(self) -> str:
        if self.name:
            return self.name
        if self.compressor is None:
            return self.method.value
        return f"{self.method.value}-{self.compressor.label()}"


class RunSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    T: int = Field(default=1000, ge=0)
    seeds: list[int] = Field(default_factory=lambda: [0])
    objective: Objective = Objective.NONCONVEX
    eps: float = Field(default=1e-3, gt=0.0)
    bits_per_coord: int = Field(default=32, ge=1)
    index_bits: bool = False
    log_every: int = Field(default=0, ge=0)
    jobs: int = Field(default=1, ge=1)
    threads: int = Field(default=1, ge=1)

    @field_validator("seeds")
    @classmethod
    def _non_empty(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("at least one seed is required")
        return value


class OutputSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    directory: str = "runs"
    csv: bool = True
    gnuplot: bool = False


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: TaskConfig
    methods: list[MethodConfig] = Field(default_factory=list)
    run: RunSection = Field(default_factory=RunSection)
    output: OutputSection = Field(default_factory=OutputSection)

    def fingerprint(self) -> str:
        """SHA-256 of the canonical config; where results are written does not count."""
        payload = self.model_dump(mode="json", by_alias=True, exclude={"output"})
        canonical = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_TASK_TAGS = {"quadratic", "autoencoder", "artifact"}


def _clean_loc(loc: tuple[Any, ...]) -> list[Any]:
    cleaned: list[Any] = []
    for part in loc:
        if cleaned == ["task"] and part in _TASK_TAGS:
            continue
        cleaned.append(part)
    return cleaned


def _line_for(node: yaml.Node | None, loc: list[Any]) -> int | None:
    """Walk the composed YAML tree to the deepest node named by ``loc``."""
    line = node.start_mark.line + 1 if node is not None else None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            child = next((value for key, value in node.value if key.value == str(part)), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            child = node.value[part]
        else:
            child = None
        if child is None:
            break
        node = child
        line = node.start_mark.line + 1
    return line


def parse_experiment(text: str, *, source: str = "<config>") -> ExperimentConfig:
    """Parse YAML text into a validated experiment, reporting line and field on failure."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", line=line, path=source) from exc
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1, path=source)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = _clean_loc(tuple(first["loc"]))
        field = ".".join(str(part) for part in loc) or None
        raise ConfigError(first["msg"], field=field, line=_line_for(root, loc), path=source) from exc


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")

    config_path: str = Field(default="experiment.yaml", alias="PERMLAB_CONFIG_PATH")
    output_dir: str | None = Field(default=None, alias="PERMLAB_OUTPUT_DIR")
    log_level: str = Field(default="INFO", alias="PERMLAB_LOG_LEVEL")
    jobs: int | None = Field(default=None, alias="PERMLAB_JOBS")
    bits_per_coord: int | None = Field(default=None, alias="PERMLAB_BITS_PER_COORD")

    _experiment: ExperimentConfig | None = None
    _experiment_key: tuple[str, float] | None = None

    def load_experiment(self, path: str | None = None, *, force_reload: bool = False) -> ExperimentConfig:
        config_file = Path(path or self.config_path)
        if not config_file.exists():
            raise FileNotFoundError(f"config file not found: {config_file}")

        key = (str(config_file.resolve()), config_file.stat().st_mtime)
        if not force_reload and self._experiment is not None and self._experiment_key == key:
            return self._experiment

        text = config_file.read_text(encoding="utf-8")
        experiment = parse_experiment(text, source=str(config_file))
        experiment = self.apply_environment(experiment)
        self._experiment = experiment
        self._experiment_key = key
        return experiment

    def apply_environment(self, experiment: ExperimentConfig) -> ExperimentConfig:
        """Environment settings sit between the file and the command-line flags."""
        run_updates: dict[str, Any] = {}
        if self.jobs is not None:
            run_updates["jobs"] = self.jobs
        if self.bits_per_coord is not None:
            run_updates["bits_per_coord"] = self.bits_per_coord
        if run_updates:
            experiment = experiment.model_copy(update={"run": experiment.run.model_copy(update=run_updates)})
        if self.output_dir is not None:
            output = experiment.output.model_copy(update={"directory": self.output_dir})
            experiment = experiment.model_copy(update={"output": output})
        return experiment


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()
