from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict, TomlConfigSettingsSource

from app.models.schemas import (
    Discretization,
    LipschitzData,
    PenaltyMode,
    ProblemSpec,
    SeparabilityWitness,
    SolverMode,
)
from app.utils.exceptions import ConfigurationError
from app.utils.logger import get_logger

logger = get_logger(__name__)

REPO_ROOT = Path(__file__).resolve().parent.parent


class _ArgumentsOnly(BaseSettings):
    """Settings fed by constructor arguments only; the process environment is never read."""

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings, dotenv_settings, file_secret_settings):
        return (init_settings,)


class Settings(_ArgumentsOnly):
    model_config = SettingsConfigDict(case_sensitive=False, extra="forbid")

    # App Configuration
    app_name: str = "Obstacle SPDE Lab"
    app_version: str = "1.0.0"
    log_level: str = "INFO"

    # Bundled instances
    instance_directory_path: str = str(REPO_ROOT / "instances")
    instance_file_extension: str = ".toml"
    default_suite: str = "suites/default.toml"

    # Execution
    workers: int = Field(1, ge=1)
    mc_batch_size: int = Field(8192, ge=1)
    csv_float_format: str = "%.17g"

    def print_config(self):
        """Print current configuration for debugging."""
        logger.info("settings", app_version=self.app_version, workers=self.workers, mc_batch_size=self.mc_batch_size)


@lru_cache
def get_settings() -> Settings:
    return Settings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemSection(_Section):
    """[problem]: flat key/value rendering of a ProblemSpec."""
    name: str = ""
    T: float
    dim: int = 1
    d1: Optional[int] = None
    psi: str = "0"
    f: str = "0"
    g: str = "0"
    h: List[str] = Field(default_factory=lambda: ["0"])
    L: Optional[str] = None
    U: Optional[str] = None
    C: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    witness_psi: Optional[str] = None
    witness_f: str = "0"
    witness_g: str = "0"
    witness_h: Optional[List[str]] = None

    @model_validator(mode="after")
    def _default_noise_dimension(self):
        if self.d1 is None:
            self.d1 = len(self.h)
        return self

    def to_spec(self) -> ProblemSpec:
        witness = None
        if self.witness_psi is not None:
            witness = SeparabilityWitness(
                psi=self.witness_psi,
                f=self.witness_f,
                g=self.witness_g,
                h=self.witness_h if self.witness_h is not None else ["0"] * self.d1,
            )
        return ProblemSpec(
            T=self.T,
            dim=self.dim,
            d1=self.d1,
            psi=self.psi,
            f=self.f,
            g=self.g,
            h=self.h,
            L=self.L,
            U=self.U,
            lip=LipschitzData(C=self.C, alpha=self.alpha, beta=self.beta),
            separability_witness=witness,
        )


class NoiseSection(_Section):
    seed: int = Field(0, ge=0, lt=2**64)


class SolveSection(_Section):
    mode: SolverMode = SolverMode.PROJECTED
    penalty: float = Field(0.0, ge=0)
    penalty_mode: PenaltyMode = PenaltyMode.PAPER


class PicardSection(_Section):
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(50, ge=1)
    initial: Literal["zero", "free"] = "zero"


class ValidationSection(_Section):
    y_box: float = Field(10.0, gt=0)
    z_box: float = Field(10.0, gt=0)
    lipschitz_samples: int = Field(10000, ge=1)
    mc_paths: int = Field(100000, ge=1)
    levels: List[float] = Field(default_factory=lambda: [float(2**i) for i in range(9)])
    tol_excess: Optional[float] = None


class RunConfig(_ArgumentsOnly):
    """A problem file: TOML sections [problem], [discretization], [noise], [picard]."""
    model_config = SettingsConfigDict(extra="forbid")

    problem: ProblemSection
    discretization: Discretization
    noise: NoiseSection = Field(default_factory=NoiseSection)
    solve: SolveSection = Field(default_factory=SolveSection)
    picard: PicardSection = Field(default_factory=PicardSection)
    validation: ValidationSection = Field(default_factory=ValidationSection)

    @property
    def spec(self) -> ProblemSpec:
        return self.problem.to_spec()

    @classmethod
    def from_toml(cls, path: Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"not found: {path}")
        try:
            data = TomlConfigSettingsSource(cls, toml_file=path)()
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"{path}: {e}") from e
        config = cls.from_dict(data)
        if not config.problem.name:
            config.problem.name = path.stem
        return config

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        try:
            config = cls(**data)
            config.spec  # surfaces expression and dimension errors at load time
        except ValidationError as e:
            raise ConfigurationError(" ".join(str(e).split())) from e
        return config


def instance_path(name: str, settings: Optional[Settings] = None) -> Path:
    """Resolve a bundled instance name (or a path) to its TOML file."""
    settings = settings or get_settings()
    candidate = Path(name)
    if candidate.suffix == settings.instance_file_extension or candidate.exists():
        return candidate
    return Path(settings.instance_directory_path) / f"{name}{settings.instance_file_extension}"


def load_instance(name: str, settings: Optional[Settings] = None) -> RunConfig:
    return RunConfig.from_toml(instance_path(name, settings))


class SuiteEntry(_Section):
    check: str
    instance: str
    params: Dict[str, Any] = Field(default_factory=dict)


class SuiteConfig(_ArgumentsOnly):
    """A validation suite: `[[checks]]` tables naming a check, an instance and its params."""
    model_config = SettingsConfigDict(extra="forbid")

    checks: List[SuiteEntry] = Field(default_factory=list)

    @classmethod
    def from_toml(cls, path: Path) -> "SuiteConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"not found: {path}")
        try:
            data = TomlConfigSettingsSource(cls, toml_file=path)()
            return cls(**data)
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"{path}: {e}") from e
        except ValidationError as e:
            raise ConfigurationError(" ".join(str(e).split())) from e


def suite_path(name: str, settings: Optional[Settings] = None) -> Path:
    """`default` or a bare name resolves under instances/suites/; anything else is a path."""
    settings = settings or get_settings()
    candidate = Path(name)
    if candidate.suffix == settings.instance_file_extension or candidate.exists():
        return candidate
    if name == "default":
        return Path(settings.instance_directory_path) / settings.default_suite
    return Path(settings.instance_directory_path) / "suites" / f"{name}{settings.instance_file_extension}"


def load_suite(name: str, settings: Optional[Settings] = None) -> SuiteConfig:
    return SuiteConfig.from_toml(suite_path(name, settings))
