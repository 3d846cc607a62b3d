import numpy as np
import pytest

from app.config import RunConfig, load_instance
from app.models.schemas import Discretization, NoisePath, ProblemSpec
from app.services.problem_service import make_noise


def noise_of(config: RunConfig) -> NoisePath:
    spec = config.spec
    disc = config.discretization
    return make_noise(config.noise.seed, disc.Nt, spec.d1, spec.T / disc.Nt)


def still_noise(spec: ProblemSpec, disc: Discretization) -> NoisePath:
    return NoisePath(seed=0, dt=spec.T / disc.Nt, increments=np.zeros((disc.Nt, spec.d1)))


@pytest.fixture
def instance():
    """Bundled instance loader returning (config, spec, disc, noise)."""
    def load(name: str):
        config = load_instance(name)
        return config, config.spec, config.discretization, noise_of(config)
    return load


@pytest.fixture
def small_disc() -> Discretization:
    return Discretization(R=1.0, Nx=20, Nt=20)
