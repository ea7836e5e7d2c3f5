"""Monte Carlo engine for the interacting Brownian loop soup."""

__version__ = "0.1.0"

from .configuration import Configuration, N_obs, N_psi, S_obs
from .interaction import EnergyBreakdown, EnergyCache, cross_U, hamiltonian, pair_T, self_W
from .kernels import GibbsChain, MCMCConfig, estimate_Z, mcmc_dirichlet, mcmc_excursion, mcmc_free, sample_gn
from .measures import LoopMeasureSpec, expected_particles, measure_mass, sample_dirichlet, sample_free, sample_PH
from .paths import Domain, Loop, TimeGrid, containment, diam, glue, heat_kernel, sample_bridge, sample_loop, split_excursions
from .potentials import ModelParams, make_potential

__all__ = [
    "__version__",
    "Configuration",
    "N_obs",
    "N_psi",
    "S_obs",
    "EnergyBreakdown",
    "EnergyCache",
    "cross_U",
    "hamiltonian",
    "pair_T",
    "self_W",
    "GibbsChain",
    "MCMCConfig",
    "estimate_Z",
    "mcmc_dirichlet",
    "mcmc_excursion",
    "mcmc_free",
    "sample_gn",
    "LoopMeasureSpec",
    "expected_particles",
    "measure_mass",
    "sample_dirichlet",
    "sample_free",
    "sample_PH",
    "Domain",
    "Loop",
    "TimeGrid",
    "containment",
    "diam",
    "glue",
    "heat_kernel",
    "sample_bridge",
    "sample_loop",
    "split_excursions",
    "ModelParams",
    "make_potential",
]
