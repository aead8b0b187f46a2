"""Deep Galerkin solver for finite-state mean field control on the simplex."""

__version__ = "0.1.0"

from .model import MfcpSpec, hamiltonian, hjb_residual, recover_control  # noqa: E402
from .network import Architecture, DualEvaluation, evaluate, init_params, load_checkpoint, save_checkpoint  # noqa: E402
from .solver import TrainingConfig, sampled_l2_loss, sampled_uniform_loss, smooth_max, train  # noqa: E402

__all__ = [
    "Architecture",
    "DualEvaluation",
    "MfcpSpec",
    "TrainingConfig",
    "evaluate",
    "hamiltonian",
    "hjb_residual",
    "init_params",
    "load_checkpoint",
    "recover_control",
    "sampled_l2_loss",
    "sampled_uniform_loss",
    "save_checkpoint",
    "smooth_max",
    "train",
]
