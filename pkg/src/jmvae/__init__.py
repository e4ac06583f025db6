"""Joint multimodal variational autoencoders (JMVAE-zero, JMVAE-kl) with VAE and
CVAE baselines, importance-weighted test bounds and a quadrature oracle."""

from .data import BimodalDataset, ModalitySpec, load_idx, make_toy, split
from .distributions import DiagGaussian, LikelihoodParams
from .models import ModelHandle, build_model, encode, generate
from .networks import Architecture
from .tensor import Tensor, backward, grad_check, no_grad, precision
from .training import TrainConfig, train, warmup_beta

__all__ = [
    "Architecture",
    "BimodalDataset",
    "DiagGaussian",
    "LikelihoodParams",
    "ModalitySpec",
    "ModelHandle",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_model",
    "encode",
    "generate",
    "grad_check",
    "load_idx",
    "make_toy",
    "no_grad",
    "precision",
    "split",
    "train",
    "warmup_beta",
]
