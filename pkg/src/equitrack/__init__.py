"""Self-distilled symmetry-equivariant particle localization and tracking."""

from .nn import ArchDescriptor, ConvNet
from .synth import BrownianConfig, ComplexField, OpticsConfig, ParticleSpec

__version__ = "0.1.0"

__all__ = [
    "ArchDescriptor",
    "BrownianConfig",
    "ComplexField",
    "ConvNet",
    "OpticsConfig",
    "ParticleSpec",
    "__version__",
]
