"""Fine-grained entity typing with hyperbolic (Poincare-ball) networks.

Submodules: ``geometry`` (ball operations), ``autodiff`` (reverse-mode tape),
``layers``, ``model``, ``optim`` (Riemannian Adam), ``data``, ``metrics``,
``train``, ``checkpoint``, ``synthetic``, ``bench``, ``gradcheck`` and ``cli``.
"""

from .config import ComponentSpaceConfig, ModelConfig, Settings
from .layers import SpaceTag

__version__ = "0.1.0"

__all__ = ["ComponentSpaceConfig", "ModelConfig", "Settings", "SpaceTag", "__version__"]
