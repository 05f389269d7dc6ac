"""Scene change detection with correlation fusion and a gated recurrent decoder,
built on a small numpy autograd engine."""

__version__ = "0.1.0"

from .config import RunConfig, SceneSpec
from .model import TERDNet, build_model

__all__ = ["RunConfig", "SceneSpec", "TERDNet", "build_model", "__version__"]
