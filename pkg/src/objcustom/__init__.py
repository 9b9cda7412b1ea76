"""Zero-shot object customization at desk scale."""
from .config import RunConfig, load_config, toy_config

__version__ = "0.1.0"
__all__ = ["RunConfig", "load_config", "toy_config"]
