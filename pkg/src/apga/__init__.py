from hydra import initialize_config_module
from hydra.core.global_hydra import GlobalHydra

__version__ = "0.1.0"

if not GlobalHydra.instance().is_initialized():
    initialize_config_module("apga", version_base="1.2")
