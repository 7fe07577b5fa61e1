"""Save/load materialization of captured execution graphs on a simulated device."""

from foundry.errors import FoundryError

__version__ = "0.1.0"

__all__ = ["FoundryError", "__version__"]
