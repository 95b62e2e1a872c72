"""Mine open-access biomedical articles for radiology figures and their text."""

from figmine.errors import ConfigError, FigmineError

__version__ = "0.1.0"

__all__ = ["ConfigError", "FigmineError", "__version__"]
