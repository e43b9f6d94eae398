# version.py file generated during build thus may not exists
try:
    from .version import __version__
except ImportError:
    __version__ = "0.0.0.dev0"

__all__ = ["__version__"]
