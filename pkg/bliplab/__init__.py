try:
    from ._version import version as __version__
except ImportError:
    __version__ = "unknown"

__all__ = [
    "autodiff",
    "bayes",
    "data",
    "inference",
    "metrics",
    "models",
    "training",
    "utils",
]
