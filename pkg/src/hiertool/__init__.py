"""Hierarchical classification toolkit."""

__version__ = "0.1.0"

from importlib.resources import files


def data_path(name: str):
    """Path to a bundled fixture (hierarchies, word vectors)."""
    return files(__name__) / "data" / name
