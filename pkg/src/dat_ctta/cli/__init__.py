"""Command-line front end: config, checkpoints and experiment drivers."""

from .main import main, run

__all__ = ["main", "run"]
