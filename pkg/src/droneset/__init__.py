"""Simulated drone capture of pose-annotated object datasets and the experiment protocols built on them."""
from __future__ import annotations

__version__ = "0.1.0"
