"""Reconstruct system-wide propagation graphs from malware execution traces."""

from __future__ import annotations

__version__ = "0.1.0"
