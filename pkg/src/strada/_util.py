"""Tiny helpers shared across modules."""

from __future__ import annotations

from typing import Iterable, Mapping

from .errors import ConfigError


def check_keys(mapping: Mapping, allowed: Iterable[str], context: str) -> None:
    """Reject unknown keys loudly; typos in configs must never pass silently."""
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {context} key(s): {', '.join(unknown)}")
