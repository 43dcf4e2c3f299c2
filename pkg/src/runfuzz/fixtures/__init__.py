"""Shipped program fixtures for demos and tests."""

from __future__ import annotations

from pathlib import Path

_HERE = Path(__file__).parent


def fixture_path(name: str) -> Path:
    """Absolute path of a shipped fixture, e.g. ``fixture_path("uninit_ptr")``."""
    path = _HERE / f"{name}.json"
    if not path.is_file():
        known = ", ".join(sorted(p.stem for p in _HERE.glob("*.json")))
        raise FileNotFoundError(f"no fixture {name!r} (have: {known})")
    return path
