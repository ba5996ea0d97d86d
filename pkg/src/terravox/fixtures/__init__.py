"""Bundled scenario, rig, and remap-table files."""

from pathlib import Path

from ..errors import ConfigurationError

_ROOT = Path(__file__).resolve().parent


def fixture_path(name: str) -> Path:
    """Absolute path of a bundled fixture file by bare name."""
    p = _ROOT / name
    if not p.is_file():
        have = sorted(q.name for q in _ROOT.glob("*.yaml"))
        raise ConfigurationError(f"no fixture named {name!r}; bundled: {have}")
    return p


def list_fixtures() -> list:
    return sorted(p.name for p in _ROOT.glob("*.yaml"))
