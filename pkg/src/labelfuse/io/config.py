"""Flat ``key = value`` run configuration. Unknown keys are errors."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from ..errors import InvalidInputError, ParseError


@dataclass
class RunConfig:
    stride: int = 1
    fragment_size: int = 50
    voxel_size: float = 0.008
    truncation: Optional[float] = None
    block_edge: int = 16
    # multi-view consistency
    min_views: int = 2
    depth_tolerance: float = 0.01
    normal_tolerance: float = 25.0
    reprojection_tolerance: float = 1.0
    # fragment registration
    registration_method: str = "ransac"
    voxel_down: Optional[float] = None
    ransac_max_iterations: int = 100000
    ransac_confidence: float = 0.999
    fitness_floor: float = 0.1
    seed: int = 0
    keep_unlabeled: bool = False
    extract: str = "mesh"
    frames: Optional[str] = None
    masks: Optional[str] = None
    output: Optional[str] = None
    _explicit: frozenset = field(default=frozenset(), repr=False, compare=False)

    def __post_init__(self):
        if self.truncation is None:
            self.truncation = 4 * self.voxel_size
        if self.voxel_down is None:
            self.voxel_down = 2 * self.voxel_size
        self.validate()

    def validate(self):
        if self.stride < 1:
            raise InvalidInputError("stride must be >= 1")
        if self.fragment_size < 1:
            raise InvalidInputError("fragment_size must be >= 1")
        if not self.voxel_size > 0:
            raise InvalidInputError("voxel_size must be positive")
        if self.truncation < self.voxel_size:
            raise InvalidInputError("truncation must be at least voxel_size")
        if self.min_views < 1:
            raise InvalidInputError("min_views must be >= 1")
        for name in ("depth_tolerance", "normal_tolerance", "reprojection_tolerance", "voxel_down"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.registration_method not in ("ransac", "fgr"):
            raise InvalidInputError("registration_method must be 'ransac' or 'fgr'")
        if self.extract not in ("cloud", "mesh", "voxel"):
            raise InvalidInputError("extract must be cloud, mesh or voxel")

    @property
    def normal_radius(self):
        return 2 * self.voxel_down

    @property
    def feature_radius(self):
        return 5 * self.voxel_down

    def replace(self, **changes):
        """Copy with overrides; derived defaults are recomputed unless set explicitly."""
        values = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "_explicit"}
        explicit = set(self._explicit) | {k for k, v in changes.items() if v is not None}
        values.update({k: v for k, v in changes.items() if v is not None})
        for derived in ("truncation", "voxel_down"):
            if derived not in explicit:
                values[derived] = None
        return RunConfig(**values, _explicit=frozenset(explicit))

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "_explicit"}


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "_explicit"}


def _coerce(name, raw):
    kind = {"stride": int, "fragment_size": int, "block_edge": int, "min_views": int,
            "ransac_max_iterations": int, "seed": int,
            "registration_method": str, "extract": str,
            "frames": str, "masks": str, "output": str,
            "keep_unlabeled": bool}.get(name, float)
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def parse_run_config(text, source=None) -> RunConfig:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", lineno, source)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ParseError(f"unknown config key {key!r}", lineno, source)
        if key in values:
            raise ParseError(f"duplicate config key {key!r}", lineno, source)
        lines[key] = lineno
        try:
            values[key] = _coerce(key, value)
        except ValueError as exc:
            raise ParseError(f"{key}: {exc}", lineno, source) from exc
    try:
        return RunConfig(**values, _explicit=frozenset(values))
    except InvalidInputError as exc:
        # point at the line of the first key the message names
        named = [lines[k] for k in sorted(lines, key=len, reverse=True) if str(exc).startswith(k)]
        raise ParseError(str(exc), named[0] if named else None, source) from exc


def load_run_config(path) -> RunConfig:
    with open(path, "r") as fh:
        return parse_run_config(fh.read(), str(path))


def format_run_config(cfg: RunConfig) -> str:
    lines = []
    for name, value in cfg.as_dict().items():
        if value is None:
            continue
        lines.append(f"{name} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"
