"""Settings files: model parameters, load profile, named operating points, search space.

A settings file is overlaid (recursive dict merge) on the shipped defaults in
``data/settings.json``, so partial files such as ``exploit-demo.json`` only
carry what they change.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .catalog import ConfigError
from .power import GovernorParams, OperatingPoint, PowerModelParams
from .tuner import SearchSpace
from .workload import LoadProfile, PerfModelParams, SimParams


def data_path(name: str) -> Path:
    return Path(str(resources.files("greensim") / "data" / name))


def deep_merge(base: Mapping[str, Any], overlay: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(base))
    for key, value in overlay.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class Settings:
    sim: SimParams
    profile: LoadProfile
    operating_points: Mapping[str, OperatingPoint]
    search_space: SearchSpace
    max_points: int = 10_000
    raw: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def operating_point(self, name: str) -> OperatingPoint:
        try:
            return self.operating_points[name]
        except KeyError:
            raise ConfigError(f"operating_points: no point named {name!r} "
                              f"(have {sorted(self.operating_points)})") from None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Settings:
        def section(name: str) -> Mapping[str, Any]:
            value = data.get(name)
            if not isinstance(value, Mapping):
                raise ConfigError(f"settings.{name}: missing or not an object")
            return value

        sim = SimParams(power=PowerModelParams.from_dict(section("power_model")),
                        governor=GovernorParams.from_dict(section("governor")),
                        perf=PerfModelParams.from_dict(section("perf_model")))
        points = {}
        for name, entry in section("operating_points").items():
            if name.startswith("_"):
                continue
            points[name] = OperatingPoint.from_dict(entry)
        max_points = section("tuner").get("max_points", 10_000)
        return cls(sim=sim, profile=LoadProfile.from_dict(section("load_profile")),
                   operating_points=points, search_space=SearchSpace.from_dict(section("search_space")),
                   max_points=int(max_points), raw=dict(data))


def load_settings(path: str | os.PathLike | None = None) -> Settings:
    defaults = json.loads(data_path("settings.json").read_text(encoding="utf-8"))
    if path is None:
        return Settings.from_dict(defaults)
    path = Path(path)
    if not path.exists() and data_path(path.name).exists() and path.parent == Path("."):
        path = data_path(path.name)
    try:
        overlay = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"settings file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return Settings.from_dict(deep_merge(defaults, overlay))
