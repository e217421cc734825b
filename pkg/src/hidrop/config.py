"""Run configuration shared by the CLI subcommands (JSON files)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema

from hidrop import presets
from hidrop.importance import STRATEGIES, parse_strategy
from hidrop.layout import PE_VARIANTS, PeMode
from hidrop.schedule import SCHEDULE_KEYS, ModelShape, PruneSchedule, ScheduleError


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


_INT_LIST = {"type": "array", "items": {"type": "integer"}}
_NUM_LIST = {"type": "array", "items": {"type": "number"}}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "oneOf": [
                {"type": "string"},
                {
                    "type": "object",
                    "required": ["layers", "hidden", "ffn", "heads"],
                    "additionalProperties": False,
                    "properties": {k: {"type": "integer"} for k in ("layers", "hidden", "ffn", "heads")},
                },
            ]
        },
        "schedule": {"type": ["string", "object"]},
        "pe": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"variant": {"enum": list(PE_VARIANTS)}, "group_offset": {"type": "integer"}},
        },
        "strategy": {"type": "string"},
        "seeds": _INT_LIST,
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"csv": {"type": "string"}, "json": {"type": "string"}},
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "p": _NUM_LIST,
                "k": _INT_LIST,
                "n": _INT_LIST,
                "inject_layers": _INT_LIST,
                "exit_layers": _INT_LIST,
            },
        },
    },
}

_validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)


@dataclass
class Sweep:
    p: tuple = (0.25, 0.5, 1.0, 2.0)
    k: tuple = (5, 10, 20, 50, 100, 200)
    n: tuple = (4, 8)
    inject_layers: tuple = ()
    exit_layers: tuple = ()


@dataclass
class RunConfig:
    model: str | dict = "llava-7b"
    schedule: str | dict = "vanilla"
    pe: dict = field(default_factory=lambda: {"variant": "persistent", "group_offset": 4096})
    strategy: str = "LastTokenNR"
    seeds: tuple = (0,)
    output: dict = field(default_factory=dict)
    sweep: Sweep = field(default_factory=Sweep)
    base_dir: Optional[Path] = None

    # ------------------------------------------------------------ resolution

    def shape(self) -> ModelShape:
        if isinstance(self.model, str):
            try:
                return presets.shape(self.model)
            except ValueError as exc:
                raise ConfigError(f"config.model: {exc}") from None
        try:
            return ModelShape(**self.model)
        except ValueError as exc:
            raise ConfigError(f"config.model: {exc}") from None

    def model_name(self) -> str:
        return self.model if isinstance(self.model, str) else "custom"

    def resolve_schedule(self) -> PruneSchedule:
        shape = self.shape()
        choice = self.schedule
        try:
            if isinstance(choice, str):
                if choice == "vanilla":
                    sched = PruneSchedule.vanilla(presets.N_VISION, shape.layers)
                elif choice in presets.SCHEDULE_PRESETS:
                    if not isinstance(self.model, str):
                        raise ConfigError(f"config.schedule: preset {choice!r} needs a named model preset")
                    sched = presets.schedule(choice, self.model)
                else:
                    sched = PruneSchedule.load(self._path(choice))
            elif set(choice) == {"file"}:
                sched = PruneSchedule.load(self._path(choice["file"]))
            else:
                sched = PruneSchedule.from_dict(choice)
        except FileNotFoundError as exc:
            raise ConfigError(f"config.schedule: file not found: {exc.filename}") from None
        except ConfigError:
            raise
        except (ScheduleError, ValueError) as exc:
            raise ConfigError(f"config.schedule: {exc}") from None
        try:
            sched.check_depth(shape.layers)
        except ScheduleError as exc:
            raise ConfigError(f"config.schedule: {exc}") from None
        return sched

    def pe_mode(self) -> PeMode:
        return PeMode(self.pe.get("variant", "persistent"), self.pe.get("group_offset", 4096))

    def _path(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() or self.base_dir is None else self.base_dir / path

    def validate(self) -> "RunConfig":
        """Check every field against module preconditions before any work starts."""
        self.shape()
        try:
            self.pe_mode()
        except ValueError as exc:
            raise ConfigError(f"config.pe: {exc}") from None
        try:
            self.strategy = parse_strategy(self.strategy)
        except ValueError:
            raise ConfigError(f"config.strategy: unknown strategy {self.strategy!r}; choose from {STRATEGIES}") from None
        if not self.seeds:
            raise ConfigError("config.seeds: at least one seed is required")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("config.seeds: seeds must be nonnegative")
        sw = self.sweep
        if any(not p > 0 for p in sw.p):
            raise ConfigError("config.sweep.p: GED exponents must be positive")
        if any(k < 1 for k in sw.k):
            raise ConfigError("config.sweep.k: top-K values must be >= 1")
        if any(n < 1 for n in sw.n):
            raise ConfigError("config.sweep.n: window offsets must be >= 1")
        layers = self.shape().layers
        for name in ("inject_layers", "exit_layers"):
            bad = [v for v in getattr(sw, name) if not 1 <= v <= layers + 1]
            if bad:
                raise ConfigError(f"config.sweep.{name}: {bad} outside [1, {layers + 1}]")
        self.resolve_schedule()
        return self

    # ------------------------------------------------------------ io

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["seeds"] = list(self.seeds)
        d["sweep"] = {k: list(v) for k, v in d["sweep"].items()}
        return d

    def digest(self, **extra) -> str:
        payload = {**self.to_dict(), **extra}
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def config_from_dict(data: dict, base_dir: Optional[Path] = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a JSON object")
    err = jsonschema.exceptions.best_match(_validator.iter_errors(data))
    if err is not None:
        where = ".".join(str(p) for p in err.absolute_path)
        raise ConfigError(f"config{'.' + where if where else ''}: {err.message}")
    sweep = Sweep(**{k: tuple(v) for k, v in data.get("sweep", {}).items()})
    kwargs = {k: v for k, v in data.items() if k != "sweep"}
    if "seeds" in kwargs:
        kwargs["seeds"] = tuple(kwargs["seeds"])
    if "pe" in kwargs:
        kwargs["pe"] = {"variant": "persistent", "group_offset": 4096, **kwargs["pe"]}
    if isinstance(kwargs.get("schedule"), dict) and set(kwargs["schedule"]) != {"file"}:
        missing = [k for k in SCHEDULE_KEYS if k not in kwargs["schedule"]]
        if missing:
            raise ConfigError(f"config.schedule: missing key {missing[0]!r}")
    return RunConfig(**kwargs, sweep=sweep, base_dir=base_dir).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    if not text.strip():
        raise ConfigError(f"config file {path} is empty")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(data, path.parent)
