"""Run configuration: JSON in, validated against the bundled schema and the model invariants."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .core import ProtocolParams
from .device import DEFAULT_LOSS_SLOPE, DEFAULT_PHASE_LIMIT, MzmConfig
from .eat import ErrorBudget
from .sim import DEFAULT_BLOCK, DeviationModel


class ConfigError(ValueError):
    pass


def schema() -> dict:
    return json.loads(resources.files("stqrng").joinpath("config_schema.json").read_text())


@dataclass
class SdpOptions:
    level: int = 2
    max_iter: int = 100
    max_size: int = 200


@dataclass
class SweepGrid:
    eta: list[float] = field(default_factory=list)
    amp: list[float] = field(default_factory=list)
    gamma: list[float] = field(default_factory=list)
    n: list[float] = field(default_factory=list)


@dataclass
class SimOptions:
    seed: int = 0
    n: int | None = None  # defaults to params.n_rounds
    sampler: str = "direct"
    mode: str = "memory"
    block_size: int = DEFAULT_BLOCK
    deviation: DeviationModel = field(default_factory=DeviationModel)


@dataclass
class DeviceOptions:
    loss_slope: float = DEFAULT_LOSS_SLOPE
    phase_limit: float = DEFAULT_PHASE_LIMIT
    ratio: float = 0.6
    ratios: list[float] = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])
    target_phase_range: float = math.pi / 2
    criterion: str = "equal_intensity"
    n_phi: int = 101

    def mzm(self) -> MzmConfig:
        return MzmConfig(loss_slope=self.loss_slope, ratio=self.ratio, phase_limit=self.phase_limit)


@dataclass
class ExtractOptions:
    input: str | None = None
    input_bits: int | None = None
    seed_file: str | None = None
    out_len: int | None = None  # fixed output length; uncertified unless it is <= the certified l
    output: str | None = None


@dataclass
class Paths:
    out_dir: str = "out"
    cache_dir: str | None = None


@dataclass
class RunConfig:
    params: ProtocolParams = field(default_factory=ProtocolParams)
    budget: ErrorBudget = field(default_factory=ErrorBudget)
    allocation: str = "equal"
    sdp: SdpOptions = field(default_factory=SdpOptions)
    sweep: SweepGrid = field(default_factory=SweepGrid)
    simulate: SimOptions = field(default_factory=SimOptions)
    device: DeviceOptions = field(default_factory=DeviceOptions)
    extract: ExtractOptions = field(default_factory=ExtractOptions)
    paths: Paths = field(default_factory=Paths)
    workers: int | None = None

    def to_json(self) -> dict:
        b = self.budget.to_json()
        b.pop("eps_sou")
        sim = asdict(self.simulate)
        sim["deviation"] = self.simulate.deviation.to_json()
        return {
            "params": self.params.to_json(),
            "budget": b,
            "allocation": self.allocation,
            "sdp": asdict(self.sdp),
            "sweep": asdict(self.sweep),
            "simulate": sim,
            "device": asdict(self.device),
            "extract": asdict(self.extract),
            "paths": asdict(self.paths),
            "workers": self.workers,
        }

    @classmethod
    def from_json(cls, obj: dict, base_dir: str | Path | None = None) -> "RunConfig":
        try:
            jsonschema.validate(obj, schema())
        except jsonschema.ValidationError as e:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"config {where}: {e.message}") from None
        try:
            params = ProtocolParams.from_json(obj.get("params", {}))
            budget = ErrorBudget(**obj.get("budget", {}))
            sim = dict(obj.get("simulate", {}))
            dev = DeviationModel.from_json(sim.pop("deviation", {}))
            device = DeviceOptions(**obj.get("device", {}))
            device.mzm()
            cfg = cls(
                params=params,
                budget=budget,
                allocation=obj.get("allocation", "equal"),
                sdp=SdpOptions(**obj.get("sdp", {})),
                sweep=SweepGrid(**obj.get("sweep", {})),
                simulate=SimOptions(deviation=dev, **sim),
                device=device,
                extract=ExtractOptions(**obj.get("extract", {})),
                paths=Paths(**obj.get("paths", {})),
                workers=obj.get("workers"),
            )
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from None
        if base_dir is not None:
            cfg._resolve(Path(base_dir))
        return cfg

    def _resolve(self, base: Path) -> None:
        """Make relative file paths relative to the config file's directory."""
        def fix(p):
            if p is None or Path(p).is_absolute():
                return p
            return str(base / p)

        for name in ("input", "seed_file", "output"):
            v = getattr(self.extract, name)
            if v is not None:
                setattr(self.extract, name, fix(v))
        self.paths.out_dir = fix(self.paths.out_dir)
        if self.paths.cache_dir is not None:
            self.paths.cache_dir = fix(self.paths.cache_dir)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        obj = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {p}: {e}") from None
    return RunConfig.from_json(obj, base_dir=p.parent)
