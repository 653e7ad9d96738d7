"""Experiment configuration: schema, validation and shipped presets.

A config is a JSON object; :func:`load_config` accepts either a preset name
or a path.  The schema is documented in ``docs/config.md``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .agents import DEFAULT_LT, DEFAULT_MM, FlashSchedule
from .exchange import LatencyModel
from .ppo import PpoConfig

GROUPS = ("continual_training", "testing", "untrained")
GROUP_ALIASES = {"train": "continual_training", "A": "continual_training",
                 "test": "testing", "B": "testing", "C": "untrained"}
MODES = ("stepped", "realtime")
AGENT_CLASSES = ("mm", "lt", "zi", "flash")


class ConfigInvalid(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str = "custom"
    seed: int = 0
    n_steps: int = 1000
    mode: str = "stepped"
    step_seconds: float = 0.01
    initial_price: float = 100.0
    lot_size: int = 100
    cash_range: tuple = (500_000.0, 2_000_000.0)
    inventory_lots_range: tuple = (-100, 100)
    short_bound: int = 10_000
    latency: Optional[dict] = None
    group: str = "untrained"
    training: Optional[bool] = None
    checkpoint_dir: Optional[str] = None
    pretrain_steps: int = 5_000
    agents: list = field(default_factory=list)
    jitter: float = 0.1
    flash: Optional[dict] = None
    informed: Optional[dict] = None
    ppo: dict = field(default_factory=dict)
    mm_stale_quotes: bool = True
    record_events: bool = False
    record_observations: bool = True
    account_every: int = 1

    def __post_init__(self):
        self.group = GROUP_ALIASES.get(self.group, self.group)
        self.cash_range = tuple(self.cash_range)
        self.inventory_lots_range = tuple(self.inventory_lots_range)

    # -- derived ----------------------------------------------------------

    @property
    def training_enabled(self) -> bool:
        return bool(self.training) if self.training is not None else self.group == "continual_training"

    @property
    def loads_checkpoints(self) -> bool:
        return self.group in ("continual_training", "testing")

    @property
    def initial_price_ticks(self) -> int:
        return int(round(self.initial_price * 100))

    @property
    def latency_model(self) -> LatencyModel:
        return LatencyModel.from_spec(self.latency)

    @property
    def ppo_config(self) -> PpoConfig:
        return PpoConfig.from_dict(self.ppo)

    @property
    def flash_schedule(self) -> Optional[FlashSchedule]:
        return FlashSchedule(**self.flash) if self.flash else None

    def validate(self) -> "ExperimentConfig":
        def bad(msg):
            raise ConfigInvalid(msg)

        if self.mode not in MODES:
            bad(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.group not in GROUPS:
            bad(f"group must be one of {GROUPS}, got {self.group!r}")
        if self.n_steps < 0:
            bad("n_steps must be non-negative")
        if self.initial_price <= 0:
            bad("initial_price must be positive")
        if self.lot_size < 1:
            bad("lot_size must be positive")
        if self.group == "untrained":
            if self.training:
                bad("untrained group cannot train")
            if self.checkpoint_dir:
                bad("untrained group cannot load checkpoints")
        elif self.group == "testing":
            if self.training:
                bad("testing group cannot train")
            if not self.checkpoint_dir:
                bad("testing group needs checkpoint_dir")
        else:
            if self.training is False:
                bad("continual_training group must train")
            if not self.checkpoint_dir:
                bad("continual_training group needs checkpoint_dir")
        lo, hi = self.cash_range
        if not 0 <= lo <= hi:
            bad("cash_range must satisfy 0 <= lo <= hi")
        if self.inventory_lots_range[0] > self.inventory_lots_range[1]:
            bad("inventory_lots_range is inverted")
        for a in self.agents:
            if a.get("class") not in AGENT_CLASSES:
                bad(f"agent class must be one of {AGENT_CLASSES}: {a}")
            if int(a.get("count", 1)) < 0:
                bad(f"negative agent count: {a}")
        try:
            self.latency_model
            self.ppo_config
            self.flash_schedule
        except (TypeError, ValueError) as e:
            bad(str(e))
        if self.informed:
            unknown = set(self.informed) - {"phase_steps", "phases"}
            if unknown:
                bad(f"unknown informed keys {sorted(unknown)}")
        return self

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cash_range"] = list(self.cash_range)
        d["inventory_lots_range"] = list(self.inventory_lots_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**copy.deepcopy(d))
        except TypeError as e:
            raise ConfigInvalid(str(e)) from e

    def replace(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)


def _mm_entry(p) -> dict:
    return {"class": "mm", "omega": p.omega, "gamma_inv": p.gamma_inv, "alpha": p.alpha,
            "target_share": p.target_share, "eps_s_range": list(p.eps_s_range),
            "eps_a_range": list(p.eps_a_range)}


def _lt_entry(p) -> dict:
    return {"class": "lt", "omega": p.omega, "gamma_inv": p.gamma_inv, "alpha": p.alpha,
            "f_buy": p.f_buy, "f_sell": p.f_sell, "tau": p.tau, "order_size": p.order_size}


def _rl_roster() -> list:
    return [_mm_entry(p) for p in DEFAULT_MM] + [_lt_entry(p) for p in DEFAULT_LT]


PRESETS = {
    "zi_desk": {
        "name": "zi_desk",
        "n_steps": 20_000,
        "agents": [{"class": "zi", "count": 20}],
    },
    "rl_desk": {
        "name": "rl_desk",
        "n_steps": 5_000,
        "agents": _rl_roster() + [{"class": "zi", "count": 10}],
    },
    "flash_sale": {
        "name": "flash_sale",
        "n_steps": 36_000,
        "agents": _rl_roster() + [{"class": "zi", "count": 10}, {"class": "flash"}],
        "flash": {"n_events": 88, "active": 5, "idle": 400, "lots": 300, "start": 200},
    },
    "informed_lt": {
        "name": "informed_lt",
        "n_steps": 10_000,
        "agents": _rl_roster() + [{"class": "zi", "count": 10}],
        "informed": {"phase_steps": 2_500,
                     "phases": [[0.3, 0.4], [0.4, 0.35], [0.4, 0.4], [0.4, 0.3]]},
    },
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigInvalid(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = copy.deepcopy(PRESETS[name])
    d.update(overrides)
    return ExperimentConfig.from_dict(d)


def load_config(source) -> ExperimentConfig:
    """Load a preset by name or a JSON config file by path."""
    if isinstance(source, ExperimentConfig):
        return source
    if isinstance(source, dict):
        return ExperimentConfig.from_dict(source)
    s = str(source)
    if s in PRESETS:
        return preset(s)
    p = Path(s)
    if not p.exists():
        raise ConfigInvalid(f"no preset or file named {s!r}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigInvalid(f"{p}: {e}") from e
    base = d.pop("preset", None)
    if base is not None:
        merged = copy.deepcopy(PRESETS.get(base) or {})
        if not merged:
            raise ConfigInvalid(f"{p}: unknown preset {base!r}")
        merged.update(d)
        d = merged
    return ExperimentConfig.from_dict(d)
