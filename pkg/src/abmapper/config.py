"""Run configuration and the ``key=value`` config-file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigTypeError, UnknownKey
from .scenarios import get_bundle

MODE_NAMES = ("ABMapper", "AttentionOnly", "BicNetOnly", "MapperBaseline")
_MODE_ALIASES = {m.lower(): m for m in MODE_NAMES} | {
    "ab-mapper": "ABMapper",
    "attention": "AttentionOnly",
    "bicnet": "BicNetOnly",
    "mapper": "MapperBaseline",
}


def canonical_mode(name: str) -> str:
    try:
        return _MODE_ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown mode {name!r}; choose from {MODE_NAMES}") from None


@dataclass
class RunConfig:
    scenario: str = "mini-II"
    map_path: str = ""
    n_agents: int = 9
    n_dyn: int = 8
    init_mode: str = "clustered"
    max_steps: int = 0  # 0 -> 4 * (height + width)
    mode: str = "ABMapper"
    z: int = 3
    gamma: float = 0.99
    lam: float = 0.3
    lr_actor: float = 0.00004
    lr_critic: float = 0.0001
    tau: float = 0.001
    lr_baseline: float = 0.0003
    evolution_period: int = 100
    evolution_temperature: float = 1.0
    episodes: int = 1000
    eval_every: int = 100
    eval_episodes: int = 20
    seed: int = 0
    step_penalty: float = -0.01
    goal_reward: float = 10.0
    collision_penalty: float = -0.1
    value_baseline: bool = False
    grad_clip: float = 10.0
    critic_trains_encoder: bool = True
    share_critic_encoders: str = "auto"
    query_from: str = "state_action"
    conv_channels: int = 8
    feature: int = 128
    bicnet_hidden: int = 64
    embed: int = 64
    attn: int = 32
    f_hidden: int = 128

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        for k in ("lr_actor", "lr_critic", "lr_baseline"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be > 0")
        if self.z < 1:
            raise ValueError("z must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.init_mode not in ("uniform", "clustered"):
            raise ValueError(f"init_mode must be uniform or clustered, got {self.init_mode!r}")
        if self.share_critic_encoders not in ("auto", "true", "false"):
            raise ValueError("share_critic_encoders must be auto, true or false")

    def shared_critic(self) -> bool:
        if self.share_critic_encoders == "auto":
            return self.n_agents > 64
        return self.share_critic_encoders == "true"

    def to_text(self) -> str:
        lines = [f"{f.name}={_fmt(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    typ = _TYPES[key]
    text = raw.strip()
    if typ == "bool":
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigTypeError(key, raw, "bool")
    if typ == "int":
        try:
            return int(text)
        except ValueError:
            raise ConfigTypeError(key, raw, "int") from None
    if typ == "float":
        try:
            return float(text)
        except ValueError:
            raise ConfigTypeError(key, raw, "float") from None
    return text


def parse_kv(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def parse_config(text: str = "", overrides: dict | None = None, scenario: str | None = None) -> RunConfig:
    """Build a :class:`RunConfig`.

    Precedence, lowest first: dataclass defaults, the scenario bundle, the
    config file ``text``, then ``overrides`` (command-line flags). Unknown
    keys raise :class:`UnknownKey`; values that do not parse raise
    :class:`ConfigTypeError` naming the key.
    """
    merged = parse_kv(text)
    merged.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    if scenario is not None and "scenario" not in (overrides or {}):
        merged["scenario"] = scenario
    for key in merged:
        if key not in _TYPES:
            raise UnknownKey(key)
    values = {k: _coerce(k, v) for k, v in merged.items()}
    name = values.get("scenario", RunConfig.scenario)
    base = get_bundle(name).defaults()
    base.update(values)
    return RunConfig(**base)
