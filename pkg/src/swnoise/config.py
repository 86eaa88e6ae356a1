"""Plain-text key-value run configuration with per-stage digest scopes.

Diff-friendly flat `key = value` file; every key has a default.  Stage
digests hash only the keys a stage (transitively) consumes, so touching
forecast settings does not invalidate simulation outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


AUTO = "auto"


@dataclass
class RunConfig:
    # grids
    fine_nx: int = 64
    fine_ny: int = 64
    coarse_nx: int = 16
    coarse_ny: int = 16
    lx: float = 1.0
    ly: float = 1.0
    # physics
    ro: float = 0.2
    fr: float = 1.1
    f_cor: float = 1.0
    a: float = 0.1
    nu: str = AUTO           # float or "auto" (scaled with grid spacing)
    dt: str = AUTO           # float or "auto" (fraction of the CFL bound)
    topography: str = ""     # optional SWF1 file with bottom topography
    # simulation
    spinup_steps: int = 2000
    dataset_steps: int = 2000
    # calibration
    reg: str = AUTO          # ridge weight, float or "auto"
    # transform
    theta: float = 2e5
    clip: float = 3.0
    # bridge training
    dsb_steps: int = 30
    ipf_iters: int = 5
    batch: int = 64
    lr: float = 1e-3
    inner_steps: int = 5000
    hidden: int = 256
    cache_size: int = 1024
    refresh_every: int = 500
    # forecasting
    members: int = 10
    lead: int = 200
    init_std: tuple = (0.0, 0.001, 0.05)
    resets: int = 8
    rank_reps: int = 32
    rank_lead: int = 100
    noise_samples: int = 200
    variables: tuple = ("u", "v", "e")
    # misc
    seed: int = 20240801
    workdir: str = "runs/desk"

    def nu_value(self, grid) -> float:
        from .rsw import default_nu

        return default_nu(grid) if self.nu == AUTO else float(self.nu)

    def dt_value(self, state, params) -> float:
        from .rsw import auto_dt

        return auto_dt(state, params) if self.dt == AUTO else float(self.dt)

    def reg_value(self) -> float | None:
        return None if self.reg == AUTO else float(self.reg)


_TUPLE_KEYS = {"init_std": float, "variables": str}

STAGE_KEYS = {
    "simulate": [
        "fine_nx", "fine_ny", "coarse_nx", "coarse_ny", "lx", "ly",
        "ro", "fr", "f_cor", "a", "nu", "dt", "topography",
        "spinup_steps", "dataset_steps", "seed",
    ],
}
STAGE_KEYS["calibrate"] = STAGE_KEYS["simulate"] + ["reg", "theta", "clip"]
STAGE_KEYS["train"] = STAGE_KEYS["calibrate"] + [
    "dsb_steps", "ipf_iters", "batch", "lr", "inner_steps", "hidden",
    "cache_size", "refresh_every",
]
STAGE_KEYS["forecast"] = STAGE_KEYS["train"] + [
    "members", "lead", "init_std", "resets", "rank_reps", "rank_lead",
    "noise_samples", "variables",
]
STAGE_KEYS["report"] = STAGE_KEYS["forecast"]


def _parse_value(name: str, text: str, target_type):
    text = text.strip()
    if name in _TUPLE_KEYS:
        if not text:
            return ()
        return tuple(_TUPLE_KEYS[name](part.strip()) for part in text.split(","))
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    if name in ("nu", "dt", "reg"):
        if text != AUTO:
            float(text)  # must parse
        return text
    return text


def load_config(path: str | Path) -> RunConfig:
    cfg = RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        default = getattr(RunConfig, key, None)
        try:
            parsed = _parse_value(key, val, type(default) if default is not None else str)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
        setattr(cfg, key, parsed)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.fine_nx % cfg.coarse_nx or cfg.fine_ny % cfg.coarse_ny:
        raise ConfigError("fine grid must be an integer refinement of the coarse grid")
    if cfg.fine_nx // cfg.coarse_nx != cfg.fine_ny // cfg.coarse_ny:
        raise ConfigError("x and y refinement ratios must match")
    if cfg.ro <= 0 or cfg.fr <= 0:
        raise ConfigError("ro and fr must be positive")
    if cfg.theta <= 0 or cfg.clip <= 0:
        raise ConfigError("theta and clip must be positive")
    if cfg.dataset_steps < 2:
        raise ConfigError("dataset_steps must cover at least two coarse steps")
    if cfg.members < 2:
        raise ConfigError("need at least 2 ensemble members")
    if not cfg.init_std:
        raise ConfigError("init_std list must not be empty")
    if any(s not in ("u", "v", "e") for s in cfg.variables):
        raise ConfigError("variables must be a subset of u,v,e")
    for key in ("nu", "dt", "reg"):
        val = getattr(cfg, key)
        if isinstance(val, str) and val != AUTO:
            try:
                float(val)
            except ValueError:
                raise ConfigError(f"{key} must be a number or 'auto'") from None


def config_text(cfg: RunConfig, keys=None) -> str:
    from .fileio import format_value

    lines = []
    for f in fields(RunConfig):
        if keys is not None and f.name not in keys:
            continue
        lines.append(f"{f.name} = {format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(config_text(cfg))


def stage_digest(cfg: RunConfig, stage: str) -> str:
    """Digest of the config keys this stage (transitively) consumes."""
    scoped = config_text(cfg, keys=set(STAGE_KEYS[stage]))
    return hashlib.sha256(scoped.encode()).hexdigest()[:16]
