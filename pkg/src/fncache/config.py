"""Run configuration.

One JSON file drives the simulator, the cache system built on top of it, and
the replay harness. Key names follow the documented external interface:
flat simulator keys plus a nested "reclaim" object; the reclamation rate key
is spelled "lambda" in JSON and `lam` in Python.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace

from .analytics import C_DUR_DEFAULT, C_REQ_DEFAULT, pmf_poisson, pmf_zipf
from .ec import ECConfig

VALID_MODES = ("virtual", "realtime")
VALID_RECLAIM_KINDS = ("none", "zipf", "poisson")


class ConfigError(ValueError):
    pass


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit sub-seed for an independent random stream."""
    h = hashlib.blake2b(f"{seed}/{label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


@dataclass(frozen=True)
class ReclaimConfig:
    kind: str = "none"
    s: float = 2.23            # zipf exponent
    lam: float = 0.6           # poisson mean reclaims per minute
    n_max: int | None = None   # zipf support cap; defaults to pool size

    def __post_init__(self):
        if self.kind not in VALID_RECLAIM_KINDS:
            raise ConfigError(f"reclaim.kind must be one of {VALID_RECLAIM_KINDS}")
        if self.kind == "zipf" and self.s <= 0:
            raise ConfigError("reclaim.s must be positive")
        if self.kind == "poisson" and self.lam < 0:
            raise ConfigError("reclaim.lambda must be non-negative")
        if self.n_max is not None and self.n_max < 1:
            raise ConfigError("reclaim.n_max must be >= 1")

    def pmf(self, pool_size: int) -> list[float] | None:
        """Per-minute pmf over the number of reclaimed instances, or None."""
        if self.kind == "none":
            return None
        if self.kind == "zipf":
            return pmf_zipf(self.s, self.n_max or pool_size, pool_size)
        return pmf_poisson(self.lam, pool_size)

    @classmethod
    def from_dict(cls, raw: dict) -> "ReclaimConfig":
        raw = dict(raw)
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        allowed = {f.name for f in fields(cls)}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown reclaim keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "s": self.s, "lambda": self.lam}
        if self.n_max is not None:
            d["n_max"] = self.n_max
        return d


@dataclass(frozen=True)
class SystemConfig:
    # simulated provider
    pool_size: int = 400
    lambda_memory_mb: int = 1536
    seed: int = 1
    warm_latency_ms: int = 13
    cold_latency_ms: int = 150
    capacity_fraction: float = 0.875
    mode: str = "virtual"
    reclaim: ReclaimConfig = field(default_factory=ReclaimConfig)
    # cache fabric
    ec: ECConfig = field(default_factory=lambda: ECConfig(10, 2))
    t_warm_s: float = 60.0
    t_bak_s: float = 300.0
    backup_enabled: bool = True
    degraded_repair: bool = True
    buffer_ms: int = 5
    net_latency_ms: int = 1
    request_timeout_ms: int = 300
    invoke_retries: int = 1    # re-invokes per node per request after timeout
    # replay / pricing
    window: int = 16
    c_req: float = C_REQ_DEFAULT
    c_dur: float = C_DUR_DEFAULT
    wire_check: bool = False   # serialize+parse every frame (protocol tests)

    def __post_init__(self):
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        mb = self.lambda_memory_mb
        if not (128 <= mb <= 3008) or (mb - 128) % 64:
            raise ConfigError("lambda_memory_mb must be in 128..3008 step 64")
        if self.mode not in VALID_MODES:
            raise ConfigError(f"mode must be one of {VALID_MODES}")
        if not (0.0 < self.capacity_fraction <= 1.0):
            raise ConfigError("capacity_fraction must be in (0, 1]")
        if not (2 <= self.buffer_ms <= 10):
            raise ConfigError("buffer_ms must be in 2..10")
        if self.ec.n > self.pool_size:
            raise ConfigError("ec chunks per object exceed pool_size")
        for name in ("warm_latency_ms", "cold_latency_ms", "net_latency_ms",
                     "request_timeout_ms", "invoke_retries", "window",
                     "t_warm_s", "t_bak_s", "c_req", "c_dur"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.window < 1:
            raise ConfigError("window must be >= 1")

    @property
    def node_capacity_bytes(self) -> int:
        return int(self.lambda_memory_mb * 1_000_000 * self.capacity_fraction)

    @classmethod
    def from_dict(cls, raw: dict) -> "SystemConfig":
        raw = dict(raw)
        if "reclaim" in raw:
            raw["reclaim"] = ReclaimConfig.from_dict(raw["reclaim"])
        if "ec" in raw:
            raw["ec"] = ECConfig.parse(raw["ec"])
        allowed = {f.name for f in fields(cls)}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "reclaim":
                v = v.to_dict()
            elif f.name == "ec":
                v = f"{v.d}+{v.p}"
            d[f.name] = v
        return d

    def with_overrides(self, **kw) -> "SystemConfig":
        return replace(self, **kw)


def load_config(path: str) -> SystemConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top-level JSON object expected")
    return SystemConfig.from_dict(raw)


def dump_config(cfg: SystemConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
