"""Experiment configuration, per-stage seed derivation and run manifests."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .kernel import FrequencyProfile, PhysicalConstants

STAGES = ("pinney", "noise-check", "dynamics", "mother-field", "quantize")

DEFAULTS: dict = {
    "hbar": 1.0,
    "omega_cap": 1.0,
    "profile": {"kind": "modulated", "omega0": 1.0, "eps": 0.2, "gamma": 1.3},
    "pinney": {"rho0": None, "rho_dot0": 0.0, "t_span": [0.0, 20.0], "tol": 1e-9,
               "check_points": 20001},
    "noise": {"M": 100000, "dt": 1e-3, "steps": 100, "max_lag": 5,
              "rescaled_t_end": 4.0, "rescaled_steps": 400, "chunk": 5000},
    "dynamics": {"invariant_paths": 100, "invariant_steps": 1000, "invariant_dT": 1e-3,
                 "order_dts": [1e-2, 1e-3, 1e-4, 1e-5], "order_T": 1.0, "order_paths": 8,
                 "frame_t_end": 2.0, "frame_dts": [2e-3, 1e-3, 5e-4, 2.5e-4], "frame_paths": 4,
                 "short_X0": 0.0, "short_Y0": 1.0, "short_dT": 1e-3, "short_M": 100000},
    "mother_field": {"coeffs": [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]], "T": 0.1, "M": 10000,
                     "grid": {"min": -1.0, "max": 1.0, "count": 5}, "n_steps": 64,
                     "generator_degrees": [1, 2, 3], "short_dT": 1e-3, "short_M": 20000},
    "quantize": {"spectrum": {"x_max": 12.0, "n": 1024, "levels": 6, "order": 4,
                              "refinements": [257, 513, 1025]},
                 "period_steps": 2000, "X_max": 8.0, "t_end": 2.0, "dt": 0.02,
                 "n": 129, "levels": 3, "family_rho_dot0": 0.3},
    "out": "hkq-out",
    "threads": 1,
}


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration (exit code 2)."""


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "profile":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def derive_seed(master: int, stage: str, index: int = 0) -> int:
    """First 8 bytes (little-endian) of sha256("{master}:{stage}:{index}")."""
    digest = hashlib.sha256(f"{master}:{stage}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration; ``data`` holds the full merged document."""

    seed: int
    data: dict = field(hash=False, compare=False)

    @classmethod
    def from_dict(cls, doc: dict, seed=None, out=None, threads=None) -> "ExperimentConfig":
        doc = dict(doc)
        file_seed = doc.pop("seed", None)
        seed = file_seed if seed is None else seed
        if seed is None:
            raise ConfigError("a master seed is required (config 'seed' or --seed)")
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an integer in [0, 2**64)")
        data = _merge(DEFAULTS, doc)
        if out is not None:
            data["out"] = str(out)
        if threads is not None:
            data["threads"] = threads
        cfg = cls(int(seed), data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, **kw) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc, **kw)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def constants(self) -> PhysicalConstants:
        return PhysicalConstants(float(self.data["hbar"]))

    @property
    def profile(self) -> FrequencyProfile:
        return FrequencyProfile.from_dict(self.data["profile"])

    @property
    def threads(self) -> int:
        return int(self.data["threads"])

    def seed_for(self, stage: str, index: int = 0) -> int:
        return derive_seed(self.seed, stage, index)

    def canonical(self) -> str:
        return json.dumps({"seed": self.seed, **{k: v for k, v in self.data.items()
                                                if k not in ("out", "threads")}},
                          sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        """Hash of everything that can change results (not out dir or threads)."""
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def validate(self) -> None:
        d = self.data
        try:
            self.constants
            profile = self.profile
        except ValueError as exc:
            raise ConfigError(f"invalid physics settings: {exc}") from None
        if not (isinstance(d["omega_cap"], (int, float)) and math.isfinite(d["omega_cap"])
                and d["omega_cap"] > 0):
            raise ConfigError("omega_cap must be a positive number")
        if not isinstance(d["threads"], int) or d["threads"] < 1:
            raise ConfigError("threads must be a positive integer")
        t0, t1 = d["pinney"]["t_span"]
        if not t1 > t0:
            raise ConfigError("pinney.t_span must be increasing")
        if not profile.contains([t0, t1]):
            raise ConfigError("pinney.t_span is not covered by the frequency profile")
        if d["noise"]["rescaled_t_end"] > t1 or d["quantize"]["t_end"] > t1:
            raise ConfigError("noise/quantize spans must lie inside pinney.t_span")
        for path in ("noise.M", "dynamics.invariant_paths", "dynamics.order_paths",
                     "dynamics.frame_paths", "dynamics.short_M", "mother_field.M",
                     "mother_field.short_M"):
            sec, key = path.split(".")
            v = d[sec][key]
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{path} must be an integer >= 1")
        if d["mother_field"]["M"] < 100:
            raise ConfigError("mother_field.M must be >= 100")
        if d["dynamics"]["short_M"] < 1000:
            raise ConfigError("dynamics.short_M must be >= 1000")
        if d["noise"]["M"] < 2:
            raise ConfigError("noise.M must be >= 2")
        grid = d["mother_field"]["grid"]
        if grid["count"] < 3 or not grid["max"] > grid["min"]:
            raise ConfigError("mother_field.grid needs count >= 3 and max > min")
        try:
            from .mother_field import HolomorphicField
            HolomorphicField.from_json(d["mother_field"]["coeffs"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"mother_field.coeffs: {exc}") from None

    def plan(self, stages) -> list[str]:
        lines = [f"hkq {__version__}  config {self.digest()[:16]}  seed {self.seed}",
                 f"output directory: {self.data['out']}  threads: {self.threads}"]
        for s in stages:
            lines.append(f"  stage {s}: seed {self.seed_for(s)}")
        return lines


@dataclass
class RunManifest:
    config_hash: str
    version: str = __version__
    files: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "version": self.version, "files": self.files,
                "timings": self.timings, "verdicts": self.verdicts}
