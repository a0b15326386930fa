"""Experiment configuration: a versioned JSON document plus named presets."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

from .active import AsConfig
from .ensemble import DropoutBaselineConfig
from .errors import ContractViolation
from .training import AtConfig, LossWeights, OptimConfig, PretrainConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ProblemConfig:
    """Which benchmark to build and how its synthetic truth is generated.

    ``oracle_shape`` is the grid the truth is reported on (x by t for the
    transient case, x by y for the steady one); the solver runs on a grid
    refined ``oracle_refine`` times in every direction.
    """

    kind: str = "diffusion"  # "diffusion" | "source2d"
    profile: str = "sinusoidal"  # diffusion only: "sinusoidal" | "grf"
    grf_seed: int = 0
    grf_length_scale: float = 0.3
    horizon: float = 0.03
    oracle_shape: tuple[int, int] = (49, 301)
    oracle_refine: int = 4
    collocation: tuple[int, int] = (50, 100)
    noise_std: float = 0.01
    sensors: int = 117  # source2d: random grid nodes; diffusion: fixed 13 x 9 layout
    boundary_points: int = 100
    initial_points: int = 50

    def __post_init__(self):
        if self.kind not in ("diffusion", "source2d"):
            raise ContractViolation(f"unknown problem kind {self.kind!r}")
        if self.kind == "diffusion" and self.profile not in ("sinusoidal", "grf"):
            raise ContractViolation(f"unknown diffusivity profile {self.profile!r}")
        if self.noise_std < 0:
            raise ContractViolation("noise std must be >= 0")
        if min(self.collocation) < 2 or min(self.oracle_shape) < 3:
            raise ContractViolation("grids need at least a few points per axis")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "custom"
    problem: ProblemConfig = ProblemConfig()
    hidden_layers: int = 4
    hidden_width: int = 20
    optim: OptimConfig = OptimConfig()
    weights: LossWeights = LossWeights(1.0, 1e-3, 1e-3)
    at: AtConfig = AtConfig()
    members: int = 5
    master_seed: int = 0
    pretrain: PretrainConfig = PretrainConfig()
    active: AsConfig | None = None
    dropout: DropoutBaselineConfig | None = None
    output_dir: str | None = None
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.members < 1:
            raise ContractViolation("members must be >= 1")
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ContractViolation("network needs at least one hidden unit")
        if self.version != SCHEMA_VERSION:
            raise ContractViolation(f"config schema version {self.version} != {SCHEMA_VERSION}")

    # -- serialisation -------------------------------------------------
    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(dict(d))
        if d.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ContractViolation(f"config schema version {d.get('version')} != {SCHEMA_VERSION}")
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            val = d.pop(f.name)
            sub = _SECTIONS.get(f.name)
            if sub is not None and val is not None:
                val = _build(sub, val, f.name)
            kw[f.name] = val
        if d:
            raise ContractViolation(f"unknown config keys: {sorted(d)}")
        return cls(**kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    def digest(self):
        """sha256 of the canonical JSON, ignoring where outputs are written."""
        d = self.to_dict()
        d.pop("output_dir", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed=None, members=None, at=None, out=None, dropout=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, master_seed=int(seed))
        if members is not None:
            cfg = replace(cfg, members=int(members))
        if at is not None:
            cfg = replace(cfg, at=replace(cfg.at, enabled=bool(at)))
        if dropout:
            cfg = replace(cfg, dropout=cfg.dropout or DropoutBaselineConfig())
        if out is not None:
            cfg = replace(cfg, output_dir=str(out))
        return cfg


_SECTIONS = {
    "problem": ProblemConfig,
    "optim": OptimConfig,
    "weights": LossWeights,
    "at": AtConfig,
    "pretrain": PretrainConfig,
    "active": AsConfig,
    "dropout": DropoutBaselineConfig,
}


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ContractViolation(f"config section {where!r} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    extra = set(d) - set(names)
    if extra:
        raise ContractViolation(f"unknown keys in {where!r}: {sorted(extra)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kw)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _source(steps):
    return ExperimentConfig(
        name="source2d",
        problem=ProblemConfig(kind="source2d", oracle_shape=(50, 50), collocation=(48, 50),
                              noise_std=0.02, sensors=2000),
        optim=OptimConfig(steps=steps),
        weights=LossWeights(1.0, 1.0, 1.0),
        pretrain=PretrainConfig(enabled=False),
    )


def _diffusion(profile, noise, steps):
    return ExperimentConfig(
        name=f"diffusion-{profile}",
        problem=ProblemConfig(kind="diffusion", profile=profile, noise_std=noise),
        optim=OptimConfig(steps=steps),
        weights=LossWeights(1.0, 1e-3, 1e-3),
        active=AsConfig(alpha=0.02, max_iterations=15, retrain_steps=10000),
    )


def _desk(cfg, steps, suffix="-desk"):
    return replace(cfg, name=cfg.name + suffix, optim=replace(cfg.optim, steps=steps))


def _smoke(cfg):
    small = replace(cfg.problem, collocation=(12, 12), boundary_points=20, initial_points=12)
    if cfg.problem.kind == "source2d":
        small = replace(small, sensors=200)
    return replace(cfg, name=cfg.name + "-smoke", problem=small, members=2,
                   optim=replace(cfg.optim, steps=60, trace_every=20),
                   pretrain=replace(cfg.pretrain, max_steps=50))


def _build_presets():
    full = {
        "source2d": _source(100000),
        "diffusion-sinusoidal": _diffusion("sinusoidal", 0.01, 50000),
        "diffusion-grf": _diffusion("grf", 0.05, 50000),
        "diffusion-grf-lownoise": replace(_diffusion("grf", 0.01, 50000), name="diffusion-grf-lownoise"),
    }
    out = dict(full)
    out["source2d-desk"] = _desk(full["source2d"], 30000)
    for k in ("diffusion-sinusoidal", "diffusion-grf", "diffusion-grf-lownoise"):
        out[k + "-desk"] = _desk(full[k], 20000)
    out["source2d-smoke"] = _smoke(full["source2d"])
    out["diffusion-smoke"] = replace(_smoke(full["diffusion-sinusoidal"]),
                                     active=AsConfig(alpha=0.02, max_iterations=2, retrain_steps=20))
    return out


PRESETS = _build_presets()


def preset(name) -> ExperimentConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ContractViolation(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
