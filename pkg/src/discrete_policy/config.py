"""Run configuration: one JSON file, strictly validated, with dotted-path
overrides. Unknown keys are rejected with field-level messages so typos fail
before any work starts."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import OBS_DIM
from .diffusion import DiffusionConfig
from .vae import VaeConfig


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


@dataclass(frozen=True)
class CodebookCfg:
    num_codes: int = 1024
    code_dim: int = 128
    num_tokens: int = 8
    beta: float = 1.0


@dataclass(frozen=True)
class NetworkCfg:
    hidden_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    slot_embed_dim: int = 16


@dataclass(frozen=True)
class DiffusionCfg:
    num_steps: int = 100
    sample_steps: int = 10
    eta: float = 0.0
    schedule: str = "cosine"
    hidden_dim: int = 256
    num_blocks: int = 3
    time_embed_dim: int = 32
    standardize_latents: bool = True
    tokenwise: bool = True


@dataclass(frozen=True)
class OptimizerCfg:
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-3
    lr_baseline: float = 1e-3
    batch_stage1: int = 32
    batch_stage2: int = 64
    batch_baseline: int = 64


@dataclass(frozen=True)
class TrainingCfg:
    stage1_steps: int = 5000
    stage2_steps: int = 3000
    baseline_steps: int = 0  # 0 means stage1_steps + stage2_steps
    log_every: int = 50
    latent_stride: int = 8


@dataclass(frozen=True)
class EvalCfg:
    n_episodes: int = 20
    max_steps: int = 120


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_tasks: int = 5
    demos_per_task: int = 100
    horizon: int = 32
    n_exec: int = 8
    codebook: CodebookCfg = field(default_factory=CodebookCfg)
    network: NetworkCfg = field(default_factory=NetworkCfg)
    diffusion: DiffusionCfg = field(default_factory=DiffusionCfg)
    optimizer: OptimizerCfg = field(default_factory=OptimizerCfg)
    training: TrainingCfg = field(default_factory=TrainingCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)


_GROUPS = {"codebook": CodebookCfg, "network": NetworkCfg, "diffusion": DiffusionCfg,
           "optimizer": OptimizerCfg, "training": TrainingCfg, "eval": EvalCfg}


def _coerce(path: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {type(value).__name__}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {type(value).__name__}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {type(value).__name__}")
        return value
    raise ConfigError(f"{path}: unsupported value")


def _build_group(cls, d: dict, prefix: str):
    proto = cls()
    allowed = {f.name for f in fields(cls)}
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{prefix}{key}: unknown key")
    kwargs = {k: _coerce(f"{prefix}{k}", v, getattr(proto, k)) for k, v in d.items()}
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a JSON object")
    proto = RunConfig()
    allowed = {f.name for f in fields(RunConfig)}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{key}: unknown key")
    kwargs = {}
    for key, value in raw.items():
        if key in _GROUPS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            kwargs[key] = _build_group(_GROUPS[key], value, f"{key}.")
        else:
            kwargs[key] = _coerce(key, value, getattr(proto, key))
    cfg = RunConfig(**kwargs)
    _validate(cfg)
    return cfg


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _validate(cfg: RunConfig) -> None:
    _require(1 <= cfg.n_tasks <= 12, "n_tasks: must be in [1, 12]")
    _require(cfg.demos_per_task >= 1, "demos_per_task: must be >= 1")
    _require(cfg.horizon >= 1, "horizon: must be >= 1")
    _require(1 <= cfg.n_exec <= cfg.horizon, "n_exec: must be in [1, horizon]")
    _require(cfg.codebook.num_codes >= 2, "codebook.num_codes: must be >= 2")
    _require(cfg.codebook.code_dim >= 1, "codebook.code_dim: must be >= 1")
    _require(cfg.codebook.num_tokens >= 1, "codebook.num_tokens: must be >= 1")
    _require(cfg.codebook.beta > 0, "codebook.beta: must be > 0")
    _require(cfg.network.hidden_dim % cfg.network.num_heads == 0,
             "network.hidden_dim: must be divisible by network.num_heads")
    _require(cfg.diffusion.schedule in ("cosine", "linear"),
             "diffusion.schedule: must be 'cosine' or 'linear'")
    _require(cfg.diffusion.num_steps >= 1, "diffusion.num_steps: must be >= 1")
    _require(1 <= cfg.diffusion.sample_steps <= cfg.diffusion.num_steps,
             "diffusion.sample_steps: must be in [1, diffusion.num_steps]")
    _require(cfg.diffusion.eta >= 0.0, "diffusion.eta: must be >= 0")
    _require(cfg.diffusion.time_embed_dim % 2 == 0,
             "diffusion.time_embed_dim: must be even")
    for name in ("stage1_steps", "stage2_steps", "log_every", "latent_stride"):
        _require(getattr(cfg.training, name) >= 1, f"training.{name}: must be >= 1")
    _require(cfg.training.baseline_steps >= 0, "training.baseline_steps: must be >= 0")
    for name in ("lr_stage1", "lr_stage2", "lr_baseline"):
        _require(getattr(cfg.optimizer, name) > 0, f"optimizer.{name}: must be > 0")
    for name in ("batch_stage1", "batch_stage2", "batch_baseline"):
        _require(getattr(cfg.optimizer, name) >= 1, f"optimizer.{name}: must be >= 1")
    _require(cfg.eval.n_episodes >= 1, "eval.n_episodes: must be >= 1")
    _require(cfg.eval.max_steps >= 1, "eval.max_steps: must be >= 1")


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Dotted key=value assignments; values parse as JSON, falling back to
    bare strings."""
    out = json.loads(json.dumps(raw))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, text = item.partition("=")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part} is not an object")
        node[parts[-1]] = value
    return out


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p}: invalid JSON ({e})")
    if overrides:
        raw = apply_overrides(raw, overrides)
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        out[f.name] = {g.name: getattr(v, g.name) for g in fields(v)} if f.name in _GROUPS else v
    return out


def vae_config(cfg: RunConfig) -> VaeConfig:
    return VaeConfig(
        horizon=cfg.horizon,
        action_dim=2,
        obs_dim=OBS_DIM,
        num_tokens=cfg.codebook.num_tokens,
        code_dim=cfg.codebook.code_dim,
        num_codes=cfg.codebook.num_codes,
        beta=cfg.codebook.beta,
        hidden_dim=cfg.network.hidden_dim,
        num_heads=cfg.network.num_heads,
        ff_dim=cfg.network.ff_dim,
        enc_layers=cfg.network.enc_layers,
        dec_layers=cfg.network.dec_layers,
        slot_embed_dim=cfg.network.slot_embed_dim,
    )


def policy_diffusion_config(cfg: RunConfig) -> DiffusionConfig:
    d = cfg.diffusion
    return DiffusionConfig(
        latent_dim=cfg.codebook.num_tokens * cfg.codebook.code_dim,
        obs_dim=OBS_DIM,
        slot_embed_dim=cfg.network.slot_embed_dim,
        time_embed_dim=d.time_embed_dim,
        hidden_dim=d.hidden_dim,
        num_blocks=d.num_blocks,
        num_steps=d.num_steps,
        sample_steps=d.sample_steps,
        eta=d.eta,
        schedule=d.schedule,
        standardize_latents=d.standardize_latents,
        tokenwise=d.tokenwise,
        num_tokens=cfg.codebook.num_tokens if d.tokenwise else 1,
    )


def baseline_diffusion_config(cfg: RunConfig) -> DiffusionConfig:
    d = cfg.diffusion
    return DiffusionConfig(
        latent_dim=cfg.horizon * 2,
        obs_dim=OBS_DIM,
        slot_embed_dim=cfg.network.slot_embed_dim,
        time_embed_dim=d.time_embed_dim,
        hidden_dim=d.hidden_dim,
        num_blocks=d.num_blocks,
        num_steps=d.num_steps,
        sample_steps=d.sample_steps,
        eta=d.eta,
        schedule=d.schedule,
        standardize_latents=False,
        tokenwise=False,
        num_tokens=1,
    )


def baseline_step_budget(cfg: RunConfig) -> int:
    """The baseline trains under the policy's summed two-stage budget unless
    overridden."""
    if cfg.training.baseline_steps > 0:
        return cfg.training.baseline_steps
    return cfg.training.stage1_steps + cfg.training.stage2_steps
