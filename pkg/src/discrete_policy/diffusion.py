"""Conditional latent diffusion over flattened chunk latents.

The forward process follows the usual variance-preserving parameterization
z_k = sqrt(alpha_bar_k) z_0 + sqrt(1 - alpha_bar_k) eps. alpha_bars has
K + 1 entries with alpha_bars[0] = 1 (the clean anchor), so step k of the
K-step chain reads alpha_bars[k + 1]. Sampling runs DDIM over an evenly
spaced subset of steps; with eta = 0 it is deterministic, and the final
transition targets the anchor so one exact noise prediction recovers z_0.

The noise predictor is a residual MLP over the flattened latent with FiLM
conditioning on observation, instruction slot embeddings, and a sinusoidal
embedding of the step index. Its output projection starts at zero, so an
untrained model predicts zero noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AdamState,
    RngStream,
    Tape,
    Tensor,
    adam_step,
    add,
    concat,
    gather_rows,
    gelu,
    layer_norm,
    mul,
    reduce_mean,
    reshape,
    sub,
)
from .nn import (
    _normal_param,
    _zero_param,
    film_modulate,
    init_film,
    linear,
    timestep_embed_batch,
)
from .vae import N_SLOTS


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    betas: np.ndarray  # (K,)
    alphas: np.ndarray  # (K,)
    alpha_bars: np.ndarray  # (K + 1,), alpha_bars[0] = 1

    @property
    def num_steps(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, k: int) -> float:
        """Cumulative signal fraction after step k of the chain."""
        if not 0 <= k < self.num_steps:
            raise ValueError(f"step {k} outside [0, {self.num_steps})")
        return float(self.alpha_bars[k + 1])


def build_schedule(kind: str, num_steps: int) -> NoiseSchedule:
    if num_steps < 1:
        raise ValueError("num_steps must be positive")
    if kind == "cosine":
        s = 0.008
        t = np.arange(num_steps + 1, dtype=np.float64)
        f = np.cos(((t / num_steps + s) / (1.0 + s)) * np.pi / 2.0) ** 2
        ab_raw = f / f[0]
        betas = np.minimum(1.0 - ab_raw[1:] / ab_raw[:-1], 0.999)
    elif kind == "linear":
        # endpoints tuned for a 1000-step chain, rescaled to this length;
        # the clip only engages for very short chains
        scale = 1000.0 / num_steps
        betas = np.minimum(np.linspace(scale * 1e-4, scale * 0.02, num_steps), 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(kind=kind, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def ddim_step_indices(num_steps: int, sample_steps: int) -> np.ndarray:
    """Evenly spaced retained steps including both endpoints; a single-step
    plan keeps only the noisiest step."""
    if not 1 <= sample_steps <= num_steps:
        raise ValueError(f"sample_steps must be in [1, {num_steps}]")
    if sample_steps == 1:
        return np.array([num_steps - 1], dtype=np.int64)
    return np.round(np.linspace(0.0, num_steps - 1, sample_steps)).astype(np.int64)


def add_noise(schedule: NoiseSchedule, z0: np.ndarray, eps: np.ndarray, k: int) -> np.ndarray:
    ab = schedule.alpha_bar(k)
    return np.sqrt(ab) * np.asarray(z0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def add_noise_batch(schedule: NoiseSchedule, z0: np.ndarray, eps: np.ndarray,
                    ks: np.ndarray) -> np.ndarray:
    ab = schedule.alpha_bars[np.asarray(ks, dtype=np.int64) + 1][:, None]
    return np.sqrt(ab) * np.asarray(z0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def predict_x0(z_k: np.ndarray, eps: np.ndarray, alpha_bar: float) -> np.ndarray:
    return (np.asarray(z_k) - np.sqrt(1.0 - alpha_bar) * np.asarray(eps)) / np.sqrt(alpha_bar)


def ddim_update(z: np.ndarray, eps_hat: np.ndarray, alpha_bar: float,
                alpha_bar_prev: float, sigma: float,
                noise: np.ndarray | None = None) -> np.ndarray:
    """One DDIM transition from noise level alpha_bar to alpha_bar_prev."""
    x0 = predict_x0(z, eps_hat, alpha_bar)
    out = np.sqrt(alpha_bar_prev) * x0
    out = out + np.sqrt(max(1.0 - alpha_bar_prev - sigma ** 2, 0.0)) * np.asarray(eps_hat)
    if sigma > 0.0:
        if noise is None:
            raise ValueError("sigma > 0 requires noise")
        out = out + sigma * noise
    return out


# -------------------------------------------------------------- predictor


@dataclass(frozen=True)
class DiffusionConfig:
    latent_dim: int
    obs_dim: int = 5
    slot_embed_dim: int = 16
    time_embed_dim: int = 32
    hidden_dim: int = 256
    num_blocks: int = 3
    num_steps: int = 100
    sample_steps: int = 10
    eta: float = 0.0
    schedule: str = "cosine"
    standardize_latents: bool = False
    tokenwise: bool = False  # share the residual trunk across latent tokens
    num_tokens: int = 1

    def __post_init__(self):
        if self.tokenwise and self.latent_dim % self.num_tokens != 0:
            raise ValueError("tokenwise predictor needs latent_dim divisible by num_tokens")

    @property
    def trunk_in_dim(self) -> int:
        return self.latent_dim // self.num_tokens if self.tokenwise else self.latent_dim

    @property
    def cond_dim(self) -> int:
        return self.obs_dim + 2 * self.slot_embed_dim + self.time_embed_dim


@dataclass
class NoisePredictor:
    config: DiffusionConfig
    params: dict[str, Tensor]


def init_noise_predictor(config: DiffusionConfig, rng: RngStream) -> NoisePredictor:
    c = config
    h = c.hidden_dim
    p: dict[str, Tensor] = {}
    p["obj_embed"] = _normal_param(rng, (N_SLOTS, c.slot_embed_dim), 0.1)
    p["rec_embed"] = _normal_param(rng, (N_SLOTS, c.slot_embed_dim), 0.1)
    p["in.w"] = _normal_param(rng, (c.trunk_in_dim, h), 1.0 / np.sqrt(c.trunk_in_dim))
    p["in.b"] = _zero_param((h,))
    p["cond.w0"] = _normal_param(rng, (c.cond_dim, h), 1.0 / np.sqrt(c.cond_dim))
    p["cond.b0"] = _zero_param((h,))
    p["cond.w1"] = _normal_param(rng, (h, h), 1.0 / np.sqrt(h))
    p["cond.b1"] = _zero_param((h,))
    for i in range(c.num_blocks):
        p.update(init_film(h, h, prefix=f"blk{i}.film."))
        p[f"blk{i}.w1"] = _normal_param(rng, (h, h), 1.0 / np.sqrt(h))
        p[f"blk{i}.b1"] = _zero_param((h,))
        p[f"blk{i}.w2"] = _normal_param(rng, (h, h), 1.0 / np.sqrt(h))
        p[f"blk{i}.b2"] = _zero_param((h,))
    p["out.w"] = _zero_param((h, c.trunk_in_dim))
    p["out.b"] = _zero_param((c.trunk_in_dim,))
    return NoisePredictor(config=config, params=p)


def predict_noise(model: NoisePredictor, z, ks: np.ndarray, obs: np.ndarray,
                  instruction_ids: np.ndarray) -> Tensor:
    """Predicted noise for a batch of noisy latents at integer steps ks."""
    c, p = model.config, model.params
    z_t = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    ids = np.asarray(instruction_ids, dtype=np.int64)
    obj_e = gather_rows(p["obj_embed"], ids // N_SLOTS)
    rec_e = gather_rows(p["rec_embed"], ids % N_SLOTS)
    t_e = Tensor(timestep_embed_batch(np.asarray(ks), c.time_embed_dim))
    cond = concat([Tensor(np.asarray(obs, dtype=np.float64)), obj_e, rec_e, t_e], axis=1)
    cond = linear(cond, p["cond.w0"], p["cond.b0"])
    cond = gelu(cond)
    cond = linear(cond, p["cond.w1"], p["cond.b1"])
    if c.tokenwise:
        z_t = reshape(z_t, (z_t.shape[0], c.num_tokens, c.trunk_in_dim))
    x = linear(z_t, p["in.w"], p["in.b"])
    for i in range(c.num_blocks):
        h = layer_norm(x)
        h = film_modulate(h, cond, p, prefix=f"blk{i}.film.")
        h = linear(h, p[f"blk{i}.w1"], p[f"blk{i}.b1"])
        h = gelu(h)
        h = linear(h, p[f"blk{i}.w2"], p[f"blk{i}.b2"])
        x = add(x, h)
    out = linear(layer_norm(x), p["out.w"], p["out.b"])
    if c.tokenwise:
        out = reshape(out, (out.shape[0], c.latent_dim))
    return out


def ddim_sample(model: NoisePredictor, schedule: NoiseSchedule, obs: np.ndarray,
                instruction_ids: np.ndarray, rng: RngStream | None = None,
                z_init: np.ndarray | None = None, sample_steps: int | None = None,
                eta: float | None = None) -> np.ndarray:
    """Deterministic (eta = 0) or stochastic DDIM sampling, descending the
    retained steps and exiting through the clean anchor."""
    c = model.config
    n = np.asarray(obs).shape[0]
    if eta is None:
        eta = c.eta
    if z_init is None:
        if rng is None:
            raise ValueError("need rng when z_init is not given")
        z = rng.normal((n, c.latent_dim))
    else:
        z = np.asarray(z_init, dtype=np.float64).copy()
    if eta > 0.0 and rng is None:
        raise ValueError("need rng when eta > 0")
    steps = ddim_step_indices(schedule.num_steps, sample_steps or c.sample_steps)
    for pos in range(len(steps) - 1, -1, -1):
        k = int(steps[pos])
        ab = schedule.alpha_bar(k)
        ab_prev = schedule.alpha_bar(int(steps[pos - 1])) if pos > 0 else float(schedule.alpha_bars[0])
        eps_hat = predict_noise(model, z, np.full(n, k), obs, instruction_ids).data
        sigma = 0.0
        noise = None
        if eta > 0.0:
            sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
            noise = rng.normal((n, c.latent_dim))
        z = ddim_update(z, eps_hat, ab, ab_prev, sigma, noise)
    return z


def stage2_train_step(model: NoisePredictor, schedule: NoiseSchedule, z0: np.ndarray,
                      obs: np.ndarray, instruction_ids: np.ndarray, names: list[str],
                      adam: AdamState, lr: float, rng: RngStream) -> float:
    """One denoising-MSE step: random steps and noise per element, loss is the
    per-element mean squared error of the noise prediction."""
    n = z0.shape[0]
    ks = np.array([rng.integers(0, schedule.num_steps) for _ in range(n)], dtype=np.int64)
    eps = rng.normal(z0.shape)
    z_k = add_noise_batch(schedule, z0, eps, ks)
    with Tape() as tape:
        pred = predict_noise(model, z_k, ks, obs, instruction_ids)
        diff = sub(pred, Tensor(eps))
        loss = reduce_mean(mul(diff, diff))
        grads = tape.gradients(loss, [model.params[nm] for nm in names])
    adam_step([model.params[nm] for nm in names], grads, adam, lr)
    return float(loss.data)
