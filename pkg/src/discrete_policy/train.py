"""Training loops for both stages and the action-space baseline.

Stage 1 fits the quantized chunk autoencoder on randomly sampled windows.
Stage 2 freezes it, encodes a fixed strided chunk inventory once, and fits
the latent noise predictor on those precomputed latents; the autoencoder's
parameters are never touched again. The baseline reuses the same predictor
architecture directly over flattened normalized action chunks and is given
the summed step budget of both stages.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, RngStream, init_adam
from .bench import Demonstration, TaskSpec
from .data import ChunkBatch, NormStats, chunk_inventory, instruction_map, sample_chunk_batch
from .diffusion import (
    DiffusionConfig,
    NoisePredictor,
    NoiseSchedule,
    build_schedule,
    init_noise_predictor,
    stage2_train_step,
)
from .vae import (
    ActionVae,
    VaeConfig,
    encode_to_codes,
    init_vae,
    reconstruct_eval,
    stage1_train_step,
    trainable_params,
)
from .vq import reinit_dead_codes, reset_usage

REINIT_EVERY = 250
RING_BATCHES = 8


def _lr_at(step: int, total: int, base: float) -> float:
    """Step schedule: base, then 0.3x / 0.1x / 0.03x at 50% / 72% / 88%.

    The low phases matter for the L1 reconstruction term, whose sign-based
    gradients keep bouncing around the floor at higher rates; each drop buys
    a visible step-change in the plateau.
    """
    if step <= int(0.50 * total):
        return base
    if step <= int(0.72 * total):
        return 0.3 * base
    if step <= int(0.88 * total):
        return 0.1 * base
    return 0.03 * base


@dataclass
class Stage1Result:
    vae: ActionVae
    stats: NormStats
    metrics: list[dict]
    elapsed_s: float = 0.0


def train_stage1(demos: list[Demonstration], roster: list[TaskSpec],
                 config: VaeConfig, steps: int, batch_size: int, lr: float,
                 seed: int, log_every: int = 50,
                 eval_batch_size: int = 512, eval_every: int = 0) -> Stage1Result:
    stats = NormStats.from_demos(demos)
    imap = instruction_map(roster)
    root = RngStream(seed)
    vae = init_vae(config, root.derive_child(0))
    names = sorted(trainable_params(vae))
    adam = init_adam([trainable_params(vae)[n] for n in names])
    reinit_rng = root.derive_child(2)
    eval_batch = sample_chunk_batch(demos, stats, imap, eval_batch_size,
                                    config.horizon, root.derive_child(3))
    metrics: list[dict] = []
    ring: list[np.ndarray] = []
    t0 = time.time()
    for step in range(1, steps + 1):
        batch = sample_chunk_batch(demos, stats, imap, batch_size,
                                   config.horizon, root.derive_child(1000 + step))
        try:
            rep = stage1_train_step(vae, batch, names, adam, _lr_at(step, steps, lr))
        except NonFiniteError as e:
            e.last_good_step = step - 1
            raise
        ring.append(rep.z_flat)
        if len(ring) > RING_BATCHES:
            ring.pop(0)
        entry = {"stage": 1, "step": step, "recon": rep.recon, "quant": rep.quant,
                 "commit": rep.commit, "total": rep.total}
        if step % REINIT_EVERY == 0 and step <= int(0.72 * steps):
            # No reinit during the low-rate phases: re-seeded codes steal
            # assignments and churn the reconstruction right when the
            # optimizer is settling.
            entry["reinitialized_codes"] = reinit_dead_codes(
                vae.codebook, np.concatenate(ring, axis=0), reinit_rng)
            reset_usage(vae.codebook)
        if eval_every > 0 and step % eval_every == 0 and step != steps:
            # Restore the usage histogram afterwards so evaluation cadence
            # cannot influence which codes the reinit pass sees as dead.
            saved_usage = vae.codebook.usage.copy()
            mid = reconstruct_eval(vae, eval_batch)
            vae.codebook.usage[:] = saved_usage
            entry["eval_l1"] = mid["mean_l1"]
            entry["eval_perplexity"] = mid["perplexity"]
        if step % log_every == 0 or step == steps:
            metrics.append(entry)
    ev = reconstruct_eval(vae, eval_batch)
    metrics[-1].update({"eval_l1": ev["mean_l1"],
                        "eval_perplexity": ev["perplexity"],
                        "per_task_l1": ev["per_task_l1"]})
    return Stage1Result(vae=vae, stats=stats, metrics=metrics,
                        elapsed_s=time.time() - t0)


@dataclass
class LatentInventory:
    z0: np.ndarray  # (N, num_tokens * code_dim) flattened quantized latents
    obs: np.ndarray  # (N, OBS_DIM)
    instruction_ids: np.ndarray  # (N,)
    task_ids: np.ndarray  # (N,)
    code_indices: np.ndarray  # (N, num_tokens)
    origins: np.ndarray | None = None  # (N, 2) demo index, offset


def precompute_latents(vae: ActionVae, demos: list[Demonstration], stats: NormStats,
                       roster: list[TaskSpec], stride: int = 8,
                       chunk_size: int = 512) -> LatentInventory:
    """Encode a strided chunk inventory once; the frozen encoder makes this a
    pure preprocessing pass."""
    imap = instruction_map(roster)
    inv = chunk_inventory(demos, stats, imap, vae.config.horizon, stride)
    zs, idxs = [], []
    for start in range(0, len(inv), chunk_size):
        sl = slice(start, start + chunk_size)
        _, idx = encode_to_codes(vae, ChunkBatch(
            actions=inv.actions[sl], proprio=inv.proprio[sl], obs=inv.obs[sl],
            instruction_ids=inv.instruction_ids[sl], task_ids=inv.task_ids[sl]))
        # diffusion runs on the quantized embedding, so the targets are the
        # selected codebook rows, not the raw encoder outputs
        zq = vae.codebook.entries.data[idx]
        zs.append(zq.reshape(zq.shape[0], -1))
        idxs.append(idx)
    return LatentInventory(
        z0=np.concatenate(zs, axis=0),
        obs=inv.obs,
        instruction_ids=inv.instruction_ids,
        task_ids=inv.task_ids,
        code_indices=np.concatenate(idxs, axis=0),
        origins=inv.origins,
    )


@dataclass
class Stage2Result:
    model: NoisePredictor
    schedule: NoiseSchedule
    metrics: list[dict]
    inventory: LatentInventory
    latent_mean: np.ndarray | None = None
    latent_std: np.ndarray | None = None
    elapsed_s: float = 0.0


def train_stage2(vae: ActionVae, demos: list[Demonstration], stats: NormStats,
                 roster: list[TaskSpec], dconfig: DiffusionConfig, steps: int,
                 batch_size: int, lr: float, seed: int, stride: int = 8,
                 log_every: int = 50) -> Stage2Result:
    expected = vae.config.num_tokens * vae.config.code_dim
    if dconfig.latent_dim != expected:
        raise ValueError(f"latent_dim {dconfig.latent_dim} != encoder output {expected}")
    inventory = precompute_latents(vae, demos, stats, roster, stride=stride)
    z0 = inventory.z0
    latent_mean = latent_std = None
    if dconfig.standardize_latents:
        latent_mean = z0.mean(axis=0)
        latent_std = np.maximum(z0.std(axis=0), 1e-6)
        z0 = (z0 - latent_mean) / latent_std
    root = RngStream(seed)
    model = init_noise_predictor(dconfig, root.derive_child(0))
    schedule = build_schedule(dconfig.schedule, dconfig.num_steps)
    names = sorted(model.params)
    adam = init_adam([model.params[n] for n in names])
    n = z0.shape[0]
    metrics: list[dict] = []
    t0 = time.time()
    for step in range(1, steps + 1):
        srng = root.derive_child(1000 + step)
        rows = srng.integers(0, n, (batch_size,))
        try:
            loss = stage2_train_step(
                model, schedule, z0[rows], inventory.obs[rows],
                inventory.instruction_ids[rows], names, adam,
                _lr_at(step, steps, lr), srng.derive_child(1))
        except NonFiniteError as e:
            e.last_good_step = step - 1
            raise
        if step % log_every == 0 or step == steps:
            metrics.append({"stage": 2, "step": step, "denoise_mse": loss})
    return Stage2Result(model=model, schedule=schedule, metrics=metrics,
                        inventory=inventory, latent_mean=latent_mean,
                        latent_std=latent_std, elapsed_s=time.time() - t0)


@dataclass
class BaselineResult:
    model: NoisePredictor
    schedule: NoiseSchedule
    stats: NormStats
    metrics: list[dict]
    elapsed_s: float = 0.0


def train_baseline(demos: list[Demonstration], roster: list[TaskSpec],
                   dconfig: DiffusionConfig, horizon: int, steps: int,
                   batch_size: int, lr: float, seed: int,
                   log_every: int = 50) -> BaselineResult:
    """Action-space diffusion policy: same predictor and schedule, denoising
    flattened normalized action chunks instead of latents."""
    expected = horizon * demos[0].actions.shape[1]
    if dconfig.latent_dim != expected:
        raise ValueError(f"latent_dim {dconfig.latent_dim} != flattened chunk {expected}")
    stats = NormStats.from_demos(demos)
    imap = instruction_map(roster)
    root = RngStream(seed)
    model = init_noise_predictor(dconfig, root.derive_child(0))
    schedule = build_schedule(dconfig.schedule, dconfig.num_steps)
    names = sorted(model.params)
    adam = init_adam([model.params[n] for n in names])
    metrics: list[dict] = []
    t0 = time.time()
    for step in range(1, steps + 1):
        srng = root.derive_child(1000 + step)
        batch = sample_chunk_batch(demos, stats, imap, batch_size, horizon, srng)
        chunks = batch.actions.reshape(batch_size, -1)
        try:
            loss = stage2_train_step(
                model, schedule, chunks, batch.obs, batch.instruction_ids,
                names, adam, _lr_at(step, steps, lr), srng.derive_child(1))
        except NonFiniteError as e:
            e.last_good_step = step - 1
            raise
        if step % log_every == 0 or step == steps:
            metrics.append({"stage": "baseline", "step": step, "denoise_mse": loss})
    return BaselineResult(model=model, schedule=schedule, stats=stats, metrics=metrics,
                          elapsed_s=time.time() - t0)
