"""Checkpoints, policy inference, and environment rollouts.

A checkpoint is a directory holding manifest.json plus tensors.bin with all
parameters as little-endian float32 blobs, each with its own CRC32. Saving
first rounds the live parameters to float32-representable values, so
inference before saving and after reloading is bitwise identical.

Policy inference samples a latent with DDIM, snaps each token to its nearest
codebook entry, decodes the action chunk, and denormalizes. The baseline
denoises flattened action chunks directly. Rollouts execute chunks with a
receding horizon, re-planning every n_exec steps.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import RngStream, Tensor
from .bench import (
    Demonstration,
    TaskSpec,
    detect_mode,
    env_reset,
    env_step,
    state_to_vec,
    success_check,
    task_roster,
)
from .data import ChunkBatch, NormStats, chunk_inventory, instruction_map
from .diffusion import (
    DiffusionConfig,
    NoisePredictor,
    NoiseSchedule,
    build_schedule,
    ddim_sample,
)
from .vae import ActionVae, VaeConfig, decode_batch, encode_to_codes
from .vq import Codebook, nearest_indices

CHECKPOINT_VERSION = 1
KINDS = ("vae", "policy", "baseline")


class CheckpointFormatError(ValueError):
    """Structural problem with a checkpoint directory."""


class CheckpointVersionError(CheckpointFormatError):
    pass


class CheckpointCorruptError(CheckpointFormatError):
    pass


@dataclass
class PolicyCheckpoint:
    kind: str
    stats: NormStats
    vae: ActionVae | None = None
    model: NoisePredictor | None = None
    schedule: NoiseSchedule | None = None
    roster_size: int = 0
    seed: int = 0
    latent_mean: np.ndarray | None = None
    latent_std: np.ndarray | None = None
    run_config: dict | None = None


def _round_f32(t: Tensor) -> None:
    t.data = t.data.astype(np.float32).astype(np.float64)


def _collect_tensors(ckpt: PolicyCheckpoint) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    if ckpt.vae is not None:
        for name, t in ckpt.vae.params.items():
            out[f"vae.{name}"] = t
        out["vae.codebook"] = ckpt.vae.codebook.entries
    if ckpt.model is not None:
        for name, t in ckpt.model.params.items():
            out[f"ldm.{name}"] = t
    return out


def save_checkpoint(out_dir: str | Path, ckpt: PolicyCheckpoint) -> None:
    """Rounds live parameters to float32 in place, then writes the directory."""
    if ckpt.kind not in KINDS:
        raise CheckpointFormatError(f"unknown checkpoint kind {ckpt.kind!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = _collect_tensors(ckpt)
    for t in tensors.values():
        _round_f32(t)
    records = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        blob = tensors[name].data.astype("<f4").tobytes()
        records.append({"name": name, "shape": list(tensors[name].shape),
                        "offset": offset, "nbytes": len(blob),
                        "crc32": zlib.crc32(blob)})
        blobs.append(blob)
        offset += len(blob)
    schedule_constants = None
    if ckpt.schedule is not None:
        schedule_constants = {"kind": ckpt.schedule.kind,
                              "betas": ckpt.schedule.betas.tolist(),
                              "alpha_bars": ckpt.schedule.alpha_bars.tolist()}
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": ckpt.kind,
        "seed": ckpt.seed,
        "roster_size": ckpt.roster_size,
        "norm_stats": ckpt.stats.to_dict(),
        "vae_config": asdict(ckpt.vae.config) if ckpt.vae is not None else None,
        "diffusion_config": asdict(ckpt.model.config) if ckpt.model is not None else None,
        "schedule_constants": schedule_constants,
        "latent_mean": None if ckpt.latent_mean is None else ckpt.latent_mean.tolist(),
        "latent_std": None if ckpt.latent_std is None else ckpt.latent_std.tolist(),
        "run_config": ckpt.run_config,
        "tensors": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    (out / "tensors.bin").write_bytes(b"".join(blobs))


def load_checkpoint(in_dir: str | Path) -> PolicyCheckpoint:
    path = Path(in_dir)
    mpath, tpath = path / "manifest.json", path / "tensors.bin"
    if not mpath.exists() or not tpath.exists():
        raise FileNotFoundError(f"checkpoint directory {path} missing manifest.json or tensors.bin")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"unreadable manifest: {e}")
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format_version {manifest.get('format_version')} not supported")
    kind = manifest.get("kind")
    if kind not in KINDS:
        raise CheckpointFormatError(f"unknown checkpoint kind {kind!r}")
    raw = tpath.read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for rec in manifest["tensors"]:
        blob = raw[rec["offset"]: rec["offset"] + rec["nbytes"]]
        if len(blob) != rec["nbytes"]:
            raise CheckpointCorruptError(f"tensor {rec['name']} is truncated")
        if zlib.crc32(blob) != rec["crc32"]:
            raise CheckpointCorruptError(f"tensor {rec['name']} failed its checksum")
        arrays[rec["name"]] = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(rec["shape"])

    stats = NormStats.from_dict(manifest["norm_stats"])
    vae = None
    if manifest["vae_config"] is not None:
        vcfg = VaeConfig(**manifest["vae_config"])
        params = {k[len("vae."):]: Tensor(v, requires_grad=True)
                  for k, v in arrays.items()
                  if k.startswith("vae.") and k != "vae.codebook"}
        codebook = Codebook(entries=Tensor(arrays["vae.codebook"], requires_grad=True),
                            usage=np.zeros(vcfg.num_codes, dtype=np.int64))
        vae = ActionVae(config=vcfg, params=params, codebook=codebook)
    model = None
    schedule = None
    if manifest["diffusion_config"] is not None:
        dcfg = DiffusionConfig(**manifest["diffusion_config"])
        params = {k[len("ldm."):]: Tensor(v, requires_grad=True)
                  for k, v in arrays.items() if k.startswith("ldm.")}
        model = NoisePredictor(config=dcfg, params=params)
        sc = manifest.get("schedule_constants")
        if sc is not None:
            betas = np.array(sc["betas"], dtype=np.float64)
            schedule = NoiseSchedule(kind=sc["kind"], betas=betas, alphas=1.0 - betas,
                                     alpha_bars=np.array(sc["alpha_bars"], dtype=np.float64))
        else:
            schedule = build_schedule(dcfg.schedule, dcfg.num_steps)
    lm = manifest.get("latent_mean")
    ls = manifest.get("latent_std")
    return PolicyCheckpoint(
        kind=kind, stats=stats, vae=vae, model=model, schedule=schedule,
        roster_size=manifest.get("roster_size", 0), seed=manifest.get("seed", 0),
        latent_mean=None if lm is None else np.array(lm, dtype=np.float64),
        latent_std=None if ls is None else np.array(ls, dtype=np.float64),
        run_config=manifest.get("run_config"))


# -------------------------------------------------------------- inference


def snap_tokens(codebook: Codebook, z_tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codebook entry per token. (B, m, f) -> (quantized, indices)."""
    b, m, f = z_tokens.shape
    idx = nearest_indices(codebook.entries.data, z_tokens.reshape(-1, f))
    return codebook.entries.data[idx].reshape(b, m, f), idx.reshape(b, m)


def infer_chunks(ckpt: PolicyCheckpoint, obs: np.ndarray, instruction_ids: np.ndarray,
                 rng: RngStream | None = None, z_init: np.ndarray | None = None) -> np.ndarray:
    """Raw action chunks (B, horizon, action_dim) for a batch of observations."""
    if ckpt.model is None:
        raise ValueError(f"checkpoint kind {ckpt.kind!r} cannot run inference")
    obs = np.asarray(obs, dtype=np.float64)
    ids = np.asarray(instruction_ids, dtype=np.int64)
    sampled = ddim_sample(ckpt.model, ckpt.schedule, obs, ids, rng=rng, z_init=z_init)
    if ckpt.kind == "baseline":
        chunks = sampled.reshape(obs.shape[0], -1, len(ckpt.stats.lo))
        return ckpt.stats.denormalize(chunks)
    if ckpt.model.config.standardize_latents:
        if ckpt.latent_mean is None or ckpt.latent_std is None:
            raise ValueError("checkpoint standardizes latents but lacks the statistics")
        sampled = sampled * ckpt.latent_std + ckpt.latent_mean
    vcfg = ckpt.vae.config
    z_tokens = sampled.reshape(obs.shape[0], vcfg.num_tokens, vcfg.code_dim)
    z_q, idx = snap_tokens(ckpt.vae.codebook, z_tokens)
    np.add.at(ckpt.vae.codebook.usage, idx.ravel(), 1)
    decoded = decode_batch(ckpt.vae, Tensor(z_q), obs, ids).data
    return ckpt.stats.denormalize(decoded)


def _obs_from_state(state) -> np.ndarray:
    v = state_to_vec(state)
    return np.array([v[0], v[1], v[4], v[5], v[6]])


@dataclass
class RolloutLog:
    task_id: int
    episode: int
    success: bool
    steps: int
    mode: str
    states: np.ndarray  # (T + 1, STATE_DIM)


def run_episodes(ckpt: PolicyCheckpoint, task: TaskSpec, n_episodes: int, seed: int,
                 n_exec: int = 8, max_steps: int = 120) -> list[RolloutLog]:
    """Lockstep batched rollouts: one DDIM call plans chunks for every episode
    still running, then each executes n_exec actions."""
    root = RngStream(seed)
    states = [env_reset(task, root.derive_child(e)) for e in range(n_episodes)]
    histories = [[state_to_vec(s)] for s in states]
    done = [success_check(task, s) for s in states]
    plan_round = 0
    while not all(done) and plan_round * n_exec < max_steps:
        alive = [e for e in range(n_episodes) if not done[e]]
        obs = np.stack([_obs_from_state(states[e]) for e in alive])
        ids = np.full(len(alive), task.instruction_id, dtype=np.int64)
        plan_rng = root.derive_child(10_000 + plan_round)
        chunks = infer_chunks(ckpt, obs, ids, rng=plan_rng)
        for row, e in enumerate(alive):
            for a in chunks[row][:n_exec]:
                states[e] = env_step(states[e], a)
                histories[e].append(state_to_vec(states[e]))
                if success_check(task, states[e]):
                    done[e] = True
                    break
        plan_round += 1
    logs = []
    for e in range(n_episodes):
        hist = np.array(histories[e])
        logs.append(RolloutLog(
            task_id=task.task_id, episode=e, success=bool(done[e]),
            steps=hist.shape[0] - 1, mode=detect_mode(task, hist[:, 0:2]),
            states=hist))
    return logs


def rollout(ckpt: PolicyCheckpoint, task: TaskSpec, seed: int,
            n_exec: int = 8, max_steps: int = 120) -> RolloutLog:
    return run_episodes(ckpt, task, 1, seed, n_exec=n_exec, max_steps=max_steps)[0]


def success_rate(logs: list[RolloutLog]) -> float:
    return float(np.mean([log.success for log in logs])) if logs else 0.0


# ----------------------------------------------------------------- export


def pca_2d(z: np.ndarray) -> np.ndarray:
    """Two principal-component coordinates with a deterministic sign choice."""
    centered = z - z.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i in range(2):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def export_latents(ckpt: PolicyCheckpoint, demos: list[Demonstration],
                   out_path: str | Path, stride: int | None = None,
                   pca2: bool = False) -> int:
    """CSV of encoder latents over non-overlapping chunks of every demo.

    Columns: task_id, one code index per token, the flattened pre-quantization
    latent, and optionally two principal-component coordinates. Returns the
    row count.
    """
    if ckpt.vae is None:
        raise ValueError(f"checkpoint kind {ckpt.kind!r} has no chunk autoencoder")
    if not demos:
        raise ValueError("empty dataset: nothing to export")
    cfg = ckpt.vae.config
    if stride is None:
        stride = cfg.horizon
    imap = instruction_map(task_roster(12))
    inventory = chunk_inventory(demos, ckpt.stats, imap, cfg.horizon, stride)
    n = inventory.actions.shape[0]
    zs, codes = [], []
    for i in range(0, n, 512):
        sl = ChunkBatch(actions=inventory.actions[i:i + 512],
                        proprio=inventory.proprio[i:i + 512],
                        obs=inventory.obs[i:i + 512],
                        instruction_ids=inventory.instruction_ids[i:i + 512],
                        task_ids=inventory.task_ids[i:i + 512])
        z, idx = encode_to_codes(ckpt.vae, sl)
        zs.append(z.reshape(z.shape[0], -1))
        codes.append(idx)
    z_flat = np.concatenate(zs, axis=0)
    code_idx = np.concatenate(codes, axis=0)
    coords = pca_2d(z_flat) if pca2 else None

    header = ["task_id"]
    header += [f"code_{j}" for j in range(cfg.num_tokens)]
    header += [f"z_{j}" for j in range(cfg.num_tokens * cfg.code_dim)]
    if pca2:
        header += ["pca_x", "pca_y"]
    lines = [",".join(header)]
    for r in range(n):
        cells = [str(int(inventory.task_ids[r]))]
        cells += [str(int(c)) for c in code_idx[r]]
        cells += [f"{v:.8g}" for v in z_flat[r]]
        if coords is not None:
            cells += [f"{coords[r, 0]:.8g}", f"{coords[r, 1]:.8g}"]
        lines.append(",".join(cells))
    Path(out_path).write_text("\n".join(lines) + "\n")
    return n
