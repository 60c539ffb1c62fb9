"""Vector-quantized chunk autoencoder.

The encoder maps a normalized action chunk plus the per-step agent pose to
num_tokens continuous latents of code_dim each, with no access to the task:
a small transformer over per-step projections followed by a learned-query
readout. Each latent token snaps to its nearest entry in a shared codebook.
The decoder cross-attends from per-step queries to the quantized tokens plus
one observation token, with FiLM conditioning on observation and instruction
slot embeddings, and reads out the reconstructed chunk.

Training combines per-element L1 reconstruction with the two
straight-through codebook terms: the quantization loss moves codes toward
encoder outputs and the commitment loss (weight beta) does the reverse.
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
    l1_distance,
    reshape,
)
from .data import OBS_DIM, PROPRIO_DIM, ChunkBatch
from .nn import (
    TransformerSpec,
    _normal_param,
    _zero_param,
    film_modulate,
    init_film,
    init_transformer,
    linear,
    transformer_forward,
)
from .vq import Codebook, init_codebook, perplexity, quantize, vq_losses

N_SLOTS = 8  # rows in each instruction slot table


@dataclass(frozen=True)
class VaeConfig:
    horizon: int = 32
    action_dim: int = 2
    proprio_dim: int = PROPRIO_DIM
    obs_dim: int = OBS_DIM
    num_tokens: int = 8
    code_dim: int = 128
    num_codes: int = 1024
    beta: float = 1.0
    hidden_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    slot_embed_dim: int = 16

    @property
    def cond_dim(self) -> int:
        return self.obs_dim + 2 * self.slot_embed_dim

    def transformer_spec(self) -> TransformerSpec:
        return TransformerSpec(
            hidden_dim=self.hidden_dim,
            num_heads=self.num_heads,
            ff_dim=self.ff_dim,
            num_encoder_layers=self.enc_layers,
            num_decoder_layers=self.dec_layers,
        )


@dataclass
class ActionVae:
    config: VaeConfig
    params: dict[str, Tensor]
    codebook: Codebook


def init_vae(config: VaeConfig, rng: RngStream) -> ActionVae:
    c = config
    spec = c.transformer_spec()
    h = c.hidden_dim
    p: dict[str, Tensor] = {}
    enc_in = c.action_dim + c.proprio_dim
    p["enc.in.w"] = _normal_param(rng, (enc_in, h), 1.0 / np.sqrt(enc_in))
    p["enc.in.b"] = _zero_param((h,))
    p["enc.pos"] = _normal_param(rng, (c.horizon, h), 0.1)
    p.update(init_transformer(spec, rng, prefix="enc.tr."))
    p["enc.query"] = _normal_param(rng, (c.num_tokens, h), 0.1)
    # small output scale keeps initial latents near the codebook's init range
    p["enc.out.w"] = _normal_param(rng, (h, c.code_dim), 0.1 / np.sqrt(h))
    p["enc.out.b"] = _zero_param((c.code_dim,))

    p["dec.z_in.w"] = _normal_param(rng, (c.code_dim, h), 1.0 / np.sqrt(c.code_dim))
    p["dec.z_in.b"] = _zero_param((h,))
    p["dec.zpos"] = _normal_param(rng, (c.num_tokens, h), 0.1)
    p["obj_embed"] = _normal_param(rng, (N_SLOTS, c.slot_embed_dim), 0.1)
    p["rec_embed"] = _normal_param(rng, (N_SLOTS, c.slot_embed_dim), 0.1)
    p["dec.obs.w"] = _normal_param(rng, (c.cond_dim, h), 1.0 / np.sqrt(c.cond_dim))
    p["dec.obs.b"] = _zero_param((h,))
    p.update(init_film(c.cond_dim, h, prefix="dec.film."))
    p["dec.query"] = _normal_param(rng, (c.horizon, h), 0.1)
    p.update(init_transformer(spec, rng, prefix="dec.tr."))
    p["dec.out.w"] = _normal_param(rng, (h, c.action_dim), 1.0 / np.sqrt(h))
    p["dec.out.b"] = _zero_param((c.action_dim,))
    codebook = init_codebook(c.num_codes, c.code_dim, rng)
    return ActionVae(config=config, params=p, codebook=codebook)


def _tile_queries(q: Tensor, batch: int) -> Tensor:
    rows, dim = q.shape
    return add(reshape(q, (1, rows, dim)), Tensor(np.zeros((batch, rows, dim))))


def encode_batch(vae: ActionVae, actions: Tensor, proprio: Tensor) -> Tensor:
    """(B, horizon, action_dim) normalized actions and (B, horizon,
    proprio_dim) normalized poses -> (B, num_tokens, code_dim)."""
    c, p = vae.config, vae.params
    spec = c.transformer_spec()
    x = linear(concat([actions, proprio], axis=2), p["enc.in.w"], p["enc.in.b"])
    x = add(x, p["enc.pos"])
    enc_out = transformer_forward(spec, p, x, prefix="enc.tr.")
    q = _tile_queries(p["enc.query"], actions.shape[0])
    readout = transformer_forward(spec, p, q, cross_tokens=enc_out, prefix="enc.tr.")
    return linear(readout, p["enc.out.w"], p["enc.out.b"])


def _condition_vector(vae: ActionVae, obs: np.ndarray, instruction_ids: np.ndarray) -> Tensor:
    p = vae.params
    ids = np.asarray(instruction_ids, dtype=np.int64)
    obj_e = gather_rows(p["obj_embed"], ids // N_SLOTS)
    rec_e = gather_rows(p["rec_embed"], ids % N_SLOTS)
    return concat([Tensor(np.asarray(obs, dtype=np.float64)), obj_e, rec_e], axis=1)


def decode_batch(vae: ActionVae, z_tokens: Tensor, obs: np.ndarray,
                 instruction_ids: np.ndarray) -> Tensor:
    """(B, num_tokens, code_dim) latents plus observation/instruction
    conditioning -> (B, horizon, action_dim) normalized actions."""
    c, p = vae.config, vae.params
    spec = c.transformer_spec()
    b = z_tokens.shape[0]
    cond = _condition_vector(vae, obs, instruction_ids)
    obs_tok = reshape(linear(cond, p["dec.obs.w"], p["dec.obs.b"]), (b, 1, c.hidden_dim))
    zt = add(linear(z_tokens, p["dec.z_in.w"], p["dec.z_in.b"]), p["dec.zpos"])
    cross = concat([obs_tok, zt], axis=1)
    q = film_modulate(_tile_queries(p["dec.query"], b), cond, p, prefix="dec.film.")
    out = transformer_forward(spec, p, q, cross_tokens=cross, prefix="dec.tr.")
    return linear(out, p["dec.out.w"], p["dec.out.b"])


def encode_actions(vae: ActionVae, actions_norm: np.ndarray,
                   proprio_norm: np.ndarray) -> np.ndarray:
    """Single-chunk encode, outside any tape."""
    z = encode_batch(vae, Tensor(actions_norm[None]), Tensor(proprio_norm[None]))
    return z.data[0]


def decode_actions(vae: ActionVae, z_tokens: np.ndarray, obs: np.ndarray,
                   instruction_id: int) -> np.ndarray:
    """Single-chunk decode from raw latent tokens, outside any tape."""
    out = decode_batch(vae, Tensor(z_tokens[None]), np.asarray(obs)[None],
                       np.array([instruction_id]))
    return out.data[0]


def trainable_params(vae: ActionVae) -> dict[str, Tensor]:
    return {**vae.params, "codebook": vae.codebook.entries}


@dataclass
class Stage1Report:
    total: float
    recon: float
    quant: float
    commit: float
    indices: np.ndarray  # (B, num_tokens)
    z_flat: np.ndarray  # (B * num_tokens, code_dim) encoder outputs


def stage1_train_step(vae: ActionVae, batch: ChunkBatch, names: list[str],
                      adam: AdamState, lr: float) -> Stage1Report:
    """One optimizer step on reconstruction + quantization + beta * commitment.
    names fixes the parameter order shared with the Adam state."""
    trainable = trainable_params(vae)
    with Tape() as tape:
        actions_t = Tensor(batch.actions)
        z = encode_batch(vae, actions_t, Tensor(batch.proprio))
        zq, indices = quantize(vae.codebook, z)
        recon = decode_batch(vae, zq, batch.obs, batch.instruction_ids)
        recon_loss = l1_distance(recon, actions_t)
        quant_loss, commit_loss = vq_losses(vae.codebook, z, indices, beta=vae.config.beta)
        total = add(add(recon_loss, quant_loss), commit_loss)
        grads = tape.gradients(total, [trainable[n] for n in names])
    adam_step([trainable[n] for n in names], grads, adam, lr)
    return Stage1Report(
        total=float(total.data),
        recon=float(recon_loss.data),
        quant=float(quant_loss.data),
        commit=float(commit_loss.data),
        indices=indices,
        z_flat=z.data.reshape(-1, vae.config.code_dim).copy(),
    )


def encode_to_codes(vae: ActionVae, batch: ChunkBatch) -> tuple[np.ndarray, np.ndarray]:
    """Encoder outputs and their code indices with no gradient bookkeeping."""
    z = encode_batch(vae, Tensor(batch.actions), Tensor(batch.proprio))
    _, indices = quantize(vae.codebook, z)
    return z.data.copy(), indices


def reconstruct_eval(vae: ActionVae, batch: ChunkBatch) -> dict:
    """Reconstruction quality through the quantized bottleneck: overall and
    per-task mean absolute error in normalized action units, plus the batch
    code perplexity."""
    z = encode_batch(vae, Tensor(batch.actions), Tensor(batch.proprio))
    zq, indices = quantize(vae.codebook, z)
    recon = decode_batch(vae, zq, batch.obs, batch.instruction_ids).data
    err = np.abs(recon - batch.actions)
    per_task = {}
    for t in np.unique(batch.task_ids):
        per_task[int(t)] = float(err[batch.task_ids == t].mean())
    counts = np.bincount(indices.ravel(), minlength=vae.config.num_codes)
    return {
        "mean_l1": float(err.mean()),
        "per_task_l1": per_task,
        "perplexity": perplexity(counts),
        "indices": indices,
    }
