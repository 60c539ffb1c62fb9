"""Chunked training data on top of the demonstration format.

Action chunks are fixed-length windows of consecutive expert actions paired
with the agent position at every step, normalized per dimension to [-1, 1].
Each chunk carries the observation at its first step: agent position, object
position, and the attachment flag, plus the task's instruction id. Windows
that run past the end of a demonstration are padded with zero (hold-still)
actions and a frozen final pose.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import RngStream
from .bench import ACTION_DIM, Demonstration, TaskSpec

OBS_DIM = 5  # [agent_x, agent_y, obj_x, obj_y, attached]
PROPRIO_DIM = 2  # agent xy per chunk step


@dataclass(frozen=True)
class NormStats:
    """Per-dimension min-max bounds mapping raw actions and proprio onto
    [-1, 1]. Observation features stay raw; the workspace already bounds
    them, recorded by the scheme tag."""

    lo: np.ndarray  # (ACTION_DIM,)
    hi: np.ndarray  # (ACTION_DIM,)
    proprio_lo: np.ndarray  # (PROPRIO_DIM,)
    proprio_hi: np.ndarray  # (PROPRIO_DIM,)
    scheme: str = "minmax-actions-proprio"

    @classmethod
    def from_demos(cls, demos: list[Demonstration]) -> "NormStats":
        if not demos:
            raise ValueError("cannot fit normalization to an empty demo list")
        stacked = np.concatenate([d.actions for d in demos], axis=0)
        poses = np.concatenate([d.states[:, :PROPRIO_DIM] for d in demos], axis=0)
        def bounds(x):
            lo, hi = x.min(axis=0), x.max(axis=0)
            widen = np.maximum(1e-6 - (hi - lo), 0.0) / 2.0  # floor degenerate ranges
            return lo - widen, hi + widen
        lo, hi = bounds(stacked)
        plo, phi = bounds(poses)
        return cls(lo=lo, hi=hi, proprio_lo=plo, proprio_hi=phi)

    def normalize(self, actions: np.ndarray) -> np.ndarray:
        return 2.0 * (actions - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize(self, normalized: np.ndarray) -> np.ndarray:
        return (normalized + 1.0) / 2.0 * (self.hi - self.lo) + self.lo

    def normalize_proprio(self, proprio: np.ndarray) -> np.ndarray:
        return 2.0 * (proprio - self.proprio_lo) / (self.proprio_hi - self.proprio_lo) - 1.0

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(),
                "proprio_lo": self.proprio_lo.tolist(),
                "proprio_hi": self.proprio_hi.tolist(),
                "scheme": self.scheme}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(lo=np.array(d["lo"], dtype=np.float64),
                   hi=np.array(d["hi"], dtype=np.float64),
                   proprio_lo=np.array(d["proprio_lo"], dtype=np.float64),
                   proprio_hi=np.array(d["proprio_hi"], dtype=np.float64),
                   scheme=d.get("scheme", "minmax-actions-proprio"))


def instruction_map(roster: list[TaskSpec]) -> dict[int, int]:
    return {t.task_id: t.instruction_id for t in roster}


def observation_at(demo: Demonstration, offset: int) -> np.ndarray:
    """Observation features at a step: agent xy, object xy, attachment."""
    v = demo.states[offset]
    return np.array([v[0], v[1], v[4], v[5], v[6]])


def extract_chunk(demo: Demonstration, offset: int, horizon: int) -> np.ndarray:
    """Raw action window of the given horizon starting at offset, zero-padded
    past the end of the demonstration."""
    if not 0 <= offset < demo.length:
        raise ValueError(f"offset {offset} outside demo of length {demo.length}")
    chunk = np.zeros((horizon, ACTION_DIM))
    avail = min(horizon, demo.length - offset)
    chunk[:avail] = demo.actions[offset: offset + avail]
    return chunk


def extract_proprio(demo: Demonstration, offset: int, horizon: int) -> np.ndarray:
    """Raw agent-position window aligned with extract_chunk. Past the end of
    the demonstration the final pose repeats (zero action, frozen pose)."""
    if not 0 <= offset < demo.length:
        raise ValueError(f"offset {offset} outside demo of length {demo.length}")
    avail = min(horizon, demo.length - offset)
    window = np.empty((horizon, PROPRIO_DIM))
    window[:avail] = demo.states[offset: offset + avail, :PROPRIO_DIM]
    window[avail:] = demo.states[demo.length, :PROPRIO_DIM]
    return window


@dataclass
class ChunkBatch:
    actions: np.ndarray  # (B, horizon, ACTION_DIM), normalized
    proprio: np.ndarray  # (B, horizon, PROPRIO_DIM), normalized
    obs: np.ndarray  # (B, OBS_DIM)
    instruction_ids: np.ndarray  # (B,) int64
    task_ids: np.ndarray  # (B,) int64
    origins: np.ndarray | None = None  # (B, 2) demo index, offset

    def __len__(self) -> int:
        return self.actions.shape[0]


def _assemble(demos, picks, stats, instr_by_task, horizon) -> ChunkBatch:
    actions = np.stack([stats.normalize(extract_chunk(demos[i], off, horizon))
                        for i, off in picks])
    proprio = np.stack([stats.normalize_proprio(extract_proprio(demos[i], off, horizon))
                        for i, off in picks])
    obs = np.stack([observation_at(demos[i], off) for i, off in picks])
    task_ids = np.array([demos[i].task_id for i, _ in picks], dtype=np.int64)
    instr = np.array([instr_by_task[t] for t in task_ids], dtype=np.int64)
    return ChunkBatch(actions=actions, proprio=proprio, obs=obs,
                      instruction_ids=instr, task_ids=task_ids,
                      origins=np.array(picks, dtype=np.int64).reshape(len(picks), 2))


def sample_chunk_batch(demos: list[Demonstration], stats: NormStats,
                       instr_by_task: dict[int, int], batch_size: int,
                       horizon: int, rng: RngStream) -> ChunkBatch:
    """Uniformly random (demo, offset) pairs. Offsets cover every step of the
    chosen demo, so late windows carry zero padding."""
    idx = rng.integers(0, len(demos), (batch_size,))
    picks = []
    for i in idx:
        off = rng.integers(0, demos[int(i)].length)
        picks.append((int(i), off))
    return _assemble(demos, picks, stats, instr_by_task, horizon)


def chunk_inventory(demos: list[Demonstration], stats: NormStats,
                    instr_by_task: dict[int, int], horizon: int,
                    stride: int) -> ChunkBatch:
    """Deterministic strided chunk set over all demos, in demo order. Used to
    precompute latents once the chunk encoder is frozen, and for export."""
    picks = [(i, off) for i, d in enumerate(demos) for off in range(0, d.length, stride)]
    return _assemble(demos, picks, stats, instr_by_task, horizon)
