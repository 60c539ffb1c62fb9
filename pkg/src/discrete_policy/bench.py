"""Synthetic 2D tabletop benchmark: a kinematic point-mass agent in a unit
workspace, a task roster with obstacle-induced bimodal demonstrations, a
scripted expert, and the demonstration dataset format.

Dynamics: pos' = pos + action * dt with velocity commands in [-1, 1] m/s.
Attachment toggles when the agent is within ATTACH_RADIUS of the object while
commanding a near-zero action; an attached object follows the agent. There is
no collision term: obstacles shape the expert's detours (left/right homotopy
classes), not the physics.

Demonstrations are recorded on the float32 lattice (states and actions are
rounded to float32 after every step), so the float32 dataset files are
lossless and open-loop replay reproduces the recorded states exactly.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .autodiff import RngStream

DT = 0.05
WORKSPACE_MARGIN = 0.1
ATTACH_RADIUS = 0.03
ATTACH_MAX_SPEED = 0.1
ACTION_JITTER_SIGMA = 0.02
EXPERT_SPEED = 0.45
DETOUR_CLEARANCE = 0.10
STATE_DIM = 7  # [agent_x, agent_y, vel_x, vel_y, obj_x, obj_y, attached]
ACTION_DIM = 2

N_OBJECT_SLOTS = 8
N_RECEPTACLE_SLOTS = 8
OBJECT_NAMES = ["ball", "block", "can", "cup", "gripper", "toy", "plate", "peg"]
RECEPTACLE_NAMES = ["holder", "drawer", "box", "tray", "bin", "shelf", "crate", "slot"]


class DatasetFormatError(ValueError):
    """Raised when a dataset directory fails structural validation."""


class IncompatibleSkillError(ValueError):
    """Raised when two tasks cannot be composed."""


@dataclass(frozen=True)
class Region:
    lo: tuple[float, float]
    hi: tuple[float, float]

    def contains(self, p) -> bool:
        # boundary-inclusive on every edge
        return bool(self.lo[0] <= p[0] <= self.hi[0] and self.lo[1] <= p[1] <= self.hi[1])

    def sample(self, rng: RngStream, shrink: float = 0.0) -> np.ndarray:
        lo = np.array(self.lo) + shrink * (np.array(self.hi) - np.array(self.lo))
        hi = np.array(self.hi) - shrink * (np.array(self.hi) - np.array(self.lo))
        return lo + rng.uniform((2,)) * (hi - lo)

    @property
    def center(self) -> np.ndarray:
        return (np.array(self.lo) + np.array(self.hi)) / 2.0


@dataclass(frozen=True)
class Disc:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    skill: str  # "reach" | "pick-place" | "push"
    object_slot: int
    receptacle_slot: int
    object_region: Region
    goal_region: Region
    obstacle: Disc | None
    agent_start: tuple[float, float]

    @property
    def instruction_id(self) -> int:
        return self.object_slot * N_RECEPTACLE_SLOTS + self.receptacle_slot


def instruction_slots(instruction_id: int) -> tuple[int, int]:
    """Decode an instruction id back into (object_slot, receptacle_slot)."""
    return instruction_id // N_RECEPTACLE_SLOTS, instruction_id % N_RECEPTACLE_SLOTS


@dataclass
class EnvState:
    agent_pos: np.ndarray  # (2,)
    agent_vel: np.ndarray  # (2,) last applied velocity command
    object_pos: np.ndarray  # (2,)
    attached: bool
    step_count: int


_START = (0.08, 0.5)


def _task_table() -> list[TaskSpec]:
    r = Region
    return [
        TaskSpec(0, "pick-ball-to-holder", "pick-place", 0, 0,
                 r((0.15, 0.60), (0.25, 0.70)), r((0.78, 0.60), (0.88, 0.70)),
                 Disc((0.50, 0.65), 0.07), _START),
        TaskSpec(1, "pick-block-to-drawer", "pick-place", 1, 1,
                 r((0.15, 0.30), (0.25, 0.40)), r((0.78, 0.30), (0.88, 0.40)),
                 Disc((0.50, 0.35), 0.07), _START),
        TaskSpec(2, "push-can-to-box", "push", 2, 2,
                 r((0.15, 0.45), (0.25, 0.55)), r((0.78, 0.45), (0.88, 0.55)),
                 Disc((0.50, 0.50), 0.07), _START),
        TaskSpec(3, "pick-cup-to-tray", "pick-place", 3, 3,
                 r((0.15, 0.78), (0.25, 0.88)), r((0.78, 0.12), (0.88, 0.22)),
                 None, _START),
        TaskSpec(4, "reach-bin", "reach", 4, 4,
                 r((0.40, 0.10), (0.50, 0.20)), r((0.78, 0.78), (0.88, 0.88)),
                 None, _START),
        TaskSpec(5, "pick-toy-to-bin", "pick-place", 5, 4,
                 r((0.15, 0.12), (0.25, 0.22)), r((0.78, 0.78), (0.88, 0.88)),
                 Disc((0.50, 0.50), 0.07), _START),
        TaskSpec(6, "push-ball-to-tray", "push", 0, 3,
                 r((0.30, 0.60), (0.40, 0.70)), r((0.60, 0.15), (0.70, 0.25)),
                 None, _START),
        TaskSpec(7, "reach-shelf", "reach", 4, 5,
                 r((0.30, 0.75), (0.40, 0.85)), r((0.75, 0.15), (0.85, 0.25)),
                 Disc((0.44, 0.35), 0.06), _START),
        TaskSpec(8, "pick-can-to-holder", "pick-place", 2, 0,
                 r((0.40, 0.75), (0.50, 0.85)), r((0.82, 0.45), (0.92, 0.55)),
                 Disc((0.66, 0.65), 0.06), _START),
        TaskSpec(9, "pick-block-to-box", "pick-place", 1, 2,
                 r((0.12, 0.55), (0.22, 0.65)), r((0.50, 0.85), (0.60, 0.95)),
                 None, _START),
        TaskSpec(10, "push-cup-to-bin", "push", 3, 4,
                 r((0.25, 0.25), (0.35, 0.35)), r((0.85, 0.60), (0.95, 0.70)),
                 Disc((0.60, 0.48), 0.07), _START),
        TaskSpec(11, "pick-toy-to-drawer", "pick-place", 5, 1,
                 r((0.55, 0.12), (0.65, 0.22)), r((0.15, 0.45), (0.25, 0.55)),
                 None, _START),
    ]


def task_roster(n_tasks: int) -> list[TaskSpec]:
    """First n tasks of the fixed table. n = 5 gives the small suite (3
    obstacle tasks, 2 without); n = 12 the full one."""
    table = _task_table()
    if not 1 <= n_tasks <= len(table):
        raise ValueError(f"n_tasks must be in [1, {len(table)}]")
    return table[:n_tasks]


# -------------------------------------------------------------------- env


def env_reset(task: TaskSpec, rng: RngStream) -> EnvState:
    object_pos = task.object_region.sample(rng)
    return EnvState(
        agent_pos=np.array(task.agent_start, dtype=np.float64),
        agent_vel=np.zeros(2),
        object_pos=object_pos,
        attached=False,
        step_count=0,
    )


def env_step(state: EnvState, action: np.ndarray) -> EnvState:
    """Deterministic kinematic step; clips actions to [-1, 1] and positions to
    the workspace plus margin."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    lo, hi = -WORKSPACE_MARGIN, 1.0 + WORKSPACE_MARGIN
    new_pos = np.clip(state.agent_pos + a * DT, lo, hi)
    delta = new_pos - state.agent_pos
    object_pos = state.object_pos + delta if state.attached else state.object_pos.copy()
    attached = state.attached
    if np.linalg.norm(a) < ATTACH_MAX_SPEED and np.linalg.norm(new_pos - object_pos) <= ATTACH_RADIUS:
        attached = not attached
    return EnvState(
        agent_pos=new_pos,
        agent_vel=a,
        object_pos=object_pos,
        attached=attached,
        step_count=state.step_count + 1,
    )


def success_check(task: TaskSpec, state: EnvState) -> bool:
    """Reach: agent inside the goal region. Otherwise: object inside it.
    Region bounds are inclusive."""
    p = state.agent_pos if task.skill == "reach" else state.object_pos
    return task.goal_region.contains(p)


def state_to_vec(state: EnvState) -> np.ndarray:
    return np.concatenate([
        state.agent_pos,
        state.agent_vel,
        state.object_pos,
        [1.0 if state.attached else 0.0],
    ])


def vec_to_state(vec: np.ndarray, step_count: int = 0) -> EnvState:
    vec = np.asarray(vec, dtype=np.float64)
    return EnvState(
        agent_pos=vec[0:2].copy(),
        agent_vel=vec[2:4].copy(),
        object_pos=vec[4:6].copy(),
        attached=bool(vec[6] > 0.5),
        step_count=step_count,
    )


# ------------------------------------------------------------ expert demos


@dataclass
class Demonstration:
    task_id: int
    mode: str  # "left" | "right"
    states: np.ndarray  # (T+1, STATE_DIM), float32-exact values
    actions: np.ndarray  # (T, ACTION_DIM), float32-exact values

    @property
    def length(self) -> int:
        return self.actions.shape[0]


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _snap_state(state: EnvState) -> EnvState:
    return EnvState(
        agent_pos=_f32(state.agent_pos),
        agent_vel=_f32(state.agent_vel),
        object_pos=_f32(state.object_pos),
        attached=state.attached,
        step_count=state.step_count,
    )


def _spline_path(waypoints: list[np.ndarray], speed: float) -> np.ndarray:
    """Cubic-smoothed positions sampled so consecutive points are one control
    step apart at roughly constant speed."""
    pts = np.asarray(waypoints)
    if len(pts) == 2:
        # two points: cubic degenerates to the segment
        seg = pts
    else:
        chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        spline = CubicSpline(chord, pts, axis=0)
        dense = spline(np.linspace(0.0, chord[-1], 256))
        seg = dense
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(seg, axis=0), axis=1))])
    total = arc[-1]
    n = max(1, int(np.ceil(total / (speed * DT))))
    targets = np.linspace(0.0, total, n + 1)
    out = np.empty((n + 1, 2))
    for d in range(2):
        out[:, d] = np.interp(targets, arc, seg[:, d])
    return out


def _detour_via(obstacle: Disc, start: np.ndarray, end: np.ndarray, mode: str) -> np.ndarray:
    seg = end - start
    u = seg / max(np.linalg.norm(seg), 1e-9)
    perp = np.array([-u[1], u[0]])  # +perp is "left" of the travel direction
    sign = 1.0 if mode == "left" else -1.0
    return np.array(obstacle.center) + sign * perp * (obstacle.radius + DETOUR_CLEARANCE)


def _transit_refs(task: TaskSpec, start: np.ndarray, end: np.ndarray, mode: str) -> np.ndarray:
    if task.obstacle is not None:
        via = _detour_via(task.obstacle, start, end, mode)
        return _spline_path([start, via, end], EXPERT_SPEED)
    return _spline_path([start, end], EXPERT_SPEED)


def _one_demo(task: TaskSpec, rng: RngStream, max_steps: int = 400) -> Demonstration | None:
    state = _snap_state(env_reset(task, rng))
    mode = ("left" if rng.uniform() < 0.5 else "right") if task.obstacle is not None else "left"
    target = task.goal_region.sample(rng, shrink=0.25)

    if task.skill == "reach":
        phases = [("move", _transit_refs(task, state.agent_pos, target, mode))]
    else:
        approach = _spline_path([state.agent_pos, state.object_pos.copy()], EXPERT_SPEED)
        transit = _transit_refs(task, state.object_pos.copy(), target, mode)
        phases = [("move", approach), ("grasp", None), ("move", transit)]

    states = [state_to_vec(state)]
    actions: list[np.ndarray] = []
    done = False
    for kind, refs in phases:
        if done:
            break
        if kind == "grasp":
            plan: list[np.ndarray | None] = [None]
        else:
            plan = list(refs[1:])
        for ref in plan:
            if ref is None:
                a = rng.normal((2,)) * ACTION_JITTER_SIGMA  # hold still to toggle attachment
            else:
                a = (ref - state.agent_pos) / DT + rng.normal((2,)) * ACTION_JITTER_SIGMA
            a = _f32(np.clip(a, -1.0, 1.0))
            if ref is None and np.linalg.norm(a) >= ATTACH_MAX_SPEED:
                return None  # jitter spoiled the grasp; caller retries
            state = _snap_state(env_step(state, a))
            actions.append(a)
            states.append(state_to_vec(state))
            if len(actions) >= max_steps:
                break
            if success_check(task, state):
                done = True
                break
        if kind == "grasp" and not state.attached:
            return None
    if not success_check(task, state):
        return None
    return Demonstration(task.task_id, mode, np.array(states), np.array(actions))


def generate_demos(task: TaskSpec, n_demos: int, rng: RngStream) -> list[Demonstration]:
    """n scripted demonstrations; each draws from its own child stream so the
    set is reproducible per (seed, demo index). Obstacle tasks pick the
    left/right detour with probability 1/2."""
    demos = []
    for i in range(n_demos):
        demo = None
        for attempt in range(8):
            child = rng.derive_child(i * 8 + attempt)
            demo = _one_demo(task, child)
            if demo is not None:
                break
        if demo is None:
            raise RuntimeError(f"expert failed to produce a demo for task {task.task_id}")
        demos.append(demo)
    return demos


def generate_roster_demos(roster: list[TaskSpec], demos_per_task: int,
                          seed: int) -> list[Demonstration]:
    """Demos for every task, each task on its own stream so placements are
    not correlated across tasks."""
    demos = []
    for task in roster:
        rng = RngStream(seed).derive_child(task.task_id)
        demos.extend(generate_demos(task, demos_per_task, rng))
    return demos


def replay_demo(demo: Demonstration) -> np.ndarray:
    """Open-loop replay through env_step on the float32 lattice; returns the
    replayed state matrix for comparison with demo.states."""
    state = vec_to_state(demo.states[0])
    out = [state_to_vec(state)]
    for a in demo.actions:
        state = _snap_state(env_step(state, a))
        out.append(state_to_vec(state))
    return np.array(out)


def detect_mode(task: TaskSpec, agent_xy: np.ndarray) -> str:
    """Which side of the obstacle a trajectory passed: 'left' if above the
    obstacle center when first crossing its x-coordinate, 'none' if it never
    crosses (or the task has no obstacle)."""
    if task.obstacle is None:
        return "none"
    cx, cy = task.obstacle.center
    xs, ys = agent_xy[:, 0], agent_xy[:, 1]
    for t in range(len(xs) - 1):
        before, after = xs[t] - cx, xs[t + 1] - cx
        if before == 0.0 or (before < 0) != (after <= 0):
            frac = abs(before) / max(abs(after - before), 1e-12)
            y_cross = ys[t] + frac * (ys[t + 1] - ys[t])
            return "left" if y_cross > cy else "right"
    return "none"


# ---------------------------------------------------------------- dataset


def write_dataset(out_dir: str | Path, demos: list[Demonstration]) -> None:
    """meta.json (format header), manifest.jsonl (exactly one record per
    demo), and data.bin with little-endian float32 blobs: states then actions
    per demo."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": 1,
        "state_dim": STATE_DIM,
        "action_dim": ACTION_DIM,
        "num_demos": len(demos),
    }
    lines = []
    blobs = []
    offset = 0
    for d in demos:
        blob = d.states.astype("<f4").tobytes() + d.actions.astype("<f4").tobytes()
        lines.append(json.dumps({
            "task_id": d.task_id,
            "mode": d.mode,
            "length": int(d.length),
            "offset": offset,
            "nbytes": len(blob),
            "crc32": zlib.crc32(blob),
        }, separators=(",", ":")))
        blobs.append(blob)
        offset += len(blob)
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    (out / "data.bin").write_bytes(b"".join(blobs))


def load_dataset(data_dir: str | Path) -> list[Demonstration]:
    path = Path(data_dir)
    meta_path = path / "meta.json"
    manifest = path / "manifest.jsonl"
    data = path / "data.bin"
    for req in (meta_path, manifest, data):
        if not req.exists():
            raise FileNotFoundError(f"dataset directory {path} missing {req.name}")
    try:
        header = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"bad dataset meta.json: {e}")
    if header.get("format_version") != 1:
        raise DatasetFormatError(f"unsupported dataset format_version {header.get('format_version')}")
    if header.get("state_dim") != STATE_DIM or header.get("action_dim") != ACTION_DIM:
        raise DatasetFormatError("dataset dims do not match this build")
    raw = data.read_bytes()
    demos = []
    for line in manifest.read_text().strip().split("\n"):
        rec = json.loads(line)
        t = rec["length"]
        blob = raw[rec["offset"]: rec["offset"] + rec["nbytes"]]
        expected = ((t + 1) * STATE_DIM + t * ACTION_DIM) * 4
        if len(blob) != expected:
            raise DatasetFormatError(f"blob size {len(blob)} != expected {expected}")
        if zlib.crc32(blob) != rec["crc32"]:
            raise DatasetFormatError("dataset blob failed its checksum")
        states = np.frombuffer(blob[: (t + 1) * STATE_DIM * 4], dtype="<f4").reshape(t + 1, STATE_DIM)
        acts = np.frombuffer(blob[(t + 1) * STATE_DIM * 4:], dtype="<f4").reshape(t, ACTION_DIM)
        demos.append(Demonstration(rec["task_id"], rec["mode"], states.astype(np.float64), acts.astype(np.float64)))
    if len(demos) != header.get("num_demos"):
        raise DatasetFormatError("manifest demo count mismatch")
    return demos


# ------------------------------------------------------------ composition


def compose_instruction(task_a: TaskSpec, task_b: TaskSpec) -> TaskSpec:
    """Compose task_a's object/pick phase with task_b's receptacle/goal.

    The result carries a fresh (object_a, receptacle_b) instruction encoding.
    task_a must have an object phase, so reach tasks cannot contribute it.
    compose(T, T) reproduces T exactly.
    """
    if task_a.skill == "reach":
        raise IncompatibleSkillError(
            f"task {task_a.task_id} has no object phase to contribute"
        )
    if task_a == task_b:
        return replace(task_a)
    return TaskSpec(
        task_id=1000 + task_a.task_id * 100 + task_b.task_id,
        name=f"{OBJECT_NAMES[task_a.object_slot]}-to-{RECEPTACLE_NAMES[task_b.receptacle_slot]}",
        skill=task_a.skill,
        object_slot=task_a.object_slot,
        receptacle_slot=task_b.receptacle_slot,
        object_region=task_a.object_region,
        goal_region=task_b.goal_region,
        obstacle=task_a.obstacle,
        agent_start=task_a.agent_start,
    )
