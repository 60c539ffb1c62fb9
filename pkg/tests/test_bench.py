"""Benchmark environment, scripted expert, and dataset format."""
import numpy as np
import pytest

from discrete_policy.autodiff import RngStream
from discrete_policy.bench import (
    ACTION_DIM,
    ATTACH_MAX_SPEED,
    ATTACH_RADIUS,
    DT,
    STATE_DIM,
    DatasetFormatError,
    Demonstration,
    EnvState,
    IncompatibleSkillError,
    compose_instruction,
    detect_mode,
    env_reset,
    env_step,
    generate_demos,
    instruction_slots,
    load_dataset,
    replay_demo,
    state_to_vec,
    success_check,
    task_roster,
    vec_to_state,
    write_dataset,
)


def _state(agent, obj, attached=False):
    return EnvState(
        agent_pos=np.array(agent, dtype=np.float64),
        agent_vel=np.zeros(2),
        object_pos=np.array(obj, dtype=np.float64),
        attached=attached,
        step_count=0,
    )


class TestEnvDynamics:
    def test_position_integrates_velocity_command(self):
        s = _state((0.5, 0.5), (0.9, 0.9))
        s2 = env_step(s, np.array([0.4, -1.0]))
        assert np.allclose(s2.agent_pos, [0.5 + 0.4 * DT, 0.5 - 1.0 * DT])
        assert np.array_equal(s2.agent_vel, [0.4, -1.0])
        assert s2.step_count == 1

    def test_action_clipped_to_unit_box(self):
        s = _state((0.5, 0.5), (0.9, 0.9))
        s2 = env_step(s, np.array([3.0, -7.0]))
        assert np.allclose(s2.agent_pos, [0.5 + DT, 0.5 - DT])
        assert np.array_equal(s2.agent_vel, [1.0, -1.0])

    def test_workspace_clip_with_margin(self):
        s = _state((1.09, -0.09), (0.5, 0.5))
        for _ in range(10):
            s = env_step(s, np.array([1.0, -1.0]))
        assert s.agent_pos[0] == 1.1
        assert s.agent_pos[1] == -0.1

    def test_slow_action_near_object_toggles_attachment(self):
        s = _state((0.5, 0.5), (0.5, 0.52))
        s2 = env_step(s, np.array([0.0, 0.0]))
        assert s2.attached
        s3 = env_step(s2, np.array([0.0, 0.0]))
        assert not s3.attached  # toggles back off

    def test_fast_action_does_not_toggle(self):
        s = _state((0.5, 0.5), (0.5, 0.51))
        s2 = env_step(s, np.array([0.5, 0.0]))
        assert not s2.attached

    def test_slow_action_far_from_object_does_not_toggle(self):
        s = _state((0.2, 0.2), (0.8, 0.8))
        s2 = env_step(s, np.array([0.0, 0.0]))
        assert not s2.attached

    def test_attachment_radius_checked_after_move(self):
        # starts outside the radius, the slow step carries it inside
        s = _state((0.5, 0.5 - ATTACH_RADIUS - 0.004), (0.5, 0.5))
        s2 = env_step(s, np.array([0.0, 0.09]))
        assert np.linalg.norm(s2.agent_pos - s2.object_pos) <= ATTACH_RADIUS
        assert s2.attached

    def test_attached_object_follows_agent(self):
        s = _state((0.5, 0.5), (0.5, 0.52), attached=True)
        s2 = env_step(s, np.array([1.0, 0.0]))
        assert np.allclose(s2.object_pos - s.object_pos, s2.agent_pos - s.agent_pos)
        assert s2.attached  # fast move keeps the grip

    def test_detached_object_stays_put(self):
        s = _state((0.2, 0.2), (0.7, 0.7))
        s2 = env_step(s, np.array([1.0, 1.0]))
        assert np.array_equal(s2.object_pos, [0.7, 0.7])

    def test_state_vec_round_trip(self):
        s = _state((0.11, 0.22), (0.33, 0.44), attached=True)
        v = state_to_vec(s)
        assert v.shape == (STATE_DIM,)
        s2 = vec_to_state(v)
        assert np.array_equal(s2.agent_pos, s.agent_pos)
        assert np.array_equal(s2.object_pos, s.object_pos)
        assert s2.attached == s.attached


class TestRoster:
    def test_instruction_ids_distinct(self):
        roster = task_roster(12)
        ids = [t.instruction_id for t in roster]
        assert len(set(ids)) == 12

    def test_instruction_id_encodes_slot_pair(self):
        for t in task_roster(12):
            o, r = instruction_slots(t.instruction_id)
            assert (o, r) == (t.object_slot, t.receptacle_slot)

    def test_small_suite_is_prefix(self):
        assert [t.task_id for t in task_roster(5)] == [0, 1, 2, 3, 4]
        assert task_roster(5) == task_roster(12)[:5]

    def test_small_suite_has_three_obstacle_tasks(self):
        roster = task_roster(5)
        assert sum(t.obstacle is not None for t in roster) == 3

    def test_regions_disjoint_and_clear_of_obstacle(self):
        for t in task_roster(12):
            a, b = t.object_region, t.goal_region
            overlap_x = a.lo[0] <= b.hi[0] and b.lo[0] <= a.hi[0]
            overlap_y = a.lo[1] <= b.hi[1] and b.lo[1] <= a.hi[1]
            assert not (overlap_x and overlap_y), t.name
            if t.obstacle is not None:
                for region in (a, b):
                    c = np.array(t.obstacle.center)
                    nearest = np.clip(c, region.lo, region.hi)
                    assert np.linalg.norm(nearest - c) > t.obstacle.radius, t.name

    def test_reset_places_object_in_region(self):
        for t in task_roster(12):
            for k in range(5):
                s = env_reset(t, RngStream(9, counter=k * 100))
                assert t.object_region.contains(s.object_pos)
                assert np.array_equal(s.agent_pos, t.agent_start)
                assert not s.attached

    def test_success_check_targets_agent_only_for_reach(self):
        reach = task_roster(5)[4]
        pick = task_roster(5)[0]
        goal_c = reach.goal_region.center
        s = _state(goal_c, (0.1, 0.1))
        assert success_check(reach, s)
        s2 = _state(goal_c, (0.1, 0.1))
        assert not success_check(pick, _state(goal_c, (0.1, 0.1))) or pick.goal_region.contains((0.1, 0.1))
        s3 = _state((0.1, 0.9), pick.goal_region.center)
        assert success_check(pick, s3)


class TestExpert:
    def test_demos_reach_success(self):
        for t in task_roster(12):
            for d in generate_demos(t, 4, RngStream(31 + t.task_id)):
                assert success_check(t, vec_to_state(d.states[-1])), t.name
                assert d.states.shape == (d.length + 1, STATE_DIM)
                assert d.actions.shape == (d.length, ACTION_DIM)

    def test_open_loop_replay_matches_recorded_states(self):
        for t in task_roster(5):
            for d in generate_demos(t, 3, RngStream(55 + t.task_id)):
                assert np.max(np.abs(replay_demo(d) - d.states)) < 1e-9

    def test_recorded_values_live_on_float32_lattice(self):
        d = generate_demos(task_roster(5)[0], 1, RngStream(3))[0]
        assert np.array_equal(d.states, d.states.astype(np.float32).astype(np.float64))
        assert np.array_equal(d.actions, d.actions.astype(np.float32).astype(np.float64))

    def test_manipulation_demos_attach_exactly_once(self):
        for t in task_roster(5):
            if t.skill == "reach":
                continue
            for d in generate_demos(t, 3, RngStream(21 + t.task_id)):
                mags = np.linalg.norm(d.actions, axis=1)
                assert np.sum(mags < ATTACH_MAX_SPEED) == 1
                assert d.states[:, 6].max() == 1.0

    def test_obstacle_task_modes_are_balanced_and_separated(self):
        t = task_roster(5)[0]
        demos = generate_demos(t, 60, RngStream(5))
        left = [d for d in demos if d.mode == "left"]
        right = [d for d in demos if d.mode == "right"]
        assert min(len(left), len(right)) >= 15
        cx = t.obstacle.center[0]

        def y_at(d):
            i = np.argmin(np.abs(d.states[:, 0] - cx))
            return d.states[i, 1]

        sep = abs(np.mean([y_at(d) for d in left]) - np.mean([y_at(d) for d in right]))
        assert sep > 0.2

    def test_detect_mode_agrees_with_expert_labels(self):
        t = task_roster(5)[1]
        demos = generate_demos(t, 30, RngStream(8))
        assert all(detect_mode(t, d.states[:, 0:2]) == d.mode for d in demos)

    def test_detect_mode_none_without_crossing(self):
        t = task_roster(5)[0]
        path = np.array([[0.1, 0.5], [0.2, 0.5], [0.3, 0.5]])
        assert detect_mode(t, path) == "none"
        assert detect_mode(task_roster(5)[3], path) == "none"

    def test_generation_is_reproducible(self):
        t = task_roster(5)[2]
        a = generate_demos(t, 5, RngStream(44))
        b = generate_demos(t, 5, RngStream(44))
        for da, db in zip(a, b):
            assert da.mode == db.mode
            assert np.array_equal(da.states, db.states)
            assert np.array_equal(da.actions, db.actions)


class TestDataset:
    def _demos(self):
        rng = RngStream(12)
        out = []
        for t in task_roster(3):
            out.extend(generate_demos(t, 3, rng.derive_child(t.task_id)))
        return out

    def test_round_trip_is_exact(self, tmp_path):
        demos = self._demos()
        write_dataset(tmp_path, demos)
        back = load_dataset(tmp_path)
        assert len(back) == len(demos)
        for a, b in zip(demos, back):
            assert a.task_id == b.task_id and a.mode == b.mode
            assert np.array_equal(a.states, b.states)
            assert np.array_equal(a.actions, b.actions)

    def test_rewrite_is_byte_identical(self, tmp_path):
        demos = self._demos()
        write_dataset(tmp_path, demos)
        first = [(tmp_path / n).read_bytes() for n in ("manifest.jsonl", "data.bin")]
        write_dataset(tmp_path, load_dataset(tmp_path))
        second = [(tmp_path / n).read_bytes() for n in ("manifest.jsonl", "data.bin")]
        assert first == second

    def test_replay_of_loaded_demo_is_exact(self, tmp_path):
        write_dataset(tmp_path, self._demos())
        for d in load_dataset(tmp_path):
            assert np.max(np.abs(replay_demo(d) - d.states)) < 1e-9

    def test_missing_files_raise_file_not_found(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")

    def test_corrupt_blob_fails_checksum(self, tmp_path):
        write_dataset(tmp_path, self._demos())
        raw = bytearray((tmp_path / "data.bin").read_bytes())
        raw[10] ^= 0xFF
        (tmp_path / "data.bin").write_bytes(bytes(raw))
        with pytest.raises(DatasetFormatError, match="checksum"):
            load_dataset(tmp_path)

    def test_unknown_format_version_rejected(self, tmp_path):
        write_dataset(tmp_path, self._demos())
        meta = (tmp_path / "meta.json").read_text()
        (tmp_path / "meta.json").write_text(
            meta.replace('"format_version": 1', '"format_version": 9'))
        with pytest.raises(DatasetFormatError, match="format_version"):
            load_dataset(tmp_path)

    def test_manifest_has_one_line_per_demo(self, tmp_path):
        demos = self._demos()
        write_dataset(tmp_path, demos)
        lines = (tmp_path / "manifest.jsonl").read_text().strip().split("\n")
        assert len(lines) == len(demos)


class TestComposition:
    def test_compose_crosses_object_and_goal(self):
        roster = task_roster(12)
        c = compose_instruction(roster[0], roster[1])
        assert c.object_slot == roster[0].object_slot
        assert c.receptacle_slot == roster[1].receptacle_slot
        assert c.object_region == roster[0].object_region
        assert c.goal_region == roster[1].goal_region
        assert c.obstacle == roster[0].obstacle
        assert c.skill == roster[0].skill
        assert c.task_id == 1001

    def test_composed_instruction_id_is_fresh(self):
        roster = task_roster(12)
        seen = {t.instruction_id for t in roster}
        c = compose_instruction(roster[0], roster[5])  # ball -> bin
        assert c.instruction_id == 0 * 8 + 4
        assert c.instruction_id not in seen

    def test_self_composition_is_identity(self):
        t = task_roster(5)[1]
        assert compose_instruction(t, t) == t

    def test_reach_cannot_contribute_object_phase(self):
        roster = task_roster(12)
        with pytest.raises(IncompatibleSkillError):
            compose_instruction(roster[4], roster[0])
        # reach on the goal side is fine
        c = compose_instruction(roster[0], roster[4])
        assert c.goal_region == roster[4].goal_region
