import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iterlearn.config import ExperimentConfig, replace
from iterlearn.errors import ConfigError, InvariantError
from iterlearn.iterate import (
    Schedule,
    init_state,
    lr_schedule,
    on_boundary,
    on_distill_end,
    phase_of,
    run_experiment,
    spawn_target,
)
from iterlearn.nn import lr_at


def interval_phase(step, s):
    """Reference phase lookup by walking explicit [start, end) intervals."""
    intervals = [("Warmup", 0, 0, s.T_warm)]
    t = s.T_warm
    for g in range(1, s.K + 1):
        intervals.append(("Distill", g, t, t + s.T_distill))
        intervals.append(("Interact", g, t + s.T_distill, t + s.T_distill + s.T_interact))
        t += s.T_distill + s.T_interact
    intervals.append(("FinalInteract", s.K, t, t + s.T_final))
    for tag, g, lo, hi in intervals:
        if lo <= step < hi:
            return tag, g
    raise AssertionError(step)


def small_config(**dotted):
    base = {"schedule.T_warm": 20, "schedule.T_distill": 5, "schedule.T_interact": 15, "schedule.K": 3,
            "schedule.T_final": 20, "hyper.batch_size": 16, "hyper.warmup_steps": 4, "log_every": 10,
            "vision.hidden_dims": [16], "language.hidden_dims": [16], "codebook.C": 16}
    base.update(dotted)
    return replace(ExperimentConfig(), **base)


def test_default_schedule_totals():
    s = Schedule()
    assert s.generation_length == 600 and s.total_steps == 5400
    assert s.generation_start(1) == 600 and s.generation_start(7) == 4200


def test_phase_examples():
    s = Schedule(T_warm=10, T_distill=2, T_interact=3, K=2, T_final=4)
    tags = [(p.tag[0], p.generation) for p in (phase_of(t, s) for t in range(s.total_steps))]
    assert tags == [("W", 0)] * 10 + [("D", 1)] * 2 + [("I", 1)] * 3 + [("D", 2)] * 2 + [("I", 2)] * 3 + [("F", 2)] * 4
    with pytest.raises(ConfigError):
        phase_of(s.total_steps, s)


@given(st.integers(0, 8), st.integers(0, 4), st.integers(0, 6), st.integers(0, 4), st.integers(0, 8))
@settings(max_examples=200)
def test_phase_of_matches_intervals(T_warm, T_distill, T_interact, K, T_final):
    if T_warm + K * (T_distill + T_interact) + T_final == 0:
        return
    s = Schedule(T_warm, T_distill, T_interact, K, T_final)
    for t in range(s.total_steps):
        p = phase_of(t, s)
        assert (p.tag, p.generation) == interval_phase(t, s)


def test_negative_schedule_rejected():
    with pytest.raises(ConfigError):
        Schedule(T_warm=-1)
    with pytest.raises(ConfigError):
        Schedule(T_warm=0, K=0, T_final=0)


def test_spawn_targets():
    assert [spawn_target("alternate", g) for g in (1, 2, 3)] == ["language", "vision", "language"]
    assert spawn_target("none", 3) is None
    assert spawn_target("vision", 1) == "vision"


def test_lr_zero_at_generation_starts():
    s = Schedule()
    lrs = lr_schedule(s, 5e-4, 50)
    for g in range(1, s.K + 1):
        assert lr_at(s.generation_start(g), lrs) == 0.0
    assert lr_at(0, lrs) == 0.0 and lr_at(s.generation_start(1) + 50, lrs) > 0


class TestHooks:
    def state_at_boundary(self, cfg):
        state = init_state(cfg)
        state.step = cfg.schedule.generation_start(1)
        state.phase = phase_of(state.step, cfg.schedule)
        return state

    def test_language_spawn(self):
        cfg = small_config()
        state = self.state_at_boundary(cfg)
        old_lang = state.language.copy()
        vision = state.vision.layers[0].W.tobytes()
        state.opt["language.embeddings"] = object()
        state.opt["vision.layers.0.W"] = "kept"
        on_boundary(state, "language", cfg.seed, cfg.schedule)
        assert state.teacher_role == "language" and state.codebook.frozen
        assert state.teacher.embeddings.tobytes() == old_lang.embeddings.tobytes()
        assert state.language.embeddings.tobytes() != old_lang.embeddings.tobytes()
        assert state.vision.layers[0].W.tobytes() == vision
        assert "language.embeddings" not in state.opt and state.opt["vision.layers.0.W"] == "kept"
        assert state.spawn_history == ["language"]
        on_distill_end(state, None)
        assert state.teacher is None and not state.codebook.frozen

    def test_none_policy_keeps_agents(self):
        cfg = small_config()
        state = self.state_at_boundary(cfg)
        lang = state.language.embeddings.tobytes()
        on_boundary(state, "none", cfg.seed, cfg.schedule)
        assert state.language.embeddings.tobytes() == lang and state.spawn_history == [None]
        assert state.teacher is not None

    def test_unfrozen_option(self):
        cfg = small_config()
        state = self.state_at_boundary(cfg)
        on_boundary(state, "vision", cfg.seed, cfg.schedule, freeze_codebook=False)
        assert not state.codebook.frozen and state.teacher_role == "vision"

    def test_off_boundary_is_an_invariant_error(self):
        cfg = small_config()
        state = self.state_at_boundary(cfg)
        state.step += 1
        with pytest.raises(InvariantError):
            on_boundary(state, "language", cfg.seed, cfg.schedule)
        with pytest.raises(InvariantError):
            on_distill_end(state, cfg.schedule)


class Recorder:
    def __init__(self):
        self.events = []

    def __call__(self, event, step, state):
        self.events.append((event, step, state.phase.tag, state.teacher is not None,
                            state.codebook.codes.tobytes(),
                            b"".join(v.tobytes() for v in state.vision.named_parameters().values()),
                            state.codebook.frozen))


@pytest.mark.parametrize("policy", ["language", "alternate"])
def test_run_invariants(policy):
    cfg = small_config(spawn=policy)
    rec = Recorder()
    state, records = run_experiment(cfg, write=False, observer=rec)
    s = cfg.schedule
    assert state.step == s.total_steps
    assert state.spawn_history == [spawn_target(policy, g) for g in range(1, s.K + 1)]
    before = {step: e for e in rec.events if e[0] == "before" for step in [e[1]]}
    after = {step: e for e in rec.events if e[0] == "after" for step in [e[1]]}
    for step, e in before.items():
        assert e[3] == (e[2] == "Distill")  # teacher iff Distill
        assert e[6] == (e[2] == "Distill")  # frozen iff Distill
    for g in range(1, s.K + 1):
        start = s.generation_start(g)
        window = [before[start]] + [after[t] for t in range(start, start + s.T_distill)]
        assert len({w[4] for w in window}) == 1  # codebook constant through Distill
        # the spawn itself leaves the codebook (and a non-spawned vision agent) alone
        assert after[start - 1][4] == before[start][4]
        if spawn_target(policy, g) == "language":
            assert after[start - 1][5] == before[start][5]
        else:
            assert after[start - 1][5] != before[start][5]
    logged = [r.step for r in records]
    assert logged[0] == 0 and logged[-1] == s.total_steps - 1
    assert all(b > a for a, b in zip(logged, logged[1:]))


def test_t_distill_zero():
    cfg = small_config(**{"schedule.T_distill": 0})
    rec = Recorder()
    state, _ = run_experiment(cfg, write=False, observer=rec)
    assert not any(e[3] for e in rec.events)
    assert len(state.spawn_history) == cfg.schedule.K


def test_baseline_has_no_spawns():
    cfg = small_config(**{"schedule.K": 0})
    state, records = run_experiment(cfg, write=False)
    assert state.spawn_history == [] and {r.phase for r in records} <= {"Warmup", "FinalInteract"}


def test_checkpoints_written_at_generation_starts(tmp_path):
    cfg = small_config()
    run_experiment(cfg, out_dir=tmp_path)
    s = cfg.schedule
    names = sorted(p.name for p in tmp_path.glob("ckpt_*.json"))
    expected = sorted([f"ckpt_gen{g - 1}_step{s.generation_start(g)}.json" for g in range(1, s.K + 1)]
                      + [f"ckpt_gen{s.K}_step{s.total_steps}.json"])
    assert names == expected
    assert (tmp_path / "metrics.csv").exists()


def test_runs_are_deterministic(tmp_path):
    cfg = small_config(**{"hyper.hard_negatives": True, "hyper.spectral_reg": True})
    run_experiment(cfg, out_dir=tmp_path / "a")
    run_experiment(cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    cfg = small_config()
    full_state, full = run_experiment(cfg, out_dir=tmp_path / "full")
    s = cfg.schedule
    ckpt = tmp_path / "full" / f"ckpt_gen1_step{s.generation_start(2)}.json"
    res_state, resumed = run_experiment(cfg, out_dir=tmp_path / "resumed", resume_from=ckpt)
    tail = [r for r in full if r.step >= s.generation_start(2)]
    assert resumed == tail
    for k, v in full_state.named_parameters().items():
        assert v.tobytes() == res_state.named_parameters()[k].tobytes()


def test_resume_mid_distill(tmp_path):
    from iterlearn.checkpoint import save_checkpoint

    cfg = small_config()
    s = cfg.schedule
    mid = s.generation_start(2) + 2
    saved = {}

    def grab(event, step, state):
        if event == "after" and step == mid - 1:
            saved["path"] = save_checkpoint(state, tmp_path / "mid.json", cfg)

    _, full = run_experiment(cfg, out_dir=tmp_path / "full", observer=grab)
    _, resumed = run_experiment(cfg, out_dir=tmp_path / "r", resume_from=saved["path"])
    assert resumed == [r for r in full if r.step >= mid]
    assert np.isfinite(resumed[0].loss_distill)


def test_long_schedule_examples():
    s = Schedule(6000, 1000, 5000, 2, 12000)
    got = {t: (phase_of(t, s).tag, phase_of(t, s).generation) for t in (0, 6000, 6999, 7000, 12000)}
    assert got == {0: ("Warmup", 0), 6000: ("Distill", 1), 6999: ("Distill", 1), 7000: ("Interact", 1),
                   12000: ("Distill", 2)}


def test_alternate_spawn_sequence():
    cfg = replace(ExperimentConfig(seed=2), spawn="alternate", log_every=100,
                  **{"schedule.T_warm": 4, "schedule.T_distill": 2, "schedule.T_interact": 2, "schedule.K": 4,
                     "schedule.T_final": 2, "vision.hidden_dims": [8], "language.hidden_dims": [8],
                     "codebook.C": 8})
    state, _ = run_experiment(cfg, write=False)
    assert state.spawn_history == ["language", "vision", "language", "vision"]
