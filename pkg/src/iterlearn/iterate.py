"""The iterated-learning state machine: warmup, then K generations of
spawn -> distill (frozen codebook) -> interact, then a final extension."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agents import AgentArch, init_agent, spawn
from .codebook import init_codebook
from .errors import ConfigError, InvariantError, NumericError
from .nn import LrSchedule, lr_at
from .training import Phase, TrainState, train_step
from .world import hard_negative_batch, make_world, sample_batch

log = logging.getLogger(__name__)

SPAWN_TARGETS = ("language", "vision", "alternate", "none")


@dataclass(frozen=True)
class Schedule:
    T_warm: int = 600
    T_distill: int = 100
    T_interact: int = 500
    K: int = 6
    T_final: int = 1200

    def __post_init__(self):
        for name in ("T_warm", "T_distill", "T_interact", "K", "T_final"):
            if getattr(self, name) < 0:
                raise ConfigError(f"schedule.{name} must be >= 0")
        if self.total_steps < 1:
            raise ConfigError("schedule has no steps")

    @property
    def generation_length(self):
        return self.T_distill + self.T_interact

    @property
    def total_steps(self):
        return self.T_warm + self.K * self.generation_length + self.T_final

    def generation_start(self, g: int) -> int:
        """First step of generation ``g`` (1-based); K+1 gives the final extension."""
        return self.T_warm + (g - 1) * self.generation_length


def phase_of(step: int, sched: Schedule) -> Phase:
    if not 0 <= step < sched.total_steps:
        raise ConfigError(f"step {step} outside [0, {sched.total_steps})")
    if step < sched.T_warm:
        return Phase("Warmup", 0)
    rel = step - sched.T_warm
    if sched.generation_length > 0 and rel < sched.K * sched.generation_length:
        g, off = divmod(rel, sched.generation_length)
        return Phase("Distill" if off < sched.T_distill else "Interact", g + 1)
    return Phase("FinalInteract", sched.K)


def spawn_target(policy: str, generation: int) -> str | None:
    """Which agent is replaced at the start of ``generation`` (1-based)."""
    if policy == "alternate":
        return "language" if generation % 2 == 1 else "vision"
    if policy == "none":
        return None
    return policy


def lr_schedule(sched: Schedule, base_lr: float, warmup: int) -> LrSchedule:
    bounds = [sched.generation_start(g) for g in range(1, sched.K + 1) if sched.generation_start(g) > 0]
    return LrSchedule(base_lr, sched.total_steps, warmup, bounds)


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# seed-stream tags
_VISION, _LANGUAGE, _CODES, _BATCH, _SPAWN, _NEG, _SPECTRAL = range(7)


def on_boundary(state: TrainState, policy: str, seed: int, sched: Schedule | None = None,
                freeze_codebook: bool = True) -> TrainState:
    """Start of a generation: snapshot the outgoing agent as teacher, spawn its
    replacement with fresh optimizer state and freeze the codebook."""
    g = state.phase.generation
    if sched is not None and (state.phase.tag not in ("Distill", "Interact")
                              or state.step != sched.generation_start(g)):
        raise InvariantError(f"on_boundary called off-boundary at step {state.step} ({state.phase})")
    target = spawn_target(policy, g)
    role = target or "language"
    state.teacher = state.agent(role).copy()
    state.teacher_role = role
    if target is not None:
        fresh = spawn(state.agent(role), _seed(seed, _SPAWN, g))
        if role == "vision":
            state.vision = fresh
        else:
            state.language = fresh
        for name in [k for k in state.opt if k.startswith(role + ".")]:
            del state.opt[name]
        for name in [k for k in state.spectral_vectors if k.startswith(role + ".")]:
            del state.spectral_vectors[name]
    state.spawn_history.append(target)
    state.codebook.frozen = freeze_codebook
    return state


def on_distill_end(state: TrainState, sched: Schedule | None = None) -> TrainState:
    g = state.phase.generation
    if sched is not None and state.step != sched.generation_start(g) + sched.T_distill:
        raise InvariantError(f"on_distill_end called off-boundary at step {state.step}")
    state.codebook.frozen = False
    state.teacher = None
    state.teacher_role = None
    return state


def init_state(config) -> TrainState:
    w = config.world
    varch = AgentArch("vision", w.patch_dim, config.vision.output_dim, tuple(config.vision.hidden_dims))
    larch = AgentArch("language", config.language.embed_dim, config.language.output_dim,
                      tuple(config.language.hidden_dims), vocab_size=w.vocab_size)
    cb_seed = config.codebook.init_seed if config.codebook.init_seed is not None else _seed(config.seed, _CODES)
    return TrainState(
        step=0,
        phase=phase_of(0, config.schedule),
        vision=init_agent(varch, _seed(config.seed, _VISION)),
        language=init_agent(larch, _seed(config.seed, _LANGUAGE)),
        codebook=init_codebook(config.codebook.C, config.codebook.D, cb_seed),
    )


def run_experiment(config, out_dir=None, resume_from=None, write=True, observer=None):
    """Execute the full schedule. Returns ``(final TrainState, list of MetricsRecord)``.

    Writes ``metrics.csv`` and checkpoints under ``out_dir`` (default
    ``config.out_dir``) unless ``write`` is false. ``resume_from`` is a
    checkpoint path; training then continues from its step.

    A MetricsRecord is logged every ``config.log_every`` steps and at the
    first and last step of every phase.

    ``observer(event, step, state)`` is called with ``"before"`` once the
    boundary hooks for ``step`` have run, and with ``"after"`` once its update
    is applied.
    """
    from . import checkpoint as ckpt
    from .metrics import Evaluator, MetricsWriter

    sched = config.schedule
    hyper = config.hyper
    out = Path(out_dir if out_dir is not None else config.out_dir)
    world = make_world(config.world)
    lrs = lr_schedule(sched, hyper.base_lr, hyper.warmup_steps)
    evaluator = Evaluator(world, config)
    if resume_from is not None:
        state = ckpt.load_checkpoint(resume_from, config)
    else:
        state = init_state(config)
    writer = MetricsWriter(out / "metrics.csv" if write else None)
    records = []
    last_ckpt = None
    use_cb = config.use_codebook
    V = config.world.values_per_attribute
    n_params = state.num_parameters()

    try:
        for step in range(state.step, sched.total_steps):
            phase = phase_of(step, sched)
            prev = phase_of(step - 1, sched) if step > 0 else None
            new_gen = phase.generation >= 1 and phase.tag != "FinalInteract" and step == sched.generation_start(phase.generation)
            if new_gen and write:
                last_ckpt = ckpt.save_checkpoint(state, out / f"ckpt_gen{phase.generation - 1}_step{step}.json", config)
            state.phase = phase
            if new_gen:
                on_boundary(state, config.spawn, config.seed, sched, config.freeze_codebook_in_distill)
            if phase.tag != "Distill" and state.teacher is not None:
                on_distill_end(state, sched)
            if state.codebook.frozen and phase.tag != "Distill":
                raise InvariantError(f"codebook frozen outside Distill at step {step}")
            if (state.teacher is not None) != (phase.tag == "Distill"):
                raise InvariantError(f"teacher presence does not match phase {phase} at step {step}")
            if observer is not None:
                observer("before", step, state)
            batch = sample_batch(world, hyper.batch_size, _seed(config.seed, _BATCH, step))
            neg = None
            if hyper.hard_negatives:
                neg = hard_negative_batch(batch.text_tokens, np.random.default_rng(_seed(config.seed, _NEG, step)), V)
            lr = lr_at(step, lrs)
            _, losses = train_step(state, batch, hyper, lr, use_codebook=use_cb, neg_tokens=neg,
                                   seed=_seed(config.seed, _SPECTRAL))
            if observer is not None:
                observer("after", step, state)
            nxt = phase_of(step + 1, sched) if step + 1 < sched.total_steps else None
            boundary = prev != phase or nxt != phase
            if step % config.log_every == 0 or boundary or step == sched.total_steps - 1:
                rec = evaluator.record(state, step, phase, lr, losses)
                records.append(rec)
                writer.write(rec)
        if state.num_parameters() != n_params:
            raise InvariantError("parameter count changed during training")
        if write:
            last_ckpt = ckpt.save_checkpoint(state, out / f"ckpt_gen{sched.K}_step{sched.total_steps}.json", config)
    except NumericError as e:
        raise NumericError(str(e), checkpoint=last_ckpt) from e
    finally:
        writer.close()
    return state, records
