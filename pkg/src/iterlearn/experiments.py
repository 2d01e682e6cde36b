"""Ablation matrices and run summaries shared by the CLI and the acceptance suite."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ExperimentConfig, replace
from .errors import ConfigError
from .iterate import run_experiment
from .metrics import ease_of_learn_probe
from .world import make_world

AXES = ("spawn_target", "cycle", "codebook_freeze", "use_codebook", "lipschitz_reg")

SUMMARY_COLUMNS = ("variant", "seed", "final_step", "loss_contrastive", "min_loss", "r1_i2t", "r1_t2i",
                   "topo_sim", "lips_vision", "lips_language", "active_codes", "probe_r1")


def baseline_config(cfg: ExperimentConfig, **extra) -> ExperimentConfig:
    """K=0 control with the same total number of steps as ``cfg``."""
    s = cfg.schedule
    return replace(cfg, **{"schedule.K": 0, "schedule.T_warm": s.total_steps - s.T_final, **extra})


def ablation_variants(cfg: ExperimentConfig, axis: str) -> list[tuple[str, ExperimentConfig]]:
    if axis == "spawn_target":
        return [(t, replace(cfg, spawn=t)) for t in ("language", "vision", "alternate", "none")]
    if axis == "cycle":
        s = cfg.schedule
        span = s.K * s.generation_length
        out = []
        for name, factor in (("half", 0.5), ("default", 1.0), ("double", 2.0)):
            gen_len = int(round(s.generation_length * factor))
            if gen_len < 1 or span % gen_len:
                continue
            d = int(round(s.T_distill * factor))
            out.append((f"{name}_{gen_len}", replace(cfg, **{"schedule.K": span // gen_len, "schedule.T_distill": d,
                                                            "schedule.T_interact": gen_len - d})))
        return out
    if axis == "codebook_freeze":
        return [("frozen", replace(cfg, freeze_codebook_in_distill=True)),
                ("unfrozen", replace(cfg, freeze_codebook_in_distill=False))]
    if axis == "use_codebook":
        return [("codebook", replace(cfg, use_codebook=True)),
                ("no_codebook", replace(cfg, use_codebook=False))]
    if axis == "lipschitz_reg":
        return [("iterated_learning", cfg),
                ("l_regularized", baseline_config(cfg, **{"hyper.spectral_reg": True})),
                ("baseline", baseline_config(cfg))]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {', '.join(AXES)}")


def summarize(name, cfg, state, records, probe=True) -> dict:
    last = records[-1]
    row = {
        "variant": name, "seed": cfg.seed, "final_step": last.step,
        "loss_contrastive": last.loss_contrastive, "min_loss": min(r.loss_contrastive for r in records),
        "r1_i2t": last.r1_i2t, "r1_t2i": last.r1_t2i, "topo_sim": last.topo_sim,
        "lips_vision": last.lips_vision, "lips_language": last.lips_language,
        "active_codes": last.active_codes, "probe_r1": float("nan"),
    }
    if probe:
        res = ease_of_learn_probe(state.vision, state.codebook, make_world(cfg.world), state.language.arch,
                                  cfg.probe, source_generation=cfg.schedule.K, use_codebook=cfg.use_codebook)
        row["probe_r1"] = res.final_r1
    return row


def run_variant(args) -> dict:
    name, cfg, out_dir = args
    state, records = run_experiment(cfg, out_dir=out_dir, write=out_dir is not None)
    return summarize(name, cfg, state, records)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("ITERLEARN_THREADS", "1")))
    except ValueError as e:
        raise ConfigError("ITERLEARN_THREADS must be an integer") from e


def run_many(jobs) -> list[dict]:
    """Run ``(name, config, out_dir)`` jobs, in parallel when ITERLEARN_THREADS > 1.

    Results come back in job order regardless of completion order.
    """
    n = max_workers()
    if n == 1 or len(jobs) == 1:
        return [run_variant(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(run_variant, jobs))


def write_summary(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def ablate(cfg: ExperimentConfig, axis: str, out_dir) -> Path:
    out = Path(out_dir)
    jobs = [(name, c, str(out / axis / name)) for name, c in ablation_variants(cfg, axis)]
    return write_summary(run_many(jobs), out / f"ablate_{axis}.csv")
