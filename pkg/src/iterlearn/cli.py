"""Command-line front door: ``iterlearn train|probe|ablate|inspect-codes|plot``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, IterlearnError

log = logging.getLogger("iterlearn")


def _load_config(args):
    from .config import ExperimentConfig, apply_override, from_dict, parse_config, to_dict

    if args.config:
        cfg = parse_config(args.config, args.override)
    else:
        data = to_dict(ExperimentConfig())
        for ov in args.override:
            apply_override(data, ov)
        cfg = from_dict(data)
    return cfg


def cmd_train(args):
    from .config import dump_config, replace
    from .iterate import run_experiment

    cfg = _load_config(args)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg))
    _, records = run_experiment(cfg, resume_from=args.resume)
    last = records[-1]
    print(f"done: step={last.step} loss={last.loss_total:.4f} r1_i2t={last.r1_i2t:.3f} "
          f"topo_sim={last.topo_sim:.3f} -> {out / 'metrics.csv'}")


def _config_from_checkpoint(doc):
    from .config import ExperimentConfig, from_dict

    return from_dict(doc["config"]) if doc.get("config") else ExperimentConfig()


def cmd_probe(args):
    from .checkpoint import load_agents
    from .config import replace
    from .metrics import ease_of_learn_probe
    from .world import make_world

    vision, language, cb, doc = load_agents(args.ckpt)
    cfg = _config_from_checkpoint(doc)
    probe = cfg.probe
    overrides = {}
    if args.steps is not None:
        overrides["probe.steps"] = args.steps
    if args.seed is not None:
        overrides["probe.seed"] = args.seed
    if overrides:
        probe = replace(cfg, **overrides).probe
    gen = doc["phase"]["generation"]
    name = Path(args.ckpt).name
    if name.startswith("ckpt_gen"):
        gen = int(name[len("ckpt_gen"):].split("_")[0])
    res = ease_of_learn_probe(vision, cb, make_world(cfg.world), language.arch, probe, gen, cfg.use_codebook)
    out_dir = Path(args.out) if args.out else Path(args.ckpt).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"probe_gen{gen}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "r1"])
        for step, r1 in res.accuracy_curve:
            w.writerow([step, repr(r1)])
    print(f"probe gen {gen}: final r1={res.final_r1:.3f} -> {path}")


def cmd_ablate(args):
    from .experiments import ablate

    cfg = _load_config(args)
    out = args.out or str(Path(cfg.out_dir) / "ablate")
    path = ablate(cfg, args.axis, out)
    print(f"ablation {args.axis} -> {path}")


def cmd_inspect_codes(args):
    from .agents import encode_batch, feature_batch
    from .checkpoint import load_agents
    from .codebook import code_usage, relevance, top_examples
    from .world import all_meanings, make_world, render_images

    vision, _, cb, doc = load_agents(args.ckpt)
    cfg = _config_from_checkpoint(doc)
    world = make_world(cfg.world)
    meanings = all_meanings(world.spec)
    images = render_images(world, meanings)
    feats = feature_batch(vision, images)
    scores = np.stack([relevance(f, cb.codes) for f in feats])
    _, weights = encode_batch(vision, cb, images)
    usage = code_usage(weights)
    k = min(args.top, len(meanings))
    report = {"checkpoint": str(args.ckpt), "top": k, "never_active": usage.never_active, "codes": []}
    for i in range(cb.size):
        idx = top_examples(i, scores, k)
        report["codes"].append({
            "code": i,
            "activation_frequency": float(usage.frequency[i]),
            "mean_weight": float(usage.mean_weight[i]),
            "top_meanings": [meanings[j].tolist() for j in idx],
            "top_scores": [float(scores[j, i]) for j in idx],
        })
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".codes.json")
    out.write_text(json.dumps(report, indent=1))
    active = [c for c in report["codes"] if c["activation_frequency"] > 0]
    for c in active:
        print(f"code {c['code']:4d} freq={c['activation_frequency']:.2f} top={c['top_meanings']}")
    print(f"{len(active)} active codes of {cb.size} -> {out}")


def cmd_plot(args):
    from .plot import plot_csv

    cols = [c for c in args.cols.split(",") if c]
    if not cols:
        raise ConfigError("--cols needs at least one column name")
    path = plot_csv(args.csv, cols, args.out, log_y=args.log_y)
    print(f"plot -> {path}")


def build_parser():
    p = argparse.ArgumentParser(prog="iterlearn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("probe", help="ease-of-learning probe against a checkpoint's vision agent")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--steps", type=int)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_probe)

    a = sub.add_parser("ablate", help="run every variant along one ablation axis")
    a.add_argument("--config")
    a.add_argument("--axis", required=True,
                   choices=["spawn_target", "cycle", "codebook_freeze", "use_codebook", "lipschitz_reg"])
    a.add_argument("--out")
    a.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    a.set_defaults(func=cmd_ablate)

    ic = sub.add_parser("inspect-codes", help="top meanings per code")
    ic.add_argument("--ckpt", required=True)
    ic.add_argument("--top", type=int, default=5)
    ic.add_argument("--out")
    ic.set_defaults(func=cmd_inspect_codes)

    pl = sub.add_parser("plot", help="SVG line chart of metrics.csv columns")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--cols", default="loss_total,r1_i2t")
    pl.add_argument("--out", required=True)
    pl.add_argument("--log-y", action="store_true")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except IterlearnError as e:
        print(f"iterlearn: {e.reason}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"iterlearn: file_error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
