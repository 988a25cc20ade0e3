"""``hoi-forge`` command line: gen, object, train, plan, sample, eval, ablate, schedule-dump.

Every artifact embeds the resolved configuration and the package version.
``--config`` accepts a YAML file or any earlier JSON artifact or checkpoint,
whose embedded configuration is then reused, so re-running a command with
the same inputs reproduces its output byte for byte.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, config as cfgmod, hoi, metrics
from . import io as hio
from .ablation import run_ablation
from .denoiser import TrainingDiverged
from .diffusion import cosine_schedule
from .estimator import HoiDiffusion, estimator_from_config
from .planner import InstructionGrammar, UngroundablePart, UnparsableInstruction, parse_instruction
from .sampler import guidance_log_csv, sample_segments, synthesize_long_horizon
from .synth import generate_dataset, make_object

log = logging.getLogger("hoi_forge")

EXIT_FAILURE = 1
CURVE_FIELDS = ("step", "L_total", "L_diff", "L_dist", "L_orient")


class CliError(Exception):
    pass


# -- configuration -----------------------------------------------------------


def _embedded_config(path):
    """Configuration embedded in an artifact, or None for a plain config file."""
    with open(path, "rb") as fh:
        head = fh.read(len(hio.MAGIC))
    if head == hio.MAGIC:
        return hio.read_checkpoint(path)[0]["config"]
    if str(path).endswith((".json", ".jsonl")):
        with open(path) as fh:
            doc = json.loads(fh.readline() if str(path).endswith(".jsonl") else fh.read())
        if isinstance(doc, dict) and "config" in doc and "schema" in doc:
            return doc["config"]
    return None


def _resolve_config(args, base=None, flag_overrides=()):
    data = base
    if args.config:
        embedded = _embedded_config(args.config)
        if embedded is not None:
            data = embedded
        else:
            return cfgmod.load(args.config, [*args.set, *flag_overrides, *_seed_override(args)])
    return cfgmod.resolve(data, [*args.set, *flag_overrides, *_seed_override(args)])


def _seed_override(args):
    return [{"seed": args.seed}] if getattr(args, "seed", None) is not None else []


def _stamp(cfg, **extra):
    return {"version": __version__, "config": cfg, **extra}


def _load_object(path, index=0):
    doc = hio.read_json(path)
    if doc.get("type") == "ObjectSet":
        objs = doc["objects"]
        if not 0 <= index < len(objs):
            raise CliError(f"object index {index} out of range (set has {len(objs)})")
        doc = objs[index]
    return hio.object_from_dict(doc)


def _write_text(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _curve_csv(curve):
    lines = [",".join(CURVE_FIELDS)]
    lines += [f"{int(r[0])}," + ",".join(f"{v:.10g}" for v in r[1:]) for r in curve]
    return "\n".join(lines) + "\n"


def _stem(path, suffix):
    p = str(path)
    for ext in (".json", ".jsonl", ".bin", ".ckpt"):
        if p.endswith(ext):
            return p[: -len(ext)] + suffix
    return p + suffix


# -- commands --------------------------------------------------------------------


def cmd_gen(args):
    flags = [{"data": {"count": args.count}}] if args.count is not None else []
    cfg = _resolve_config(args, flag_overrides=flags)
    d = cfg["data"]
    ds = generate_dataset(d["specs"], d["count"], seed=cfg["seed"],
                          records_per_object=d["records_per_object"], n_points=d["n_points"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    hio.write_dataset(args.out, ds, _stamp(cfg))
    log.info("wrote %d records over %d objects to %s", len(ds), len(ds.objects), args.out)


def cmd_object(args):
    cfg = _resolve_config(args)
    rng = np.random.default_rng(cfg["seed"])
    obj = make_object(args.kind, args.scale, rng, cfg["data"]["n_points"])
    doc = hio.object_to_dict(obj)
    doc.update(_stamp(cfg, inputs={"kind": args.kind, "scale": args.scale}))
    _write_text(args.out, hio.dumps(doc))


def cmd_train(args):
    dataset, header = hio.read_dataset(args.data)
    flags = [{"train": {"steps": args.steps}}] if args.steps is not None else []
    cfg = _resolve_config(args, base=header.get("config"), flag_overrides=flags)
    est = estimator_from_config(cfg).fit(dataset)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    est.save(args.out, run_config=cfg)
    curve = args.curve or _stem(args.out, ".curve.csv")
    _write_text(curve, _curve_csv(est.loss_curve_))
    if est.transition_curve_:
        base = curve[:-4] if curve.endswith(".csv") else curve
        _write_text(base + ".transition.csv", _curve_csv(est.transition_curve_))
    log.info("final L_total %.4f", est.loss_curve_[-1][1])


def cmd_plan(args):
    cfg = _resolve_config(args)
    grammar = InstructionGrammar.load(args.grammar)
    obj = _load_object(args.object, args.object_index)
    plan = parse_instruction(grammar, args.instruction, obj, args.duration)
    doc = hio.plan_to_dict(plan)
    doc.update(_stamp(cfg, inputs={"object": obj.name, "instruction": args.instruction}))
    _write_text(args.out, hio.dumps(doc))
    for line in plan.describe():
        print(line)


def cmd_sample(args):
    est = HoiDiffusion.load(args.checkpoint)
    flags = []
    if args.cfg_scale is not None:
        flags.append({"guidance": {"cfg_scale": args.cfg_scale}})
    if args.guidance_rate is not None:
        flags.append({"guidance": {"guidance_rate": args.guidance_rate}})
    cfg = _resolve_config(args, base=est.run_config_ or None, flag_overrides=flags)
    gcfg = cfgmod.guidance_config(cfg)
    obj = _load_object(args.object, args.object_index)
    plan = hio.plan_from_dict(hio.read_json(args.plan), obj)
    seeds = [cfg["seed"] + i for i in range(args.n_samples)]
    glog = []
    if len(plan) == 1:
        frames = sample_segments(est.net_, est.schedule_, plan, obj, gcfg, seeds, plan.aff_markers,
                                 log=glog)[0]
        active = np.tile(np.array(plan.subtasks[0].active), (frames.shape[1], 1))
        seqs = [hoi.unflatten(f.reshape(-1), active=active) for f in frames]
    else:
        seqs = synthesize_long_horizon(est.net_, est.transition_net_, est.schedule_, plan, obj, gcfg,
                                       seeds, plan.aff_markers, log=glog)
    doc = {"schema": hio.SCHEMA, "type": "HoiSample", "object": obj.name, "seeds": seeds,
           "plan": hio.plan_to_dict(plan), "sequences": [hio.sequence_to_dict(s) for s in seqs],
           **_stamp(cfg, inputs={"checkpoint": Path(args.checkpoint).name, "n_samples": args.n_samples})}
    _write_text(args.out, hio.dumps(doc))
    _write_text(args.log or _stem(args.out, ".guidance.csv"), guidance_log_csv(glog))


def _read_sequences(path):
    """List of sequence groups from one file (a HoiSample file is one group)."""
    doc = hio.read_json(path)
    if doc.get("type") == "HoiSample":
        return [hio.sequence_from_dict(s) for s in doc["sequences"]]
    return [hio.sequence_from_dict(doc)]


def _read_dir(path):
    files = sorted(p for p in Path(path).iterdir() if p.suffix == ".json")
    if not files:
        raise CliError(f"no .json sequence files in {path}")
    return [_read_sequences(p) for p in files]


def evaluate(pred_groups, gt_groups, obj, repeats, seed, pairs):
    pred = [s for g in pred_groups for s in g]
    gt = [s for g in gt_groups for s in g]
    if len(pred) != len(gt):
        raise CliError(f"{len(pred)} predicted sequences but {len(gt)} ground-truth sequences")
    fixed = {
        "mpjpe_mm": float(np.mean([metrics.mpjpe(p, g) for p, g in zip(pred, gt)])),
        "fol_m": float(np.mean([metrics.fol(p, g) for p, g in zip(pred, gt)])),
        "max_penetration_mm": float(np.mean([metrics.max_penetration_depth(p, obj) for p in pred])),
        "mean_penetration_mm": float(np.mean([metrics.mean_penetration_depth(p, obj) for p in pred])),
        "iv_cm3": float(np.mean([metrics.intersection_volume(p, obj) for p in pred])),
    }
    if len(pred) >= 2 and len(gt) >= 2:
        fixed["fid"] = metrics.fid(pred, gt)
    values = {k: [v] * repeats for k, v in fixed.items()}
    n_div = min(100, len(pred) // 2)
    min_group = min(len(g) for g in pred_groups)
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        if n_div >= 1:
            values.setdefault("diversity", []).append(metrics.diversity(pred, n_div, rng))
        if min_group >= 2:
            values.setdefault("mmodality", []).append(
                metrics.mmodality(pred_groups, min(pairs, min_group // 2), rng))
    out = {}
    for k, v in values.items():
        mean, std = metrics.mean_std(v)
        out[k] = {"mean": mean, "std": std, "values": v}
    return out


def cmd_eval(args):
    flags = [{"eval": {"repeats": args.repeats}}] if args.repeats is not None else []
    cfg = _resolve_config(args, flag_overrides=flags)
    obj = _load_object(args.object, args.object_index)
    res = evaluate(_read_dir(args.pred), _read_dir(args.gt), obj, cfg["eval"]["repeats"], cfg["seed"],
                   cfg["eval"]["pairs"])
    doc = {"schema": hio.SCHEMA, "type": "Metrics", "repeats": cfg["eval"]["repeats"], "metrics": res,
           **_stamp(cfg, inputs={"pred": Path(args.pred).name, "gt": Path(args.gt).name,
                                 "object": obj.name})}
    _write_text(args.out, hio.dumps(doc))


def cmd_ablate(args):
    est = HoiDiffusion.load(args.checkpoint)
    flags = [{"ablate": {"seeds": args.seeds}}] if args.seeds is not None else []
    cfg = _resolve_config(args, base=est.run_config_ or None, flag_overrides=flags)
    obj = _load_object(args.object, args.object_index)
    plan = hio.plan_from_dict(hio.read_json(args.plan), obj)
    dataset, _ = hio.read_dataset(args.data)
    ev = cfg["eval"]
    reference = metrics.WindowReference.fit([r.sequence for r in dataset.records], ev["window"], ev["stride"])
    ab = cfg["ablate"]
    seeds = [cfg["seed"] + i for i in range(ab["seeds"])]
    if len(seeds) < 10:
        log.warning("ablation over %d seeds; at least 10 are recommended", len(seeds))
    report = run_ablation(est, plan, obj, seeds, reference, cfgmod.guidance_config(cfg),
                          cfg_scales=ab["cfg_scales"], windows=ab["window_sizes"],
                          progress=lambda name: log.info("finished variant %s", name))
    report.extra = _stamp(cfg, inputs={"checkpoint": Path(args.checkpoint).name, "object": obj.name})
    _write_text(args.out, hio.dumps(report.to_dict()))
    _write_text(_stem(args.out, ".md"), report.table())
    print(report.table(), end="")


def cmd_schedule_dump(args):
    flags = []
    if args.T is not None:
        flags.append({"schedule": {"T": args.T}})
    if args.s0 is not None:
        flags.append({"schedule": {"s0": args.s0}})
    cfg = _resolve_config(args, flag_overrides=flags)
    sched = cosine_schedule(cfg["schedule"]["T"], cfg["schedule"]["s0"])
    doc = {"schema": hio.SCHEMA, "type": "NoiseSchedule", **sched.to_dict(), **_stamp(cfg)}
    text = hio.dumps(doc)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)


# -- parser ------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file or an earlier artifact to reuse")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. guidance.cfg_scale=3")
    common.add_argument("--seed", type=int, help="single source of randomness")
    common.add_argument("-v", "--verbose", action="store_true")

    obj_args = argparse.ArgumentParser(add_help=False)
    obj_args.add_argument("--object", required=True, help="ObjectModel JSON or objects sidecar")
    obj_args.add_argument("--object-index", type=int, default=0, help="index into an objects sidecar")

    p = argparse.ArgumentParser(prog="hoi-forge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hoi-forge {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--count", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("object", parents=[common], help="write one template object")
    s.add_argument("--kind", required=True, choices=("bottle", "box", "mug", "jar"))
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_object)

    s = sub.add_parser("train", parents=[common], help="train the denoiser and transition prior")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--curve", help="loss curve CSV (default: next to the checkpoint)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("plan", parents=[common, obj_args], help="decompose an instruction")
    s.add_argument("--grammar", help="grammar JSON (default: bundled grammar)")
    s.add_argument("--instruction", required=True)
    s.add_argument("--duration", type=int, default=150)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("sample", parents=[common, obj_args], help="guided sampling of a plan")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--guidance-rate", type=float)
    s.add_argument("--n-samples", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="guidance log CSV (default: next to --out)")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", parents=[common, obj_args], help="evaluate predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--repeats", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common, obj_args], help="run the ablation grid")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--data", required=True, help="dataset whose sequences form the smoothness reference")
    s.add_argument("--seeds", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("schedule-dump", parents=[common], help="write the noise schedule as JSON")
    s.add_argument("--T", type=int)
    s.add_argument("--s0", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_schedule_dump)
    return p


def _thread_limit():
    raw = os.environ.get("HOI_FORGE_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"HOI_FORGE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError("HOI_FORGE_THREADS must be >= 1")
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            args.func(args)
    except (CliError, cfgmod.ConfigError, hio.SchemaError, UnparsableInstruction, UngroundablePart,
            TrainingDiverged, FileNotFoundError, IsADirectoryError, PermissionError,
            json.JSONDecodeError, ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc).strip("'\""), "command": args.command}
        sys.stderr.write(json.dumps(err) + "\n")
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
