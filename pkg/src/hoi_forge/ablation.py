"""Ablation grid: guidance-term toggles, CFG-scale sweep and transition window sweep.

Each variant renders the same plan for the same seeds, so every metric is
paired across variants and compared to the full method with a one-sided
paired t-test (lower is better for every metric except realism).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import hoi, metrics
from ._validation import check_seeds
from .conditioning import build_prior, uniform_affordance_prior
from .guidance import loss_affordance
from .planner import ground_affordance
from .sampler import (_plan_subtasks, hard_concatenate, sample_segments, sample_transitions,
                      stitch, stitched_active)

METRICS = ("l_aff", "pen_depth", "iv", "realism", "smooth_rate")
HIGHER_IS_BETTER = {"realism"}
DEFAULT_CFG_SCALES = (0.5, 2.0, 2.5, 3.0, 5.0)
DEFAULT_WINDOWS = (1, 3, 5, 10, 20)


@dataclass(frozen=True)
class Variant:
    name: str
    group: str
    changes: tuple = ()
    uniform_affordance: bool = False

    def config(self, base):
        return replace(base, **dict(self.changes))


def ablation_grid(cfg_scales=DEFAULT_CFG_SCALES, windows=DEFAULT_WINDOWS):
    rows = [Variant("full", "full"),
            Variant("w/o affordance", "ablation", uniform_affordance=True),
            Variant("w/o CFG", "ablation", (("cfg_scale", 1.0),)),
            Variant("w/o l_pen", "ablation", (("lambda_pen", 0.0),)),
            Variant("w/o l_aff", "ablation", (("lambda_aff", 0.0),))]
    rows += [Variant(f"s={s:g}", "cfg_scale", (("cfg_scale", float(s)),)) for s in cfg_scales]
    rows += [Variant(f"window={w}", "window", (("window_size", int(w)),)) for w in windows]
    return rows


def _uniform_builder(obj, aff, sub, pose):
    return uniform_affordance_prior(obj, build_prior(obj, aff, sub, pose), pose)


@dataclass
class AblationReport:
    rows: list
    seeds: list
    metrics: tuple = METRICS
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"schema": 1, "type": "AblationReport", "seeds": self.seeds, "metrics": list(self.metrics),
                "rows": self.rows, **self.extra}

    def table(self):
        """Markdown table, cells ``mean ± std (p)``."""
        head = "| variant | " + " | ".join(self.metrics) + " |"
        lines = [head, "|" + "---|" * (len(self.metrics) + 1)]
        for r in self.rows:
            cells = []
            for m in self.metrics:
                c = r["metrics"][m]
                p = "" if c["p"] is None else f" (p={c['p']:.3g})"
                cells.append(f"{c['mean']:.4g} ± {c['std']:.2g}{p}")
            lines.append(f"| {r['name']} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def _per_seed_metrics(seqs, obj, subtasks, affs, segments, reference):
    """Metric vectors over seeds for stitched sequences."""
    out = {m: [] for m in METRICS}
    for b, seq in enumerate(seqs):
        la = 0.0
        for k, sub in enumerate(subtasks):
            la += loss_affordance(segments[k][b], obj, affs[k], sub.active)[0]
        out["l_aff"].append(la)
        out["pen_depth"].append(metrics.mean_penetration_depth(seq, obj))
        out["iv"].append(metrics.intersection_volume(seq, obj))
        real = [metrics.physical_realism(segments[k][b], obj, affs[k], sub.active)
                for k, sub in enumerate(subtasks)]
        out["realism"].append(float(np.mean(real)))
        out["smooth_rate"].append(metrics.smooth_rate(seq, reference))
    return {m: np.asarray(v) for m, v in out.items()}


def run_ablation(estimator, plan, obj, seeds, reference, base_config=None, pose=None,
                 cfg_scales=DEFAULT_CFG_SCALES, windows=DEFAULT_WINDOWS, progress=None):
    """Run the full grid and return an :class:`AblationReport`.

    Segment sampling is shared between variants whose segment-level settings
    coincide (the window sweep only resamples transitions), so identical
    configurations are never sampled twice.
    """
    seeds = check_seeds(seeds, minimum=2)
    base = base_config or estimator.guidance_config()
    subtasks = _plan_subtasks(plan)
    affs = [ground_affordance(obj, s) for s in subtasks]
    net, tnet, sched = estimator.net_, estimator.transition_net_, estimator.schedule_
    active = stitched_active(subtasks, base.transition_frames)

    seg_cache, results = {}, {}
    grid = ablation_grid(cfg_scales, windows)
    for v in grid:
        cfg = v.config(base)
        seg_key = (cfg.cfg_scale, cfg.guidance_rate, cfg.lambda_aff, cfg.lambda_pen, v.uniform_affordance)
        if seg_key not in seg_cache:
            builder = _uniform_builder if v.uniform_affordance else build_prior
            seg_cache[seg_key] = sample_segments(net, sched, subtasks, obj, cfg, seeds, affs, pose,
                                                 prior_builder=builder)
        segs = seg_cache[seg_key]
        key = seg_key + (cfg.window_size, cfg.lambda_trans)
        if key not in results:
            trans = sample_transitions(tnet, sched, segs, obj, cfg, seeds) if len(segs) > 1 else []
            seqs = [hoi.unflatten(f.reshape(-1), active=active) for f in stitch(segs, trans)]
            results[key] = _per_seed_metrics(seqs, obj, subtasks, affs, segs, reference)
        results[v.name] = results[key]
        if progress is not None:
            progress(v.name)

    full = results["full"]
    rows = []
    for v in grid:
        res = results[v.name]
        cells = {}
        for m in METRICS:
            mean, std = metrics.mean_std(res[m])
            p = None
            if v.name != "full":
                alt = "greater" if m in HIGHER_IS_BETTER else "less"
                p = metrics.paired_test(full[m], res[m], alternative=alt)[1]
            cells[m] = {"mean": mean, "std": std, "p": p, "values": res[m].tolist()}
        rows.append({"name": v.name, "group": v.group, "changes": dict(v.changes),
                     "uniform_affordance": v.uniform_affordance, "metrics": cells})
    return AblationReport(rows, seeds)


def hard_concatenation_baseline(segments, subtasks):
    """Stitched-free sequences used as the smoothness reference point."""
    frames = hard_concatenate(segments)
    flags = np.concatenate([np.tile(np.array(s.active, dtype=bool), (s.duration_frames, 1))
                            for s in subtasks])
    return [hoi.unflatten(f.reshape(-1), active=flags) for f in frames]
