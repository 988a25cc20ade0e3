import numpy as np
import pytest

from hoi_forge import metrics
from hoi_forge.ablation import METRICS, ablation_grid, hard_concatenation_baseline, run_ablation
from hoi_forge.planner import default_grammar, parse_instruction
from hoi_forge.sampler import sample_segments


def test_grid_rows():
    grid = ablation_grid()
    assert len(grid) == 15
    names = [v.name for v in grid]
    assert names[:5] == ["full", "w/o affordance", "w/o CFG", "w/o l_pen", "w/o l_aff"]
    assert names[5:10] == ["s=0.5", "s=2", "s=2.5", "s=3", "s=5"]
    assert names[10:] == ["window=1", "window=3", "window=5", "window=10", "window=20"]
    base = grid[0].config(__import__("hoi_forge.guidance", fromlist=["x"]).GuidanceConfig())
    assert grid[3].config(base).lambda_pen == 0.0 and grid[2].config(base).cfg_scale == 1.0
    assert grid[1].uniform_affordance


@pytest.fixture(scope="module")
def report(tiny_estimator, tiny_data):
    box = tiny_data.objects[1]
    plan = parse_instruction(default_grammar(), "open the box", box, duration_frames=40)
    ref = metrics.WindowReference.fit([r.sequence for r in tiny_data.records], window=10, stride=5)
    calls = []
    rep = run_ablation(tiny_estimator, plan, box, [0, 1], ref, progress=calls.append)
    return rep, calls, (plan, box, ref)


def test_report_shape(report):
    rep, calls, _ = report
    assert len(rep.rows) == 15 and len(calls) == 15
    full = rep.rows[0]
    assert full["metrics"]["l_aff"]["p"] is None
    for row in rep.rows[1:]:
        for m in METRICS:
            cell = row["metrics"][m]
            assert len(cell["values"]) == 2 and (cell["p"] is None or 0.0 <= cell["p"] <= 1.0)
    table = rep.table()
    assert table.count("\n") == 17 and "| w/o l_pen |" in table
    assert rep.to_dict()["type"] == "AblationReport"


def test_shared_configurations_agree(report):
    rep, _, _ = report
    rows = {r["name"]: r["metrics"] for r in rep.rows}
    for m in METRICS:
        assert rows["s=2.5"][m]["values"] == rows["full"][m]["values"]
        assert rows["window=5"][m]["values"] == rows["full"][m]["values"]
        assert rows["s=2.5"][m]["p"] == 1.0


def test_ablation_is_deterministic(report, tiny_estimator):
    rep, _, (plan, box, ref) = report
    again = run_ablation(tiny_estimator, plan, box, [0, 1], ref)
    assert again.to_dict() == rep.to_dict()


def test_ablation_needs_two_seeds(report, tiny_estimator):
    _, _, (plan, box, ref) = report
    with pytest.raises(ValueError):
        run_ablation(tiny_estimator, plan, box, [0], ref)


def test_hard_concatenation_baseline(report, tiny_estimator):
    _, _, (plan, box, _) = report
    cfg = tiny_estimator.guidance_config(guidance_rate=0.0)
    segs = sample_segments(tiny_estimator.net_, tiny_estimator.schedule_, plan, box, cfg, [0])
    seqs = hard_concatenation_baseline(segs, plan.subtasks)
    assert len(seqs) == 1 and len(seqs[0]) == 80
    np.testing.assert_array_equal(seqs[0].active[:40], np.tile(plan.subtasks[0].active, (40, 1)))
