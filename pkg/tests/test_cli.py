import json
import subprocess
import sys

import numpy as np
import pytest

from hoi_forge import hoi, io as hio
from hoi_forge.cli import main

TINY = ["--set", "data.specs=[{kind: bottle, duration: 40}, {kind: box, duration: 40}]",
        "--set", "data.count=8", "--set", "data.records_per_object=2", "--set", "schedule.T=20",
        "--set", "model.hidden_width=16", "--set", "model.n_hidden=1", "--set", "model.time_dim=8",
        "--set", "model.cond_width=8", "--set", "model.embed_dim=4", "--set", "train.steps=4",
        "--set", "train.batch_size=4", "--set", "transition.hidden_width=16", "--set", "transition.n_hidden=1",
        "--set", "transition.steps=3", "--set", "guidance.transition_frames=10"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen", "--out", d / "data.jsonl", "--seed", 3, *TINY) == 0
    objs = d / "data.objects.json"
    assert run("train", "--data", d / "data.jsonl", "--out", d / "model.ckpt") == 0
    assert run("plan", "--object", objs, "--object-index", 1, "--instruction", "open the box",
               "--duration", 40, "--out", d / "plan.json") == 0
    assert run("sample", "--checkpoint", d / "model.ckpt", "--object", objs, "--object-index", 1,
               "--plan", d / "plan.json", "--n-samples", 2, "--out", d / "sample.json") == 0
    return d


def test_gen_is_deterministic(tmp_path):
    assert run("gen", "--out", tmp_path / "a.jsonl", "--count", 4, *TINY) == 0
    assert run("gen", "--out", tmp_path / "b.jsonl", "--count", 4, *TINY) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert run("gen", "--out", tmp_path / "c.jsonl", "--count", 4, "--seed", 1, *TINY) == 0
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_pipeline_artifacts(pipeline):
    header = json.loads((pipeline / "data.jsonl").read_text().splitlines()[0])
    assert header["type"] == "HoiDataset" and header["n_records"] == 8 and header["config"]["seed"] == 3
    curve = (pipeline / "model.curve.csv").read_text().splitlines()
    assert curve[0] == "step,L_total,L_diff,L_dist,L_orient" and len(curve) == 5
    assert (pipeline / "model.curve.transition.csv").exists()
    sample = hio.read_json(pipeline / "sample.json")
    assert sample["type"] == "HoiSample" and len(sample["sequences"]) == 2
    assert sample["sequences"][0]["n_frames"] == 90
    assert sample["config"]["seed"] == 3 and sample["version"]
    log = (pipeline / "sample.guidance.csv").read_text().splitlines()
    assert log[0].startswith("segment,sample,t,")


@pytest.mark.parametrize("cmd,out,extra", [
    ("gen", "data.jsonl", []),
    ("train", "model.ckpt", ["--data", "data.jsonl"]),
    ("sample", "sample.json", ["--checkpoint", "model.ckpt", "--object", "data.objects.json", "--object-index", "1",
                               "--plan", "plan.json", "--n-samples", "2"]),
])
def test_rerun_with_embedded_config_is_byte_identical(pipeline, tmp_path, cmd, out, extra):
    extra = [str(pipeline / e) if e.endswith((".jsonl", ".ckpt", ".json")) else e for e in extra]
    assert run(cmd, "--config", pipeline / out, "--out", tmp_path / out, *extra) == 0
    assert (tmp_path / out).read_bytes() == (pipeline / out).read_bytes()


def test_eval_reports_mean_and_std(pipeline, tmp_path):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    data, _ = hio.read_dataset(pipeline / "data.jsonl")
    for i, r in enumerate(data.records[:4]):
        hio.write_json(gt / f"{i}.json", hio.sequence_to_dict(r.sequence))
        f = hoi.frame_view(hoi.flatten(r.sequence)).copy()
        f[:, hoi.RIGHT_JOINTS] += 0.001 * np.sin(np.arange(f.shape[0]))[:, None]
        moved = hoi.unflatten(f.reshape(-1), active=r.sequence.active)
        hio.write_json(pred / f"{i}.json", hio.sequence_to_dict(moved))
    assert run("eval", "--pred", pred, "--gt", gt, "--object", pipeline / "data.objects.json",
               "--repeats", 3, "--out", tmp_path / "m.json") == 0
    m = hio.read_json(tmp_path / "m.json")["metrics"]
    for key in ("mpjpe_mm", "fol_m", "fid", "diversity", "iv_cm3"):
        assert set(m[key]) == {"mean", "std", "values"} and len(m[key]["values"]) == 3
    assert 0 < m["mpjpe_mm"]["mean"] < 2 and m["mpjpe_mm"]["std"] == 0


def test_schedule_dump(tmp_path, capsys):
    assert run("schedule-dump", "--T", 10) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["type"] == "NoiseSchedule" and len(doc["alpha_bar"]) == 10
    assert run("schedule-dump", "--T", 10, "--out", tmp_path / "s.json") == 0
    assert json.loads((tmp_path / "s.json").read_text()) == doc


def test_missing_checkpoint_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--plan", "p.json", "--object", "o.json", "--out", "x.json"])
    assert exc.value.code != 0


def test_errors_are_json_on_stderr(pipeline, tmp_path, capsys):
    assert run("sample", "--checkpoint", tmp_path / "missing.ckpt", "--object", pipeline / "data.objects.json",
               "--plan", pipeline / "plan.json", "--out", tmp_path / "x.json") == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFoundError" and err["command"] == "sample"
    assert run("plan", "--object", pipeline / "data.objects.json", "--instruction", "sing a song",
               "--out", tmp_path / "p.json") == 1
    assert run("gen", "--out", tmp_path / "g.jsonl", "--set", "trian.steps=3") == 1
    assert not (tmp_path / "g.jsonl").exists()


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "hoi_forge.cli", "schedule-dump", "--T", "5"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and json.loads(res.stdout)["T"] == 5
    res = subprocess.run([sys.executable, "-m", "hoi_forge.cli", "sample"], capture_output=True, text=True)
    assert res.returncode == 2 and "--checkpoint" in res.stderr
