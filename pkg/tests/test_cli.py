import json

import numpy as np
import pytest

from topomerge import topomap
from topomerge.cli import main, read_config
from topomerge.errors import ConfigError
from topomerge.se3 import Pose


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    assert run("generate", "--out", root) == 0
    assert run("build-submaps", "--world", root) == 0
    assert run("merge", "--world", root, "--out", root / "merged") == 0
    return root


def test_demo_pipeline_end_to_end(demo, capsys):
    assert run("eval", "--map", demo / "merged" / "merged.map", "--ground-truth", demo / "ground_truth.txt",
               "--out", demo / "eval") == 0
    rows = dict(line.split(",") for line in (demo / "eval" / "metrics.csv").read_text().splitlines()[1:])
    assert float(rows["ate_translation_m"]) < 2.0
    assert int(rows["components"]) == 1
    assert len(list((demo / "merged" / "reports").glob("merge_*.txt"))) == 3
    assert (demo / "merged" / "stages.csv").exists()
    assert run("export", "--map", demo / "merged" / "merged.map", "--out", demo / "export") == 0
    assert json.loads((demo / "export" / "map.geojson").read_text())["type"] == "FeatureCollection"
    assert (demo / "export" / "map.dot").read_text().startswith("graph topomap {")


def test_generate_is_idempotent(demo, tmp_path):
    assert run("generate", "--out", tmp_path) == 0
    for name in ("run.ini", "ground_truth.txt"):
        assert (tmp_path / name).read_bytes() == (demo / name).read_bytes()


def test_shuffled_merge_is_deterministic(demo):
    outs = []
    for k in range(2):
        out = demo / f"shuffled{k}"
        assert run("merge", "--world", demo, "--out", out, "--shuffle", "--order-seed", 7) == 0
        outs.append(out)
    for name in ("merged.map", "stages.csv", "order.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert (outs[0] / "order.txt").read_text() != "submap_000.map submap_001.map submap_002.map\n"


def test_merge_does_not_touch_inputs(demo):
    before = {p.name: p.read_bytes() for p in (demo / "submaps").iterdir()}
    assert run("merge", "--world", demo, "--out", demo / "again") == 0
    assert {p.name: p.read_bytes() for p in (demo / "submaps").iterdir()} == before


def test_plan_with_verification(demo, capsys):
    m = topomap.load_map(demo / "merged" / "merged.map")
    ids = m.node_ids()
    goal = ids[len(ids) // 2]
    (demo / "goal.txt").write_text(" ".join(repr(float(x)) for x in m.nodes[goal].descriptor))
    capsys.readouterr()
    rc = run("plan", "--map", demo / "merged" / "merged.map", "--goal-descriptor", demo / "goal.txt",
             "--start", ids[0], "--goal-frame", goal, "--world", demo)
    lines = capsys.readouterr().out.splitlines()
    assert rc == 0
    assert lines[0].startswith("PATH reachable=true") and f"goal={goal}" in lines[0]
    gj = json.loads(lines[1])
    assert gj["features"][0]["properties"]["nodes"][-1] == goal


def test_plan_unreachable_goal(tmp_path, capsys):
    m = topomap.TopometricMap(descriptor_dim=2)
    m.add_node(topomap.MapNode(0, np.array([1.0, 0.0]), 0.0, Pose.identity(), 50.0, None, 0))
    m.add_node(topomap.MapNode(1, np.array([0.0, 1.0]), 1.0, Pose.identity(), 50.0, None, 1))
    topomap.save_map(m, tmp_path / "m.map")
    (tmp_path / "g.txt").write_text("0 1")
    rc = run("plan", "--map", tmp_path / "m.map", "--goal-descriptor", tmp_path / "g.txt", "--start", 0,
             "--out", tmp_path)
    out = capsys.readouterr().out.splitlines()
    assert rc == 0
    assert out[0].startswith("PATH reachable=false goal=1")
    assert json.loads((tmp_path / "path.geojson").read_text())["features"][0]["properties"]["reachable"] is False


def test_errors_are_single_line(tmp_path, capsys):
    assert run("eval", "--map", tmp_path / "missing.map", "--ground-truth", tmp_path / "gt", "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("error: ")
    assert run("frobnicate") == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1


def test_thread_cap_validation(demo, monkeypatch, capsys):
    monkeypatch.setenv("TOPOMERGE_THREADS", "zero")
    assert run("merge", "--world", demo, "--out", demo / "t") == 2
    assert "TOPOMERGE_THREADS" in capsys.readouterr().err


# -- config parsing -------------------------------------------------------------------

def write(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    return p


def test_config_values_and_defaults(tmp_path):
    cfg = read_config(write(tmp_path, """\
[run]
seed = 9
[world]
lengths = 50 60
epochs = 0 2
overlaps = 0-1:0.5
step_m = 2.0
[culling]
td_decay_rate = 0.05
enabled = no
[seqmatch]
velocity_set = 1 2
[merge]
refs_per_query = 1
"""))
    assert cfg["seed"] == 9
    spec = cfg["world_spec"]
    assert [s.length_m for s in spec.sessions] == [50.0, 60.0] and spec.sessions[1].epoch == 2
    assert spec.overlaps == [(0, 1, 0.5)] and spec.step_m == 2.0
    assert cfg["merge"].culling.td_decay_rate == 0.05 and not cfg["merge"].culling.enabled
    assert cfg["merge"].seqmatch.velocity_set == (1, 2)
    assert cfg["merge"].refs_per_query == 1
    assert cfg["merge"].kernel.huber_delta > 3


@pytest.mark.parametrize("text, line", [
    ("[world]\nlengths = 10\n[culling]\n\nbogus = 1\n", 5),
    ("[world]\nlengths = 10\n[irls]\nmu = abc\n", 4),
    ("[world]\nlengths = 10 x\n", 2),
    ("[world]\nlengths = 10\nthis line is junk\n", 3),
    ("[world]\nlengths = 10\n[nope]\n", 3),
    ("[world]\nlengths = 10\n[culling]\ncull_probability_threshold = 2\n", 4),
])
def test_config_errors_report_line(tmp_path, text, line):
    p = write(tmp_path, text)
    with pytest.raises(ConfigError) as exc:
        read_config(p)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"{p}:{line}:")


def test_config_error_exits_nonzero(tmp_path, capsys):
    p = write(tmp_path, "[world]\nlengths = 10\n[irls]\nmu = abc\n")
    assert run("generate", "--config", p, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "c.ini:4:" in err and err.count("\n") == 1
