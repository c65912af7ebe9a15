import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from autoshard import programs
from autoshard.cli import main

PROGS = Path(__file__).resolve().parent.parent / "programs"


@pytest.fixture
def ir(tmp_path):
    def write(name, text):
        p = tmp_path / name
        p.write_text(text)
        return str(p)

    return write


def test_program_files_match_builtin_sources():
    assert (PROGS / "mlp.ir").read_text() == programs.MLP
    assert (PROGS / "attn.ir").read_text() == programs.ATTN


def test_analyze_attn(ir, tmp_path, capsys):
    conf = tmp_path / "c.json"
    dot = tmp_path / "g.dot"
    nda = tmp_path / "n.json"
    rc = main(["analyze", ir("attn.ir", programs.ATTN), "--dump-conflicts", str(conf),
               "--dump-graph", str(dot), "--dump-nda", str(nda)])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["conflicts"] == 5 and summary["compatibility_sets"] == 1
    doc = json.loads(conf.read_text())
    assert len(doc["conflicts"]) == 5 and len(doc["sets"]) == 1
    assert dot.read_text().count("color=red") == 5
    assert json.loads(nda.read_text())["module"] == "attn"


def test_partition_mlp(ir, tmp_path):
    out, rep = tmp_path / "out.ir", tmp_path / "rep.json"
    rc = main(["partition", ir("mlp.ir", programs.MLP), "--mesh", "b=2,m=2", "--min-dims", "1",
               "--seed", "0", "--emit-sharded", str(out), "--report", str(rep)])
    assert rc == 0
    doc = json.loads(rep.read_text())
    assert doc["score"]["rt"] < 1
    assert "search" in doc and doc["search"]["actions"]
    assert out.read_text().startswith("def mlp(")


def test_partition_empty_program(ir, tmp_path):
    rep = tmp_path / "rep.json"
    rc = main(["partition", ir("empty.ir", programs.IDENTITY), "--mesh", "b=2",
               "--emit-sharded", str(tmp_path / "o.ir"), "--report", str(rep)])
    assert rc == 0
    doc = json.loads(rep.read_text())
    assert doc["state"] == {"colors": {}, "resolutions": {}}
    assert doc["score"]["rt"] == 1


def test_apply_and_simulate(ir, tmp_path, capsys):
    st = tmp_path / "s.json"
    st.write_text(json.dumps({"colors": {"0": ["b"], "2": ["m"]}, "resolutions": {}}))
    path = ir("mlp.ir", programs.MLP)
    out = tmp_path / "o.ir"
    assert main(["apply", path, "--mesh", "b=2,m=2", "--state", str(st), "--emit-sharded", str(out)]) == 0
    assert "all_reduce {m} w_" in out.read_text()
    rng = np.random.default_rng(0)
    npz = tmp_path / "in.npz"
    np.savez(npz, x=rng.standard_normal((256, 32)), w1=rng.standard_normal((32, 64)), w2=rng.standard_normal((64, 16)))
    assert main(["simulate", path, "--mesh", "b=2,m=2", "--state", str(st), "--inputs", str(npz)]) == 0
    assert "ok" in capsys.readouterr().out


def test_bad_state_fails_cleanly(ir, tmp_path, capsys):
    st = tmp_path / "s.json"
    st.write_text(json.dumps({"colors": {"0": ["q"]}}))
    rc = main(["apply", ir("mlp.ir", programs.MLP), "--mesh", "b=2", "--state", str(st)])
    assert rc != 0
    assert "not in the mesh" in capsys.readouterr().err


def test_parse_error_reports_location(ir, capsys):
    rc = main(["analyze", ir("bad.ir", "def f(x: f32[4]) {\n  y = nope(x)\n  return y\n}\n")])
    assert rc != 0
    assert "bad.ir:2:" in capsys.readouterr().err


def test_groups_override(ir, tmp_path, capsys):
    g = tmp_path / "g.json"
    g.write_text(json.dumps({"groups": [["wq", "wk"]]}))
    assert main(["analyze", ir("attn.ir", programs.ATTN), "--groups", str(g)]) == 0
    groups = json.loads(capsys.readouterr().out)["argument_groups"]
    assert ["wq", "wk"] in groups and ["wv"] in groups


def test_machine_spec_file(ir, tmp_path):
    mach = tmp_path / "m.json"
    mach.write_text(json.dumps({"flops_per_sec": 1e9, "bandwidth": {"b": 1e9, "m": 1e9}, "device_memory_bytes": 1e9}))
    rep = tmp_path / "r.json"
    rc = main(["partition", ir("mlp.ir", programs.MLP), "--mesh", "b=2,m=2", "--min-dims", "1",
               "--machine", str(mach), "--report", str(rep), "--emit-sharded", str(tmp_path / "o.ir")])
    assert rc == 0
    assert json.loads(rep.read_text())["machine"]["flops_per_sec"] == 1e9


def test_console_script_runs(tmp_path):
    exe = shutil.which("autoshard")
    cmd = [exe] if exe else [sys.executable, "-m", "autoshard.cli"]
    res = subprocess.run(cmd + ["analyze", str(PROGS / "mlp.ir")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["conflicts"] == 0
