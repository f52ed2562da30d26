import re
import shutil

import pytest

from stackrace.cli import load_config, main, parse_cells
from stackrace.errors import ConfigError
from stackrace.study import bundled_smoke_dir, read_manifest

SMOKE = bundled_smoke_dir()


def _write(path, text):
    path.write_text(text)
    return str(path)


def test_nash_toy(tmp_path, capsys):
    sc = _write(tmp_path / "s.txt", "game = nash-toy\n")
    assert main(["solve", sc]) == 0
    out = capsys.readouterr().out
    x = [float(v) for v in re.search(r"x = (\S+) (\S+)", out).groups()]
    assert x == pytest.approx([2.0, 2.0], abs=1e-8)


def test_stackelberg_toy_leader_cost(tmp_path, capsys):
    sc = _write(tmp_path / "s.txt", "game = stackelberg-toy\npair = L-F\n")
    assert main(["solve", sc]) == 0
    out = capsys.readouterr().out
    assert float(re.search(r"leader cost (\S+)", out).group(1)) == pytest.approx(0.5, abs=1e-6)
    x = [float(v) for v in re.search(r"x = (\S+) (\S+)", out).groups()]
    assert x == pytest.approx([0.5, 0.5], abs=1e-6)


def test_malformed_scenario_names_line(tmp_path, capsys):
    sc = _write(tmp_path / "s.txt", "game = racing\npair = N-N\np1 = 0 10 two 0\n")
    assert main(["solve", sc]) == 2
    assert "line 3" in capsys.readouterr().err


def test_bad_config_and_flags(tmp_path, capsys):
    cfg = _write(tmp_path / "c.cfg", "n_conditions = 5\nbogus_key = 1\n")
    sc = _write(tmp_path / "s.txt", "game = nash-toy\n")
    assert main(["solve", sc, "--config", cfg]) == 2
    assert "line 2" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["solve", sc, "--dynamics", "euler"])
    assert exc.value.code == 2


def test_config_overrides(tmp_path):
    cfg = _write(tmp_path / "c.cfg", "beta = 0.2\nhorizon_steps = 4\ntrack_jitter = 1e-4\n")
    c = load_config(cfg, {"master_seed": 9, "dynamics_mode": "paper-literal", "out_dir": None})
    assert c.params.beta == 0.2 and c.horizon_steps == 4 and c.track.jitter == 1e-4
    assert c.master_seed == 9 and c.params.dynamics_mode == "paper_literal"
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path / "d.cfg", "n_T = ten\n"))
    assert [x.label for x in parse_cells("F-L, S-S")] == ["L-F", "S-S"]


def test_symmetric_start_mirrors_nash_controls(tmp_path, capsys):
    # a near-exact straight so the two fitted arcs are mirror images
    cfg = _write(tmp_path / "c.cfg", "track_jitter = 1e-7\n")
    sc = _write(tmp_path / "s.txt", "pair = N-N\np1 = -1.0 5.0 2.0 0\np2 = 1.0 5.0 2.0 0\n")
    code = main(["solve", sc, "--config", cfg])
    out = capsys.readouterr().out
    assert code in (0, 3)
    c = [tuple(float(v) for v in m) for m in re.findall(r"executed tau (\S+) omega (\S+)", out)]
    assert len(c) == 2
    assert c[0][0] == pytest.approx(c[1][0], abs=1e-6)
    assert c[0][1] == pytest.approx(-c[1][1], abs=1e-6)


def test_simulate_overlap_and_repeat(tmp_path, capsys):
    sc = _write(tmp_path / "s.txt", "pair = N-N\np1 = 0 10 2 0\np2 = 0.2 10.3 2 0\n")
    assert main(["simulate", sc, "--out", str(tmp_path / "a")]) == 0
    summary = (tmp_path / "a" / "summary.txt").read_text()
    assert "termination = Collision" in summary and "steps = 0" in summary
    cfg = _write(tmp_path / "c.cfg", "horizon_steps = 2\n")
    for d in ("b", "c"):
        assert main(["simulate", "--config", cfg, "--pair", "S-S", "--seed", "3",
                     "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "b" / "S-S.trace").read_bytes()
    assert a == (tmp_path / "c" / "S-S.trace").read_bytes()
    meta = read_manifest(tmp_path / "b")
    assert meta["master_seed"] == "3" and meta["version"]
    assert "master_seed = 3" in (tmp_path / "b" / "config.txt").read_text()


def test_report_on_bundled_smoke(tmp_path, capsys):
    assert (SMOKE / "conditions.csv").exists(), "bundled smoke dataset missing"
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["report", str(SMOKE), "--out", str(out1)]) == 0
    assert main(["report", str(SMOKE), "--out", str(out2)]) == 0
    rows = (out1 / "costs.csv").read_text().splitlines()[1:]
    cells = [r for r in rows if not r.startswith("Average")]
    assert len(cells) == 16 and all(r.split(",")[-1] == "10" for r in cells)
    assert "meta-game" in (out1 / "tables.txt").read_text()
    for f in sorted(out1.iterdir()):
        assert f.read_bytes() == (out2 / f.name).read_bytes()


def test_report_incomplete(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 4
    data = tmp_path / "smoke"
    shutil.copytree(SMOKE, data)
    next((data / "traces" / "L-F").iterdir()).unlink()
    assert main(["report", str(data)]) == 4
    assert "L-F" in capsys.readouterr().err


def test_study_subset_is_incomplete(tmp_path, capsys):
    cfg = _write(tmp_path / "c.cfg", "n_conditions = 1\nhorizon_steps = 1\n")
    out = tmp_path / "st"
    assert main(["study", "--config", cfg, "--cells", "S-S", "--out", str(out)]) == 4
    assert (out / "traces" / "S-S" / "0000.trace").exists()
    assert read_manifest(out)["n_conditions"] == "1"
