import csv
import io
import json

import numpy as np
import pytest

from supgrom import bench
from supgrom.bench import (ConfigError, ErrorMeter, ExperimentConfig, PRESETS, emit_report,
                           inspect_offline, load_report, main, preset_config, run_experiment)
from supgrom.mesh import build_structured_mesh
from supgrom.pod_rom import SnapshotCollectionError


def small_config(**kw):
    base = dict(problem="graetz", nx=20, ny=10, N_train=6, N_test=2, N_max=4)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.mark.parametrize("changes", [
    dict(N_test=0), dict(N_max=10, N_train=5), dict(nx=21), dict(seed_test=1),
    dict(box=[[2e5, 1e5]]), dict(box=[[1e4, 1e5], [0, 1]]), dict(alpha=0.0),
    dict(delta=-1.0), dict(modes=["fast"]), dict(problem="cube"), dict(N_max=2.5),
    dict(parabolic_error="max"),
])
def test_invalid_configs(changes):
    with pytest.raises(ConfigError):
        small_config(**changes).validate()


def test_presets_match_defaults():
    for name in PRESETS:
        cfg = preset_config(name).validate()
        mesh = cfg.build_mesh()
        assert cfg.N_train == 100 and cfg.alpha == 0.01 and cfg.delta == 1.0
        target = {"graetz-steady": 0.029, "graetz-parabolic": 0.038,
                  "square-steady": 0.025, "square-parabolic": 0.036}[name]
        assert abs(mesh.h - target) <= 0.15 * target
    assert preset_config("square-steady").N_max == 50
    assert preset_config("square-parabolic").N_max == 30
    p = preset_config("graetz-parabolic").build_problem()
    assert p.n_time_steps == 30 and p.dt == pytest.approx(0.1)
    assert preset_config("graetz-steady", N_max=5).N_max == 5
    with pytest.raises(ConfigError):
        preset_config("nope")


@pytest.fixture(scope="module")
def small_run():
    return run_experiment(small_config())


def test_report_shapes(small_run):
    rep = small_run
    assert rep.valid
    for slug in ("online-offline", "only-offline"):
        for v in "yup":
            assert len(rep.errors[slug][v]) == 4
        s = rep.speedup[slug]
        for lo, mid, hi in zip(s["min"], s["avg"], s["max"]):
            assert 0 < lo <= mid <= hi
    assert len(rep.hf_times) == 2


def test_determinism(small_run):
    again = run_experiment(small_config())
    assert again.errors == small_run.errors
    assert again.eigenvalues == small_run.eigenvalues


def test_reproduction_in_training_set():
    # a degenerate box makes every test point a training point
    rep = run_experiment(small_config(box=[[2e5, 2e5]], N_train=2, N_test=1, N_max=1))
    errs = rep.errors["online-offline"]
    assert max(errs[v][-1] for v in "yup") <= 1e-6
    assert rep.speedup["online-offline"]["avg"][-1] > 1


def test_emit_roundtrip(small_run, tmp_path):
    emit_report(small_run, tmp_path)
    back = load_report(tmp_path)
    assert back.to_dict() == json.loads(json.dumps(small_run.to_dict()))
    for slug in ("online-offline", "only-offline"):
        rows = list(csv.reader(open(tmp_path / "errors_{}.csv".format(slug))))
        assert rows[0][:4] == ["N", "e_y", "e_u", "e_p"] and len(rows) == 4 + 1
        assert float(rows[1][4]) == pytest.approx(np.log10(float(rows[1][1])))
        rows = list(csv.reader(open(tmp_path / "speedup_{}.csv".format(slug))))
        assert rows[0] == ["N", "min", "avg", "max"] and len(rows) == 4 + 1
    rows = list(csv.reader(open(tmp_path / "eigenvalues.csv")))[1:]
    for k in (1, 2, 3):
        col = [float(r[k]) for r in rows if r[k]]
        assert col == sorted(col, reverse=True)


def test_emit_to_unwritable_path(small_run, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(small_run, blocker / "sub")


def test_error_meter_aggregations():
    from supgrom.assembly import graetz_problem, lifted_spaces
    mesh = build_structured_mesh("GraetzRect", 10, 5)
    spaces = lifted_spaces(graetz_problem(), mesh)
    rng = np.random.default_rng(0)
    ref = rng.standard_normal((3, mesh.n_vertices))
    approx = ref.copy()
    approx[1] *= 1.1
    st = ErrorMeter(mesh, spaces, 3, "spacetime").relative("u", ref.ravel(), approx.ravel())
    sm = ErrorMeter(mesh, spaces, 3, "sum").relative("u", ref.ravel(), approx.ravel())
    assert sm == pytest.approx(0.1)
    assert 0 < st < 0.1
    assert ErrorMeter(mesh, spaces).relative("u", ref[0], ref[0]) == 0


def test_cli_success_and_inspect(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--preset", "graetz-steady", "--mesh-nx", "20", "--mesh-ny", "10",
                 "--ntrain", "5", "--ntest", "1", "--nmax", "3", "--mode", "online-offline",
                 "--out", str(out)])
    assert code == 0
    assert (out / "report.json").exists() and (out / "errors_online-offline.csv").exists()
    assert not (out / "errors_only-offline.csv").exists()
    assert main(["inspect", "--offline", str(out)]) == 0
    text = capsys.readouterr().out
    assert "GraetzSteady" in text


def test_inspect_output(tmp_path):
    run_experiment(small_config(), offline_dir=tmp_path)
    buf = io.StringIO()
    inspect_offline(tmp_path, stream=buf)
    lines = buf.getvalue().splitlines()
    assert lines[2].split()[1:] == ["1.000e+00"] * 3


def test_cli_invalid_config(tmp_path):
    assert main(["run", "--preset", "graetz-steady", "--ntrain", "5", "--nmax", "10",
                 "--out", str(tmp_path)]) == 2
    assert main(["run", "--preset", "graetz-steady", "--mesh-nx", "7",
                 "--out", str(tmp_path)]) == 2
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"problem": "graetz", "bogus": 1}))
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["inspect", "--offline", str(tmp_path / "missing")]) == 2


def test_cli_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(dict(small_config(N_test=1, N_max=2).to_dict(),
                                   out=str(tmp_path / "o"))))
    assert main(["run", "--config", str(cfg)]) == 0
    assert load_report(tmp_path / "o").config["N_max"] == 2


def test_cli_solver_failure(tmp_path, monkeypatch):
    def fail(*args, **kw):
        raise SnapshotCollectionError("boom", [(0, [1e5], "singular")])
    monkeypatch.setattr(bench, "collect_snapshots", fail)
    out = tmp_path / "fail"
    code = main(["run", "--preset", "graetz-steady", "--mesh-nx", "20", "--mesh-ny", "10",
                 "--ntrain", "5", "--ntest", "1", "--nmax", "3", "--out", str(out)])
    assert code == 3
    rep = load_report(out)
    assert rep.valid is False and rep.notes
