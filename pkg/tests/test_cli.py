import json

import numpy as np
import pytest

from spadfusion import datacube as dc
from spadfusion import forward_model as fm
from spadfusion import sensor_sim as ss
from spadfusion import solver as sv
from spadfusion.cli import main

SCENE = """\
kind = lidar
rows = 24
cols = 24
bins = 16
bin_width = 55.0
plane.near = [0, 12, 0, 24, 4, 1.0]
plane.far = [12, 24, 0, 24, 10, 0.7]
"""

SIM = """\
upsample_factor = 4
blur_sigma = 2.0
photon_scale = 20000
dead_pixel_fraction = 0.05
seed = 9
model_dead_pixels = true
"""

RECON = SIM + "max_iters = 60\ncheck_every = 5\n"


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "scene.cfg").write_text(SCENE)
    (tmp_path / "sim.cfg").write_text(SIM)
    (tmp_path / "recon.cfg").write_text(RECON)
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(w, tag="", seed=None):
    truth = w / "truth.trcb"
    if not truth.exists():
        assert run("render", "--config", w / "scene.cfg", "--out", truth) == 0
    spad = w / f"spad{tag}.trcb"
    extra = ["--seed", seed] if seed is not None else []
    assert run("simulate", "--config", w / "sim.cfg", "--truth", truth, "--out", spad, *extra) == 0
    rec = w / f"rec{tag}.trcb"
    assert run("reconstruct", "--config", w / "recon.cfg", "--spad", spad,
               "--ccd", w / f"spad{tag}.trcb.ccd.trcb", "--preset", "lidar",
               "--threads", 1, "--out", rec) == 0
    return truth, spad, rec


def test_pipeline_is_deterministic(workdir):
    _, s1, r1 = pipeline(workdir, "1")
    _, s2, r2 = pipeline(workdir, "2")
    for a, b in [(s1, s2), (r1, r2)]:
        assert a.read_bytes() == b.read_bytes()
    assert (workdir / "spad1.trcb.ccd.trcb").read_bytes() == (workdir / "spad2.trcb.ccd.trcb").read_bytes()
    assert (workdir / "spad1.trcb.dead.csv").read_text() == (workdir / "spad2.trcb.dead.csv").read_text()


def test_seed_flag_overrides_config(workdir):
    _, s1, _ = pipeline(workdir, "a", seed=1)
    _, s2, _ = pipeline(workdir, "b", seed=2)
    assert s1.read_bytes() != s2.read_bytes()
    man = json.loads((workdir / "spada.trcb.manifest.json").read_text())
    assert man["seed"] == 1 and man["config"]["noise"]["seed"] == 1


def test_manifest_and_report(workdir):
    truth, spad, rec = pipeline(workdir)
    man = json.loads((workdir / "rec.trcb.manifest.json").read_text())
    assert man["command"] == "reconstruct"
    solver = man["config"]["solver"]
    assert solver["preset"] == "lidar"
    assert (solver["alpha"], solver["beta"], solver["gamma"], solver["delta"]) == (1.0, 1e-4, 1e-2, 0.0)
    assert solver["max_iters"] == 60  # config file wins over preset defaults
    assert man["outputs"][str(rec)] == __import__("hashlib").sha256(rec.read_bytes()).hexdigest()
    # report objective agrees with an independent evaluation
    rows = dict(line.split(",", 1) for line in (workdir / "rec.trcb.report.csv").read_text().splitlines()[1:])
    meas = dc.SpadMeasurement(dc.load_cube(spad).values, 55.0,
                              dc.read_dead_pixels(open(str(spad) + ".dead.csv")))
    img = dc.cube_to_image(dc.load_cube(str(spad) + ".ccd.trcb"))
    geom = fm.FusionGeometry.for_high_res(24, 24, 4, blur_sigma=2.0, model_dead_pixels=True,
                                          dead_pixels=meas.dead_pixels)
    cfg = sv.preset("lidar", max_iters=60, check_every=5)
    _, total = sv.objective(dc.load_cube(rec), meas, sv.normalize_ccd(img, meas, geom), geom, cfg)
    assert float(rows["objective"]) == pytest.approx(total, rel=1e-6)


def test_replay_from_manifest(workdir):
    _, spad, _ = pipeline(workdir)
    man = json.loads((workdir / "spad.trcb.manifest.json").read_text())
    before = spad.read_bytes()
    assert main(man["argv"]) == 0
    assert spad.read_bytes() == before


def test_noiseless_matches_library(workdir):
    truth = workdir / "truth.trcb"
    run("render", "--config", workdir / "scene.cfg", "--out", truth)
    out = workdir / "clean.trcb"
    assert run("simulate", "--config", workdir / "sim.cfg", "--truth", truth, "--out", out, "--noiseless") == 0
    cube = dc.load_cube(truth)
    geom = fm.FusionGeometry.for_high_res(24, 24, 4, blur_sigma=2.0, model_dead_pixels=True)
    d, c = ss.simulate_pair(cube, geom, ss.NoiseSpec(photon_scale=20000, seed=9, poisson=False))
    np.testing.assert_array_equal(dc.load_cube(out).values, d.values)
    np.testing.assert_array_equal(dc.cube_to_image(dc.load_cube(str(out) + ".ccd.trcb")).values, c.values)
    assert (workdir / "clean.trcb.dead.csv").read_text() == ""


def test_simulate_factor_three(tmp_path):
    dc.save_cube(dc.TransientCube(np.ones((4, 96, 96)), 55.0), tmp_path / "t.trcb")
    (tmp_path / "s.cfg").write_text("upsample_factor = 3\n")
    assert run("simulate", "--config", tmp_path / "s.cfg", "--truth", tmp_path / "t.trcb",
               "--out", tmp_path / "d.trcb") == 0
    assert dc.load_cube(tmp_path / "d.trcb").values.shape == (4, 32, 32)


def test_simulate_dimension_mismatch(tmp_path, capsys):
    dc.save_cube(dc.TransientCube(np.ones((4, 10, 10)), 55.0), tmp_path / "t.trcb")
    (tmp_path / "s.cfg").write_text("upsample_factor = 3\n")
    assert run("simulate", "--config", tmp_path / "s.cfg", "--truth", tmp_path / "t.trcb",
               "--out", tmp_path / "d.trcb") == 2
    assert "dimension mismatch" in capsys.readouterr().err


def test_analyze_and_eval(workdir, capsys):
    truth, _, rec = pipeline(workdir)
    out = workdir / "depth.csv"
    assert run("analyze", "--cube", rec, "--mode", "depth", "--out", out) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 24 and len(rows[0].split(",")) == 24
    assert (workdir / "depth.csv.summary.csv").exists()
    assert run("analyze", "--cube", truth, "--mode", "depth", "--snr-threshold", 0.5,
               "--out", workdir / "depth.pgm") == 0
    assert (workdir / "depth.pgm").read_bytes().startswith(b"P5\n24 24\n65535\n")
    capsys.readouterr()
    assert run("eval", "--recon", truth, "--truth", truth) == 0
    text = capsys.readouterr().out
    assert "rmse,0.0" in text and "psnr,999.0" in text and "depth_rmse_bins,0.0" in text


def test_analyze_flim(tmp_path, capsys):
    spec = ss.SceneSpec("flim", 8, 8, 75, 160.0,
                        regions=(ss.FlimRegion("rect", (0, 8, 0, 8), 2.0, 500.0, 3),))
    dc.save_cube(ss.render_scene(spec), tmp_path / "f.trcb")
    assert run("analyze", "--cube", tmp_path / "f.trcb", "--mode", "flim", "--out", tmp_path / "lt.csv") == 0
    summary = dict(l.split(",") for l in (tmp_path / "lt.csv.summary.csv").read_text().splitlines()[1:])
    assert float(summary["mean_lifetime_ns"]) == pytest.approx(2.0, abs=1e-6)
    assert int(summary["valid_pixels"]) == 64


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("kind = lidar\nrows 48\n")
    assert run("render", "--config", bad, "--out", tmp_path / "x.trcb") == 2
    assert "line 2" in capsys.readouterr().err
    bad.write_text("kind = lidar\nrows = 4\ncols = 4\nbin_width = 55\n")
    assert run("render", "--config", bad, "--out", tmp_path / "x.trcb") == 2
    assert "missing required key 'bins'" in capsys.readouterr().err
    bad.write_text("kind = lidar\nrows = 4\ncols = 4\nbins = 0\nbin_width = 55\n")
    assert run("render", "--config", bad, "--out", tmp_path / "x.trcb") == 2
    err = capsys.readouterr().err
    assert "bins must be ≥ 1" in err and "line 4" in err


def test_io_errors(tmp_path, capsys):
    (tmp_path / "s.cfg").write_text("upsample_factor = 2\n")
    assert run("simulate", "--config", tmp_path / "s.cfg", "--truth", tmp_path / "nope.trcb",
               "--out", tmp_path / "d.trcb") == 3
    (tmp_path / "junk.trcb").write_bytes(b"JUNK" + bytes(40))
    assert run("simulate", "--config", tmp_path / "s.cfg", "--truth", tmp_path / "junk.trcb",
               "--out", tmp_path / "d.trcb") == 3
    assert "bad magic" in capsys.readouterr().err


def _tiny_inputs(tmp_path, dead=frozenset()):
    vals = np.ones((3, 2, 2))
    for r, c in dead:
        vals[:, r, c] = 0
    meas = dc.SpadMeasurement(vals, 55.0, dead)
    dc.save_cube(meas.as_cube(), tmp_path / "d.trcb")
    with open(tmp_path / "d.trcb.dead.csv", "w") as fh:
        dc.write_dead_pixels(dead, fh)
    dc.save_cube(dc.image_to_cube(dc.IntensityImage(np.ones((4, 4))), 55.0), tmp_path / "c.trcb")
    (tmp_path / "r.cfg").write_text("upsample_factor = 2\nmodel_dead_pixels = true\n")
    return ["reconstruct", "--config", tmp_path / "r.cfg", "--spad", tmp_path / "d.trcb",
            "--ccd", tmp_path / "c.trcb", "--out", tmp_path / "o.trcb"]


def test_all_dead_is_user_error(tmp_path, capsys):
    argv = _tiny_inputs(tmp_path, frozenset({(0, 0), (0, 1), (1, 0), (1, 1)}))
    assert run(*argv) == 2
    assert "positive totals" in capsys.readouterr().err


def test_numerical_failure_exit(tmp_path, capsys, monkeypatch):
    argv = _tiny_inputs(tmp_path)
    monkeypatch.setattr(fm, "power_norm", lambda *a, **k: float("nan"))
    assert run(*argv) == 4
    assert "numerical failure" in capsys.readouterr().err
    assert not (tmp_path / "o.trcb").exists()


def test_bad_flags():
    assert main(["simulate"]) == 2
    assert main(["render", "--config", "x", "--out", "y", "--threads", "0"]) == 2
    assert main(["--version"]) == 0
