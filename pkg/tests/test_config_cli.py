import numpy as np
import pytest

from cdps.cli import SCHEMAS, main, pgm_bytes
from cdps.config import ConfigError, Key, parse_config, resolve
from cdps.grid import GridModel, read_grid, write_grid

COMMANDS = tuple(SCHEMAS)


def _manifest(path):
    return dict(line.split("=", 1) for line in (path / "manifest.txt").read_text().splitlines())


def _run(tmp, name, command, *args):
    out = tmp / name
    return main([command, "--out", str(out), *args]), out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    rc, ti = _run(tmp, "ti", "generate-ti", "--seed", "3", "--set", "n=6", "--set", "height=24", "--set", "width=40")
    assert rc == 0
    rc, prior = _run(tmp, "prior", "fit-prior", "--set", f"ti_dir={ti}")
    assert rc == 0
    model = ["--set", f"prior={prior}", "--set", f"norm_stats={prior / 'norm_stats.csv'}"]
    rc, cal = _run(tmp, "cal", "calibrate", *model, "--set", f"ti_dir={ti}", "--set", "n_sigma=16")
    assert rc == 0
    return dict(tmp=tmp, ti=ti, prior=prior, cal=cal, model=model)


def test_parse_config_comments_and_errors():
    assert parse_config("a = 1  # note\n\n# skip\nb=x=y\n") == {"a": "1", "b": "x=y"}
    for bad in ("a 1", "= 3", "a=1\na=2"):
        with pytest.raises(ConfigError):
            parse_config(bad)


def test_resolve_types_prefixes_and_errors(tmp_path):
    schema = {"n": Key("int", 1), "w": Key("ints", ()), "r": Key("float?", None), "f": Key("bool", False)}
    v = resolve(schema, {"n": "4", "w": "1,2", "r": "none", "invert.f": "yes", "pcn.zzz": "1"}, "invert", COMMANDS)
    assert v == {"n": 4, "w": (1, 2), "r": None, "f": True}
    with pytest.raises(ConfigError, match="unknown"):
        resolve(schema, {"zzz": "1"}, "invert", COMMANDS)
    with pytest.raises(ConfigError, match="bad value"):
        resolve(schema, {"n": "x"}, "invert", COMMANDS)
    with pytest.raises(ConfigError, match="missing"):
        resolve({"p": Key("path", "")}, {}, "invert", COMMANDS)
    with pytest.raises(ConfigError, match="not found"):
        resolve({"p": Key("path?", "")}, {"p": str(tmp_path / "nope")}, "invert", COMMANDS)


def test_config_errors_exit_2(tmp_path):
    assert main(["sample", "--out", str(tmp_path / "a"), "--set", "bogus=1"]) == 2
    assert main(["generate-ti", "--out", str(tmp_path / "b"), "--config", str(tmp_path / "none.cfg")]) == 2
    assert main(["generate-ti", "--out", str(tmp_path / "c"), "--set", "height=4", "--set", "width=4"]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["generate-ti", "--workers", "0", "--out", str(tmp_path / "d")]) == 2


def test_generate_ti_outputs(workspace):
    ti = workspace["ti"]
    assert len(list(ti.glob("ti_*.grd"))) == 6
    m = _manifest(ti)
    assert m["command"] == "generate-ti" and m["seed"] == "3" and m["status"] == "ok"
    assert m["grid_format"] == "GRD1" and m["config.height"] == "24"
    assert (ti / "audit.csv").read_text().startswith("metric,value\nsand_fraction,")
    assert (ti / "variograms.csv").read_text().startswith("lag_m,semivariance,n_pairs,facies,direction\n")


def test_config_file_and_rerun_are_bitwise_stable(workspace, tmp_path):
    cfg = tmp_path / "ti.cfg"
    cfg.write_text("n = 6\nheight = 24\nwidth = 40\ninvert.n = 99\n")
    assert main(["generate-ti", "--seed", "3", "--config", str(cfg), "--out", str(tmp_path / "ti")]) == 0
    for f in sorted(workspace["ti"].glob("*")):
        assert (tmp_path / "ti" / f.name).read_bytes() == f.read_bytes()


def test_invert_workers_identical_and_outputs(workspace):
    tmp, ti = workspace["tmp"], workspace["ti"]
    common = [*workspace["model"], "--set", f"calibration={workspace['cal'] / 'calibration.csv'}",
              "--set", f"truth={ti / 'ti_0005.grd'}", "--set", "wells=5,30", "--set", "n=5",
              "--set", "n_steps=8", "--set", "chunk_size=2"]
    rc1, a = _run(tmp, "inv1", "invert", *common)
    rc2, b = _run(tmp, "inv2", "invert", *common, "--workers", "3")
    assert rc1 == rc2 == 0
    for name in ("sample_0000.grd", "sample_0004.grd", "mean.grd", "std.grd", "wrmse.csv", "metrics.csv", "well_data.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    metrics = (a / "metrics.csv").read_text()
    assert "ssim.facies" in metrics and "converged_fraction.wells" in metrics and "n_diverged,0" in metrics
    assert read_grid(a / "sample_0000.grd").shape == (2, 24, 40)


def test_invert_needs_calibration_for_cdps(workspace):
    rc, _ = _run(workspace["tmp"], "nocal", "invert", *workspace["model"], "--set", "wells=5",
                 "--set", f"truth={workspace['ti'] / 'ti_0000.grd'}")
    assert rc == 2


def test_zero_samples_writes_manifest_only(workspace):
    rc, out = _run(workspace["tmp"], "zero", "sample", *workspace["model"], "--set", "n=0")
    assert rc == 0
    assert sorted(p.name for p in out.iterdir()) == ["manifest.txt"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3_with_partial_manifest(workspace):
    rc, out = _run(workspace["tmp"], "div", "train-denoiser", "--set", f"ti_dir={workspace['ti']}",
                   "--set", "step_size=1e8", "--set", "clip_norm=0", "--set", "weighting=plain",
                   "--set", "hidden=4", "--set", "epochs=50", "--set", "batch_size=2")
    assert rc == 3
    assert _manifest(out)["status"] == "diverged"
    assert not (out / "net.dnw").exists()


def test_report_is_stable_and_scores_truth(workspace):
    tmp = workspace["tmp"]
    rc, smp = _run(tmp, "smp", "sample", *workspace["model"], "--set", "n=4", "--set", "n_steps=6")
    assert rc == 0
    args = ["--set", f"samples_dir={smp}", "--set", f"truth={workspace['ti'] / 'ti_0000.grd'}"]
    rc1, r1 = _run(tmp, "rep1", "report", *args)
    rc2, r2 = _run(tmp, "rep2", "report", *args)
    assert rc1 == rc2 == 0
    for f in r1.iterdir():
        if f.name != "manifest.txt":
            assert (r2 / f.name).read_bytes() == f.read_bytes()
    text = (r1 / "metrics.csv").read_text()
    assert "ssim.facies" in text and "ssim.impedance" in text and "logs" in text
    assert "raster.mean_facies" in _manifest(r1)
    assert (r1 / "mean_impedance.pgm").read_bytes().startswith(b"P2\n40 24\n255\n")


def test_pgm_of_constant_grid_is_uniform_gray(tmp_path):
    assert pgm_bytes(np.full((2, 3), 5.0), 5.0, 5.0) == b"P2\n3 2\n255\n128 128 128\n128 128 128\n"
    assert pgm_bytes(np.array([[0.0, 1.0]]), 0.0, 1.0).endswith(b"0 255\n")
    sd = tmp_path / "s"
    sd.mkdir()
    for i in range(2):
        write_grid(GridModel(("facies",), np.full((1, 3, 4), 0.7)), sd / f"sample_{i:04d}.grd")
    assert main(["report", "--out", str(tmp_path / "r"), "--set", f"samples_dir={sd}"]) == 0
    body = (tmp_path / "r" / "mean_facies.pgm").read_text().splitlines()[3:]
    assert set(" ".join(body).split()) == {"128"}


def test_pcn_direct_mode(workspace):
    rc, out = _run(workspace["tmp"], "pcn", "pcn", *workspace["model"], "--set", "wells=5",
                   "--set", f"truth={workspace['ti'] / 'ti_0001.grd'}", "--set", "n_iterations=400",
                   "--set", "thin=10", "--set", "n_chains=2", "--set", "beta=0.1")
    assert rc == 0
    # Burn-in is half of 400 iterations.
    assert (out / "traces.csv").read_text().startswith("chain,iteration,parameter,value\n0,200,0,")
    assert (out / "diagnostics.csv").read_text().startswith("parameter,rhat,acf_half_life\n0,")
    assert "acceptance" in _manifest(out)
