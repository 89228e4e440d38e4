import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chns.cli import (
    CONFIG_KEYS, EXIT_CONFIG, EXIT_NEWTON, EXIT_OK, OUTPUT_ENV, TIMESERIES_SCHEMA, build_config,
    channel_defaults, convergence_defaults, format_config, load_config, main, output_dir, parse_assignments,
    parse_config_text, read_timeseries, read_vtk_points, viscosity_table,
)
from chns.errors import ConfigError
from chns.mesh import MeshConfig
from chns.solver import NewtonSettings
from chns.timeloop import SimulationConfig


def test_channel_defaults(capsys):
    assert main(["channel", "--print-config"]) == EXIT_OK
    out = capsys.readouterr().out
    cfg = parse_config_text(out)
    assert cfg == channel_defaults()
    assert (cfg.mesh.L1, cfg.mesh.L2, cfg.T, cfg.dt) == (1.0, 3.0, 1000.0, 0.01)
    assert (cfg.gamma, cfg.s, cfg.F) == (0.001, 0.1, (0.01, 0.0))
    assert cfg.chi == pytest.approx(math.log(3) / 6, rel=1e-15)
    assert cfg.mesh.nx * cfg.mesh.ny == 180 * 60


def test_convergence_k2(capsys):
    assert main(["convergence", "--k", "2", "--print-config"]) == EXIT_OK
    cfg = parse_config_text(capsys.readouterr().out)
    assert cfg.mesh.nx == cfg.mesh.ny == 32
    h2 = math.sqrt(2) / 32
    assert cfg.dt == pytest.approx(h2 / (40 * math.sqrt(2)), rel=1e-15)
    assert cfg.T == 2.0 and cfg == convergence_defaults(2)


def test_roundtrip_defaults():
    for cfg in (channel_defaults(), convergence_defaults(3)):
        assert parse_config_text(format_config(cfg)) == cfg


@given(
    st.integers(1, 50), st.integers(1, 50), st.floats(0.1, 10), st.sampled_from([0.01, 0.02, 0.05]),
    st.integers(1, 100), st.floats(0.0, 0.01), st.booleans(), st.one_of(st.none(), st.floats(0.01, 0.1)),
    st.tuples(st.floats(-1, 1), st.floats(-1, 1)),
)
def test_roundtrip_property(nx, ny, L1, dt, m, noise, reuse, alpha, F):
    cfg = SimulationConfig(mesh=MeshConfig(nx, ny, L1, 2.0), T=dt * m, dt=dt, noise_amplitude=noise, alpha=alpha,
                           F=F, newton=NewtonSettings(reuse_jacobian=reuse))
    assert parse_config_text(format_config(cfg)) == cfg


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as info:
        parse_assignments(["mesh.nz=3"])
    assert info.value.key == "mesh.nz"
    with pytest.raises(ConfigError):
        parse_assignments(["dt"])
    assert set(parse_assignments(["dt=0.1", "mesh.nx=4"])) == {"dt", "mesh.nx"}
    assert "mesh.nx" in CONFIG_KEYS and "newton.reuse_jacobian" in CONFIG_KEYS


def test_config_errors_carry_key(tmp_path):
    with pytest.raises(ConfigError) as info:
        build_config(parse_assignments(["dt=0.3"]), channel_defaults())
    assert info.value.key == "dt"
    bad = tmp_path / "c.txt"
    bad.write_text("mesh.nx = four\n")
    with pytest.raises(ConfigError) as info:
        load_config(bad)
    assert info.value.key == "mesh.nx"


def test_exit_codes(capsys):
    assert main(["channel", "--set", "dt=0.3", "--print-config"]) == EXIT_CONFIG
    assert main(["channel", "--set", "bogus=1", "--print-config"]) == EXIT_CONFIG
    capsys.readouterr()


def test_config_file_and_overrides(tmp_path, capsys):
    path = tmp_path / "run.txt"
    path.write_text("# small run\nmesh.nx = 4\nmesh.ny = 12\nT = 0.02\n")
    assert main(["channel", "--config", str(path), "--set", "dt=0.005", "--print-config"]) == EXIT_OK
    cfg = parse_config_text(capsys.readouterr().out)
    assert (cfg.mesh.nx, cfg.mesh.ny, cfg.T, cfg.dt) == (4, 12, 0.02, 0.005)


def test_output_dir_resolution(monkeypatch, tmp_path):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert output_dir(None).name == "chns-output"
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert output_dir(None) == tmp_path / "env"
    assert output_dir(str(tmp_path / "x")) == tmp_path / "x"


@pytest.fixture(scope="module")
def channel_outputs(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["channel", "--set", "mesh.nx=4", "--set", "mesh.ny=12", "--set", "T=0.05",
                 "--set", "output_every=2", "--out", str(out)])
    return code, out


def test_channel_run_outputs(channel_outputs):
    code, out = channel_outputs
    assert code == EXIT_OK
    names = sorted(p.name for p in out.iterdir())
    assert "timeseries.csv" in names and "manifest.json" in names and "config.txt" in names
    snaps = sorted(n for n in names if n.endswith(".vtk"))
    assert snaps == [f"snapshot_{n:07d}.vtk" for n in (0, 2, 4, 5)]
    # all lattice vertices, periodic slave column included
    assert read_vtk_points(out / snaps[0]) == (5 * 13, 2 * 4 * 12)


def test_timeseries_contents(channel_outputs):
    _, out = channel_outputs
    text = (out / "timeseries.csv").read_text().splitlines()
    assert text[0] == f"# schema={TIMESERIES_SCHEMA}"
    assert text[1].split(",") == ["step", "t", "mass", "energy", "mean_div", "proj_div", "pressure_mean", "r",
                                  "newton_iters", "newton_final_increment"]
    ts = read_timeseries(out / "timeseries.csv")
    assert list(ts["step"]) == [0, 1, 2, 3, 4, 5]
    assert np.abs(ts["mass"] - ts["mass"][0]).max() <= 1e-9
    assert np.isnan(ts["mean_div"][0])


def test_vtk_layout(channel_outputs):
    _, out = channel_outputs
    first = (out / "snapshot_0000000.vtk").read_text().splitlines()
    assert first[0] == "# vtk DataFile Version 3.0"
    assert first[2] == "ASCII" and first[3] == "DATASET UNSTRUCTURED_GRID"
    assert "SCALARS phi double 1" in first and "VECTORS u double" in first
    assert "SCALARS mu double 1" not in first  # absent at t = 0
    last = (out / "snapshot_0000005.vtk").read_text().splitlines()
    assert "SCALARS mu double 1" in last and "SCALARS p double 1" in last
    # periodic slave column carries the master values
    i = last.index("SCALARS phi double 1") + 2
    phi = np.array([float(v) for v in last[i:i + 65]]).reshape(13, 5)
    assert np.array_equal(phi[:, 0], phi[:, 4])


def test_manifest(channel_outputs):
    _, out = channel_outputs
    man = json.loads((out / "manifest.json").read_text())
    assert man["exit_status"] == "completed" and man["exit_code"] == 0
    assert man["rng_seed"] == 0 and man["code_version"]
    assert man["config"]["mesh.nx"] == 4
    listed = {f["name"] for f in man["files"]}
    assert "timeseries.csv" in listed and "manifest.json" not in listed


def test_newton_failure_writes_partial_outputs(tmp_path):
    code = main(["channel", "--set", "mesh.nx=4", "--set", "mesh.ny=12", "--set", "T=0.05",
                 "--set", "noise_amplitude=0.01", "--set", "newton.max_iterations=1", "--out", str(tmp_path)])
    assert code == EXIT_NEWTON
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["exit_status"] == "newton_failure"
    assert (tmp_path / "timeseries.csv").exists() and (tmp_path / "snapshot_0000000.vtk").exists()


def test_steps_option_and_env(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "envout"))
    assert main(["channel", "--set", "mesh.nx=2", "--set", "mesh.ny=6", "--steps", "2"]) == EXIT_OK
    man = json.loads((tmp_path / "envout" / "manifest.json").read_text())
    assert man["exit_status"] == "stopped"
    assert len(read_timeseries(tmp_path / "envout" / "timeseries.csv")["step"]) == 3


def test_viscosity_table(capsys, tmp_path):
    assert main(["viscosity-table", "--rates", "0,1", "--phis", "0,0.5"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[1] == "rate,0,0.5"
    row0 = [float(v) for v in lines[2].split(",")]
    assert row0[1] == pytest.approx(2525.691875603924 / 3375, rel=1e-9)
    assert row0[2] == pytest.approx(22.0876 / 3375, rel=1e-9)
    out = tmp_path / "v.csv"
    assert main(["viscosity-table", "--out", str(out)]) == EXIT_OK
    assert out.read_text() == viscosity_table([1e-4, 1e-3, 1e-2, 1e-1, 1, 10, 100],
                                              [0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1])


def test_validate(capsys):
    assert main(["validate"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 10


def test_study_subcommand(tmp_path, capsys):
    code = main(["convergence", "--study", "0,1", "--set", "T=0.0125", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert (tmp_path / "eoc.csv").exists() and (tmp_path / "eoc.txt").exists()
    assert "self-convergence against level 1" in capsys.readouterr().out
