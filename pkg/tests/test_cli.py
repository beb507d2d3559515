import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from backupsafe import cli, sim

SVG = "{http://www.w3.org/2000/svg}"


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# -- config parsing -------------------------------------------------------------------------------

def test_parse_config_values_and_comments():
    cfg = cli.parse_config("# reference run\n\ngamma = 1.5\nN_c=40  # coarse\nobstacle=sinusoidal\n")
    assert cfg == {"gamma": (1.5, 3), "N_c": (40, 4), "obstacle": ("sinusoidal", 5)}


@pytest.mark.parametrize("text, line", [("gamma=1\nfoo=2\n", 2), ("gamma\n", 1),
                                        ("T=abc\n", 1), ("N_c=2.5\n", 1), ("T=1\nT=2\n", 2),
                                        ("sigma=nan\n", 1)])
def test_parse_config_errors_carry_line(text, line):
    with pytest.raises(cli.ConfigError) as err:
        cli.parse_config(text)
    assert err.value.line == line


def test_build_config_maps_keys():
    text = ("v_max=0.25\nv_min=0.05\nomega_max=0.4\neta_g=0.1\nv_g=0.15\nK_eta=0.3\nK_psi=0.6\n"
            "R_O=0.5\nxi_O=3\neta_bar_O=0.2\nA_eta=0.05\nOmega=1\ndelta=0.5\nepsilon=0.02\n"
            "gamma=2\ngamma_b=3\nGamma_11=2\nGamma_22=0.5\nT=3\nN_c=60\nsigma=0.2\nsigma_b=0.3\n"
            "p_slack=1e6\np_slack_b=1e7\ntau=0.4\nnoise=0.01\nB_inj=0.02\nduration=10\n"
            "control_dt=0.1\nobstacle=sinusoidal\ndisturbance=random\nseed=4\n")
    cfg = cli.build_config("issf-fos", cli.parse_config(text))
    assert cfg.controller == "issf-backup" and cfg.plant == "fos-proxy"
    assert (cfg.bounds.v_min, cfg.bounds.v_max, cfg.bounds.omega_max) == (0.05, 0.25, 0.4)
    assert (cfg.desired.eta_g, cfg.desired.v_g, cfg.desired.K_eta, cfg.desired.K_psi) == (0.1, 0.15, 0.3, 0.6)
    o = cfg.obstacle
    assert (o.kind, o.xi_O, o.eta_bar_O, o.A_eta, o.Omega) == ("sinusoidal", 3.0, 0.2, 0.05, 1.0)
    g = cfg.gains
    assert (g.delta_heading, g.epsilon, g.gamma, g.gamma_b, g.T, g.N_c, g.sigma, g.sigma_b) == \
        (0.5, 0.02, 2.0, 3.0, 3.0, 60, 0.2, 0.3)
    assert cfg.weight == (2.0, 0.5) and cfg.penalties == (1e6, 1e7)
    assert (cfg.tau, cfg.noise, cfg.B_inj, cfg.duration, cfg.control_dt) == (0.4, 0.01, 0.02, 10.0, 0.1)
    assert (cfg.disturbance, cfg.seed, cfg.R_O) == ("random", 4, 0.5)


def test_dump_and_reload_round_trip():
    cfg = cli.build_config("backup-moving", cli.parse_config("gamma=1.25\nseed=3\n"))
    text = cli.dump_config("backup-moving", cfg)
    parsed = cli.parse_config(text)
    assert parsed.pop("scenario")[0] == "backup-moving"
    assert cli.build_config("backup-moving", parsed) == cfg


def test_scenario_presets():
    assert cli.build_config("cbf-unbounded", {}).gains.delta_heading == 0.5
    assert cli.build_config("backup-static", {}).gains.delta_heading == 0.0
    assert cli.build_config("backup-moving", {}).obstacle.kind == "sinusoidal"
    s = cli.build_config("synthetic-d", {})
    assert (s.plant, s.B_inj, s.controller) == ("rom-with-injected-d", 0.01, "issf-backup")
    f = cli.build_config("issf-fos", {})
    assert (f.plant, f.tau, f.noise) == ("fos-proxy", 0.5, 0.05)


@pytest.mark.parametrize("text", ["gamma=-1\n", "v_min=0.3\n", "Gamma_11=0\n", "obstacle=cube\n",
                                  "control_dt=0.3\n", "disturbance=worst\n"])
def test_semantic_config_errors(text):
    with pytest.raises(cli.ConfigError) as err:
        cli.build_config("backup-static", cli.parse_config(text))
    assert err.value.line == 1


# -- simulate ----------------------------------------------------------------------------------------

def svg_paths(path):
    root = ET.parse(path).getroot()
    return len(root.findall(f"{SVG}path"))


def test_simulate_cbf_unbounded(tmp_path, capsys):
    out = tmp_path / "r"
    code, stdout, _ = run(["simulate", "--scenario", "cbf-unbounded", "--out", str(out)], capsys)
    assert code == 0
    assert "input_bounds_violated: true" in stdout
    for name in ("trajectory.csv", "report.txt", "trajectory.svg", "inputs.svg", "h.svg",
                 "manifest.txt", "config.txt"):
        assert (out / name).is_file(), name
    header = (out / "trajectory.csv").read_text().splitlines()[0]
    assert header == "t,xi,eta,psi,v_cmd,omega_cmd,v_act,omega_act,h,hbar_min,hbar_b,d_norm2,qp_status,max_slack"
    assert svg_paths(out / "trajectory.svg") == 1
    assert svg_paths(out / "inputs.svg") == 2
    assert svg_paths(out / "h.svg") == 1
    manifest = (out / "manifest.txt").read_text()
    for key in ("scenario: cbf-unbounded", "seed: 0", "version: ", "wall_clock_s: ", "out: "):
        assert key in manifest


def test_csv_keeps_full_precision(tmp_path, capsys):
    out = tmp_path / "r"
    run(["simulate", "--scenario", "cbf-unbounded", "--out", str(out)], capsys)
    cfg = cli.build_config("cbf-unbounded", {})
    mem = sim.run_scenario(cfg)
    disk = cli.read_csv(out / "trajectory.csv", cfg)
    for c in sim.LOG_COLUMNS:
        if c == "qp_status":
            assert disk[c] == mem[c]
        else:
            assert np.array_equal(disk[c], mem[c], equal_nan=True), c


@pytest.mark.parametrize("scenario", ["cbf-unbounded", "pure-backup"])
def test_check_reproduces_in_memory_verdicts(tmp_path, capsys, scenario):
    out = tmp_path / "r"
    cfg_file = tmp_path / "short.txt"
    cfg_file.write_text("duration=8\n")
    code, _, _ = run(["simulate", "--scenario", scenario, "--config", str(cfg_file),
                      "--out", str(out)], capsys)
    cfg = cli.build_config(scenario, cli.parse_config("duration=8\n"))
    mem = sim.check_invariants(sim.run_scenario(cfg), cfg)
    code2, stdout, _ = run(["check", "--log", str(out / "trajectory.csv"),
                            "--config", str(out / "config.txt")], capsys)
    disk = sim.check_invariants(cli.read_csv(out / "trajectory.csv", cfg), cfg)
    assert disk.criteria == mem.criteria
    assert code == code2 == (0 if mem.passed else 1)
    assert stdout.split("summary:")[1] == mem.to_text().split("summary:")[1]


def test_pure_backup_plot_shows_flow_margin(tmp_path, capsys):
    out = tmp_path / "r"
    (tmp_path / "c.txt").write_text("duration=4\n")
    run(["simulate", "--scenario", "pure-backup", "--config", str(tmp_path / "c.txt"),
         "--out", str(out)], capsys)
    assert svg_paths(out / "h.svg") == 2


def test_moving_obstacle_plot_has_center_track(tmp_path, capsys):
    out = tmp_path / "r"
    (tmp_path / "c.txt").write_text("duration=2\n")
    code, _, _ = run(["simulate", "--scenario", "backup-moving", "--config",
                      str(tmp_path / "c.txt"), "--out", str(out)], capsys)
    assert svg_paths(out / "trajectory.svg") == 2


@pytest.mark.xfail(strict=True, reason="backup QP turns infeasible near the obstacle with "
                                       "delta = 0 and v_min = 0.1 (see notes)")
def test_simulate_backup_static_passes(tmp_path, capsys):
    code, _, _ = run(["simulate", "--scenario", "backup-static", "--out", str(tmp_path / "r")],
                     capsys)
    assert code == 0


def test_unknown_scenario_exits_2(tmp_path):
    with pytest.raises(SystemExit) as err:
        cli.main(["simulate", "--scenario", "nosuch", "--out", str(tmp_path)])
    assert err.value.code == 2


def test_config_error_exit_code_and_line(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("gamma=1\n\nfoo=3\n")
    code, _, err = run(["simulate", "--scenario", "backup-static", "--config", str(bad),
                        "--out", str(tmp_path / "r")], capsys)
    assert code == 2 and "line 3" in err


def test_conflicting_scenario_in_config(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("scenario=pure-backup\n")
    code, _, err = run(["simulate", "--scenario", "backup-static", "--config", str(cfg),
                        "--out", str(tmp_path / "r")], capsys)
    assert code == 2 and "line 1" in err


def test_runtime_fault_exit_1_with_partial_outputs(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("xi_O=0\neta_bar_O=0\n")  # obstacle center on the start point
    out = tmp_path / "r"
    code, _, err = run(["simulate", "--scenario", "backup-static", "--config", str(cfg),
                        "--out", str(out)], capsys)
    assert code == 1 and "fault" in err
    assert "fault: " in (out / "manifest.txt").read_text()
    assert (out / "config.txt").is_file()


# -- check -------------------------------------------------------------------------------------------

@pytest.fixture
def cbf_run(tmp_path, capsys):
    out = tmp_path / "r"
    assert cli.main(["simulate", "--scenario", "cbf-unbounded", "--out", str(out)]) == 0
    capsys.readouterr()
    return out


def test_check_corrupted_h(cbf_run, capsys):
    path = cbf_run / "trajectory.csv"
    lines = path.read_text().splitlines()
    fields = lines[5].split(",")
    fields[8] = "-1"
    lines[5] = ",".join(fields)
    path.write_text("\n".join(lines) + "\n")
    code, stdout, _ = run(["check", "--log", str(path), "--config", str(cbf_run / "config.txt")],
                          capsys)
    assert code == 1
    assert "failures: min_h" in stdout


def test_check_empty_csv(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    code, _, err = run(["check", "--log", str(empty), "--scenario", "backup-static"], capsys)
    assert code == 2 and "empty" in err


def test_check_header_only(cbf_run, capsys):
    path = cbf_run / "trajectory.csv"
    path.write_text(path.read_text().splitlines()[0] + "\n")
    code, _, err = run(["check", "--log", str(path), "--scenario", "cbf-unbounded"], capsys)
    assert code == 2


def test_check_missing_column(cbf_run, capsys):
    path = cbf_run / "trajectory.csv"
    text = path.read_text().replace("hbar_b", "hbar_x", 1)
    path.write_text(text)
    code, _, err = run(["check", "--log", str(path), "--config", str(cbf_run / "config.txt")],
                       capsys)
    assert code == 2 and "'hbar_b'" in err


def test_check_needs_scenario(cbf_run, capsys):
    code, _, err = run(["check", "--log", str(cbf_run / "trajectory.csv")], capsys)
    assert code == 2 and "scenario" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "backupsafe", "--version"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "backupsafe" in proc.stdout


# -- SVG helper -----------------------------------------------------------------------------------------

def test_svg_plot_handles_gaps_and_escapes():
    text = cli.svg_plot("a<b", "t", [("s&1", [0, 1, 2], [0, float("nan"), 1]),
                                    ("flat", [0, 1], [2, 2])], hlines=[(0.5, "ref")],
                        circles=[(1, 1, 0.5)], equal=True)
    root = ET.fromstring(text)
    paths = root.findall(f"{SVG}path")
    assert len(paths) == 2
    assert paths[0].get("d").count("M") == 2  # pen lifted over the NaN
