import json

import pytest

from kspp import cli

BASE_CONFIG = """\
theta = 1.0
lambda = 0.0
chi = 1.0
epsilon = 0.05
n_particles = 2
dt = 0.01
n_steps = 20
n_replicas = 3
seed = 11
init = gaussian
init_sigma = 1.0
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text(BASE_CONFIG)
    return path


class TestSimulate:
    def test_writes_artifacts(self, tmp_path, config_file):
        out = tmp_path / "run"
        rc = cli.main(["simulate", "--config", str(config_file),
                       "--out", str(out), "--format", "both"])
        assert rc == 0
        assert (out / "trajectory.csv").exists()
        assert (out / "trajectory.ksw1").exists()
        assert (out / "config_resolved.txt").exists()
        meta = json.loads((out / "run_meta.json").read_text())
        assert meta["version"] == cli.__version__
        assert meta["blowups"] == []

    def test_byte_identical_reruns(self, tmp_path, config_file):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["simulate", "--config", str(config_file),
                             "--out", str(out)]) == 0
            outs.append((out / "trajectory.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_zero_steps_writes_initial_only(self, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(BASE_CONFIG.replace("n_steps = 20", "n_steps = 0"))
        out = tmp_path / "run"
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
        rows = (out / "trajectory.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 3 * 2  # header + replicas x particles, one step

    def test_seed_override_changes_output(self, tmp_path, config_file):
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        cli.main(["simulate", "--config", str(config_file), "--out", str(out1)])
        cli.main(["simulate", "--config", str(config_file), "--out", str(out2),
                  "--seed", "99"])
        a = (out1 / "trajectory.csv").read_bytes()
        b = (out2 / "trajectory.csv").read_bytes()
        assert a != b

    def test_blowup_exit_code(self, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("""
theta = 1.0
chi = 1e308
epsilon = 1e-12
n_particles = 2
dt = 10.0
n_steps = 3
n_replicas = 1
seed = 1
init = gaussian
init_sigma = 0.001
""")
        out = tmp_path / "run"
        rc = cli.main(["simulate", "--config", str(cfg), "--out", str(out)])
        assert rc == 3
        assert (out / "trajectory.csv").exists()  # partial artifact
        meta = json.loads((out / "run_meta.json").read_text())
        assert meta["blowups"]

    def test_bad_config_exit_2(self, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("theta = 1.0\nunknown_key = 3\n")
        assert cli.main(["simulate", "--config", str(cfg),
                         "--out", str(tmp_path)]) == 2

    def test_missing_config_exit_2(self, tmp_path):
        assert cli.main(["simulate", "--config", str(tmp_path / "absent.txt"),
                         "--out", str(tmp_path)]) == 2


class TestEstimate:
    def test_inline_and_file_paths_agree(self, tmp_path, config_file):
        run_out = tmp_path / "run"
        cli.main(["simulate", "--config", str(config_file), "--out",
                  str(run_out), "--format", "bin"])
        est_inline = tmp_path / "inline"
        est_file = tmp_path / "fromfile"
        args = ["--config", str(config_file), "--gamma", "1.62",
                "--alpha", "0.045"]
        assert cli.main(["estimate", *args, "--out", str(est_inline)]) == 0
        assert cli.main(["estimate", *args, "--trajectory",
                         str(run_out / "trajectory.ksw1"),
                         "--out", str(est_file)]) == 0
        a = json.loads((est_inline / "report.json").read_text())
        b = json.loads((est_file / "report.json").read_text())
        assert a["estimates"] == b["estimates"]
        assert (est_inline / "per_replica.csv").read_text() \
            == (est_file / "per_replica.csv").read_text()

    def test_csv_trajectory_roundtrip_estimate(self, tmp_path, config_file):
        run_out = tmp_path / "run"
        cli.main(["simulate", "--config", str(config_file), "--out",
                  str(run_out), "--format", "csv"])
        est = tmp_path / "est"
        rc = cli.main(["estimate", "--config", str(config_file),
                       "--trajectory", str(run_out / "trajectory.csv"),
                       "--gamma", "1.6", "--alpha", "0.05",
                       "--out", str(est)])
        assert rc == 0
        report = json.loads((est / "report.json").read_text())
        assert set(report["estimates"]) == {"E1", "E2", "E3", "E4", "S", "S_bar"}


class TestThreshold:
    def test_single_point_table(self, tmp_path):
        out = tmp_path / "thr"
        rc = cli.main(["threshold", "--theta", "1.0", "--p", "3.31",
                       "--out", str(out), "--coarse", "25",
                       "--refine-rounds", "2", "--refine-points", "9"])
        assert rc == 0
        lines = (out / "threshold.csv").read_text().strip().splitlines()
        assert lines[0] == "theta,p,chi_star,best_gamma,best_alpha"
        theta, p, chi, g, a = (float(v) for v in lines[1].split(","))
        assert chi >= 1.39

    def test_requires_args(self, tmp_path):
        assert cli.main(["threshold", "--out", str(tmp_path)]) == 2


class TestVerification:
    def test_verify_inequality_clean(self, tmp_path):
        rc = cli.main(["verify-inequality", "--cases", "2000", "--seed", "7",
                       "--out", str(tmp_path)])
        assert rc == 0
        payload = json.loads((tmp_path / "verify_inequality.json").read_text())
        assert payload["violations"] == 0
        assert payload["pass"]

    def test_verify_kernels_clean(self, tmp_path):
        rc = cli.main(["verify-kernels", "--samples", "4000",
                       "--fd-points", "20", "--out", str(tmp_path)])
        assert rc == 0

    def test_verify_kernels_failure_exit_1(self, tmp_path):
        rc = cli.main(["verify-kernels", "--samples", "1000",
                       "--fd-points", "10", "--fd-tol", "1e-30",
                       "--out", str(tmp_path)])
        assert rc == 1

    def test_martingale_small(self, tmp_path):
        rc = cli.main(["martingale-test", "--replicas", "300", "--steps", "32",
                       "--batch", "150", "--seed", "4", "--out", str(tmp_path)])
        assert rc == 0
        payload = json.loads((tmp_path / "martingale_test.json").read_text())
        assert 2.5 <= payload["variance_ratio"] <= 6.0

    def test_epsilon_study_mechanics(self, tmp_path):
        rc = cli.main(["epsilon-study", "--steps", "32", "--replicas", "2",
                       "--factor", "10.0", "--out", str(tmp_path)])
        assert rc == 0
        rows = (tmp_path / "epsilon_study.csv").read_text().strip().splitlines()
        assert rows[0] == "epsilon,E4"
        assert len(rows) == 4


class TestManifest:
    def test_run_experiment_rejects_unknown_mode(self, tmp_path):
        manifest = cli.ExperimentManifest(mode="dance", out_dir=tmp_path)
        with pytest.raises(ValueError):
            cli.run_experiment(manifest)
