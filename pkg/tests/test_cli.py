import socket
import threading
import time

import pytest

from featnorm.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

TINY_DOMAINS = [
    "rot=-0.3 noise=0.25 classes=0-2",
    "rot=0.0 noise=0.25 classes=0-2",
    "rot=0.3 noise=0.25 classes=0-2",
    "rot=0.7 noise=0.25 classes=0-2",
]


def tiny_args(*extra):
    args = ["--classes", "3", "--dim", "2", "--per-class", "15", "--scenario-seed", "5"]
    for d in TINY_DOMAINS:
        args += ["--domain", d]
    args += ["--epochs", "2", "--batch-size", "9", "--feature-dim", "6"]
    return args + list(extra)


class TestGenerateAndTrain:
    def test_generate_writes_scenario(self, tmp_path, capsys):
        code = main(
            ["generate", "--classes", "3", "--dim", "2", "--per-class", "5", "--out", str(tmp_path)]
        )
        assert code == EXIT_OK
        assert (tmp_path / "scenario.txt").exists()
        assert "60 samples" in capsys.readouterr().out  # 3 classes x 5 x 4 default domains

    def test_train_writes_checkpoint_and_log(self, tmp_path):
        code = main(["train", "--regime", "cfnn", "--seed", "2", "--out", str(tmp_path)] + tiny_args())
        assert code == EXIT_OK
        assert (tmp_path / "train_cfnn_s2.ckpt").exists()
        assert (tmp_path / "train_cfnn_s2.peer.ckpt").exists()
        log = (tmp_path / "train_cfnn_s2.log").read_text()
        assert log.startswith("step=0 ")
        assert "mean_feature_norm=" in log


class TestDg:
    def test_singular_regime_flag_and_row_count(self, tmp_path):
        code = main(
            ["dg", "--seeds", "1,2,3", "--regime", "fnn", "--target", "2", "--out", str(tmp_path)]
            + tiny_args()
        )
        assert code == EXIT_OK
        rows = (tmp_path / "dg.csv").read_text().strip().split("\n")
        assert len(rows) == 1 + 3  # header + one per seed

    def test_identical_invocations_byte_identical(self, tmp_path):
        argv = ["dg", "--seeds", "1,2", "--regimes", "source_only,fnn", "--name", "rep"] + tiny_args()
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(argv + ["--out", str(out_a)]) == EXIT_OK
        assert main(argv + ["--out", str(out_b)]) == EXIT_OK
        assert (out_a / "rep.csv").read_bytes() == (out_b / "rep.csv").read_bytes()
        assert (out_a / "rep.json").read_bytes() == (out_b / "rep.json").read_bytes()

    def test_output_dir_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FEATNORM_OUTPUT_DIR", str(tmp_path / "from_env"))
        code = main(["dg", "--seeds", "1", "--regime", "fnn", "--name", "env"] + tiny_args())
        assert code == EXIT_OK
        assert (tmp_path / "from_env" / "env.csv").exists()


class TestCatshiftAndSweep:
    def test_catshift_outputs(self, tmp_path):
        code = main(
            [
                "catshift",
                "--seeds",
                "1",
                "--regimes",
                "source_only,fnn",
                "--remove",
                "0:0;1:1",
                "--out",
                str(tmp_path),
            ]
            + tiny_args()
        )
        assert code == EXIT_OK
        csv_text = (tmp_path / "catshift.csv").read_text()
        assert csv_text.count("\n") == 1 + 2 * 2  # header + 2 regimes x (full, shift)

    def test_sweep_outputs(self, tmp_path):
        code = main(
            [
                "sweep",
                "--seeds",
                "1",
                "--regimes",
                "fnn",
                "--delta-r-values",
                "0.5,1.0",
                "--out",
                str(tmp_path),
            ]
            + tiny_args()
        )
        assert code == EXIT_OK
        assert "0.5" in (tmp_path / "sweep.csv").read_text()


class TestEmbed:
    def test_embed_round_trip(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path), "--per-class", "5"] + tiny_args()[:8]) == EXIT_OK
        scenario = tmp_path / "scenario.txt"
        assert (
            main(
                [
                    "train",
                    "--scenario",
                    str(scenario),
                    "--regime",
                    "fnn",
                    "--epochs",
                    "1",
                    "--batch-size",
                    "9",
                    "--feature-dim",
                    "6",
                    "--out",
                    str(tmp_path),
                ]
            )
            == EXIT_OK
        )
        code = main(
            [
                "embed",
                "--scenario",
                str(scenario),
                "--checkpoint",
                str(tmp_path / "train_fnn_s1.ckpt"),
                "--out",
                str(tmp_path),
            ]
        )
        assert code == EXIT_OK
        assert (tmp_path / "embeddings.txt").exists()


class TestConfigFile:
    def test_config_supplies_defaults_flags_override(self, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("epochs = 1\nseeds = 7\nbatch_size = 9\nfeature_dim = 6\n")
        # --seeds on the command line overrides the config file's seeds
        argv = ["dg", "--config", str(config), "--regime", "fnn", "--seeds", "1,2", "--out", str(tmp_path),
                "--classes", "3", "--dim", "2", "--per-class", "15", "--scenario-seed", "5"]
        for d in TINY_DOMAINS:
            argv += ["--domain", d]
        assert main(argv) == EXIT_OK
        rows = (tmp_path / "dg.csv").read_text().strip().split("\n")
        assert len(rows) == 1 + 2  # flag seeds won (2 seeds, not config's 1)

    def test_bad_config_key_exit_1(self, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("nonsense_key = 1\n")
        assert main(["dg", "--config", str(config)] + tiny_args()) == EXIT_CONFIG


class TestDefaults:
    def test_published_hyperparameter_defaults(self):
        from featnorm.cli import DEFAULTS, resolve
        import argparse

        assert DEFAULTS["learning_rate"] == 1e-3
        assert DEFAULTS["momentum"] == 0.9
        assert DEFAULTS["gamma"] == 0.05
        assert DEFAULTS["delta_r"] == 1.0
        empty = argparse.Namespace()
        assert resolve(empty, {}, "gamma") == 0.05
        assert resolve(empty, {"gamma": 0.2}, "gamma") == 0.2
        assert resolve(argparse.Namespace(gamma=0.3), {"gamma": 0.2}, "gamma") == 0.3


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert main(["dg", "--bogus"]) == EXIT_CONFIG
        assert "usage" in capsys.readouterr().err

    def test_invalid_value(self, capsys):
        assert main(["dg", "--epochs", "soon"]) == EXIT_CONFIG

    def test_unknown_subcommand(self):
        assert main(["transmogrify"]) == EXIT_CONFIG

    def test_missing_scenario_file(self):
        assert main(["dg", "--scenario", "/does/not/exist.txt"]) == EXIT_CONFIG

    def test_invalid_experiment_config(self):
        # batch size not divisible by the 3 sources
        argv = ["dg", "--seeds", "1", "--regime", "fnn"] + tiny_args() + ["--batch-size", "10"]
        assert main(argv) == EXIT_CONFIG

    def test_unreachable_server_is_runtime_failure(self):
        code = main(
            ["dg", "--server", "http://127.0.0.1:1", "--seeds", "1", "--regime", "fnn"] + tiny_args()
        )
        assert code == EXIT_RUNTIME


class TestRemoteServer:
    def test_cli_against_live_http_server(self, tmp_path):
        import uvicorn

        from featnorm.service.app import create_app

        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            port = probe.getsockname()[1]
        server = uvicorn.Server(
            uvicorn.Config(create_app(), host="127.0.0.1", port=port, log_level="error")
        )
        thread = threading.Thread(target=server.run, daemon=True)
        thread.start()
        deadline = time.time() + 10
        while not server.started:
            if time.time() > deadline:
                pytest.fail("uvicorn did not start in time")
            time.sleep(0.05)
        try:
            code = main(
                [
                    "dg",
                    "--server",
                    f"http://127.0.0.1:{port}",
                    "--seeds",
                    "1",
                    "--regime",
                    "fnn",
                    "--out",
                    str(tmp_path),
                ]
                + tiny_args()
            )
            assert code == EXIT_OK
            assert (tmp_path / "dg.csv").exists()
        finally:
            server.should_exit = True
            thread.join(timeout=10)
