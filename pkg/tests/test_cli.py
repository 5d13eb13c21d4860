import json

import pytest

import embp.cli as cli
from embp.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, build_config, main, parse_grid
from embp.errors import InvalidParameter, NumericalFailure
from embp.experiments import ExperimentConfig
from embp.learn import TrainedWeights

SMALL = ["--set", "N=20", "--set", "L=1", "--set", "S_vae=2", "--blocks", "4"]


def _run(tmp_path, *args):
    out = tmp_path / "out.csv"
    code = main([*args, "--out", str(out)])
    return code, out


class TestGrid:
    def test_inclusive_range(self):
        assert parse_grid("0:1:0.25") == [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_mixed_list(self):
        assert parse_grid("1, 2:3:1, 7") == [1.0, 2.0, 3.0, 7.0]

    def test_complex_items(self):
        assert parse_grid("0.3-0.3j, 1", complex) == [0.3 - 0.3j, 1 + 0j]

    def test_bad_step(self):
        with pytest.raises(InvalidParameter):
            parse_grid("0:1:0")

    def test_config_conversion(self):
        cfg = build_config(ExperimentConfig, [{"L": "2", "snr_db": "4:8:2"}], {"T": "None", "channel": "1,0.5j,0"})
        assert cfg.L == 2 and cfg.snr_db == [4.0, 6.0, 8.0]
        assert cfg.T == 12
        assert cfg.channel == [1, 0.5j, 0]


class TestCommands:
    @pytest.mark.parametrize("command", ["mse-snr", "ber-snr", "init-sens", "alpha-scan", "iter-trace"])
    def test_each_runner_writes_csv_and_sidecar(self, tmp_path, command):
        extra = ["--set", "L=2", "--set", "gammas=0.1"] if command == "alpha-scan" else ["--set", "gammas=0.1"]
        code, out = _run(tmp_path, command, *SMALL, *extra)
        assert code == EXIT_OK
        lines = out.read_text().splitlines()
        assert len(lines) >= 2
        side = json.loads((tmp_path / "out.csv.config.json").read_text())
        assert side["command"] == command
        assert side["config"]["blocks"] == 4
        assert {"csv_schema_version", "package_version"} <= set(side)

    def test_byte_identical_reruns(self, tmp_path):
        _, a = _run(tmp_path, "ber-snr", *SMALL, "--seed", "5")
        first = a.read_bytes()
        _, b = _run(tmp_path, "ber-snr", *SMALL, "--seed", "5", "--set", "chunk=3")
        assert b.read_bytes() == first

    def test_seed_changes_output(self, tmp_path):
        _, a = _run(tmp_path, "mse-snr", *SMALL, "--seed", "1")
        first = a.read_bytes()
        _, b = _run(tmp_path, "mse-snr", *SMALL, "--seed", "2")
        assert b.read_bytes() != first

    def test_ini_file(self, tmp_path):
        ini = tmp_path / "exp.ini"
        ini.write_text("[experiment]\nN = 20\nL = 1\nS_vae = 2\nblocks = 3\n[alpha-scan]\nalphas = 0.5:1.0:0.5\n"
                       "channel = 1, 0.5\n")
        code, out = _run(tmp_path, "alpha-scan", "--config", str(ini))
        assert code == EXIT_OK
        rows = out.read_text().splitlines()
        assert rows[0] == "alpha,ber_bp,ber_map,elbo_bp,elbo_app"
        assert len(rows) == 3

    def test_train_and_schedule_report(self, tmp_path, capsys):
        weights = tmp_path / "w.json"
        code = main(["train", "--set", "batches=2", "--set", "N=20", "--set", "L=1", "--set", "T=3",
                     "--set", "S_vae=2", "--blocks", "3", "--weights-out", str(weights),
                     "--out", str(tmp_path / "train.csv")])
        assert code == EXIT_OK
        w = TrainedWeights.load(weights)
        assert (w.T, w.L) == (3, 1)
        report = tmp_path / "sched.csv"
        assert main(["schedule-report", str(weights), "--out", str(report)]) == EXIT_OK
        assert report.read_text().splitlines()[0] == "t,beta_bp,h0,h1,sigma2"
        assert "beta_bp" in capsys.readouterr().out
        code, out = _run(tmp_path, "ber-snr", *SMALL, "--weights", str(weights))
        assert code == EXIT_OK
        assert "embp_star_ber" in out.read_text().splitlines()[0]


class TestExitCodes:
    def test_unknown_setting(self, tmp_path):
        assert _run(tmp_path, "mse-snr", "--set", "bogus=1")[0] == EXIT_CONFIG

    def test_bad_value(self, tmp_path):
        assert _run(tmp_path, "mse-snr", "--set", "L=two")[0] == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert _run(tmp_path, "mse-snr", "--config", str(tmp_path / "none.ini"))[0] == EXIT_CONFIG

    def test_invalid_range(self, tmp_path):
        assert _run(tmp_path, "ber-snr", "--set", "blocks=0")[0] == EXIT_CONFIG

    def test_missing_weights(self, tmp_path):
        assert main(["schedule-report", str(tmp_path / "none.json")]) == EXIT_CONFIG

    def test_weights_for_other_memory(self, tmp_path):
        weights = tmp_path / "w.json"
        TrainedWeights.identity(3).save(weights)
        assert _run(tmp_path, "ber-snr", *SMALL, "--weights", str(weights))[0] == EXIT_CONFIG

    def test_numerical_failure(self, tmp_path, monkeypatch):
        def broken(cfg):
            raise NumericalFailure("non-finite ELBO", 3)
        monkeypatch.setitem(cli.RUNNERS, "mse-snr", broken)
        assert _run(tmp_path, "mse-snr", *SMALL)[0] == EXIT_NUMERICAL

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == 2
