"""Runner tests: config round-trip, exit codes, CSV emission, determinism."""

import csv
import math
import os
from dataclasses import replace

import pytest

from walshflow.cli import (
    DEFAULT_CONFIG,
    CheckFailed,
    ConfigInvalid,
    ExperimentConfig,
    emit_csv,
    load_config,
    main,
    parse_config,
    run,
    serialize_config,
)


class TestConfigRoundTrip:
    def test_default_round_trip(self):
        assert parse_config(serialize_config(DEFAULT_CONFIG)) == DEFAULT_CONFIG

    def test_awkward_floats_survive(self):
        config = replace(
            DEFAULT_CONFIG,
            dt=1.0 / 3.0 * 1e-4,
            horizon=math.pi / 3.0,
            flow_horizon=4.000000000000001,
            root_seed=2**63 + 5,
        )
        assert parse_config(serialize_config(config)) == config

    def test_missing_key_rejected(self):
        text = serialize_config(DEFAULT_CONFIG)
        stripped = "\n".join(
            line for line in text.splitlines() if not line.startswith("merge_pairs")
        )
        with pytest.raises(ConfigInvalid):
            parse_config(stripped)

    def test_garbage_rejected(self):
        with pytest.raises(ConfigInvalid):
            parse_config("this is [ not an ini")

    @pytest.mark.parametrize(
        "overrides",
        [
            {"alpha": (0.5, 0.6)},
            {"level": 13},
            {"flow_y_units": 3},
            {"replicas": 0},
            {"merge_pairs": 0},
            {"root_seed": -1},
            {"dt": 0.0},
            {"measure_plus": "no-such-family"},
            {"out_dir": ""},
        ],
    )
    def test_validation_rejects(self, overrides):
        with pytest.raises(ConfigInvalid):
            replace(DEFAULT_CONFIG, **overrides).validate()

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigInvalid):
            load_config(str(tmp_path / "absent.ini"))


class TestEmitCsv:
    def test_empty_table_is_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        emit_csv([], ["a", "b"], str(path))
        assert path.read_bytes() == b"a,b\n"

    def test_values_round_trip_to_twelve_digits(self, tmp_path):
        path = tmp_path / "values.csv"
        row = [1.0 / 3.0, 2.5e-17, 7, True]
        emit_csv([row], ["third", "tiny", "count", "flag"], str(path))
        with open(path, newline="", encoding="utf-8") as handle:
            header, cells = list(csv.reader(handle))
        assert header == ["third", "tiny", "count", "flag"]
        assert float(cells[0]) == pytest.approx(row[0], rel=1e-12)
        assert float(cells[1]) == pytest.approx(row[1], rel=1e-12)
        assert cells[2] == "7"
        assert cells[3] == "1"

    def test_line_feeds_only(self, tmp_path):
        path = tmp_path / "lf.csv"
        emit_csv([[1, 2], [3, 4]], ["x", "y"], str(path))
        raw = path.read_bytes()
        assert b"\r" not in raw
        assert raw.count(b"\n") == 3

    def test_column_order_preserved(self, tmp_path):
        path = tmp_path / "order.csv"
        emit_csv([[9, 8, 7]], ["z", "y", "x"], str(path))
        assert path.read_text(encoding="utf-8").splitlines()[0] == "z,y,x"

    def test_ragged_table_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_csv([[1, 2], [3]], ["a", "b"], str(tmp_path / "bad.csv"))


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        code = main(
            ["verify-semigroup", "--config", str(tmp_path / "nope.ini")]
        )
        assert code == 2

    def test_unknown_subcommand(self, capsys):
        assert main(["no-such-command"]) == 2
        capsys.readouterr()

    def test_bad_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("WALSH_SEED", "not-a-number")
        code = main(["tanaka-special-case", "--out", str(tmp_path / "o")])
        assert code == 2

    def test_success_writes_artifacts(self, tmp_path):
        out = tmp_path / "semi"
        code = main(["verify-semigroup", "--out", str(out)])
        assert code == 0
        assert (out / "verify_semigroup.csv").exists()
        assert (out / "verify_semigroup_reports.jsonl").exists()

    def test_failed_check_exits_one(self, tmp_path):
        # uniform-simplex on an asymmetric graph is the documented biased
        # control, so the moment check must fail
        config = replace(
            DEFAULT_CONFIG,
            measure_plus="uniform-simplex",
            replicas=2000,
            out_dir=str(tmp_path / "biased"),
        )
        ini = tmp_path / "biased.ini"
        ini.write_text(serialize_config(config), encoding="utf-8")
        code = main(["kernel-experiment", "--config", str(ini)])
        assert code == 1
        assert (tmp_path / "biased" / "kernel_experiment_reports.jsonl").exists()

    def test_run_rejects_unknown_subcommand(self):
        with pytest.raises(ConfigInvalid):
            run("not-a-command", DEFAULT_CONFIG)


class TestSeedPrecedence:
    def _tanaka(self, tmp_path, monkeypatch, name, env_seed, cli_seed):
        out = tmp_path / name
        monkeypatch.delenv("WALSH_SEED", raising=False)
        if env_seed is not None:
            monkeypatch.setenv("WALSH_SEED", str(env_seed))
        argv = ["tanaka-special-case", "--out", str(out), "--replicas", "400"]
        if cli_seed is not None:
            argv += ["--seed", str(cli_seed)]
        main(argv)
        return (out / "tanaka_special_case.csv").read_bytes()

    def test_cli_seed_beats_environment(self, tmp_path, monkeypatch):
        base = self._tanaka(tmp_path, monkeypatch, "a", 111, None)
        overridden = self._tanaka(tmp_path, monkeypatch, "b", 999, 111)
        assert base == overridden

    def test_environment_seed_changes_run(self, tmp_path, monkeypatch):
        one = self._tanaka(tmp_path, monkeypatch, "c", 111, None)
        other = self._tanaka(tmp_path, monkeypatch, "d", 999, None)
        assert one != other


class TestWorkerDeterminism:
    def test_flow_artifacts_identical_across_pool_sizes(self, tmp_path):
        config = replace(
            DEFAULT_CONFIG,
            level=5,
            flow_replicas=40,
            merge_pairs=60,
            root_seed=4242,
        )
        ini = tmp_path / "flow.ini"
        ini.write_text(serialize_config(config), encoding="utf-8")
        outs = []
        for name, workers in (("serial", "1"), ("pool", "3")):
            out = tmp_path / name
            code = main(
                [
                    "flow-experiment",
                    "--config",
                    str(ini),
                    "--out",
                    str(out),
                    "--workers",
                    workers,
                ]
            )
            assert code == 0
            outs.append(out)
        for artifact in sorted(os.listdir(outs[0])):
            left = (outs[0] / artifact).read_bytes()
            right = (outs[1] / artifact).read_bytes()
            assert left == right, artifact
