"""
命令行端到端测试：各子命令的输出文件、日志和退出码
"""
import csv
import json
import logging
import os
from unittest.mock import patch

import numpy as np
import pytest

from network_ir import receptive_field
from perf_sim import ROOFLINE_COLUMNS
from qconv_engine import QTensor, read_stream, run_network_streaming, save_weights, synthetic_weights, write_stream
from scheduler import read_stream_jsonl, verify_schedule
from tcn_accel import EXIT_INPUT, EXIT_INTERNAL, EXIT_OK, EXIT_VERIFY, main, parse_range, parse_timing_overrides


@pytest.fixture
def paths(repo_root):
    return {
        "ecg": os.path.join(repo_root, "networks", "ecg.json"),
        "res_tcn": os.path.join(repo_root, "networks", "res_tcn.json"),
        "wn": os.path.join(repo_root, "networks", "wn_pnt.json"),
        "z7020": os.path.join(repo_root, "devices", "z7020.json"),
        "zu3eg": os.path.join(repo_root, "devices", "zu3eg.json"),
        "12x4": os.path.join(repo_root, "archs", "z7020_12x4.json"),
        "9x10": os.path.join(repo_root, "archs", "zu3eg_9x10.json"),
    }


@pytest.fixture(autouse=True)
def restore_logging():
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_tcn_accel", False):
            root.removeHandler(handler)
            handler.close()


def _csv(path):
    with open(path, encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _write_json(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


class TestDse:

    def test_z7020(self, paths, tmp_path):
        code = main(["dse", "--device", paths["z7020"], "--out", str(tmp_path), "--top-k", "3"])
        assert code == EXIT_OK
        grid = _csv(tmp_path / "dse_grid_Z-7020.csv")
        assert len(grid) == 81
        ranking = _csv(tmp_path / "dse_ranking_Z-7020.csv")
        assert len(ranking) == 3
        assert (ranking[0]["rank"], ranking[0]["n_rows"], ranking[0]["n_cols"]) == ("1", "5", "11")

    def test_json_format(self, paths, tmp_path):
        code = main(["dse", "--device", paths["zu3eg"], "--out", str(tmp_path), "--format", "json"])
        assert code == EXIT_OK
        ranking = json.loads((tmp_path / "dse_ranking_ZU3EG.json").read_text(encoding="utf-8"))
        assert (ranking[0]["n_rows"], ranking[0]["n_cols"], ranking[0]["ramb18"]) == (9, 10, 346)

    def test_no_feasible_config(self, tmp_path):
        device = _write_json(tmp_path / "dev.json", {
            "name": "nodsp", "dsp_total": 0, "ramb18_total": 500, "max_freq_mhz": 100,
        })
        assert main(["dse", "--device", device, "--out", str(tmp_path)]) == EXIT_VERIFY
        assert _csv(tmp_path / "dse_ranking_nodsp.csv") == []

    def test_device_required(self, tmp_path):
        assert main(["dse", "--out", str(tmp_path)]) == EXIT_INPUT

    def test_internal_error(self, paths, tmp_path):
        with patch("tcn_accel.dse_grid_search", side_effect=RuntimeError("boom")):
            assert main(["dse", "--device", paths["z7020"], "--out", str(tmp_path)]) == EXIT_INTERNAL


class TestSchedule:

    def test_writes_verified_streams(self, paths, tmp_path, arch_12x4):
        code = main(["schedule", "--net", paths["ecg"], "--arch", paths["12x4"], "--batch", "1,8",
                     "--out", str(tmp_path)])
        assert code == EXIT_OK
        for batch in (1, 8):
            stream = read_stream_jsonl(str(tmp_path / f"stream_ecg_B{batch}_stream.jsonl"))
            assert stream.metadata["batch"] == batch
            assert verify_schedule(stream, arch_12x4) == []

    def test_resident_logs_fallback_types(self, paths, tmp_path, caplog):
        with caplog.at_level(logging.INFO):
            code = main(["schedule", "--net", paths["wn"], "--arch", paths["9x10"], "--policy", "resident",
                         "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert "类型 [8, 9, 10]" in caplog.text
        assert (tmp_path / "stream_wn_pnt_B1_resident.jsonl").exists()

    def test_rows_and_cols(self, paths, tmp_path):
        code = main(["schedule", "--net", paths["res_tcn"], "--rows", "4", "--cols", "12", "--freq", "120",
                     "--out", str(tmp_path)])
        assert code == EXIT_OK
        stream = read_stream_jsonl(str(tmp_path / "stream_res_tcn_B1_stream.jsonl"))
        assert (stream.metadata["cfg"]["n_rows"], stream.metadata["cfg"]["n_cols"]) == (4, 12)

    def test_device_top_config(self, paths, tmp_path):
        code = main(["schedule", "--net", paths["res_tcn"], "--device", paths["z7020"], "--out", str(tmp_path)])
        assert code == EXIT_OK
        stream = read_stream_jsonl(str(tmp_path / "stream_res_tcn_B1_stream.jsonl"))
        assert stream.metadata["cfg"]["n_rows"] * stream.metadata["cfg"]["n_cols"] == 55

    def test_half_matrix_rejected(self, paths, tmp_path):
        assert main(["schedule", "--net", paths["ecg"], "--rows", "4", "--out", str(tmp_path)]) == EXIT_INPUT

    def test_capacity_failure(self, paths, tmp_path):
        net = _write_json(tmp_path / "deep.json", {
            "name": "deep", "input_channels": 1,
            "layers": [{"id": 0, "in_ch": 1, "out_ch": 1, "k": 2, "d": 5000}],
        })
        assert main(["schedule", "--net", net, "--arch", paths["9x10"], "--out", str(tmp_path)]) == EXIT_VERIFY

    def test_bad_network(self, paths, tmp_path):
        net = _write_json(tmp_path / "bad.json", {
            "name": "bad", "input_channels": 1,
            "layers": [{"id": 0, "in_ch": 1, "out_ch": 1, "k": 2, "stride": 4}],
        })
        assert main(["schedule", "--net", net, "--arch", paths["9x10"], "--out", str(tmp_path)]) == EXIT_INPUT

    def test_missing_network_file(self, paths, tmp_path):
        code = main(["schedule", "--net", str(tmp_path / "none.json"), "--arch", paths["9x10"],
                     "--out", str(tmp_path)])
        assert code == EXIT_INPUT

    def test_non_utf8_network_file(self, paths, tmp_path):
        net = tmp_path / "latin1.json"
        net.write_bytes('{"name": "café"}'.encode("latin-1"))
        assert main(["schedule", "--net", str(net), "--arch", paths["9x10"], "--out", str(tmp_path)]) == EXIT_INPUT

    def test_string_bias_rejected(self, paths, tmp_path):
        net = _write_json(tmp_path / "bias.json", {
            "name": "bias", "input_channels": 1,
            "layers": [{"id": 0, "in_ch": 1, "out_ch": 1, "k": 2, "bias": "false"}],
        })
        assert main(["schedule", "--net", net, "--arch", paths["9x10"], "--out", str(tmp_path)]) == EXIT_INPUT


class TestSimulate:

    def test_ecg_real_time_on_z7020(self, paths, tmp_path, caplog):
        with caplog.at_level(logging.INFO):
            code = main(["simulate", "--net", paths["ecg"], "--device", paths["z7020"], "--arch", paths["12x4"],
                         "--batch", "8", "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert "实时性 PASS" in caplog.text
        sweep = _csv(tmp_path / "sweep_ecg_stream.csv")
        assert sweep[0]["batch"] == "8"
        assert sweep[0]["real_time"] == "true"
        assert float(sweep[0]["real_time_bound_ms"]) == pytest.approx(26.666667)
        layers = _csv(tmp_path / "sim_ecg_B8_stream.csv")
        assert [row["layer"] for row in layers] == [str(i) for i in range(11)] + ["total"]

    def test_manifest(self, paths, tmp_path):
        manifest = _write_json(tmp_path / "run.json", {
            "network": paths["res_tcn"], "arch": paths["9x10"], "batches": [1, 2],
            "out_dir": "results", "format": "json", "timing": {"ce_warmup_cycles": 0},
        })
        assert main(["simulate", "--config", manifest]) == EXIT_OK
        sweep = json.loads((tmp_path / "results" / "sweep_res_tcn_stream.json").read_text(encoding="utf-8"))
        assert [row["batch"] for row in sweep] == [1, 2]

    def test_cli_overrides_manifest(self, paths, tmp_path):
        manifest = _write_json(tmp_path / "run.json", {
            "network": paths["res_tcn"], "arch": paths["9x10"], "batches": [1, 2], "out_dir": "results",
        })
        code = main(["simulate", "--config", manifest, "--batch", "4", "--out", str(tmp_path / "cli")])
        assert code == EXIT_OK
        assert [row["batch"] for row in _csv(tmp_path / "cli" / "sweep_res_tcn_stream.csv")] == ["4"]

    def test_timing_override(self, paths, tmp_path):
        base = ["simulate", "--net", paths["res_tcn"], "--arch", paths["9x10"]]
        assert main(base + ["--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(base + ["--out", str(tmp_path / "b"), "--timing-override", "dma_latency_cycles=0",
                            "--timing-override", "ce_warmup_cycles=0"]) == EXIT_OK
        slow = float(_csv(tmp_path / "a" / "sweep_res_tcn_stream.csv")[0]["time_ms"])
        fast = float(_csv(tmp_path / "b" / "sweep_res_tcn_stream.csv")[0]["time_ms"])
        assert fast < slow

    def test_bad_timing_override(self, paths, tmp_path):
        code = main(["simulate", "--net", paths["res_tcn"], "--arch", paths["9x10"],
                     "--timing-override", "clock=1", "--out", str(tmp_path)])
        assert code == EXIT_INPUT

    def test_log_file(self, paths, tmp_path):
        log_file = tmp_path / "run.log"
        code = main(["simulate", "--net", paths["res_tcn"], "--arch", paths["9x10"], "--out", str(tmp_path),
                     "--log-file", str(log_file), "-v"])
        assert code == EXIT_OK
        assert "B=1" in log_file.read_text(encoding="utf-8")


class TestRoofline:

    def test_rows_per_batch(self, paths, tmp_path):
        code = main(["roofline", "--net", paths["ecg"], "--arch", paths["9x10"], "--batch", "1,8",
                     "--out", str(tmp_path)])
        assert code == EXIT_OK
        with open(tmp_path / "roofline_ecg_stream.csv", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ROOFLINE_COLUMNS
        assert [row[0] for row in rows[1:]] == ["1", "8"]
        assert float(rows[2][1]) > float(rows[1][1])


class TestInfer:

    def test_matches_streaming_engine(self, res_tcn_net, repo_root, tmp_path, rng):
        weights = synthetic_weights(res_tcn_net, seed=9)
        save_weights(weights, res_tcn_net, str(tmp_path / "w.bin"), str(tmp_path / "w.json"))
        length = receptive_field(res_tcn_net) + 4 * 9
        x = QTensor(rng.integers(-512, 512, size=(150, length)))
        write_stream(str(tmp_path / "x.bin"), x)
        code = main(["infer", "--net", os.path.join(repo_root, "networks", "res_tcn.json"),
                     "--weights", str(tmp_path / "w.bin"), "--sidecar", str(tmp_path / "w.json"),
                     "--input", str(tmp_path / "x.bin"), "--batch", "3", "--out", str(tmp_path)])
        assert code == EXIT_OK
        expected, _ = run_network_streaming(res_tcn_net, weights, x, 3)
        got = read_stream(str(tmp_path / "infer_res_tcn_B3.bin"), 256)
        assert got.length == 9
        np.testing.assert_array_equal(got.data, expected.data)
        stats = json.loads((tmp_path / "infer_res_tcn_B3_stats.json").read_text(encoding="utf-8"))
        assert set(stats) == {str(layer.id) for layer in res_tcn_net.layers}

    def test_weights_required(self, paths, tmp_path):
        assert main(["infer", "--net", paths["ecg"], "--input", "x.bin", "--out", str(tmp_path)]) == EXIT_INPUT

    def test_weight_size_mismatch(self, paths, tmp_path):
        (tmp_path / "w.bin").write_bytes(b"\x00" * 10)
        (tmp_path / "x.bin").write_bytes(b"\x00" * 10)
        code = main(["infer", "--net", paths["ecg"], "--weights", str(tmp_path / "w.bin"),
                     "--input", str(tmp_path / "x.bin"), "--out", str(tmp_path)])
        assert code == EXIT_INPUT


class TestValidate:

    def test_res_tcn_replay(self, paths, tmp_path):
        code = main(["validate", "--net", paths["res_tcn"], "--batch", "1,3", "--out", str(tmp_path)])
        assert code == EXIT_OK
        rows = _csv(tmp_path / "validate.csv")
        assert len(rows) == 4
        assert {row["policy"] for row in rows} == {"stream", "resident"}
        assert all(row["violations"] == "0" and row["replay"] == "ok" for row in rows)

    def test_all_networks_without_replay(self, tmp_path):
        code = main(["validate", "--skip-replay", "--policy", "stream", "--out", str(tmp_path)])
        assert code == EXIT_OK
        rows = _csv(tmp_path / "validate.csv")
        assert sorted(row["network"] for row in rows) == ["ecg", "res_tcn", "wn_pnt"]
        assert all(row["replay"] == "skipped" for row in rows)


class TestParsers:

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["fly"])
        assert exc.value.code == EXIT_INPUT

    def test_bad_choice(self, paths):
        with pytest.raises(SystemExit) as exc:
            main(["schedule", "--net", paths["ecg"], "--policy", "fused"])
        assert exc.value.code == EXIT_INPUT

    def test_bad_batch_list(self, paths, tmp_path):
        code = main(["schedule", "--net", paths["ecg"], "--arch", paths["9x10"], "--batch", "1,x",
                     "--out", str(tmp_path)])
        assert code == EXIT_INPUT

    def test_range_and_overrides(self):
        assert parse_range("4..6") == [4, 5, 6]
        assert parse_timing_overrides(["bw_in=16", "dma_latency_cycles=12.0"]) == {
            "bw_in": 16.0, "dma_latency_cycles": 12,
        }
