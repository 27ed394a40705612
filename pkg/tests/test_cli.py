"""Config parsing and the bench command line, end to end on temp files."""

import json

import pytest

from coopt.bench import load_workload
from coopt.cli import build_parser, main, parse_config
from coopt.errors import ConfigError

FULL_DOC = {
    "model": {"vocab_size": 32, "num_layers": 2, "H_q": 8, "H_k": 2,
              "d": 16, "seed": 3, "attn_gain": 0.2},
    "cache": {"B": 8, "capacity": 512, "precision": {"coopt": "fp8"}},
    "workload": {"num_requests": 4, "distribution": "fixed", "length": 12,
                 "max_new_tokens": 5, "seed": 21},
    "cost_model": {"T_cache": 10.0, "T_DRAM": 300.0},
    "warmup_runs": 0,
    "skip_duplicate_prompt_tokens": True,
}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


class TestParseConfig:
    def test_full_document(self):
        config, spec = parse_config(FULL_DOC)
        assert config.model.vocab_size == 32
        assert config.model.num_query_heads == 8
        assert config.model.num_kv_heads == 2
        assert config.model.head_dim == 16
        assert config.model.attn_gain == 0.2
        assert config.block_size == 8
        assert config.capacity_blocks == 512
        assert config.precision_by_mode == {"coopt": "fp8"}
        assert config.t_cache == 10.0 and config.t_dram == 300.0
        assert config.warmup_runs == 0
        assert config.skip_duplicate_prompt_tokens is True
        assert spec.num_requests == 4
        assert spec.length == 12

    def test_empty_document_uses_defaults(self):
        config, spec = parse_config({})
        assert config.model.vocab_size == 64
        assert config.block_size == 16
        assert spec.num_requests == 0

    def test_unknown_top_level_key_is_named(self):
        with pytest.raises(ConfigError, match="cashe"):
            parse_config({"cashe": {}})

    def test_unknown_model_key_is_named(self):
        with pytest.raises(ConfigError, match="n_heads"):
            parse_config({"model": {"n_heads": 4}})

    def test_unknown_workload_key_is_named(self):
        with pytest.raises(ConfigError, match="lenght"):
            parse_config({"workload": {"num_requests": 1, "lenght": 4}})


class TestParser:
    def test_run_defaults(self):
        args = build_parser().parse_args(["run", "--config", "c.json"])
        assert args.modes == "original,coopt"
        assert args.format == "json"
        assert args.out is None
        assert args.warmup is None

    def test_missing_subcommand_exits(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_bad_format_exits(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["run", "--config", "c", "--format", "yaml"])


class TestMain:
    def test_run_json_to_stdout(self, tmp_path, capsys):
        config = write_json(tmp_path / "c.json", FULL_DOC)
        assert main(["run", "--config", config, "--modes", "original"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert "original" in report["modes"]
        assert report["environment"]["num_requests"] == 4

    def test_run_csv_to_file_prints_summary(self, tmp_path, capsys):
        config = write_json(tmp_path / "c.json", FULL_DOC)
        out = tmp_path / "report.csv"
        code = main(["run", "--config", config, "--modes", "original,coopt",
                     "--format", "csv", "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("mode,total_latency_s")
        assert len(lines) == 3
        stdout = capsys.readouterr().out
        assert "tok/s" in stdout and str(out) in stdout

    def test_run_warmup_override_validates(self, tmp_path, capsys):
        config = write_json(tmp_path / "c.json", FULL_DOC)
        assert main(["run", "--config", config, "--modes", "original",
                     "--warmup", "-1"]) == 2
        assert "bench: error" in capsys.readouterr().err

    def test_workload_generation_and_reuse(self, tmp_path, capsys):
        spec = write_json(tmp_path / "w.json",
                          {"num_requests": 3, "distribution": "fixed",
                           "length": 8, "vocab_size": 16, "seed": 5})
        wl_path = tmp_path / "w.bin"
        assert main(["workload", "--spec", spec, "--out", str(wl_path)]) == 0
        assert "3 requests" in capsys.readouterr().out
        requests = load_workload(wl_path)
        assert [len(r.prompt) for r in requests] == [8, 8, 8]

        config = write_json(tmp_path / "c.json", FULL_DOC)
        assert main(["run", "--config", config, "--modes", "original",
                     "--workload", str(wl_path)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["environment"]["num_requests"] == 3

    def test_workload_accepts_full_config_document(self, tmp_path, capsys):
        spec = write_json(tmp_path / "full.json", FULL_DOC)
        wl_path = tmp_path / "full.bin"
        assert main(["workload", "--spec", spec, "--out", str(wl_path)]) == 0
        assert len(load_workload(wl_path)) == 4

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2
        assert "bench: error" in capsys.readouterr().err

    def test_config_typo_reported(self, tmp_path, capsys):
        config = write_json(tmp_path / "bad.json", {"modle": {}})
        assert main(["run", "--config", config]) == 2
        assert "modle" in capsys.readouterr().err

    def test_no_modes_requested(self, tmp_path, capsys):
        config = write_json(tmp_path / "c.json", FULL_DOC)
        assert main(["run", "--config", config, "--modes", " , "]) == 2
        assert "no modes" in capsys.readouterr().err

    def test_selftest_fast(self, capsys):
        assert main(["selftest", "--fast"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out
