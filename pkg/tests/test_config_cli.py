import json

import numpy as np
import pytest

from mlim.cli import entrypoint
from mlim.config import (
    ConfigError, DataConfig, FullConfig, config_from_dict, load_config,
    resolve_seed,
)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("MLIM_SEED", raising=False)


def tiny_config_dict(seed=0):
    return {
        "seed": seed,
        "model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16,
                  "dropout": 0.1, "max_text_len": 8, "image_size": 40,
                  "enc_channels": [4, 4], "dec_channels": [4, 4]},
        "data": {"n_train": 6, "n_eval": 4, "n_pairs_train": 4,
                 "n_pairs_test": 4, "image_size": 40},
        "pretrain": {"steps": 2, "batch_size": 4, "micro_batch": 4,
                     "checkpoint_every": 0},
        "finetune": {"steps": 2, "batch_size": 4, "micro_batch": 4,
                     "checkpoint_every": 0},
        "probe": {"mask_probs": [0.5], "n_items": 4, "batch": 4},
        "ablation": {"seeds": [0]},
    }


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config_dict()))
    return path


class TestConfigLoading:
    def test_empty_dict_gives_defaults(self):
        assert config_from_dict({}) == FullConfig()

    def test_round_trip_through_json(self):
        cfg = config_from_dict(tiny_config_dict(seed=9))
        again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown top-level key.*modle"):
            config_from_dict({"modle": {}})

    def test_unknown_section_key_names_the_path(self):
        with pytest.raises(ConfigError, match="unknown key.*'model'.*d_modle"):
            config_from_dict({"model": {"d_modle": 8}})
        with pytest.raises(ConfigError, match="'probe'.*gray_lvl"):
            config_from_dict({"probe": {"gray_lvl": 0.5}})

    def test_section_must_be_object(self):
        with pytest.raises(ConfigError, match="section 'model' must be an object"):
            config_from_dict({"model": 3})

    def test_root_must_be_object(self):
        with pytest.raises(ConfigError, match="config root must be an object"):
            config_from_dict([1, 2])

    @pytest.mark.parametrize("seed", [-1, True, "7", 1.5])
    def test_bad_seed_rejected(self, seed):
        with pytest.raises(ConfigError, match="seed must be a non-negative integer"):
            config_from_dict({"seed": seed})

    def test_lists_become_tuples(self):
        cfg = config_from_dict({"probe": {"mask_probs": [0.25, 0.5]},
                                "ablation": {"seeds": [3, 4]}})
        assert cfg.probe.mask_probs == (0.25, 0.5)
        assert cfg.ablation.seeds == (3, 4)

    def test_semantic_validation_is_wrapped(self):
        with pytest.raises(ConfigError, match="data.image_size 40 != model.image_size 64"):
            config_from_dict({"data": {"image_size": 40}})  # model stays at 64
        with pytest.raises(ConfigError, match="p_"):
            config_from_dict({"mam": {"p_heavy": 0.1, "p_light": 0.5}})
        with pytest.raises(ConfigError):
            config_from_dict({"model": {"d_model": "big"}})

    def test_missing_file_names_path(self, tmp_path):
        missing = tmp_path / "nope.json"
        with pytest.raises(ConfigError, match="config file not found.*nope.json"):
            load_config(missing)

    def test_malformed_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config(bad)

    def test_dataconfig_bounds(self):
        with pytest.raises(ValueError, match="multiple of 8"):
            DataConfig(image_size=44).validate()
        with pytest.raises(ValueError, match=">= 40"):
            DataConfig(image_size=32).validate()  # a large shape cannot fit
        DataConfig(image_size=40).validate()
        with pytest.raises(ValueError, match="match_fraction"):
            DataConfig(match_fraction=1.0).validate()
        with pytest.raises(ValueError, match=">= 1"):
            DataConfig(n_train=0).validate()


class TestSeedResolution:
    def test_flag_beats_env_beats_config(self, monkeypatch):
        cfg = config_from_dict({"seed": 3})
        assert resolve_seed(None, cfg) == 3
        monkeypatch.setenv("MLIM_SEED", "5")
        assert resolve_seed(None, cfg) == 5
        assert resolve_seed(9, cfg) == 9

    def test_flag_zero_still_wins(self, monkeypatch):
        monkeypatch.setenv("MLIM_SEED", "5")
        assert resolve_seed(0, config_from_dict({"seed": 3})) == 0

    def test_bad_env_value(self, monkeypatch):
        monkeypatch.setenv("MLIM_SEED", "five")
        with pytest.raises(ConfigError, match="MLIM_SEED must be an integer"):
            resolve_seed(None, config_from_dict({}))


def run_cli(capsys, *argv):
    code = entrypoint(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestCliExitCodes:
    def test_missing_config_exits_1_naming_path(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "gen-data", "--config",
                               str(tmp_path / "ghost.json"), "--out", str(tmp_path))
        assert code == 1
        assert "config error" in err and "ghost.json" in err

    def test_missing_data_dir_exits_1(self, tmp_path, capsys, tiny_config):
        code, _, err = run_cli(capsys, "pretrain", "--config", str(tiny_config),
                               "--data", str(tmp_path / "nodata"),
                               "--out", str(tmp_path))
        assert code == 1
        assert "training corpus not found" in err

    def test_runtime_failure_exits_2(self, tmp_path, capsys, tiny_config):
        data = self_contained_gen(tmp_path, tiny_config, capsys)
        garbage = tmp_path / "garbage.ckpt"
        garbage.write_bytes(b"definitely not a checkpoint")
        code, _, err = run_cli(capsys, "finetune", "--config", str(tiny_config),
                               "--data", data, "--checkpoint", str(garbage),
                               "--out", str(tmp_path))
        assert code == 2
        assert "CheckpointError" in err

    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            entrypoint(["frobnicate"])
        assert exc.value.code == 2


def self_contained_gen(tmp_path, config_path, capsys, *extra):
    code, out, _ = run_cli(capsys, "gen-data", "--config", str(config_path),
                           "--out", str(tmp_path / "runs"), *extra)
    assert code == 0
    return out.strip()


class TestCliPipeline:
    def test_gen_data_outputs(self, tmp_path, capsys, tiny_config):
        run = self_contained_gen(tmp_path, tiny_config, capsys)
        run_path = tmp_path / "runs"
        assert run.startswith(str(run_path))
        from pathlib import Path
        run = Path(run)
        assert (run / "corpus_train" / "manifest.jsonl").exists()
        assert (run / "corpus_eval" / "manifest.jsonl").exists()
        assert (run / "pairs_train.jsonl").exists()
        assert (run / "pairs_test.jsonl").exists()
        resolved = json.loads((run / "resolved_config.json").read_text())
        assert resolved["seed"] == 0
        assert resolved["model"]["d_model"] == 8

    def test_gen_data_deterministic_and_fresh_dirs(self, tmp_path, capsys, tiny_config):
        from pathlib import Path
        a = Path(self_contained_gen(tmp_path, tiny_config, capsys))
        b = Path(self_contained_gen(tmp_path, tiny_config, capsys))
        assert a != b  # each invocation gets its own run directory
        for rel in ("corpus_train/manifest.jsonl", "corpus_eval/manifest.jsonl",
                    "pairs_train.jsonl", "pairs_test.jsonl",
                    "corpus_train/img_000000.ppm"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_seed_precedence_end_to_end(self, tmp_path, capsys, tiny_config, monkeypatch):
        from pathlib import Path
        monkeypatch.setenv("MLIM_SEED", "7")
        a = Path(self_contained_gen(tmp_path, tiny_config, capsys))
        assert json.loads((a / "resolved_config.json").read_text())["seed"] == 7
        b = Path(self_contained_gen(tmp_path, tiny_config, capsys, "--seed", "9"))
        assert json.loads((b / "resolved_config.json").read_text())["seed"] == 9
        assert (a / "corpus_train/manifest.jsonl").read_bytes() != \
               (b / "corpus_train/manifest.jsonl").read_bytes()

    def test_pretrain_probe_finetune_report(self, tmp_path, capsys, tiny_config):
        from pathlib import Path
        data = self_contained_gen(tmp_path, tiny_config, capsys)

        code, out, err = run_cli(capsys, "pretrain", "--config", str(tiny_config),
                                 "--data", data, "--out", str(tmp_path / "runs"))
        assert code == 0, err
        pre = Path(out.strip())
        ckpt = pre / "checkpoint_final.ckpt"
        assert ckpt.exists()
        assert (pre / "pretrain_log.csv").read_text().startswith("step,mode,")
        echo = json.loads((pre / "resolved_config.json").read_text())
        assert echo["pretrain"]["steps"] == 2

        code, out, err = run_cli(capsys, "probe", "--config", str(tiny_config),
                                 "--data", data, "--checkpoint", str(ckpt),
                                 "--out", str(tmp_path / "runs"))
        assert code == 0, err
        probe = Path(out.strip())
        for stem in ("probe_mlm_original", "probe_mlm_random_image",
                     "probe_mlm_gray_image", "probe_recon_original",
                     "probe_recon_random_text", "probe_recon_empty_text"):
            assert (probe / f"{stem}.csv").exists()
            assert (probe / f"{stem}.svg").exists()
        assert (probe / "asymmetry.csv").read_text().startswith("metric,value\n")
        curves = json.loads((probe / "curves.json").read_text())
        assert len(curves) == 6

        code, out, err = run_cli(capsys, "finetune", "--config", str(tiny_config),
                                 "--data", data, "--checkpoint", str(ckpt),
                                 "--out", str(tmp_path / "runs"))
        assert code == 0, err
        ft = Path(out.strip())
        metrics = json.loads((ft / "metrics.json").read_text())
        assert 0.0 <= metrics["pr_auc"] <= 1.0
        assert metrics["n_test_pairs"] == 4
        assert (ft / "finetune_log.csv").exists()

        code, out, err = run_cli(capsys, "report", "--run", str(probe),
                                 "--out", str(tmp_path / "runs"))
        assert code == 0, err
        rep = Path(out.strip())
        for stem in ("probe_mlm_original", "probe_recon_empty_text"):
            assert (rep / f"{stem}.csv").read_bytes() == (probe / f"{stem}.csv").read_bytes()

    def test_report_on_empty_run_exits_1(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        code, _, err = run_cli(capsys, "report", "--run", str(empty),
                               "--out", str(tmp_path))
        assert code == 1
        assert "neither curves.json nor ablation.json" in err

    def test_resolved_config_replays_identically(self, tmp_path, capsys, tiny_config):
        from pathlib import Path
        a = Path(self_contained_gen(tmp_path, tiny_config, capsys))
        replay_cfg = a / "resolved_config.json"
        b = Path(self_contained_gen(tmp_path, replay_cfg, capsys))
        assert (a / "resolved_config.json").read_bytes() == \
               (b / "resolved_config.json").read_bytes()
        assert (a / "corpus_train/manifest.jsonl").read_bytes() == \
               (b / "corpus_train/manifest.jsonl").read_bytes()

    def test_ablate_grid(self, tmp_path, capsys, tiny_config):
        from pathlib import Path
        data = self_contained_gen(tmp_path, tiny_config, capsys)
        code, out, err = run_cli(capsys, "ablate", "--config", str(tiny_config),
                                 "--data", data, "--out", str(tmp_path / "runs"))
        assert code == 0, err
        run = Path(out.strip())
        table = (run / "ablation.csv").read_text().splitlines()
        assert table[0] == "name,seed,pr_auc"
        assert len(table) == 1 + 6 * 2  # per-seed row + median row per variant
        blob = json.loads((run / "ablation.json").read_text())
        assert set(blob["audit"]) == {"0"}
        medians = [r for r in blob["rows"] if r["seed"] == "median"]
        assert len(medians) == 6
        assert "median PR-AUC" in err
