import json
import shutil
from pathlib import Path

import pytest

from glassbox import synthdata
from glassbox.runconfig import ConfigError, load_config, validate_config

REPO_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk-default.json"


def materialize_sample(tmp_path) -> Path:
    """Copy the repo sample config next to a generated demo corpus."""
    cfg_path = tmp_path / "desk-default.json"
    shutil.copy(REPO_CONFIG, cfg_path)
    synthdata.write_demo_sources(tmp_path / "demo", total_tokens=120_000, seed=2024)
    return cfg_path


def test_repo_sample_config_accepted(tmp_path):
    cfg_path = materialize_sample(tmp_path)
    cfg = validate_config(load_config(cfg_path), base_dir=tmp_path)
    assert cfg.n_chunks == 6
    assert cfg.model.hidden_size == 128
    assert cfg.train["heldout_chunks"] == [5]
    assert cfg.analysis.k == cfg.analysis.l == 32


def err_paths(excinfo):
    return [path for path, _ in excinfo.value.errors]


def test_warmup_must_be_below_total_steps(tmp_path):
    cfg_path = materialize_sample(tmp_path)
    doc = load_config(cfg_path)
    doc["train"]["total_steps"] = 10
    doc["train"]["warmup_steps"] = 10
    with pytest.raises(ConfigError) as e:
        validate_config(doc, base_dir=tmp_path)
    assert "train.warmup_steps" in err_paths(e)
    assert "train.total_steps" in str(e.value)


def test_warmup_checked_against_auto_estimate(tmp_path):
    cfg_path = materialize_sample(tmp_path)
    doc = load_config(cfg_path)
    doc["train"]["warmup_steps"] = 10_000_000
    with pytest.raises(ConfigError) as e:
        validate_config(doc, base_dir=tmp_path)
    assert "train.warmup_steps" in err_paths(e)


def test_stage_budgets_exceeding_source_named(tmp_path):
    cfg_path = materialize_sample(tmp_path)
    doc = load_config(cfg_path)
    doc["corpus"]["stages"] = [{"alpha": 50_000}, {"alpha": 50_000}]
    with pytest.raises(ConfigError) as e:
        validate_config(doc, base_dir=tmp_path)
    assert any("alpha" in p for p in err_paths(e))


def test_unknown_stage_source_named(tmp_path):
    cfg_path = materialize_sample(tmp_path)
    doc = load_config(cfg_path)
    doc["corpus"]["stages"] = [{"nosuch": 10}]
    with pytest.raises(ConfigError) as e:
        validate_config(doc, base_dir=tmp_path)
    assert "corpus.stages[0].nosuch" in err_paths(e)


def test_missing_source_path_reported_with_key_path(tmp_path):
    cfg_path = materialize_sample(tmp_path)
    doc = load_config(cfg_path)
    doc["corpus"]["sources"][1]["path"] = "demo/never.txt"
    with pytest.raises(ConfigError) as e:
        validate_config(doc, base_dir=tmp_path)
    assert "corpus.sources[1].path" in err_paths(e)


def test_vocab_must_match_byte_tokenizer(tmp_path):
    cfg_path = materialize_sample(tmp_path)
    doc = load_config(cfg_path)
    doc["model"]["vocab_size"] = 32000
    with pytest.raises(ConfigError) as e:
        validate_config(doc, base_dir=tmp_path)
    assert "model.vocab_size" in err_paths(e)


def test_model_window_must_cover_corpus_window(tmp_path):
    cfg_path = materialize_sample(tmp_path)
    doc = load_config(cfg_path)
    doc["model"]["max_seq_len"] = 64
    with pytest.raises(ConfigError) as e:
        validate_config(doc, base_dir=tmp_path)
    assert "model.max_seq_len" in err_paths(e)


def test_probe_window_must_fit(tmp_path):
    cfg_path = materialize_sample(tmp_path)
    doc = load_config(cfg_path)
    doc["analysis"]["k"] = 100
    doc["analysis"]["l"] = 100
    with pytest.raises(ConfigError) as e:
        validate_config(doc, base_dir=tmp_path)
    assert "analysis.k" in err_paths(e)


def test_heldout_chunk_range_checked(tmp_path):
    cfg_path = materialize_sample(tmp_path)
    doc = load_config(cfg_path)
    doc["train"]["heldout_chunks"] = [99]
    with pytest.raises(ConfigError) as e:
        validate_config(doc, base_dir=tmp_path)
    assert "train.heldout_chunks" in err_paths(e)


def test_multiple_errors_collected(tmp_path):
    cfg_path = materialize_sample(tmp_path)
    doc = load_config(cfg_path)
    doc["model"]["vocab_size"] = 1000
    doc["train"]["heldout_chunks"] = [99]
    with pytest.raises(ConfigError) as e:
        validate_config(doc, base_dir=tmp_path)
    assert len(e.value.errors) >= 2


def test_schema_version_required(tmp_path):
    cfg_path = materialize_sample(tmp_path)
    doc = load_config(cfg_path)
    doc["schema_version"] = 99
    with pytest.raises(ConfigError) as e:
        validate_config(doc, base_dir=tmp_path)
    assert "schema_version" in err_paths(e)
