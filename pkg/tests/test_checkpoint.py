import os

import pytest
import torch

from glassbox.checkpoint import (
    Checkpoint,
    CheckpointError,
    IntegrityError,
    OptimizerStateMissingError,
    checkpoint_file_name,
    list_checkpoints,
    load_checkpoint,
    save_checkpoint,
)
from glassbox.model import ModelConfig, init_parameters
from glassbox.trainer import OptimizerState


def make_checkpoint(config, precision="full", boundary=3):
    model = init_parameters(config, seed=1)
    opt = OptimizerState.zeros_like(model)
    for t in opt.m.values():
        t.normal_(0, 0.1, generator=torch.Generator().manual_seed(2))
    for t in opt.v.values():
        t.uniform_(0, 0.1, generator=torch.Generator().manual_seed(3))
    return Checkpoint(
        boundary_index=boundary,
        step=42,
        params={n: p.detach().clone() for n, p in model.state_dict().items()},
        opt_m=opt.m,
        opt_v=opt.v,
        rng_state=bytes(range(32)),
        precision_tag=precision,
        manifest_checksum="ab" * 32,
        model_config=config,
        trained_chunks=[0, 1, 2],
        skipped_chunks=[7],
    )


def test_full_precision_round_trip_exact(mini_config, tmp_path):
    ckpt = make_checkpoint(mini_config)
    path = save_checkpoint(ckpt, tmp_path)
    assert path.name == checkpoint_file_name(3)
    loaded = load_checkpoint(path, expected_config=mini_config)
    assert loaded.boundary_index == 3 and loaded.step == 42
    assert loaded.precision_tag == "full"
    assert loaded.manifest_checksum == ckpt.manifest_checksum
    assert loaded.trained_chunks == [0, 1, 2]
    assert loaded.skipped_chunks == [7]
    assert loaded.rng_state == bytes(range(32))
    for n, t in ckpt.params.items():
        assert torch.equal(loaded.params[n], t)
    for n, t in ckpt.opt_m.items():
        assert torch.equal(loaded.opt_m[n], t)
    for n, t in ckpt.opt_v.items():
        assert torch.equal(loaded.opt_v[n], t)


def test_half_precision_loads_with_loud_warning(mini_config, tmp_path, caplog):
    ckpt = make_checkpoint(mini_config, precision="half")
    path = save_checkpoint(ckpt, tmp_path)
    with caplog.at_level("WARNING"):
        loaded = load_checkpoint(path)
    assert loaded.load_warnings
    assert "half precision" in loaded.load_warnings[0]
    assert any("half precision" in r.message for r in caplog.records)
    # params come back as float32 but lost mantissa bits in the round trip
    w = loaded.params["embed.weight"]
    assert w.dtype == torch.float32
    assert not torch.equal(w, ckpt.params["embed.weight"])
    assert torch.allclose(w, ckpt.params["embed.weight"], atol=1e-3)


def test_single_flipped_byte_is_refused(mini_config, tmp_path):
    path = save_checkpoint(make_checkpoint(mini_config), tmp_path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match="hash mismatch"):
        load_checkpoint(path)


def test_missing_sidecar_is_refused(mini_config, tmp_path):
    path = save_checkpoint(make_checkpoint(mini_config), tmp_path)
    os.remove(str(path) + ".sha256")
    with pytest.raises(IntegrityError, match="sidecar"):
        load_checkpoint(path)


def test_missing_optimizer_is_explicit_error(mini_config, tmp_path):
    ckpt = make_checkpoint(mini_config)
    path = save_checkpoint(ckpt, tmp_path, include_optimizer=False)
    with pytest.raises(OptimizerStateMissingError, match="exact resume impossible"):
        load_checkpoint(path)


def test_shape_mismatch_detected(mini_config, tmp_path):
    path = save_checkpoint(make_checkpoint(mini_config), tmp_path)
    other = ModelConfig(hidden_size=64, n_layers=2, n_heads=2, intermediate_size=86, max_seq_len=64)
    with pytest.raises(CheckpointError, match="config mismatch"):
        load_checkpoint(path, expected_config=other)


def test_crash_mid_save_leaves_no_loadable_checkpoint(mini_config, tmp_path, monkeypatch):
    ckpt = make_checkpoint(mini_config, boundary=9)

    real_replace = os.replace
    calls = {"n": 0}

    def exploding_replace(src, dst):
        calls["n"] += 1
        raise OSError("simulated crash during rename")

    monkeypatch.setattr(os, "replace", exploding_replace)
    with pytest.raises(OSError):
        save_checkpoint(ckpt, tmp_path)
    monkeypatch.setattr(os, "replace", real_replace)

    assert calls["n"] == 1
    assert list_checkpoints(tmp_path) == []  # temp files are not listed
    leftovers = list(tmp_path.iterdir())
    assert all(p.name.startswith(".tmp-") for p in leftovers)


def test_save_is_deterministic(mini_config, tmp_path):
    a = save_checkpoint(make_checkpoint(mini_config), tmp_path / "a")
    b = save_checkpoint(make_checkpoint(mini_config), tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()


def test_list_checkpoints_sorted(mini_config, tmp_path):
    for boundary in (2, 0, 1):
        save_checkpoint(make_checkpoint(mini_config, boundary=boundary), tmp_path)
    names = [p.name for p in list_checkpoints(tmp_path)]
    assert names == ["ckpt_00000.lckp", "ckpt_00001.lckp", "ckpt_00002.lckp"]
