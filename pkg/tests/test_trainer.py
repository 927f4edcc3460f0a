import json

import numpy as np
import pytest
import torch

from glassbox import corpus, trainer
from glassbox.checkpoint import (
    OptimizerStateMissingError,
    list_checkpoints,
    load_checkpoint,
    save_checkpoint,
)
from glassbox.corpus import chunk_file_name
from glassbox.metrics import MetricsLedger
from glassbox.model import init_parameters
from glassbox.trainer import (
    NanLedger,
    OptimizerState,
    RunState,
    TrainPlan,
    TrainerError,
    plan_total_steps,
    run_training,
    train_chunk,
    train_step,
)
from glassbox.prng import Xoshiro256StarStar

from conftest import build_tiny_corpus, rand_tokens


def quick_plan(manifest, heldout=(), **kw):
    order = [c.index for c in manifest.chunks if c.index not in set(heldout)]
    defaults = dict(
        peak_lr=2e-3, final_lr=2e-4, warmup_steps=5,
        batch_size_sequences=16, init_seed=1, data_seed=2,
        heldout_chunks=list(heldout),
    )
    defaults.update(kw)
    return TrainPlan(total_steps=plan_total_steps(manifest, defaults["batch_size_sequences"], order), **defaults)


def test_loss_strictly_decreases_on_fixed_batch(toy_config):
    # overfit smoke property: 50 repeated steps on one batch
    model = init_parameters(toy_config, seed=4)
    batch = rand_tokens((4, 64), seed=9, vocab=256)
    plan = TrainPlan(total_steps=60, peak_lr=1e-3, final_lr=1e-4, warmup_steps=0,
                     batch_size_sequences=4, weight_decay=0.0)
    opt = OptimizerState.zeros_like(model)
    losses = [train_step(model, batch, opt, plan)[0] for _ in range(50)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_train_chunk_clean_writes_metrics_and_keeps_ledger_empty(tmp_path, toy_config):
    manifest, chunk_dir = build_tiny_corpus(tmp_path, n_chunks=3, total_tokens=12_000)
    model = init_parameters(toy_config, seed=1)
    state = RunState(
        model=model, opt=OptimizerState.zeros_like(model),
        data_rng=Xoshiro256StarStar(5), boundary=0, trained_chunks=[],
    )
    plan = quick_plan(manifest)
    ledger = NanLedger()
    with MetricsLedger(tmp_path / "m.jsonl") as metrics:
        outcome = train_chunk(0, chunk_dir / chunk_file_name(0), state, plan, metrics, ledger)
        assert outcome == "ok"
        records = metrics.query()
    assert ledger.entries == []
    assert len(records) == state.opt.t > 0
    assert all(np.isfinite(r.loss) for r in records)
    assert records[-1].lr == pytest.approx(trainer.lr_at(state.opt.t, plan))


def test_injected_nan_skips_chunk_and_restores_state(tmp_path, toy_config):
    manifest, chunk_dir = build_tiny_corpus(tmp_path, n_chunks=3, total_tokens=12_000)
    model = init_parameters(toy_config, seed=1)
    params_before = {n: p.clone() for n, p in model.state_dict().items()}
    state = RunState(
        model=model, opt=OptimizerState.zeros_like(model),
        data_rng=Xoshiro256StarStar(5), boundary=0, trained_chunks=[],
    )
    plan = quick_plan(manifest, inject_nan_chunks=[0])
    ledger = NanLedger()
    with MetricsLedger(tmp_path / "m.jsonl") as metrics:
        outcome = train_chunk(0, chunk_dir / chunk_file_name(0), state, plan, metrics, ledger)
        assert outcome == "skipped"
        assert metrics.query() == []  # rolled-back steps never reach the ledger
    assert [e["chunk_index"] for e in ledger.entries] == [0]
    assert ledger.entries[0]["kind"] == "nan_loss"
    assert state.opt.t == 0
    for n, p in state.model.state_dict().items():
        assert torch.equal(p, params_before[n])
    assert state.data_rng.state == Xoshiro256StarStar(5).state


def test_run_training_cadence_and_meta(tmp_path, toy_config):
    manifest, chunk_dir = build_tiny_corpus(tmp_path, n_chunks=4, total_tokens=16_000)
    plan = quick_plan(manifest)
    summary = run_training(toy_config, plan, manifest, chunk_dir, tmp_path / "run",
                           manifest_path=tmp_path / "manifest.json")
    paths = list_checkpoints(tmp_path / "run/checkpoints")
    assert len(paths) == 5  # initial + one per chunk
    assert summary["trained_chunks"] == [0, 1, 2, 3]
    meta = json.loads((tmp_path / "run/run_meta.json").read_text())
    assert meta["manifest_checksum"] == manifest.checksum()
    final = load_checkpoint(paths[-1])
    assert final.step == summary["final_step"] == plan.total_steps


def test_four_poisoned_chunks_substituted_from_start(tmp_path, toy_config):
    manifest, chunk_dir = build_tiny_corpus(tmp_path, n_chunks=8, total_tokens=32_000)
    plan = quick_plan(manifest, inject_nan_chunks=[2, 3, 5, 6])
    summary = run_training(toy_config, plan, manifest, chunk_dir, tmp_path / "run")
    ledger = summary["nan_ledger"]
    assert [e["chunk_index"] for e in ledger["entries"]] == [2, 3, 5, 6]
    assert [s["skipped"] for s in ledger["substitutions"]] == [2, 3, 5, 6]
    assert [s["substitute"] for s in ledger["substitutions"]] == [0, 1, 4, 7]
    assert all(s["outcome"] == "ok" for s in ledger["substitutions"])
    # 8 planned boundaries + 4 substitutions + initial checkpoint
    assert len(list_checkpoints(tmp_path / "run/checkpoints")) == 13
    assert sorted(summary["trained_chunks"]) == [0, 1, 4, 7]
    nan_file = json.loads((tmp_path / "run/nan_ledger.json").read_text())
    assert nan_file == ledger


def test_resume_bit_identical_to_uninterrupted(tmp_path, toy_config):
    manifest, chunk_dir = build_tiny_corpus(tmp_path, n_chunks=4, total_tokens=16_000)
    plan = quick_plan(manifest)
    run_training(toy_config, plan, manifest, chunk_dir, tmp_path / "full",
                 manifest_path=tmp_path / "manifest.json")
    resumed = run_training(
        toy_config, plan, manifest, chunk_dir, tmp_path / "resumed",
        resume_from=tmp_path / "full/checkpoints/ckpt_00002.lckp",
        manifest_path=tmp_path / "manifest.json",
    )
    assert resumed["boundaries"] == 4
    a = (tmp_path / "full/checkpoints/ckpt_00004.lckp").read_bytes()
    b = (tmp_path / "resumed/checkpoints/ckpt_00004.lckp").read_bytes()
    assert a == b


def test_resume_requires_matching_manifest(tmp_path, toy_config):
    manifest, chunk_dir = build_tiny_corpus(tmp_path / "c1", n_chunks=3, total_tokens=12_000)
    other, other_dir = build_tiny_corpus(tmp_path / "c2", n_chunks=3, total_tokens=12_000, seed=99)
    plan = quick_plan(manifest)
    run_training(toy_config, plan, manifest, chunk_dir, tmp_path / "run")
    with pytest.raises(TrainerError, match="different manifest"):
        run_training(toy_config, quick_plan(other), other, other_dir, tmp_path / "run2",
                     resume_from=tmp_path / "run/checkpoints/ckpt_00001.lckp")


def test_resume_without_optimizer_state_is_hard_error(tmp_path, toy_config):
    manifest, chunk_dir = build_tiny_corpus(tmp_path, n_chunks=3, total_tokens=12_000)
    plan = quick_plan(manifest)
    run_training(toy_config, plan, manifest, chunk_dir, tmp_path / "run")
    ckpt = load_checkpoint(tmp_path / "run/checkpoints/ckpt_00001.lckp")
    degraded_dir = tmp_path / "degraded"
    save_checkpoint(ckpt, degraded_dir, include_optimizer=False)
    with pytest.raises(OptimizerStateMissingError):
        run_training(toy_config, plan, manifest, chunk_dir, tmp_path / "run3",
                     resume_from=degraded_dir / "ckpt_00001.lckp")


def test_heldout_chunks_never_trained(tmp_path, toy_config):
    manifest, chunk_dir = build_tiny_corpus(tmp_path, n_chunks=4, total_tokens=16_000)
    plan = quick_plan(manifest, heldout=(1,))
    summary = run_training(toy_config, plan, manifest, chunk_dir, tmp_path / "run")
    assert summary["trained_chunks"] == [0, 2, 3]
    assert len(list_checkpoints(tmp_path / "run/checkpoints")) == 4
