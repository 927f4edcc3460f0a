"""Training loop: AdamW + warmup/cosine schedule + clip, one checkpoint per chunk.

Chunks are consumed in manifest (or stage) order. Every step runs
forward, loss, backward, global-norm clip, AdamW. A non-finite loss or
gradient aborts the current chunk, restores the chunk-entry snapshot of
(parameters, optimizer state, data RNG), records the failure, and moves
on; skipped chunks are made up at the end by re-consuming chunks from
the start of the sequence so the step schedule still completes.
"""

from __future__ import annotations

import copy
import json
import os
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from .metrics import MetricsLedger, MetricsRecord
from .model import DecoderModel, ModelConfig, cross_entropy_loss, init_parameters
from .prng import Xoshiro256StarStar
from .tokenizer import PAD_ID

logger = logging.getLogger(__name__)


class TrainerError(Exception):
    pass


class NonFiniteError(TrainerError):
    """Loss or gradients went non-finite; handled by the NaN policy."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind  # "nan_loss" | "nonfinite_grad"


class TrainingIOError(TrainerError):
    """Filesystem failure, surfaced separately from numerical failures."""


@dataclass
class TrainPlan:
    total_steps: int
    peak_lr: float = 3e-4
    final_lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    warmup_steps: int = 2000
    batch_size_sequences: int = 2240
    nan_policy: str = "skip_chunk"
    nan_retries: int = 0  # retries of a failed chunk before skipping (paper silent; default 0)
    skip_substitution: str = "first_chunks"  # or "none"
    deterministic: bool = True
    torch_threads: int = 1
    init_seed: int = 0
    data_seed: int = 0
    heldout_chunks: list[int] = field(default_factory=list)
    inject_nan_chunks: list[int] = field(default_factory=list)  # test hook
    stage_plan: corpus_mod.StagePlan | None = None

    def validate(self) -> None:
        if not (0 < self.final_lr <= self.peak_lr):
            raise TrainerError("require 0 < final_lr <= peak_lr")
        if not (0 <= self.warmup_steps < self.total_steps):
            raise TrainerError("require warmup_steps < total_steps")
        if self.clip_norm <= 0:
            raise TrainerError("clip_norm must be > 0")
        if self.nan_policy != "skip_chunk":
            raise TrainerError(f"unknown nan_policy {self.nan_policy!r}")
        if self.skip_substitution not in ("first_chunks", "none"):
            raise TrainerError(f"unknown skip_substitution {self.skip_substitution!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_plan"] = self.stage_plan.to_dict() if self.stage_plan else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        d = dict(d)
        sp = d.pop("stage_plan", None)
        plan = cls(**d)
        if sp:
            plan.stage_plan = corpus_mod.StagePlan.from_dict(sp)
        return plan


def lr_at(step: int, plan: TrainPlan) -> float:
    """Linear warmup from 0 to peak, then cosine decay to final_lr."""
    if step <= plan.warmup_steps:
        if plan.warmup_steps == 0:
            return plan.peak_lr
        return plan.peak_lr * step / plan.warmup_steps
    progress = (step - plan.warmup_steps) / (plan.total_steps - plan.warmup_steps)
    progress = min(progress, 1.0)
    return plan.final_lr + 0.5 * (plan.peak_lr - plan.final_lr) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, model: DecoderModel) -> "OptimizerState":
        m = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        v = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        return cls(m=m, v=v, t=0)

    def clone(self) -> "OptimizerState":
        return OptimizerState(
            m={n: t.clone() for n, t in self.m.items()},
            v={n: t.clone() for n, t in self.v.items()},
            t=self.t,
        )


def clip_gradients(grads: dict[str, torch.Tensor], clip_norm: float) -> float:
    """Scale gradients in place to a global L2 norm cap; returns pre-clip norm."""
    if clip_norm <= 0:
        raise TrainerError("clip_norm must be > 0")
    sq = sum(float(g.pow(2).sum()) for g in grads.values())
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise NonFiniteError("nonfinite_grad", "gradient norm is not finite")
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.values():
            g.mul_(scale)
    return norm


@torch.no_grad()
def adamw_step(
    model: DecoderModel,
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    lr: float,
    plan: TrainPlan,
) -> None:
    """One decoupled-weight-decay Adam update; increments the step counter."""
    state.t += 1
    t = state.t
    b1, b2 = plan.beta1, plan.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in model.named_parameters():
        g = grads[name]
        if not torch.isfinite(g).all():
            raise NonFiniteError("nonfinite_grad", f"non-finite gradient in {name}")
        m = state.m[name]
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        m_hat = m / bc1
        v_hat = v / bc2
        p.add_(m_hat / (v_hat.sqrt() + plan.eps) + plan.weight_decay * p, alpha=-lr)


# ---------------------------------------------------------------------------
# NaN ledger
# ---------------------------------------------------------------------------


@dataclass
class NanLedger:
    entries: list[dict] = field(default_factory=list)  # {chunk_index, step, kind}
    substitutions: list[dict] = field(default_factory=list)  # {skipped, substitute}
    policy: str = "skip_chunk"

    def record(self, chunk_index: int, step: int, kind: str) -> None:
        self.entries.append({"chunk_index": chunk_index, "step": step, "kind": kind})

    def skipped_chunks(self) -> list[int]:
        seen: list[int] = []
        for e in self.entries:
            if e["chunk_index"] not in seen:
                seen.append(e["chunk_index"])
        return seen

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "entries": self.entries,
            "substitutions": self.substitutions,
        }


# ---------------------------------------------------------------------------
# chunk training
# ---------------------------------------------------------------------------


@dataclass
class RunState:
    """Mutable training state threaded through chunks."""

    model: DecoderModel
    opt: OptimizerState
    data_rng: Xoshiro256StarStar
    boundary: int  # checkpoints written so far - 1 == chunks consumed
    trained_chunks: list[int]


def _batches(n_sequences: int, batch_size: int, rng: Xoshiro256StarStar):
    order = np.arange(n_sequences, dtype=np.int64)
    rng.shuffle(order)
    for start in range(0, n_sequences, batch_size):
        yield order[start : start + batch_size]


def train_step(
    model: DecoderModel,
    batch: torch.Tensor,
    opt: OptimizerState,
    plan: TrainPlan,
    force_nan: bool = False,
) -> tuple[float, float, float, int]:
    """One optimization step; returns (loss, pre-clip grad norm, lr, tokens)."""
    inputs = batch[:, :-1]
    targets = batch[:, 1:]
    mask = targets != PAD_ID
    logits = model(inputs)
    loss, n_tokens = cross_entropy_loss(logits, targets, mask)
    loss_val = float(loss.detach())
    if force_nan:
        loss_val = float("nan")
    if not math.isfinite(loss_val):
        raise NonFiniteError("nan_loss", f"non-finite loss {loss_val}")
    model.zero_grad(set_to_none=True)
    loss.backward()
    grads = {n: p.grad for n, p in model.named_parameters()}
    norm = clip_gradients(grads, plan.clip_norm)
    lr = lr_at(opt.t + 1, plan)
    adamw_step(model, grads, opt, lr, plan)
    return loss_val, norm, lr, n_tokens


def train_chunk(
    chunk_index: int,
    chunk_path: Path,
    state: RunState,
    plan: TrainPlan,
    metrics: MetricsLedger,
    ledger: NanLedger,
) -> str:
    """Train one chunk; returns "ok" or "skipped" (chunk-entry state restored)."""
    try:
        sequences = corpus_mod.read_chunk(chunk_path)
    except OSError as e:
        raise TrainingIOError(f"cannot read chunk {chunk_index}: {e}") from e

    snapshot = (
        copy.deepcopy(state.model.state_dict()),
        state.opt.clone(),
        state.data_rng.state,
    )
    data = torch.from_numpy(sequences.astype(np.int64))
    attempts = 1 + max(0, plan.nan_retries)
    for attempt in range(attempts):
        # metrics are buffered and flushed only if the chunk survives; an
        # aborted chunk rolls the step counter back, so its steps never happened
        pending: list[MetricsRecord] = []
        try:
            for rows in _batches(len(sequences), plan.batch_size_sequences, state.data_rng):
                t0 = time.perf_counter()
                force = attempt == 0 and chunk_index in plan.inject_nan_chunks
                loss, norm, lr, n_tok = train_step(
                    state.model, data[rows], state.opt, plan, force_nan=force
                )
                dt = time.perf_counter() - t0
                pending.append(
                    MetricsRecord(
                        step=state.opt.t,
                        chunk_index=chunk_index,
                        loss=loss,
                        grad_norm_preclip=norm,
                        lr=lr,
                        tokens_per_second=n_tok / dt if dt > 0 else 0.0,
                        wall_time=time.time(),
                    )
                )
            for rec in pending:
                metrics.append(rec)
            return "ok"
        except NonFiniteError as e:
            ledger.record(chunk_index, state.opt.t, e.kind)
            state.model.load_state_dict(snapshot[0])
            state.opt = snapshot[1].clone()
            state.data_rng.set_state(snapshot[2])
            logger.warning("chunk %d aborted (%s), attempt %d", chunk_index, e.kind, attempt + 1)
    return "skipped"


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------


def plan_total_steps(manifest: corpus_mod.CorpusManifest, plan_batch: int, train_chunks: list[int]) -> int:
    by_index = {c.index: c for c in manifest.chunks}
    steps = 0
    for idx in train_chunks:
        n = by_index[idx].n_sequences
        steps += (n + plan_batch - 1) // plan_batch
    return steps

def _training_chunk_order(manifest: corpus_mod.CorpusManifest, plan: TrainPlan) -> list[int]:
    stage_plan = plan.stage_plan or manifest.stage_plan
    order = stage_plan.chunk_order() if stage_plan else [c.index for c in manifest.chunks]
    heldout = set(plan.heldout_chunks)
    return [i for i in order if i not in heldout]


def run_training(
    config: ModelConfig,
    plan: TrainPlan,
    manifest: corpus_mod.CorpusManifest,
    chunk_dir: Path,
    out_dir: Path,
    resume_from: Path | None = None,
    manifest_path: Path | None = None,
) -> dict:
    """Execute the whole schedule; one checkpoint per chunk boundary.

    Returns a summary dict with checkpoint paths and the NaN ledger.
    Deterministic mode pins the torch thread count so reductions are
    bit-reproducible run to run.
    """
    plan.validate()
    if plan.deterministic:
        torch.set_num_threads(plan.torch_threads)
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    chunk_dir = Path(chunk_dir)
    manifest_checksum = manifest.checksum()

    metrics = MetricsLedger(out_dir / "metrics.jsonl")
    ledger = NanLedger(policy=plan.nan_policy)

    order = _training_chunk_order(manifest, plan)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_config=config)
        if ckpt.manifest_checksum != manifest_checksum:
            raise TrainerError(
                "checkpoint was trained against a different manifest "
                f"({ckpt.manifest_checksum[:12]} != {manifest_checksum[:12]})"
            )
        model = DecoderModel(config)
        model.load_state_dict(ckpt.params)
        opt = OptimizerState(m=ckpt.opt_m, v=ckpt.opt_v, t=ckpt.step)
        rng = Xoshiro256StarStar.from_state((0, 0, 0, 0))
        rng.set_state_bytes(ckpt.rng_state)
        state = RunState(
            model=model,
            opt=opt,
            data_rng=rng,
            boundary=ckpt.boundary_index,
            trained_chunks=list(ckpt.trained_chunks),
        )
        for idx in ckpt.skipped_chunks:
            ledger.record(idx, ckpt.step, "recorded_before_resume")
    else:
        model = init_parameters(config, plan.init_seed)
        state = RunState(
            model=model,
            opt=OptimizerState.zeros_like(model),
            data_rng=Xoshiro256StarStar(plan.data_seed),
            boundary=0,
            trained_chunks=[],
        )
        _save_boundary(state, config, plan, manifest_checksum, ckpt_dir, ledger)

    # on resume, skip the chunks this checkpoint already consumed
    pending = order[state.boundary :]

    checkpoints = []
    for chunk_index in pending:
        outcome = train_chunk(
            chunk_index, chunk_dir / corpus_mod.chunk_file_name(chunk_index), state, plan, metrics, ledger
        )
        if outcome == "ok":
            state.trained_chunks.append(chunk_index)
        state.boundary += 1
        checkpoints.append(_save_boundary(state, config, plan, manifest_checksum, ckpt_dir, ledger))

    # complete the schedule for skipped chunks by re-consuming chunks from
    # the start of the training sequence
    if plan.skip_substitution == "first_chunks":
        skipped = ledger.skipped_chunks()
        substitutes = [i for i in order if i not in skipped]
        for pos, bad_chunk in enumerate(skipped):
            if pos >= len(substitutes):
                logger.warning("no substitute available for skipped chunk %d", bad_chunk)
                break
            sub = substitutes[pos]
            outcome = train_chunk(
                sub, chunk_dir / corpus_mod.chunk_file_name(sub), state, plan, metrics, ledger
            )
            ledger.substitutions.append({"skipped": bad_chunk, "substitute": sub, "outcome": outcome})
            if outcome == "ok" and sub not in state.trained_chunks:
                state.trained_chunks.append(sub)
            state.boundary += 1
            checkpoints.append(_save_boundary(state, config, plan, manifest_checksum, ckpt_dir, ledger))

    metrics.close()
    summary = {
        "boundaries": state.boundary,
        "final_step": state.opt.t,
        "trained_chunks": state.trained_chunks,
        "nan_ledger": ledger.to_dict(),
        "checkpoints": [str(p) for p in checkpoints],
    }
    (out_dir / "nan_ledger.json").write_text(
        json.dumps(ledger.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    # paths are stored relative to the run dir so artifact trees relocate
    meta = {
        "manifest_checksum": manifest_checksum,
        "manifest_path": os.path.relpath(manifest_path, out_dir) if manifest_path else None,
        "chunk_dir": os.path.relpath(chunk_dir, out_dir),
        "model_config": config.to_dict(),
        "plan": plan.to_dict(),
        "boundaries": state.boundary,
        "final_step": state.opt.t,
        "trained_chunks": state.trained_chunks,
    }
    (out_dir / "run_meta.json").write_text(
        json.dumps(meta, indent=2) + "\n", encoding="utf-8"
    )
    return summary


def _save_boundary(
    state: RunState,
    config: ModelConfig,
    plan: TrainPlan,
    manifest_checksum: str,
    ckpt_dir: Path,
    ledger: NanLedger,
) -> Path:
    ckpt = Checkpoint(
        boundary_index=state.boundary,
        step=state.opt.t,
        params={n: p.detach() for n, p in state.model.state_dict().items()},
        opt_m=state.opt.m,
        opt_v=state.opt.v,
        rng_state=state.data_rng.state_bytes(),
        precision_tag="full",
        manifest_checksum=manifest_checksum,
        model_config=config,
        trained_chunks=list(state.trained_chunks),
        skipped_chunks=ledger.skipped_chunks(),
    )
    try:
        return save_checkpoint(ckpt, ckpt_dir)
    except OSError as e:
        raise TrainingIOError(f"cannot save checkpoint {state.boundary}: {e}") from e
