"""Self-describing single-file checkpoints with integrity hashes.

Binary layout (little-endian):

    magic "LCKP" | u32 version | u32 meta_len | meta JSON (utf-8)
    u32 n_sections
    per section: u16 name_len | name utf-8 | u8 dtype code | u8 ndim
                 | u64 dim_0..dim_{ndim-1} | u64 payload offset | u64 nbytes
    payload (tensor bytes, row-major)

Sections are "param/<name>", "adam_m/<name>", "adam_v/<name>" and
"rng_state". The sha256 of the whole file is written alongside as
"<file>.sha256"; loading verifies it. Writes are atomic (temp file,
fsync, rename) so a crash mid-save never leaves a loadable-but-corrupt
checkpoint behind.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import DecoderModel, ModelConfig

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"LCKP"
CKPT_VERSION = 1
CKPT_SCHEMA_VERSION = 1

_DTYPE_CODES = {"f32": 1, "f64": 2, "bf16": 3, "u8": 4, "u16": 5, "i64": 6}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

_TORCH_TAGS = {
    torch.float32: "f32",
    torch.float64: "f64",
    torch.bfloat16: "bf16",
    torch.uint8: "u8",
    torch.int64: "i64",
}
_TAG_TORCH = {v: k for k, v in _TORCH_TAGS.items()}


class CheckpointError(Exception):
    pass


class IntegrityError(CheckpointError):
    """Stored content hash does not match the file."""


class OptimizerStateMissingError(CheckpointError):
    """Checkpoint has no optimizer moments; exact resume is impossible."""


@dataclass
class Checkpoint:
    boundary_index: int
    step: int
    params: dict[str, torch.Tensor]
    opt_m: dict[str, torch.Tensor] | None
    opt_v: dict[str, torch.Tensor] | None
    rng_state: bytes
    precision_tag: str  # "full" | "half"
    manifest_checksum: str
    model_config: ModelConfig
    trained_chunks: list[int] = field(default_factory=list)
    skipped_chunks: list[int] = field(default_factory=list)
    load_warnings: list[str] = field(default_factory=list)

    def meta_dict(self) -> dict:
        return {
            "schema_version": CKPT_SCHEMA_VERSION,
            "boundary_index": self.boundary_index,
            "step": self.step,
            "precision_tag": self.precision_tag,
            "manifest_checksum": self.manifest_checksum,
            "model_config": self.model_config.to_dict(),
            "trained_chunks": self.trained_chunks,
            "skipped_chunks": self.skipped_chunks,
        }


def checkpoint_file_name(boundary_index: int) -> str:
    return f"ckpt_{boundary_index:05d}.lckp"


def _tensor_bytes(t: torch.Tensor) -> bytes:
    t = t.detach().contiguous()
    if t.dtype == torch.bfloat16:
        return t.view(torch.int16).numpy().tobytes()
    return t.numpy().tobytes()


def _tensor_from_bytes(raw: bytes, tag: str, shape: tuple[int, ...]) -> torch.Tensor:
    if tag == "bf16":
        arr = np.frombuffer(raw, dtype=np.int16).copy()
        return torch.from_numpy(arr).view(torch.bfloat16).reshape(shape)
    np_dtype = {"f32": np.float32, "f64": np.float64, "u8": np.uint8,
                "u16": np.uint16, "i64": np.int64}[tag]
    arr = np.frombuffer(raw, dtype=np_dtype).copy()
    return torch.from_numpy(arr).reshape(shape)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.parent / f".tmp-{path.name}"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save_checkpoint(ckpt: Checkpoint, out_dir: Path, include_optimizer: bool = True) -> Path:
    """Serialize atomically into out_dir; returns the checkpoint path.

    `include_optimizer=False` exists to reproduce degraded releases in
    tests; normal training always saves the moments.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / checkpoint_file_name(ckpt.boundary_index)

    sections: list[tuple[str, torch.Tensor]] = []
    half = ckpt.precision_tag == "half"
    for name, t in ckpt.params.items():
        stored = t.to(torch.bfloat16) if half and t.is_floating_point() else t
        sections.append((f"param/{name}", stored))
    if include_optimizer:
        if ckpt.opt_m is None or ckpt.opt_v is None:
            raise CheckpointError("optimizer state required but absent on the Checkpoint")
        for name, t in ckpt.opt_m.items():
            sections.append((f"adam_m/{name}", t))
        for name, t in ckpt.opt_v.items():
            sections.append((f"adam_v/{name}", t))
    rng = torch.from_numpy(np.frombuffer(ckpt.rng_state, dtype=np.uint8).copy())
    sections.append(("rng_state", rng))

    meta = json.dumps(ckpt.meta_dict(), sort_keys=True).encode("utf-8")
    table = bytearray()
    payload = bytearray()
    for name, t in sections:
        raw = _tensor_bytes(t)
        name_b = name.encode("utf-8")
        tag = _TORCH_TAGS[t.dtype]
        table += struct.pack("<H", len(name_b)) + name_b
        table += struct.pack("<BB", _DTYPE_CODES[tag], t.dim())
        table += struct.pack(f"<{t.dim()}Q", *t.shape) if t.dim() else b""
        table += struct.pack("<QQ", len(payload), len(raw))
        payload += raw

    blob = (
        CKPT_MAGIC
        + struct.pack("<I", CKPT_VERSION)
        + struct.pack("<I", len(meta))
        + meta
        + struct.pack("<I", len(sections))
        + bytes(table)
        + bytes(payload)
    )
    _atomic_write(path, blob)
    digest = hashlib.sha256(blob).hexdigest()
    _atomic_write(Path(str(path) + ".sha256"), f"{digest}  {path.name}\n".encode("ascii"))
    return path


def load_checkpoint(
    path: Path,
    expected_config: ModelConfig | None = None,
    verify_hash: bool = True,
) -> Checkpoint:
    """Parse and validate a checkpoint file.

    Verifies the sidecar hash, schema version, and (when a config is
    given) that parameter shapes agree with it. A half-precision
    checkpoint loads with a loud warning and its params cast to float32.
    """
    path = Path(path)
    blob = path.read_bytes()
    if verify_hash:
        sidecar = Path(str(path) + ".sha256")
        if not sidecar.exists():
            raise IntegrityError(f"{path}: missing .sha256 sidecar")
        expected = sidecar.read_text(encoding="ascii").split()[0]
        actual = hashlib.sha256(blob).hexdigest()
        if actual != expected:
            raise IntegrityError(f"{path}: content hash mismatch")

    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    meta = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    if meta.get("schema_version") != CKPT_SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema_version {meta.get('schema_version')}")
    (n_sections,) = struct.unpack_from("<I", blob, pos)
    pos += 4

    entries = []
    for _ in range(n_sections):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos) if ndim else ()
        pos += 8 * ndim
        offset, nbytes = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        entries.append((name, _CODE_DTYPES[code], shape, offset, nbytes))
    payload_start = pos

    tensors: dict[str, torch.Tensor] = {}
    for name, tag, shape, offset, nbytes in entries:
        raw = blob[payload_start + offset : payload_start + offset + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: truncated section {name!r}")
        tensors[name] = _tensor_from_bytes(raw, tag, shape)

    params = {n[len("param/") :]: t for n, t in tensors.items() if n.startswith("param/")}
    opt_m = {n[len("adam_m/") :]: t for n, t in tensors.items() if n.startswith("adam_m/")}
    opt_v = {n[len("adam_v/") :]: t for n, t in tensors.items() if n.startswith("adam_v/")}
    if "rng_state" not in tensors:
        raise CheckpointError(f"{path}: missing rng_state section")
    rng_state = tensors["rng_state"].numpy().tobytes()

    warnings: list[str] = []
    if meta["precision_tag"] == "half":
        msg = (
            f"{path.name}: checkpoint weights were saved at half precision; "
            "loading into a full-precision run loses accuracy"
        )
        logger.warning(msg)
        warnings.append(msg)
        params = {n: t.to(torch.float32) if t.dtype == torch.bfloat16 else t for n, t in params.items()}

    config = ModelConfig.from_dict(meta["model_config"])
    if expected_config is not None:
        if config.to_dict() != expected_config.to_dict():
            raise CheckpointError(f"{path}: model config mismatch with the provided config")
        ref = DecoderModel(expected_config).state_dict()
        for name, t in ref.items():
            if name not in params:
                raise CheckpointError(f"{path}: missing parameter {name!r}")
            if tuple(params[name].shape) != tuple(t.shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for {name!r}: "
                    f"{tuple(params[name].shape)} vs {tuple(t.shape)}"
                )

    if not opt_m or not opt_v:
        raise OptimizerStateMissingError(
            f"{path}: optimizer state absent; exact resume impossible"
        )

    return Checkpoint(
        boundary_index=meta["boundary_index"],
        step=meta["step"],
        params=params,
        opt_m=opt_m,
        opt_v=opt_v,
        rng_state=rng_state,
        precision_tag=meta["precision_tag"],
        manifest_checksum=meta["manifest_checksum"],
        model_config=config,
        trained_chunks=list(meta.get("trained_chunks", [])),
        skipped_chunks=list(meta.get("skipped_chunks", [])),
        load_warnings=warnings,
    )


def list_checkpoints(ckpt_dir: Path) -> list[Path]:
    """Completed checkpoints in boundary order; temp files are ignored."""
    ckpt_dir = Path(ckpt_dir)
    return sorted(p for p in ckpt_dir.glob("ckpt_*.lckp") if not p.name.startswith(".tmp-"))
