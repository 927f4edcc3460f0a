"""Small decoder-only transformer, LLaMA-style, with config toggles.

Pre-norm blocks: norm -> causal multi-head attention with rotary
embeddings on q/k -> residual; norm -> gated SiLU MLP -> residual;
final norm; untied output head by default. `norm_kind` switches RMSNorm
vs LayerNorm and `rope_fraction` restricts rotation to a leading slice
of each head, which covers both architectural variants this harness
trains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import VOCAB_SIZE


class ModelError(Exception):
    pass


@dataclass
class ModelConfig:
    hidden_size: int
    n_layers: int
    n_heads: int
    intermediate_size: int
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 2048
    norm_kind: str = "rmsnorm"  # "rmsnorm" | "layernorm"
    norm_eps: float = 1e-6
    rope_fraction: float = 1.0
    tie_embeddings: bool = False
    mup: bool = False  # reserved; maximal-update parameterization not implemented

    def __post_init__(self):
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    @property
    def rope_dims(self) -> int:
        return int(round(self.rope_fraction * self.head_dim))

    def validate(self) -> None:
        if self.hidden_size % self.n_heads != 0:
            raise ModelError("hidden_size must be divisible by n_heads")
        if not (0.0 < self.rope_fraction <= 1.0):
            raise ModelError("rope_fraction must be in (0, 1]")
        rot = self.rope_fraction * self.head_dim
        if abs(rot - round(rot)) > 1e-9 or int(round(rot)) % 2 != 0 or round(rot) == 0:
            raise ModelError("rope_fraction * head_dim must be a positive even integer")
        if self.norm_eps <= 0:
            raise ModelError("norm_eps must be > 0")
        if self.norm_kind not in ("rmsnorm", "layernorm"):
            raise ModelError(f"unknown norm_kind {self.norm_kind!r}")
        if self.mup:
            raise ModelError("mup parameterization is reserved but not implemented")

    def to_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "intermediate_size": self.intermediate_size,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "norm_kind": self.norm_kind,
            "norm_eps": self.norm_eps,
            "rope_fraction": self.rope_fraction,
            "tie_embeddings": self.tie_embeddings,
            "mup": self.mup,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def reference_7b_config() -> ModelConfig:
    """The 7B architecture this harness scales down from (32k-vocab original)."""
    return ModelConfig(
        hidden_size=4096,
        n_layers=32,
        n_heads=32,
        intermediate_size=11008,
        vocab_size=32000,
        max_seq_len=2048,
        norm_kind="rmsnorm",
        norm_eps=1e-6,
        rope_fraction=1.0,
    )


def count_parameters(config: ModelConfig) -> int:
    """Closed-form shape sum, independent of tensor allocation."""
    h, v = config.hidden_size, config.vocab_size
    attn = 4 * h * h
    mlp = 3 * h * config.intermediate_size
    norm = h if config.norm_kind == "rmsnorm" else 2 * h
    per_layer = attn + mlp + 2 * norm
    total = v * h + config.n_layers * per_layer + norm
    if not config.tie_embeddings:
        total += v * h
    return total


# ---------------------------------------------------------------------------
# rotary embeddings
# ---------------------------------------------------------------------------


def rope_inverse_frequencies(head_dim: int, fraction: float) -> torch.Tensor:
    """inv_freq[j] = 10000^(-2j / (fraction*head_dim)), kept in float64.

    The inverse-frequency table is always computed and stored at the
    widest precision in use, independent of activation precision.
    """
    rot = fraction * head_dim
    if abs(rot - round(rot)) > 1e-9 or int(round(rot)) % 2 != 0:
        raise ModelError("fraction * head_dim must be even")
    rot = int(round(rot))
    j = torch.arange(rot // 2, dtype=torch.float64)
    return torch.pow(torch.tensor(10000.0, dtype=torch.float64), -2.0 * j / rot)


def rope_tables(positions: torch.Tensor, inv_freq: torch.Tensor, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables for the given positions; angles formed in float64
    and cast to the activation dtype only after cos/sin."""
    angles = torch.outer(positions.to(torch.float64), inv_freq)  # [seq, rot/2]
    return torch.cos(angles).to(dtype), torch.sin(angles).to(dtype)


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    rot = 2 * cos.shape[-1]
    x1 = x[..., : rot // 2]
    x2 = x[..., rot // 2 : rot]
    rotated = torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    if rot == x.shape[-1]:
        return rotated
    return torch.cat([rotated, x[..., rot:]], dim=-1)


def apply_rope(x: torch.Tensor, positions: torch.Tensor, inv_freq: torch.Tensor) -> torch.Tensor:
    """Rotate the first 2*len(inv_freq) dims of each head pairwise by position.

    x: [batch, heads, seq, head_dim]; positions: [seq]. Pairs are
    (x[..., j], x[..., j + rot/2]) within the rotated slice; the
    remaining dims pass through unchanged.
    """
    cos, sin = rope_tables(positions, inv_freq, x.dtype)
    return _rotate(x, cos, sin)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        rms = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x * rms * self.weight


def _make_norm(config: ModelConfig) -> nn.Module:
    if config.norm_kind == "rmsnorm":
        return RMSNorm(config.hidden_size, config.norm_eps)
    return nn.LayerNorm(config.hidden_size, eps=config.norm_eps)


class Attention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        h = config.hidden_size
        self.q_proj = nn.Linear(h, h, bias=False)
        self.k_proj = nn.Linear(h, h, bias=False)
        self.v_proj = nn.Linear(h, h, bias=False)
        self.o_proj = nn.Linear(h, h, bias=False)

    def forward(self, x, rope: tuple[torch.Tensor, torch.Tensor], trace: dict | None = None, layer: int = 0):
        b, t, h = x.shape
        q = self.q_proj(x).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        qk = _rotate(torch.stack((q, k)), *rope)
        q, k = qk[0], qk[1]
        if trace is None:
            out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        else:
            # straight-line path that exposes the attention probabilities
            scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
            mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
            scores = scores.masked_fill(mask, float("-inf"))
            attn = F.softmax(scores, dim=-1)
            trace[f"attn_{layer}"] = attn.detach()
            out = attn @ v
        out = out.transpose(1, 2).reshape(b, t, h)
        return self.o_proj(out)


class GatedMLP(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        h, m = config.hidden_size, config.intermediate_size
        self.gate_proj = nn.Linear(h, m, bias=False)
        self.up_proj = nn.Linear(h, m, bias=False)
        self.down_proj = nn.Linear(m, h, bias=False)

    def forward(self, x):
        return self.down_proj(F.silu(self.gate_proj(x)) * self.up_proj(x))


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = _make_norm(config)
        self.attn = Attention(config)
        self.mlp_norm = _make_norm(config)
        self.mlp = GatedMLP(config)

    def forward(self, x, rope, trace=None, layer: int = 0):
        x = x + self.attn(self.attn_norm(x), rope, trace=trace, layer=layer)
        x = x + self.mlp(self.mlp_norm(x))
        return x


class DecoderModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(config.vocab_size, config.hidden_size)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.final_norm = _make_norm(config)
        # plain attribute, not a buffer: module casts must never narrow it
        self.inv_freq = rope_inverse_frequencies(config.head_dim, config.rope_fraction)
        if config.tie_embeddings:
            self.head = None
        else:
            self.head = nn.Linear(config.hidden_size, config.vocab_size, bias=False)

    def hidden_states(
        self, tokens: torch.Tensor, trace: dict | None = None, last_only: bool = False
    ) -> torch.Tensor:
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.shape[1] > self.config.max_seq_len:
            raise ModelError(
                f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ModelError("token id out of range")
        x = self.embed(tokens)
        positions = torch.arange(tokens.shape[1], device=tokens.device)
        rope = rope_tables(positions, self.inv_freq, x.dtype)  # shared by all layers
        for i, block in enumerate(self.blocks):
            x = block(x, rope, trace=trace, layer=i)
        if last_only:
            x = x[:, -1:]
        return self.final_norm(x)

    def logits_from_hidden(self, x: torch.Tensor) -> torch.Tensor:
        if self.head is not None:
            return self.head(x)
        return x @ self.embed.weight.t()

    def forward(self, tokens: torch.Tensor, trace: dict | None = None) -> torch.Tensor:
        return self.logits_from_hidden(self.hidden_states(tokens, trace=trace))


def init_parameters(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> DecoderModel:
    """Deterministic init: normal(0, 0.02) weights, ones for norm gains,
    zeros for biases and for the untied output head.

    The zero head makes the untrained model exactly uniform over the
    vocabulary, which pins its perplexity and memorization chance level
    to closed-form values.
    """
    model = DecoderModel(config)
    gen = torch.Generator().manual_seed(seed & 0x7FFF_FFFF_FFFF_FFFF)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
            if p.dim() >= 2:
                p.normal_(0.0, 0.02, generator=gen)
            elif "weight" in name:  # norm gains
                p.fill_(1.0)
            else:
                p.zero_()
        if model.head is not None:
            model.head.weight.zero_()
    return model.to(dtype)


# ---------------------------------------------------------------------------
# loss and generation
# ---------------------------------------------------------------------------


def cross_entropy_loss(
    logits: torch.Tensor, targets: torch.Tensor, pad_mask: torch.Tensor
) -> tuple[torch.Tensor, int]:
    """Mean NLL over positions where pad_mask is True; returns (loss, count)."""
    n = int(pad_mask.sum())
    if n == 0:
        raise ModelError("all positions masked; no tokens to score")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    loss = (nll * pad_mask.to(nll.dtype)).sum() / n
    return loss, n


@torch.no_grad()
def generate_greedy(model: DecoderModel, prompt: torch.Tensor, length: int) -> torch.Tensor:
    """Append `length` argmax tokens; ties break to the lowest token id.

    prompt: [batch, k] or [k]. Returns the generated continuation only,
    [batch, length].
    """
    squeeze = prompt.dim() == 1
    if squeeze:
        prompt = prompt.unsqueeze(0)
    if prompt.shape[1] < 1:
        raise ModelError("prompt must contain at least one token")
    if prompt.shape[1] + length > model.config.max_seq_len:
        raise ModelError("prompt + continuation exceeds max_seq_len")
    ctx = prompt.to(torch.long)
    out = []
    vocab_ids = torch.arange(model.config.vocab_size)
    for _ in range(length):
        last = model.hidden_states(ctx, last_only=True)[:, -1]
        logits = model.logits_from_hidden(last)
        top = logits.max(dim=-1, keepdim=True).values
        # lowest id among the maximal logits, independent of argmax internals
        candidates = torch.where(logits == top, vocab_ids, model.config.vocab_size)
        nxt = candidates.min(dim=-1).values
        out.append(nxt)
        ctx = torch.cat([ctx, nxt.unsqueeze(1)], dim=1)
    result = torch.stack(out, dim=1) if out else torch.zeros(ctx.shape[0], 0, dtype=torch.long)
    return result.squeeze(0) if squeeze else result
