"""Memory-augmented, meshed encoder-decoder captioner over region features."""
from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from ..synthdata import BOS, EOS, PAD


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with optional learned memory slots.

    Memory slots are extra key/value rows shared across the batch and are
    always visible, so a query never ends up with every key masked.
    """

    def __init__(self, d_model: int, n_heads: int, n_memory: int = 0):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.h, self.dk = n_heads, d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.n_memory = n_memory
        if n_memory:
            self.mem_k = nn.Parameter(torch.randn(1, n_memory, d_model) / math.sqrt(self.dk))
            self.mem_v = nn.Parameter(torch.randn(1, n_memory, d_model) / math.sqrt(n_memory))

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.h, self.dk).transpose(1, 2)

    def forward(self, query: torch.Tensor, keys: torch.Tensor,
                key_mask: Optional[torch.Tensor] = None,
                attn_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        # key_mask: B x Lk, True = valid. attn_mask: Lq x Lk, True = allowed.
        b, lq, _ = query.shape
        k, v = self.k(keys), self.v(keys)
        if self.n_memory:
            k = torch.cat([k, self.mem_k.expand(b, -1, -1) * math.sqrt(self.dk)], dim=1)
            v = torch.cat([v, self.mem_v.expand(b, -1, -1) * math.sqrt(self.n_memory)], dim=1)
            if key_mask is not None:
                key_mask = torch.cat([key_mask, key_mask.new_ones(b, self.n_memory)], dim=1)
        q, k, v = self._split(self.q(query)), self._split(k), self._split(v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dk)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if attn_mask is not None:
            scores = scores.masked_fill(~attn_mask[None, None], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, lq, -1))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, n_memory: int, d_ff: int):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads, n_memory)
        self.ff = FeedForward(d_model, d_ff)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)

    def forward(self, x, mask):
        x = self.ln1(x + self.attn(x, x, key_mask=mask))
        return self.ln2(x + self.ff(x))


class MeshedDecoderLayer(nn.Module):
    """Causal self-attention, then gated cross-attention to every encoder layer."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, n_enc: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.gates = nn.ModuleList(nn.Linear(2 * d_model, d_model) for _ in range(n_enc))
        self.ff = FeedForward(d_model, d_ff)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.ln3 = nn.LayerNorm(d_model)

    def forward(self, y, enc_outs, enc_mask, causal):
        y = self.ln1(y + self.self_attn(y, y, attn_mask=causal))
        mixed = 0
        for gate, enc in zip(self.gates, enc_outs):
            c = self.cross_attn(y, enc, key_mask=enc_mask)
            mixed = mixed + torch.sigmoid(gate(torch.cat([y, c], dim=-1))) * c
        y = self.ln2(y + mixed / math.sqrt(len(enc_outs)))
        return self.ln3(y + self.ff(y))


def sinusoid_table(n_pos: int, d: int) -> torch.Tensor:
    pos = torch.arange(n_pos, dtype=torch.float64)[:, None]
    i = torch.arange(d // 2, dtype=torch.float64)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    table = torch.zeros(n_pos, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table


class CaptionTransformer(nn.Module):
    """Encoder over an unordered set of regions; regions carry no index encoding,
    so the output is invariant to region order."""

    def __init__(self, vocab_size: int, d_model: int = 64, n_heads: int = 2, n_memory: int = 4,
                 n_encoder: int = 3, n_decoder: int = 3, d_ff: int = 128, max_len: int = 16):
        super().__init__()
        self.max_len = max_len
        self.encoder = nn.ModuleList(EncoderLayer(d_model, n_heads, n_memory, d_ff) for _ in range(n_encoder))
        self.decoder = nn.ModuleList(MeshedDecoderLayer(d_model, n_heads, d_ff, n_encoder)
                                     for _ in range(n_decoder))
        self.embed = nn.Embedding(vocab_size, d_model, padding_idx=PAD)
        self.register_buffer("pos", sinusoid_table(max_len, d_model).float(), persistent=False)
        self.out = nn.Linear(d_model, vocab_size)

    def encode(self, regions: torch.Tensor, region_mask: Optional[torch.Tensor] = None) -> list[torch.Tensor]:
        if regions.shape[1] < 1:
            raise ValueError("need at least one region")
        outs, x = [], regions
        for layer in self.encoder:
            x = layer(x, region_mask)
            outs.append(x)
        return outs

    def decode(self, enc_outs, region_mask, tokens: torch.Tensor) -> torch.Tensor:
        n = tokens.shape[1]
        if n > self.max_len:
            raise ValueError(f"token length {n} exceeds max_caption_len {self.max_len}")
        y = self.embed(tokens) + self.pos[:n].to(enc_outs[0].dtype)
        causal = torch.ones(n, n, dtype=torch.bool, device=tokens.device).tril()
        for layer in self.decoder:
            y = layer(y, enc_outs, region_mask, causal)
        return self.out(y)

    def forward(self, regions, tokens, region_mask=None):
        return self.decode(self.encode(regions, region_mask), region_mask, tokens)

    @torch.no_grad()
    def generate(self, regions: torch.Tensor, max_len: Optional[int] = None,
                 region_mask: Optional[torch.Tensor] = None, return_logits: bool = False):
        """Greedy decoding from BOS; each sequence stops at EOS or ``max_len`` tokens."""
        max_len = max_len or self.max_len
        enc = self.encode(regions, region_mask)
        b = regions.shape[0]
        tokens = torch.full((b, 1), BOS, dtype=torch.long, device=regions.device)
        done = torch.zeros(b, dtype=torch.bool, device=regions.device)
        step_logits = []
        while tokens.shape[1] < max_len and not bool(done.all()):
            logits = self.decode(enc, region_mask, tokens)[:, -1]
            step_logits.append(logits)
            # PAD and BOS are never valid continuations.
            choice = logits.clone()
            choice[:, [PAD, BOS]] = float("-inf")
            nxt = choice.argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
            tokens = torch.cat([tokens, nxt[:, None]], dim=1)
            done |= nxt == EOS
        seqs = []
        for row in tokens.tolist():
            seq = []
            for t in row:
                if t == PAD:
                    break
                seq.append(t)
                if t == EOS:
                    break
            seqs.append(seq)
        if return_logits:
            return seqs, step_logits
        return seqs
