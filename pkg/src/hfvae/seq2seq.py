"""Phoneme encoder, additive attention and the autoregressive mel decoder.

Desk-scale stand-in for a tacotron-style synthesizer: single-layer GRUs,
single-head additive attention (score = w . tanh(Wq q + Wk k)), no stop
token (generation length is always given by the caller).
"""

from __future__ import annotations

import torch
from torch import nn


class PhonemeEncoder(nn.Module):
    """Embedding + GRU producing one hidden vector per phoneme."""

    def __init__(self, vocab_size: int, emb_dim: int, hidden: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, emb_dim)
        self.rnn = nn.GRU(emb_dim, hidden, batch_first=True)

    def forward(self, ids) -> torch.Tensor:
        if not torch.is_tensor(ids):
            ids = torch.tensor(ids, dtype=torch.long)
        if ids.numel() == 0:
            raise ValueError("empty phoneme sequence")
        emb = self.embedding(ids).unsqueeze(0)  # (1, L, E)
        out, _ = self.rnn(emb)
        return out.squeeze(0)  # (L, H)


def broadcast_concat(encodings: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Append the latent sample to every encoder timestep: (L, H+D)."""
    L = encodings.shape[0]
    return torch.cat([encodings, z.unsqueeze(0).expand(L, -1)], dim=1)


class AdditiveAttention(nn.Module):
    def __init__(self, query_dim: int, key_dim: int, attn_dim: int):
        super().__init__()
        self.query_proj = nn.Linear(query_dim, attn_dim)
        self.key_proj = nn.Linear(key_dim, attn_dim, bias=False)
        self.score = nn.Linear(attn_dim, 1, bias=False)

    def forward(self, query: torch.Tensor, keys: torch.Tensor,
                mask: torch.Tensor = None):
        """Returns (context, weights); values are the keys themselves.

        Unbatched: query (Q,), keys (L, K). Batched: query (N, Q),
        keys (N, L, K) with an optional boolean mask (N, L) marking
        valid key positions.
        """
        scores = self.score(
            torch.tanh(self.query_proj(query).unsqueeze(-2)
                       + self.key_proj(keys))
        ).squeeze(-1)  # (L,) or (N, L)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        context = (weights.unsqueeze(-2) @ keys).squeeze(-2)
        return context, weights


class MelDecoder(nn.Module):
    """Autoregressive frame decoder attending over the conditioned memory.

    Each step attends with the current hidden state, feeds the previous
    frame plus context through a GRU cell, and projects (hidden, context)
    to the next frame. The first previous frame is all zeros.
    """

    def __init__(self, n_bands: int, memory_dim: int, hidden: int,
                 attn_dim: int):
        super().__init__()
        self.n_bands = n_bands
        self.attention = AdditiveAttention(hidden, memory_dim, attn_dim)
        self.cell = nn.GRUCell(n_bands + memory_dim, hidden)
        self.out = nn.Linear(hidden + memory_dim, n_bands)
        self.hidden = hidden

    def _step(self, prev_frame, h, memory):
        context, weights = self.attention(h, memory)
        h = self.cell(torch.cat([prev_frame, context]).unsqueeze(0),
                      h.unsqueeze(0)).squeeze(0)
        frame = self.out(torch.cat([h, context]))
        return frame, h, weights

    def decode_teacher_forced(self, memory: torch.Tensor,
                              target: torch.Tensor):
        """Predict target frame-by-frame on ground-truth history.

        Returns (predicted (T, B), mean squared error over frame x band).
        """
        t_frames, bands = target.shape
        if bands != self.n_bands:
            raise ValueError(f"target has {bands} bands, decoder expects "
                             f"{self.n_bands}")
        dtype = target.dtype
        h = torch.zeros(self.hidden, dtype=dtype)
        prev = torch.zeros(self.n_bands, dtype=dtype)
        frames = []
        for t in range(t_frames):
            frame, h, _ = self._step(prev, h, memory)
            frames.append(frame)
            prev = target[t]
        predicted = torch.stack(frames)
        loss = torch.mean((predicted - target) ** 2)
        return predicted, loss

    def decode_teacher_forced_batch(self, memories, targets):
        """Batched teacher forcing over variable-length utterances.

        memories: list of (L_i, M) conditioned encoder outputs.
        targets: list of (T_i, B) ground-truth frame sequences.
        Returns a (N,) tensor of per-utterance mean squared errors,
        each averaged over its own frames x bands.
        """
        n = len(memories)
        if n != len(targets):
            raise ValueError("memories and targets differ in length")
        for tgt in targets:
            if tgt.shape[1] != self.n_bands:
                raise ValueError(f"target has {tgt.shape[1]} bands, decoder "
                                 f"expects {self.n_bands}")
        dtype = targets[0].dtype
        lens = [m.shape[0] for m in memories]
        t_lens = [t.shape[0] for t in targets]
        l_max, t_max = max(lens), max(t_lens)

        memory = torch.zeros(n, l_max, memories[0].shape[1], dtype=dtype)
        key_mask = torch.zeros(n, l_max, dtype=torch.bool)
        target = torch.zeros(n, t_max, self.n_bands, dtype=dtype)
        frame_mask = torch.zeros(n, t_max, dtype=torch.bool)
        for i, (mem, tgt) in enumerate(zip(memories, targets)):
            memory[i, :lens[i]] = mem
            key_mask[i, :lens[i]] = True
            target[i, :t_lens[i]] = tgt
            frame_mask[i, :t_lens[i]] = True

        h = torch.zeros(n, self.hidden, dtype=dtype)
        prev = torch.zeros(n, self.n_bands, dtype=dtype)
        sq_err = torch.zeros(n, dtype=dtype)
        for t in range(t_max):
            context, _ = self.attention(h, memory, key_mask)
            h = self.cell(torch.cat([prev, context], dim=1), h)
            frame = self.out(torch.cat([h, context], dim=1))
            err = ((frame - target[:, t]) ** 2).sum(dim=1)
            sq_err = sq_err + err * frame_mask[:, t].to(dtype)
            prev = target[:, t]
        denom = torch.tensor([t * self.n_bands for t in t_lens], dtype=dtype)
        return sq_err / denom

    def decode_free_running(self, memory: torch.Tensor,
                            n_frames: int) -> torch.Tensor:
        """Generate n_frames autoregressively on the model's own outputs."""
        if n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        dtype = memory.dtype
        h = torch.zeros(self.hidden, dtype=dtype)
        prev = torch.zeros(self.n_bands, dtype=dtype)
        frames = []
        for _ in range(n_frames):
            frame, h, _ = self._step(prev, h, memory)
            frames.append(frame)
            prev = frame
        return torch.stack(frames)
