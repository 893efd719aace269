"""Full synthesizer: reference encoder + flow + phoneme encoder + decoder.

Parameter initialization draws every tensor from its own named RngStream,
so two configs sharing a seed get bit-identical values for every parameter
they have in common (e.g. vanilla vs arch3 differ only in flow parameters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numerics import RngStream, diag_gaussian_kl
from .flow import ARCHS, FlowStack, source_vectors
from .seq2seq import MelDecoder, PhonemeEncoder, broadcast_concat
from .vae import ReferenceEncoder, elbo_loss, posterior_sample


@dataclass
class ModelConfig:
    arch: str = "arch3"
    K: int = 16
    latent_dim: int = 16
    vocab_size: int = 32
    emb_dim: int = 16
    enc_hidden: int = 32
    attn_dim: int = 32
    dec_hidden: int = 64
    ref_hidden: int = 32
    n_bands: int = 20

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.arch != "vanilla" and self.K < 1:
            raise ValueError("flow architectures need K >= 1")


class StyleSynthesizer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.K if cfg.arch != "vanilla" else 0
        self.ref_encoder = ReferenceEncoder(
            cfg.n_bands, cfg.latent_dim, arch=cfg.arch, n_vectors=k,
            rnn_hidden=cfg.ref_hidden)
        self.phoneme_encoder = PhonemeEncoder(
            cfg.vocab_size, cfg.emb_dim, cfg.enc_hidden)
        self.decoder = MelDecoder(
            cfg.n_bands, cfg.enc_hidden + cfg.latent_dim,
            cfg.dec_hidden, cfg.attn_dim)
        # flow parameters; vanilla allocates none
        if cfg.arch == "arch1":
            self.flow_mats = nn.ParameterList(
                nn.Parameter(torch.empty(cfg.latent_dim, cfg.latent_dim))
                for _ in range(k - 1))
            self.flow_biases = nn.ParameterList(
                nn.Parameter(torch.empty(cfg.latent_dim))
                for _ in range(k - 1))
        elif cfg.arch == "arch3":
            self.shared_vectors = nn.Parameter(
                torch.empty(k, cfg.latent_dim))

    def init_parameters(self, seed: int) -> None:
        """Seeded deterministic init, one named stream per parameter."""
        with torch.no_grad():
            for name, p in self.named_parameters():
                rng = RngStream(seed, f"init/{name}")
                p.copy_(torch.from_numpy(
                    self._init_values(name, tuple(p.shape), rng)
                ).to(p.dtype))

    def _init_values(self, name: str, shape, rng: RngStream) -> np.ndarray:
        d = self.cfg.latent_dim
        if name == "shared_vectors":
            vecs = rng.normal(shape)
            return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
        if name.startswith("flow_mats"):
            # identity + small noise: early training repeats the first vector
            return np.eye(d) + 0.01 * rng.normal(shape)
        if name.startswith("flow_biases"):
            return np.zeros(shape)
        if name.endswith("head_vec.bias"):
            # unit vector per K-slice so an all-zero summary still yields
            # non-degenerate reflectors
            vecs = rng.normal((shape[0] // d, d))
            vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
            return vecs.reshape(shape)
        if len(shape) >= 2:
            receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, shape)
        return np.zeros(shape)

    def flow_stack(self, head_out) -> FlowStack:
        cfg = self.cfg
        if cfg.arch == "vanilla":
            return FlowStack("vanilla", [])
        if cfg.arch == "arch1":
            affines = list(zip(self.flow_mats, self.flow_biases))
            vectors = source_vectors("arch1", head_out, affine_params=affines)
        elif cfg.arch == "arch2":
            vectors = source_vectors("arch2", head_out)
        else:
            vectors = source_vectors("arch3", shared_params=self.shared_vectors)
        return FlowStack(cfg.arch, vectors)

    def loss_on(self, mel: torch.Tensor, phoneme_ids, eps: torch.Tensor,
                beta: float):
        """Per-utterance training loss (reference input = target mel).

        KL is averaged per latent dimension and reconstruction per
        frame x band, so beta is scale-comparable across configs.
        Returns (loss, recon_l2, kl_per_dim).
        """
        posterior, head_out = self.ref_encoder(mel)
        stack = self.flow_stack(head_out)
        latent = posterior_sample(posterior, stack, eps)
        encodings = self.phoneme_encoder(phoneme_ids)
        memory = broadcast_concat(encodings, latent.zK)
        _, recon = self.decoder.decode_teacher_forced(memory, mel)
        kl = diag_gaussian_kl(posterior) / self.cfg.latent_dim
        return elbo_loss(recon, kl, beta), recon, kl

    def loss_on_batch(self, mels, phoneme_ids_list, eps: torch.Tensor,
                      beta: float):
        """Batch version of loss_on: one masked decoder pass for the whole
        batch. Same loss up to float reassociation. Returns
        (loss, recon_l2, kl_per_dim) with recon/kl averaged over the batch.
        """
        n = len(mels)
        if not (n == len(phoneme_ids_list) == eps.shape[0]):
            raise ValueError("batch size mismatch")
        memories, kls = [], []
        for i in range(n):
            posterior, head_out = self.ref_encoder(mels[i])
            stack = self.flow_stack(head_out)
            latent = posterior_sample(posterior, stack, eps[i])
            encodings = self.phoneme_encoder(phoneme_ids_list[i])
            memories.append(broadcast_concat(encodings, latent.zK))
            kls.append(diag_gaussian_kl(posterior) / self.cfg.latent_dim)
        recons = self.decoder.decode_teacher_forced_batch(memories, mels)
        recon = recons.mean()
        kl = torch.stack(kls).mean()
        return elbo_loss(recon, kl, beta), recon, kl

    @torch.no_grad()
    def synthesize(self, reference_mel: torch.Tensor, phoneme_ids,
                   n_frames: int) -> torch.Tensor:
        """One-shot inference: posterior mean (eps = 0) of the reference,
        flowed and concatenated with the prompt encoding, then free-run."""
        posterior, head_out = self.ref_encoder(reference_mel)
        stack = self.flow_stack(head_out)
        zK = posterior_sample(posterior, stack,
                              torch.zeros_like(posterior.mu)).zK
        encodings = self.phoneme_encoder(phoneme_ids)
        memory = broadcast_concat(encodings, zK)
        return self.decoder.decode_free_running(memory, n_frames)
