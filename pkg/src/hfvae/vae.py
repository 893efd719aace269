"""Reference encoder and ELBO assembly.

The reference encoder summarizes a spectrogram into a diagonal-Gaussian
posterior (mean and log-variance heads) plus, depending on the flow
architecture, extra head outputs that source the reflection vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .numerics import DiagGaussian, gaussian_sample
from .flow import FlowStack, compose_flow


@dataclass
class LatentSample:
    z0: torch.Tensor
    zK: torch.Tensor
    posterior: DiagGaussian
    stack: FlowStack


class ReferenceEncoder(nn.Module):
    """Conv stack + GRU + linear heads mapping a (T, B) spectrogram to the
    posterior parameters and (arch1/arch2) the vector head outputs."""

    def __init__(self, n_bands: int, latent_dim: int, arch: str = "vanilla",
                 n_vectors: int = 0, channels=(8, 16), rnn_hidden: int = 32):
        super().__init__()
        self.arch = arch
        self.latent_dim = latent_dim
        self.n_vectors = n_vectors
        c1, c2 = channels
        self.conv1 = nn.Conv2d(1, c1, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, kernel_size=3, stride=2, padding=1)
        bands_out = math.ceil(math.ceil(n_bands / 2) / 2)
        self.rnn = nn.GRU(c2 * bands_out, rnn_hidden, batch_first=True)
        self.head_mu = nn.Linear(rnn_hidden, latent_dim)
        self.head_log_var = nn.Linear(rnn_hidden, latent_dim)
        if arch == "arch1":
            self.head_vec = nn.Linear(rnn_hidden, latent_dim)
        elif arch == "arch2":
            self.head_vec = nn.Linear(rnn_hidden, n_vectors * latent_dim)
        else:
            self.head_vec = None

    def forward(self, mel: torch.Tensor):
        """Returns (DiagGaussian, head_out) where head_out is None for
        vanilla/arch3, (D,) for arch1 and (K, D) for arch2."""
        if mel.dim() != 2 or mel.shape[0] < 1:
            raise ValueError("mel must be a nonempty (T, B) array")
        x = mel.unsqueeze(0).unsqueeze(0)  # (1, 1, T, B)
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))  # (1, C, T', B')
        x = x.permute(0, 2, 1, 3).flatten(2)  # (1, T', C*B')
        _, h_last = self.rnn(x)
        summary = h_last.squeeze(0).squeeze(0)  # (H,)
        posterior = DiagGaussian(mu=self.head_mu(summary),
                                 log_var=self.head_log_var(summary))
        head_out = None
        if self.head_vec is not None:
            head_out = self.head_vec(summary)
            if self.arch == "arch2":
                head_out = head_out.reshape(self.n_vectors, self.latent_dim)
        return posterior, head_out


def posterior_sample(posterior: DiagGaussian, stack: FlowStack,
                     eps: torch.Tensor) -> LatentSample:
    """Reparameterized draw pushed through the flow: z0 -> z_K."""
    z0 = gaussian_sample(posterior, eps)
    zK = compose_flow(stack, z0)
    return LatentSample(z0=z0, zK=zK, posterior=posterior, stack=stack)


def elbo_loss(recon_l2, kl, beta):
    """Training objective: reconstruction L2 plus beta-weighted KL.

    Both loss terms must be nonnegative; beta = 0 gives pure reconstruction.
    """
    def _val(x):
        return float(x.detach()) if torch.is_tensor(x) else float(x)

    if _val(recon_l2) < 0 or _val(kl) < 0 or _val(beta) < 0:
        raise ValueError("elbo_loss requires nonnegative recon, kl and beta")
    return recon_l2 + beta * kl
