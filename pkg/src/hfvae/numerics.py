"""Seeded randomness, diagonal-Gaussian utilities and gradient verification.

Everything downstream (flow, encoder, decoder, corpus generation) builds on
the primitives here. All gradient checking runs in double precision; the
finite-difference estimate is too noisy in float32 to act as a gate.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

LOG_VAR_MIN = -30.0
LOG_VAR_MAX = 30.0


class RngStream:
    """Counter-based seeded random stream with a name.

    Built on numpy's Philox generator: the key is derived from
    (seed, label), so streams with the same name are reproducible
    across platforms and independent of how other streams are used.
    """

    def __init__(self, seed: int, label: str, counter: int = 0):
        self.seed = int(seed)
        self.label = label
        self.counter = 0
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        label_key = int.from_bytes(digest[:8], "little")
        self._key = [self.seed & 0xFFFFFFFFFFFFFFFF, label_key]
        self._gen = np.random.Generator(np.random.Philox(key=self._key))
        if counter:
            self.skip(counter)

    def skip(self, n: int) -> None:
        """Advance the stream by n draws without producing output."""
        self._gen.standard_normal(n)
        self.counter += n

    def child(self, sublabel: str) -> "RngStream":
        """Derive an independent stream, e.g. one per utterance or worker."""
        return RngStream(self.seed, f"{self.label}/{sublabel}")

    def normal(self, shape) -> np.ndarray:
        out = self._gen.standard_normal(size=shape)
        self.counter += int(np.prod(shape)) if shape else 1
        return out

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        out = self._gen.random(size=shape) * (high - low) + low
        self.counter += int(np.prod(shape)) if shape else 1
        return out

    def integers(self, low: int, high: int, shape=None):
        """Uniform integers in [low, high] inclusive."""
        out = self._gen.integers(low, high, size=shape, endpoint=True)
        self.counter += int(np.prod(shape)) if shape else 1
        return out

    def permutation(self, n: int) -> np.ndarray:
        out = self._gen.permutation(n)
        self.counter += n
        return out


@dataclass
class DiagGaussian:
    """Diagonal Gaussian posterior: mean and per-dimension log-variance.

    log_var is clamped to [-30, 30] on construction so exp() can never
    overflow; realistic posteriors are far inside that range.
    """

    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError(
                f"mu/log_var shape mismatch: {tuple(self.mu.shape)} vs "
                f"{tuple(self.log_var.shape)}"
            )
        self.log_var = torch.clamp(self.log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    def __len__(self) -> int:
        return self.mu.shape[-1]


def gaussian_sample(d: DiagGaussian, eps: torch.Tensor) -> torch.Tensor:
    """Reparameterized sample z0 = mu + exp(log_var / 2) * eps.

    eps must be supplied by the caller (standard normal from an RngStream),
    which keeps the op deterministic and differentiable in (mu, log_var).
    """
    if eps.shape[-1] != d.mu.shape[-1]:
        raise ValueError(
            f"eps dim {eps.shape[-1]} != posterior dim {d.mu.shape[-1]}"
        )
    return d.mu + torch.exp(0.5 * d.log_var) * eps


def diag_gaussian_kl(d: DiagGaussian) -> torch.Tensor:
    """Closed-form KL( N(mu, diag sigma^2) || N(0, I) ).

    0.5 * sum_i (sigma_i^2 + mu_i^2 - 1 - log sigma_i^2); nonnegative,
    zero iff the posterior equals the standard-normal prior.
    """
    var = torch.exp(d.log_var)
    return 0.5 * torch.sum(var + d.mu**2 - 1.0 - d.log_var, dim=-1)


def grad_check(f, x: torch.Tensor, eps: float = 1e-5, analytic=None) -> float:
    """Max relative error between analytic gradient and central differences.

    f maps a double-precision tensor to a scalar. If `analytic` is None the
    analytic gradient is taken from autograd; pass it explicitly to verify
    a hand-written backward. Relative error per coordinate is
    |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    if x.dtype != torch.float64:
        raise ValueError("grad_check requires a float64 point")
    x = x.detach().clone()

    if analytic is None:
        xg = x.clone().requires_grad_(True)
        y = f(xg)
        if not torch.isfinite(y):
            raise ValueError("non-finite function value at x")
        (analytic,) = torch.autograd.grad(y, xg)
    analytic = torch.as_tensor(analytic, dtype=torch.float64).reshape(-1)

    flat = x.reshape(-1)
    fd = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f(x))
            flat[i] = orig - eps
            fm = float(f(x))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("non-finite function value during probing")
            fd[i] = (fp - fm) / (2.0 * eps)

    denom = torch.maximum(
        torch.maximum(analytic.abs(), fd.abs()),
        torch.tensor(1e-8, dtype=torch.float64),
    )
    return float(((analytic - fd).abs() / denom).max())


def assert_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return t
