"""Householder reflections and their composition into a normalizing flow.

A reflection z' = z - 2 v (v.z) / ||v||^2 is orthogonal and involutive, so a
stack of them is norm-preserving and has |det J| = 1. The three supported
ways of sourcing the reflection vectors:

  arch1 - the encoder predicts the first vector; the rest follow by a chain
          of learned affine maps v_i = A_i v_{i-1} + b_i.
  arch2 - the encoder predicts all K vectors as separate head outputs.
  arch3 - K globally shared trainable vectors, independent of the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

EPS_V = 1e-8

ARCHS = ("vanilla", "arch1", "arch2", "arch3")


class DegenerateReflectorError(ValueError):
    """Raised when a reflection vector has (near-)zero norm."""


def _check_reflector(v: torch.Tensor) -> None:
    if float(torch.linalg.vector_norm(v.detach())) < EPS_V:
        raise DegenerateReflectorError(
            f"degenerate reflector: ||v|| < {EPS_V}"
        )


def apply_householder(v: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Reflect z across the hyperplane orthogonal to v.

    z may be a single vector (D,) or a batch (N, D). The 2/||v||^2 factor is
    recomputed per application, so v need not be normalized.
    """
    if v.shape[-1] != z.shape[-1]:
        raise ValueError(f"dim mismatch: v has {v.shape[-1]}, z has {z.shape[-1]}")
    _check_reflector(v)
    coeff = 2.0 / torch.dot(v, v)
    proj = z @ v  # scalar or (N,)
    if z.dim() == 1:
        return z - coeff * proj * v
    return z - coeff * proj.unsqueeze(-1) * v.unsqueeze(0)


def householder_matrix(v: torch.Tensor) -> torch.Tensor:
    """Explicit reflection matrix I - 2 v v^T / ||v||^2 (test/oracle use)."""
    _check_reflector(v)
    d = v.shape[0]
    eye = torch.eye(d, dtype=v.dtype)
    return eye - (2.0 / torch.dot(v, v)) * torch.outer(v, v)


@dataclass
class FlowStack:
    """Ordered reflection vectors plus the architecture that sourced them."""

    arch: str
    vectors: list = field(default_factory=list)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        dims = {int(v.shape[-1]) for v in self.vectors}
        if len(dims) > 1:
            raise ValueError(f"mixed vector dimensions in stack: {sorted(dims)}")
        for v in self.vectors:
            _check_reflector(v)

    @property
    def K(self) -> int:
        return len(self.vectors)


def compose_flow(stack: FlowStack, z0: torch.Tensor, want_cache: bool = False):
    """Apply the reflections in order: z_K = H_K ... H_1 z0.

    With want_cache=True also returns the list [z0, z1, ..., z_K] needed by
    flow_backward. An empty stack is the identity.
    """
    z = z0
    cache = [z0]
    for v in stack.vectors:
        z = apply_householder(v, z)
        if want_cache:
            cache.append(z)
    if want_cache:
        return z, cache
    return z


def flow_logdet(stack: FlowStack) -> float:
    """log |det J| of the flow. Reflections are orthogonal, so exactly 0.

    Kept as an explicit operation so the ELBO bookkeeping states the
    assumption it relies on.
    """
    _ = stack.K
    return 0.0


def flow_backward(stack: FlowStack, cache, upstream_grad: torch.Tensor):
    """Hand-written backward pass through the flow.

    cache is the intermediate list from compose_flow(..., want_cache=True).
    Returns (grad_z0, [grad_v1, ..., grad_vK]); batch inputs (N, D) sum the
    vector gradients over the batch, which is what shared (arch3) vectors
    need.
    """
    if cache is None:
        raise ValueError("missing forward cache; run compose_flow(want_cache=True)")
    if len(cache) != stack.K + 1:
        raise ValueError(f"cache length {len(cache)} != K+1 = {stack.K + 1}")

    g = upstream_grad
    grad_vectors: list = [None] * stack.K
    for k in range(stack.K - 1, -1, -1):
        v = stack.vectors[k]
        z = cache[k]  # input to reflection k
        n = torch.dot(v, v)
        a = z @ v  # scalar or (N,)
        gv = g @ v
        if g.dim() == 1:
            grad_v = (-2.0 / n) * (gv * z + a * g) + (4.0 * a * gv / n**2) * v
            g = g - (2.0 / n) * gv * v
        else:
            grad_v = (
                (-2.0 / n) * (gv.unsqueeze(-1) * z + a.unsqueeze(-1) * g)
                + (4.0 / n**2) * (a * gv).unsqueeze(-1) * v.unsqueeze(0)
            ).sum(dim=0)
            g = g - (2.0 / n) * gv.unsqueeze(-1) * v.unsqueeze(0)
        grad_vectors[k] = grad_v
    return g, grad_vectors


def source_vectors(arch, encoder_head_outputs=None, shared_params=None,
                   affine_params=None) -> list:
    """Produce the K reflection vectors for one utterance.

    arch1: encoder_head_outputs is the single predicted vector (D,) and
           affine_params a list of K-1 (A, b) pairs applied in sequence.
    arch2: encoder_head_outputs is a (K, D) array, one row per vector.
    arch3: shared_params is the (K, D) global parameter; encoder outputs
           are ignored, so the result is independent of the utterance.
    """
    if arch == "vanilla":
        return []
    if arch == "arch1":
        if encoder_head_outputs is None or encoder_head_outputs.dim() != 1:
            raise ValueError("arch1 expects a single head output vector")
        vectors = [encoder_head_outputs]
        for mat, bias in (affine_params or []):
            vectors.append(vectors[-1] @ mat.T + bias)
        return vectors
    if arch == "arch2":
        if encoder_head_outputs is None or encoder_head_outputs.dim() != 2:
            raise ValueError("arch2 expects a (K, D) head output")
        return list(encoder_head_outputs.unbind(0))
    if arch == "arch3":
        if shared_params is None or shared_params.dim() != 2:
            raise ValueError("arch3 expects (K, D) shared parameters")
        return list(shared_params.unbind(0))
    raise ValueError(f"unknown architecture {arch!r}")
