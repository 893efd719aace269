"""Deterministic training loop, Adam, checkpoint format and sweep harness."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, StyleSynthesizer
from .numerics import RngStream
from .flow import ARCHS
from .synthdata import Corpus, load_corpus

CHECKPOINT_MAGIC = b"HFVC"
CHECKPOINT_VERSION = 1

SWEEP_HEADER = "arch\tK\tfinal_kl\tfinal_recon\tstatus"
METRIC_HEADER = "step\tkl\trecon\tbeta\twall_ms"


class TrainingAborted(RuntimeError):
    """Raised when the loss goes non-finite; carries a diagnostic record."""

    def __init__(self, step: int, diagnostic: dict):
        super().__init__(f"non-finite loss at step {step}: {diagnostic}")
        self.step = step
        self.diagnostic = diagnostic


@dataclass
class TrainConfig:
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
    lr: float = 1e-3
    beta_final: float = 1.0
    anneal_frac: float = 0.2
    steps: int = 3000
    batch_size: int = 8
    grad_clip: float = 5.0
    seed: int = 0
    corpus: str = ""

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.arch != "vanilla" and self.K not in (2, 4, 8, 16):
            raise ValueError(f"K={self.K} not in (2, 4, 8, 16)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            arch=self.arch, K=self.K, latent_dim=self.latent_dim,
            vocab_size=self.vocab_size, emb_dim=self.emb_dim,
            enc_hidden=self.enc_hidden, attn_dim=self.attn_dim,
            dec_hidden=self.dec_hidden, ref_hidden=self.ref_hidden,
            n_bands=self.n_bands)


def beta_schedule(step: int, config: TrainConfig) -> float:
    """Linear 0 -> beta_final over the first anneal_frac of training."""
    anneal_steps = max(1, int(config.anneal_frac * config.steps))
    return config.beta_final * min(1.0, step / anneal_steps)


@dataclass
class MetricRecord:
    step: int
    kl: float
    recon: float
    beta: float
    wall_ms: float


@dataclass
class MetricLog:
    records: list = field(default_factory=list)

    def append(self, rec: MetricRecord) -> None:
        if not (np.isfinite(rec.kl) and np.isfinite(rec.recon)):
            raise ValueError("non-finite metric record")
        self.records.append(rec)

    def final_epoch_means(self):
        """(kl, recon) averaged over the last 10% of logged steps."""
        if not self.records:
            return float("nan"), float("nan")
        tail = self.records[-max(1, len(self.records) // 10):]
        return (float(np.mean([r.kl for r in tail])),
                float(np.mean([r.recon for r in tail])))

    def write_tsv(self, path) -> None:
        lines = [METRIC_HEADER]
        for r in self.records:
            lines.append(f"{r.step}\t{r.kl:.10g}\t{r.recon:.10g}"
                         f"\t{r.beta:.10g}\t{r.wall_ms:.3f}")
        Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"grad shape mismatch for {name}: "
                                 f"{tuple(g.shape)} vs {tuple(p.shape)}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            state.m[name].mul_(beta1).add_(g, alpha=1 - beta1)
            state.v[name].mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = state.m[name] / (1 - beta1**t)
            v_hat = state.v[name] / (1 - beta2**t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


# ---------------------------------------------------------------------------
# Checkpoints

@dataclass
class Checkpoint:
    params: dict  # name -> float32 ndarray
    config: TrainConfig
    step: int
    final_kl: float
    final_recon: float


def checkpoint_from_model(model: StyleSynthesizer, config: TrainConfig,
                          step: int, final_kl: float,
                          final_recon: float) -> Checkpoint:
    params = {name: p.detach().cpu().numpy().astype(np.float32)
              for name, p in model.named_parameters()}
    return Checkpoint(params, config, step, final_kl, final_recon)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, u32 version, u64 header length, JSON header,
    then concatenated float32 little-endian parameter data."""
    names = sorted(ckpt.params)
    entries, blobs, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = json.dumps({
        "config": asdict(ckpt.config),
        "step": ckpt.step,
        "final_kl": ckpt.final_kl,
        "final_recon": ckpt.final_recon,
        "params": entries,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count,
                            offset=entry["offset"])
        params[entry["name"]] = arr.reshape(shape).copy()
    return Checkpoint(params=params,
                      config=TrainConfig.from_dict(header["config"]),
                      step=header["step"],
                      final_kl=header["final_kl"],
                      final_recon=header["final_recon"])


def model_from_checkpoint(ckpt: Checkpoint) -> StyleSynthesizer:
    model = StyleSynthesizer(ckpt.config.model_config())
    own = dict(model.named_parameters())
    if set(own) != set(ckpt.params):
        raise ValueError("checkpoint parameters do not match the model")
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(torch.from_numpy(ckpt.params[name]))
    return model


# ---------------------------------------------------------------------------
# Training loop

def train(config: TrainConfig, corpus: Corpus | None = None,
          log_every: int = 1):
    """Run config.steps Adam steps; returns (Checkpoint, MetricLog).

    The reference encoder always sees the target spectrogram
    (autoencoding); at inference a one-shot reference replaces it.
    """
    if corpus is None:
        corpus = load_corpus(config.corpus)
    if corpus.spec.n_bands != config.n_bands:
        raise ValueError(f"corpus has {corpus.spec.n_bands} bands, config "
                         f"expects {config.n_bands}")
    if corpus.spec.vocab_size != config.vocab_size:
        raise ValueError("corpus/config vocab size mismatch")

    torch.set_num_threads(1)  # small ops; avoids sync overhead, fixed layout
    model = StyleSynthesizer(config.model_config())
    model.init_parameters(config.seed)
    mels = [torch.from_numpy(np.asarray(u.mel, dtype=np.float32))
            for u in corpus.train]
    ids = [torch.tensor(u.phonemes, dtype=torch.long) for u in corpus.train]

    params = dict(model.named_parameters())
    state = AdamState()
    rng = RngStream(config.seed, "training-noise")
    log = MetricLog()

    for step in range(config.steps):
        t0 = time.perf_counter()
        beta = beta_schedule(step, config)
        batch = rng.integers(0, len(mels) - 1, (config.batch_size,))
        eps = rng.normal((config.batch_size, config.latent_dim))

        total, recon, kl = model.loss_on_batch(
            [mels[idx] for idx in batch],
            [ids[idx] for idx in batch],
            torch.from_numpy(eps).to(torch.float32), beta)
        kl_val, recon_val = float(kl.detach()), float(recon.detach())
        if not torch.isfinite(total):
            raise TrainingAborted(step, {
                "beta": beta, "kl": kl_val, "recon": recon_val,
                "batch": [int(i) for i in batch]})

        model.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p))
                 for n, p in params.items()}
        adam_step(params, grads, state, config.lr)

        if step % log_every == 0 or step == config.steps - 1:
            log.append(MetricRecord(
                step=step, kl=kl_val, recon=recon_val, beta=beta,
                wall_ms=(time.perf_counter() - t0) * 1e3))

    final_kl, final_recon = log.final_epoch_means()
    ckpt = checkpoint_from_model(model, config, config.steps,
                                 final_kl, final_recon)
    return ckpt, log


# ---------------------------------------------------------------------------
# Sweep harness

@dataclass
class SweepRow:
    arch: str
    K: int
    final_kl: float
    final_recon: float
    status: str = "ok"

    def tsv(self) -> str:
        return (f"{self.arch}\t{self.K}\t{self.final_kl:.10g}"
                f"\t{self.final_recon:.10g}\t{self.status}")


def default_grid(base: TrainConfig) -> list:
    """The 13-config comparison grid: vanilla + 3 archs x K in 2,4,8,16."""
    grid = [TrainConfig(**{**asdict(base), "arch": "vanilla"})]
    for arch in ("arch1", "arch2", "arch3"):
        for k in (2, 4, 8, 16):
            grid.append(TrainConfig(**{**asdict(base), "arch": arch, "K": k}))
    return grid


def sweep(configs: list, corpus: Corpus | None = None,
          checkpoint_dir=None) -> list:
    """Train every config; failures are recorded as rows, not raised."""
    if len(configs) < 2:
        raise ValueError("a sweep needs at least 2 configs")
    rows = []
    for i, cfg in enumerate(configs):
        k = cfg.K if cfg.arch != "vanilla" else 0
        try:
            ckpt, _ = train(cfg, corpus=corpus)
            rows.append(SweepRow(cfg.arch, k, ckpt.final_kl,
                                 ckpt.final_recon))
            if checkpoint_dir is not None:
                out = Path(checkpoint_dir)
                out.mkdir(parents=True, exist_ok=True)
                save_checkpoint(
                    ckpt, out / f"{i:02d}_{cfg.arch}_K{k}_s{cfg.seed}.ckpt")
        except (TrainingAborted, FloatingPointError, ValueError) as exc:
            rows.append(SweepRow(cfg.arch, k, float("nan"), float("nan"),
                                 status=f"failed: {type(exc).__name__}"))
    return rows


def write_sweep_tsv(rows: list, path) -> None:
    lines = [SWEEP_HEADER] + [r.tsv() for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
