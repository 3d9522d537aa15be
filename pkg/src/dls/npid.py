"""Non-parametric instance discrimination: memory bank, exact softmax and NCE losses.

Every training instance is its own class. Its "class weight" is a unit
vector in the memory bank, refreshed with a momentum blend of the latest
embedding after each optimizer step. Bank rows are constants inside a step:
gradients reach only the fresh embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class NpidConfig:
    embedding_dim: int = 128
    temperature: float = 0.4
    nce_k: int = 64
    bank_momentum: float = 0.5
    noise_renormalization_z: float | str = "auto"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.nce_k < 1:
            raise ValueError(f"nce_k must be >= 1, got {self.nce_k}")
        if not 0.0 <= self.bank_momentum <= 1.0:
            raise ValueError(f"bank_momentum must be in [0, 1], got {self.bank_momentum}")
        z = self.noise_renormalization_z
        if z != "auto" and not (isinstance(z, (int, float)) and z > 0):
            raise ValueError(f"noise_renormalization_z must be 'auto' or positive, got {z!r}")


class MemoryBank:
    """``n x d`` matrix of unit rows, one per training instance."""

    def __init__(self, vectors: torch.Tensor):
        if vectors.ndim != 2:
            raise ValueError(f"bank must be 2-D, got shape {tuple(vectors.shape)}")
        self.vectors = vectors

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.n


def init_bank(n: int, d: int, seed: int = 0, dtype: torch.dtype = torch.float32) -> MemoryBank:
    """Rows drawn uniformly on the unit sphere (normalized Gaussians)."""
    if n < 1 or d < 2:
        raise ValueError(f"need n >= 1 and d >= 2, got n={n}, d={d}")
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(n, d, generator=g, dtype=torch.float64)
    return MemoryBank(F.normalize(v, dim=1).to(dtype))


def _check_ids(ids, n: int) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long).reshape(-1)
    if ids.numel() and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"instance ids must lie in [0, {n}), got range [{int(ids.min())}, {int(ids.max())}]")
    return ids


def log_softmax_probs(v: torch.Tensor, bank: MemoryBank, temperature: float) -> torch.Tensor:
    """``log P(i | v)`` for every bank row i; ``v`` is ``[d]`` or ``[B, d]``."""
    logits = v @ bank.vectors.detach().to(v.dtype).T / temperature
    return torch.log_softmax(logits, dim=-1)


def softmax_prob(v, i: int, bank: MemoryBank, temperature: float) -> float:
    """Probability that embedding ``v`` belongs to instance ``i``."""
    if not 0 <= i < bank.n:
        raise IndexError(f"instance id {i} outside [0, {bank.n})")
    v = torch.as_tensor(v, dtype=bank.vectors.dtype)
    return float(log_softmax_probs(v, bank, temperature)[..., i].exp())


def full_softmax_loss(v_batch: torch.Tensor, ids, bank: MemoryBank, temperature: float) -> torch.Tensor:
    """Mean negative log-likelihood of the correct instance under the exact softmax."""
    if v_batch.ndim != 2 or v_batch.shape[0] == 0:
        raise ValueError("v_batch must be a non-empty [B, d] tensor")
    ids = _check_ids(ids, bank.n)
    if ids.numel() != v_batch.shape[0]:
        raise ValueError("ids and v_batch disagree in batch size")
    logp = log_softmax_probs(v_batch, bank, temperature)
    return -logp.gather(1, ids[:, None]).mean()


def sample_negatives(batch_size: int, k: int, n: int, seed) -> torch.Tensor:
    """``[B, K]`` indices drawn uniformly from ``[0, n)`` with replacement."""
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.integers(0, n, size=(batch_size, k)))


def _sampled_similarities(v_batch, ids, bank, cfg, seed, negatives=None):
    if cfg.nce_k >= bank.n:
        raise ValueError(f"nce_k ({cfg.nce_k}) must be smaller than the bank size ({bank.n})")
    ids = _check_ids(ids, bank.n)
    if ids.numel() != v_batch.shape[0]:
        raise ValueError("ids and v_batch disagree in batch size")
    if negatives is None:
        negatives = sample_negatives(len(ids), cfg.nce_k, bank.n, seed)
    elif tuple(negatives.shape) != (len(ids), cfg.nce_k):
        raise ValueError(f"negatives must have shape {(len(ids), cfg.nce_k)}")
    idx = torch.cat([ids[:, None], _check_ids(negatives, bank.n).view(len(ids), cfg.nce_k)], dim=1)
    w = bank.vectors.detach().to(v_batch.dtype)[idx]  # [B, K+1, d]
    return torch.einsum("bkd,bd->bk", w, v_batch) / cfg.temperature


def estimate_z(v_batch: torch.Tensor, ids, bank: MemoryBank, cfg: NpidConfig, seed, negatives=None) -> float:
    """Monte-Carlo partition estimate: ``n * mean(exp(v_j . v / tau))`` over sampled rows."""
    with torch.no_grad():
        s = _sampled_similarities(v_batch.detach(), ids, bank, cfg, seed, negatives)
        return float(s.exp().mean()) * bank.n


def nce_loss(
    v_batch: torch.Tensor,
    ids,
    bank: MemoryBank,
    cfg: NpidConfig,
    seed,
    z: float | None = None,
    negatives: torch.Tensor | None = None,
) -> torch.Tensor:
    """Binary NCE loss against uniform noise ``1/n`` with ``K`` sampled negatives.

    The model density is ``exp(v_j . v / tau) / Z``. ``Z`` comes from ``z`` if
    given, else from a numeric ``cfg.noise_renormalization_z``, else it is
    estimated from this batch (callers freeze that estimate for later steps).
    ``negatives`` (``[B, K]`` ids) overrides the seeded uniform draw.
    """
    if z is None:
        z = cfg.noise_renormalization_z
        if z == "auto":
            z = estimate_z(v_batch, ids, bank, cfg, seed, negatives)
    s = _sampled_similarities(v_batch, ids, bank, cfg, seed, negatives)
    log_p = s - math.log(z)
    log_kpn = math.log(cfg.nce_k / bank.n)
    log_denom = torch.logaddexp(log_p, torch.full_like(log_p, log_kpn))
    log_h_pos = log_p[:, 0] - log_denom[:, 0]
    log_1mh_neg = log_kpn - log_denom[:, 1:]
    return -(log_h_pos + log_1mh_neg.sum(dim=1)).mean()


def update_bank(bank: MemoryBank, ids, v_batch: torch.Tensor, momentum: float) -> None:
    """In place: ``row_i <- normalize((1 - m) row_i + m v)`` for each (i, v).

    If the blend cancels to (numerically) zero the row takes ``v`` directly.
    """
    ids = _check_ids(ids, bank.n)
    if torch.unique(ids).numel() != ids.numel():
        raise ValueError("duplicate instance ids within one bank update")
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    if momentum == 0.0:
        return
    with torch.no_grad():
        v = v_batch.detach().to(bank.vectors.dtype)
        mixed = (1.0 - momentum) * bank.vectors[ids] + momentum * v
        norms = mixed.norm(dim=1, keepdim=True)
        degenerate = norms.squeeze(1) < 1e-12
        mixed = mixed / norms.clamp_min(1e-12)
        if degenerate.any():
            mixed[degenerate] = F.normalize(v[degenerate], dim=1)
        bank.vectors[ids] = mixed
