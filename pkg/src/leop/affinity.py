"""Learned affinity predictor and the gradient guidance it drives during sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .chemdata import ATOM_VOCAB, MaskedComplex
from .egnn import DTYPE, ComplexBatch, EGNNDenoiser, backward, egnn_forward, mlp
from .schedule import NoiseSchedule
from .training import _padded, make_noised_batch, noise_complex, sample_padding

logger = logging.getLogger(__name__)

EXP_CLAMP = 50.0
PK_SCALE = 14.0  # display mapping from normalized affinity to a pK-like scale


class AffinityError(ValueError):
    pass


@dataclass
class GuidanceConfig:
    s: float = 1.0
    r1: float = 0.5
    r2: float = 0.5
    delta: float = 0.01
    enabled: bool = True

    def __post_init__(self):
        for name in ("s", "r1", "r2", "delta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"guidance.{name} must be finite")
        if self.delta <= 0:
            raise ValueError("guidance.delta must be > 0")

    @property
    def active(self) -> bool:
        """False means the sampler takes the plain unguided path."""
        return bool(self.enabled) and (self.s != 0 or self.r1 != 0 or self.r2 != 0)


class AffinityHead(nn.Module):
    """Per-atom MLP on (hidden state, time features), logistic, averaged over real ligand atoms."""

    def __init__(self, hidden: int, time_dim: int, width: int = 64, seed: int = 0):
        super().__init__()
        self.config = dict(hidden=hidden, time_dim=time_dim, width=width, seed=seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = mlp(hidden + time_dim, width, 1)

    @classmethod
    def for_model(cls, model: EGNNDenoiser, width: int = 64, seed: int = 0) -> "AffinityHead":
        return cls(model.config["hidden"], model.config["time_dim"], width, seed)

    def forward(self, h_lig: torch.Tensor, tf: torch.Tensor, atom_mask: torch.Tensor) -> torch.Tensor:
        n = atom_mask.sum(1)
        if bool((n == 0).any()):
            raise AffinityError("no non-fake ligand atoms to average over")
        B, L, _ = h_lig.shape
        z = self.net(torch.cat([h_lig, tf[:, None].expand(B, L, tf.shape[-1])], -1))[..., 0]
        return (torch.sigmoid(z) * atom_mask.to(DTYPE)).sum(1) / n.to(DTYPE)


def real_atom_mask(batch: ComplexBatch) -> torch.Tensor:
    return batch.lig_mask & (batch.lig_v.argmax(-1) != ATOM_VOCAB.fake)


def predict_affinity(model: EGNNDenoiser, head: AffinityHead, batch: ComplexBatch, T: int,
                     out: dict | None = None) -> torch.Tensor:
    """Normalized affinity estimate per complex, shape (B,)."""
    with torch.no_grad():
        out = out if out is not None else egnn_forward(model, batch, T)
        return head(out["h_lig"], out["tf"], real_atom_mask(batch))


def grad_affinity_inputs(model: EGNNDenoiser, head: AffinityHead, batch: ComplexBatch, T: int):
    """Exact gradients of Â with respect to ligand coordinates, atom rows and bond rows.

    Returns ``(outputs, a_hat, gx, gv, gb)``; ``outputs`` is the denoiser output of the
    same forward pass. Entries outside generated atoms / diffused pairs are zero.
    """
    rec = egnn_forward(model, batch, T, record=True)
    with torch.enable_grad():
        a_hat = head(rec.outputs["h_lig"], rec.outputs["tf"], real_atom_mask(batch))
    _, g = backward(rec, scalar=a_hat.sum())
    outputs = {k: v.detach() for k, v in rec.outputs.items()}
    return outputs, a_hat.detach(), g["x"], g["v"], g["b"]


# --------------------------------------------------------------------------- guidance transforms


@dataclass
class GuidanceStats:
    clamped: int = 0


def guide_coords(mu: torch.Tensor, beta: torch.Tensor, grad: torch.Tensor | None, g: GuidanceConfig,
                 rng: np.random.Generator) -> torch.Tensor:
    """Draw from N(mu + s * beta * grad, beta I). With inactive guidance the shift is skipped."""
    noise = torch.as_tensor(rng.standard_normal(tuple(mu.shape)), dtype=mu.dtype)
    mean = mu
    if g.active and g.s != 0 and grad is not None:
        mean = mu + g.s * beta * grad
    return mean + torch.sqrt(beta) * noise


def guide_categorical(p: torch.Tensor, grad: torch.Tensor, r: float, delta: float,
                      stats: GuidanceStats | None = None) -> torch.Tensor:
    """(p + delta) * exp(r * grad), renormalized row-wise."""
    expo = r * grad
    bad = ~torch.isfinite(expo) | (expo.abs() > EXP_CLAMP)
    if bool(bad.any()):
        n = int(bad.sum())
        if stats is not None:
            stats.clamped += n
        logger.warning("clamped %d guidance exponents to +-%g", n, EXP_CLAMP)
        expo = torch.nan_to_num(expo, nan=0.0, posinf=EXP_CLAMP, neginf=-EXP_CLAMP).clamp(-EXP_CLAMP, EXP_CLAMP)
    w = (p + delta) * torch.exp(expo)
    return w / w.sum(-1, keepdim=True)


# --------------------------------------------------------------------------- head training


@dataclass
class AffinityTrainConfig:
    lr: float = 3e-3
    epochs: int = 300
    batch_size: int = 64
    views: int = 8  # noised copies per complex in the cached feature pool
    val_fraction: float = 0.2
    weight_decay: float = 0.0
    seed: int = 0
    pad_mean: float = 2.0
    pad_cap: int = 8

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1 or self.views < 1:
            raise ValueError("invalid affinity training settings")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class AffinityTrainResult:
    head: AffinityHead
    train_mse: list[float] = field(default_factory=list)
    val_rmse: float | None = None


def _feature_pool(model, dataset, targets, s, cfg, rng, chunk=64):
    """Frozen-denoiser features for `views` noised copies of each complex."""
    feats = []
    jobs = [(i, v) for v in range(cfg.views) for i in range(len(dataset))]
    for start in range(0, len(jobs), chunk):
        items, ys = [], []
        for i, _ in jobs[start:start + chunk]:
            c = _padded(dataset[i], sample_padding(rng, cfg.pad_mean, cfg.pad_cap))
            items.append(noise_complex(c, s, int(rng.integers(1, s.T + 1)), rng))
            ys.append(float(targets[i]))
        nb = make_noised_batch(items)
        with torch.no_grad():
            out = model(nb.batch, s.T)
        feats.append((out["h_lig"], out["tf"], real_atom_mask(nb.batch), torch.tensor(ys, dtype=DTYPE)))
    return feats


def _split_minibatches(pool, batch_size, rng):
    rows = [(k, j) for k, (h, _, _, _) in enumerate(pool) for j in range(h.shape[0])]
    order = rng.permutation(len(rows))
    for start in range(0, len(order), batch_size):
        sel = [rows[i] for i in order[start:start + batch_size]]
        L = max(pool[k][0].shape[1] for k, _ in sel)
        H = pool[0][0].shape[2]
        h = torch.zeros(len(sel), L, H, dtype=DTYPE)
        m = torch.zeros(len(sel), L, dtype=torch.bool)
        tf = torch.stack([pool[k][1][j] for k, j in sel])
        y = torch.stack([pool[k][3][j] for k, j in sel])
        for n, (k, j) in enumerate(sel):
            l_k = pool[k][0].shape[1]
            h[n, :l_k] = pool[k][0][j]
            m[n, :l_k] = pool[k][2][j]
        yield h, tf, m, y


def evaluate_head(head: AffinityHead, pool) -> float:
    se, n = 0.0, 0
    with torch.no_grad():
        for h, tf, m, y in pool:
            se += float(((head(h, tf, m) - y) ** 2).sum())
            n += y.shape[0]
    return math.sqrt(se / max(n, 1))


def train_affinity(model: EGNNDenoiser, head: AffinityHead, dataset: Sequence[MaskedComplex],
                   targets: Sequence[float], s: NoiseSchedule, cfg: AffinityTrainConfig) -> AffinityTrainResult:
    """Fit the head to oracle targets on frozen denoiser features at random t.

    Complexes are split into train/validation before any noise is drawn; the
    validation RMSE is measured on noised copies of the held-out complexes.
    """
    if len(dataset) != len(targets) or not dataset:
        raise AffinityError("dataset and targets must be non-empty and of equal length")
    rng = np.random.default_rng([cfg.seed, 1])
    order = rng.permutation(len(dataset))
    n_val = int(round(cfg.val_fraction * len(dataset)))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    if len(tr_idx) == 0:
        raise AffinityError("no training complexes left after the validation split")
    model.eval()
    tr_pool = _feature_pool(model, [dataset[i] for i in tr_idx], [targets[i] for i in tr_idx], s, cfg, rng)
    val_pool = _feature_pool(model, [dataset[i] for i in val_idx], [targets[i] for i in val_idx], s, cfg,
                             rng) if n_val else []

    opt = torch.optim.Adam(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = AffinityTrainResult(head)
    head.train()
    for epoch in range(cfg.epochs):
        erng = np.random.default_rng([cfg.seed, 2, epoch])
        se, n = 0.0, 0
        for h, tf, m, y in _split_minibatches(tr_pool, cfg.batch_size, erng):
            pred = head(h, tf, m)
            loss = ((pred - y) ** 2).mean()
            if not torch.isfinite(loss):
                raise AffinityError(f"non-finite affinity loss in epoch {epoch + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            se += float(loss.detach()) * y.shape[0]
            n += y.shape[0]
        result.train_mse.append(se / n)
    head.eval()
    if val_pool:
        result.val_rmse = evaluate_head(head, val_pool)
        logger.info("affinity head validation RMSE %.4f", result.val_rmse)
    return result
