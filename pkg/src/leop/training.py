"""Loss assembly and optimization of the denoiser on toy complexes."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import store
from .chemdata import MaskedComplex, MaskedLigand, pad_with_fake_atoms
from .diffusion import (kl_categorical, q_marginal_categorical, q_marginal_coords, q_posterior_categorical,
                        q_posterior_coords, q_step_categorical, q_step_coords, sample_categorical)
from .egnn import DTYPE, ComplexBatch, EGNNDenoiser, collate
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_atom: float = 100.0
    lambda_bond: float = 100.0
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float | None = 10.0
    pad_mean: float = 2.0
    pad_cap: int = 8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning rate must be >= 0, batch size >= 1, epochs >= 0")
        if self.lambda_atom < 0 or self.lambda_bond < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_pos: float
    l_atom: float
    l_bond: float
    total: float
    t: float = 0.0


def sample_padding(rng: np.random.Generator, mean: float = 2.0, cap: int = 8) -> int:
    return int(min(rng.poisson(mean), cap)) if mean > 0 else 0


# --------------------------------------------------------------------------- noising


@dataclass
class NoisedBatch:
    batch: ComplexBatch  # model input at step t
    x_prev: torch.Tensor  # (B, L, 3) coordinates at t-1 (mask rows meaningful)
    v0: torch.Tensor  # (B, L, Kv) clean atom one-hots
    b0: torch.Tensor  # (B, L, L, Kb) clean bond one-hots
    center: torch.Tensor  # (B, 3) retained centroid


def noise_complex(c: MaskedComplex, s: NoiseSchedule, t: int, rng: np.random.Generator) -> dict:
    """Draw (M^{t-1}, M^t) for one (already padded) complex.

    Coordinates are noised in the frame centred on the retained centroid; the
    categorical states are sampled one-hots.
    """
    lig, mask = c.ligand, c.mask
    k_v, k_b = lig.v.shape[-1], lig.b.shape[-1]
    center = torch.as_tensor(c.retain_centroid, dtype=DTYPE)
    x0 = torch.as_tensor(lig.x, dtype=DTYPE)
    v0 = torch.as_tensor(lig.v, dtype=DTYPE)
    b0 = torch.as_tensor(lig.b, dtype=DTYPE)
    m = torch.as_tensor(mask)
    y0 = x0[m] - center
    y_prev = q_marginal_coords(y0, s, t - 1, rng)
    y_t = q_step_coords(y_prev, s, t, rng)
    v_prev = sample_categorical(q_marginal_categorical(v0[m], k_v, s, t - 1, check=False), rng)
    v_t = sample_categorical(q_step_categorical(v_prev, k_v, s, t, check=False), rng)

    n = lig.n_atoms
    iu = torch.triu_indices(n, n, offset=1)
    dif = m[iu[0]] | m[iu[1]]
    ii, jj = iu[0][dif], iu[1][dif]
    b_prev_u = sample_categorical(q_marginal_categorical(b0[ii, jj], k_b, s, t - 1, check=False), rng)
    b_t_u = sample_categorical(q_step_categorical(b_prev_u, k_b, s, t, check=False), rng)

    x_t = x0.clone()
    x_t[m] = y_t + center
    x_prev = x0.clone()
    x_prev[m] = y_prev + center
    v_t_full = v0.clone()
    v_t_full[m] = v_t
    b_t = b0.clone()
    b_t[ii, jj] = b_t_u
    b_t[jj, ii] = b_t_u
    return dict(pocket_x=c.pocket.x, pocket_v=c.pocket.v, lig_x=x_t, lig_v=v_t_full, lig_b=b_t,
                gen_mask=mask, t=t, x_prev=x_prev, v0=v0, b0=b0, center=center)


def make_noised_batch(items: Sequence[dict]) -> NoisedBatch:
    batch = collate(list(items))
    B, L = batch.lig_x.shape[:2]
    k_v, k_b = batch.lig_v.shape[-1], batch.lig_b.shape[-1]
    x_prev = torch.zeros(B, L, 3, dtype=DTYPE)
    v0 = torch.zeros(B, L, k_v, dtype=DTYPE)
    b0 = torch.zeros(B, L, L, k_b, dtype=DTYPE)
    b0[..., 0] = 1.0
    for i, it in enumerate(items):
        n = it["lig_x"].shape[0]
        x_prev[i, :n] = it["x_prev"]
        v0[i, :n] = it["v0"]
        b0[i, :n, :n] = it["b0"]
    center = torch.stack([it["center"] for it in items])
    return NoisedBatch(batch, x_prev, v0, b0, center)


# --------------------------------------------------------------------------- losses


def batch_losses(out: dict, nb: NoisedBatch, s: NoiseSchedule, lambda_atom: float, lambda_bond: float):
    """Per-sample loss tensors ``(l_pos, l_atom, l_bond, total)``, each of shape (B,)."""
    b = nb.batch
    t = b.t
    gen = b.gen_mask.to(DTYPE)
    n_gen = gen.sum(1).clamp_min(1.0)
    c = nb.center[:, None, :]
    mu, _ = q_posterior_coords(b.lig_x - c, out["x0"] - c, s, t)
    mu = mu + c
    l_pos = (((nb.x_prev - mu) ** 2).mean(-1) * gen).sum(1) / n_gen

    k_v = b.lig_v.shape[-1]
    # padded slots carry zero rows; give them a placeholder one-hot so posteriors stay defined
    real = b.lig_mask[..., None]
    filler = torch.zeros_like(b.lig_v)
    filler[..., 0] = 1.0
    v_t = torch.where(real, b.lig_v, filler)
    q_v = q_posterior_categorical(v_t, torch.where(real, nb.v0, filler), k_v, s, t, check=False)
    p_v = q_posterior_categorical(v_t, out["v0"], k_v, s, t, check=False)
    l_atom = (kl_categorical(q_v, p_v) * gen).sum(1) / n_gen

    k_b = b.lig_b.shape[-1]
    dif = b.diffused_pairs.to(DTYPE)
    q_b = q_posterior_categorical(b.lig_b, nb.b0, k_b, s, t, check=False)
    p_b = q_posterior_categorical(b.lig_b, out["b0"], k_b, s, t, check=False)
    l_bond = (kl_categorical(q_b, p_b) * dif).sum((1, 2)) / dif.sum((1, 2)).clamp_min(1.0)
    total = l_pos + lambda_atom * l_atom + lambda_bond * l_bond
    return l_pos, l_atom, l_bond, total


def compute_losses(model: EGNNDenoiser, c: MaskedComplex, s: NoiseSchedule, t: int, rng: np.random.Generator,
                   lambda_atom: float = 100.0, lambda_bond: float = 100.0) -> LossBreakdown:
    """Composite loss for one complex at step ``t`` (``c`` is used as given, no padding)."""
    if not 1 <= t <= s.T:
        raise ValueError(f"t={t} outside [1, {s.T}]")
    nb = make_noised_batch([noise_complex(c, s, t, rng)])
    with torch.no_grad():
        out = model(nb.batch, s.T)
        parts = batch_losses(out, nb, s, lambda_atom, lambda_bond)
    return LossBreakdown(*(float(p[0]) for p in parts), t=float(t))


# --------------------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: EGNNDenoiser
    trace: list[LossBreakdown]
    optimizer: torch.optim.Optimizer


def _padded(c: MaskedComplex, extra: int) -> MaskedComplex:
    part = pad_with_fake_atoms(MaskedLigand(c.ligand, c.mask), c.n_mask + extra)
    return MaskedComplex.build(c.pocket, part)


def epoch_batches(dataset: Sequence[MaskedComplex], s: NoiseSchedule, cfg: TrainConfig, epoch: int):
    """Deterministic noised batches for one epoch."""
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), cfg.batch_size):
        items = []
        for idx in order[start:start + cfg.batch_size]:
            c = _padded(dataset[int(idx)], sample_padding(rng, cfg.pad_mean, cfg.pad_cap))
            t = int(rng.integers(1, s.T + 1))
            items.append(noise_complex(c, s, t, rng))
        yield make_noised_batch(items)


def make_optimizer(model: EGNNDenoiser, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)


def train(model: EGNNDenoiser, dataset: Sequence[MaskedComplex], s: NoiseSchedule, cfg: TrainConfig,
          checkpoint: str | Path | None = None, resume: str | Path | None = None,
          loss_csv: str | Path | None = None,
          on_epoch: Callable[[int, LossBreakdown], None] | None = None) -> TrainResult:
    """Adam on the composite loss; one checkpoint per epoch when ``checkpoint`` is set.

    With ``resume`` the model, optimizer moments, epoch counter and loss trace are
    restored from that checkpoint and training continues up to ``cfg.epochs``.
    """
    if not dataset:
        raise TrainingError("empty dataset")
    opt = make_optimizer(model, cfg)
    trace: list[LossBreakdown] = []
    start = 0
    if resume is not None:
        bundle = store.load_bundle(resume)
        model.load_state_dict(bundle.model.state_dict())
        if bundle.optimizer_state is not None:
            opt.load_state_dict(bundle.optimizer_state)
        start = int(bundle.meta.get("epoch", 0))
        trace = [LossBreakdown(**row) for row in bundle.meta.get("trace", [])]

    model.train()
    for epoch in range(start, cfg.epochs):
        sums = np.zeros(5)
        count = 0
        for nb in epoch_batches(dataset, s, cfg, epoch):
            out = model(nb.batch, s.T)
            l_pos, l_atom, l_bond, total = batch_losses(out, nb, s, cfg.lambda_atom, cfg.lambda_bond)
            loss = total.mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch + 1}; last good checkpoint kept")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            B = total.shape[0]
            parts = torch.stack([l_pos.sum(), l_atom.sum(), l_bond.sum(), total.sum()]).detach()
            sums += np.append(parts.numpy(), float(nb.batch.t.sum()))
            count += B
        row = LossBreakdown(*(float(v) for v in sums / count))
        trace.append(row)
        logger.info("epoch %d total %.4f pos %.4f atom %.5f bond %.5f", epoch + 1, row.total, row.l_pos,
                    row.l_atom, row.l_bond)
        if on_epoch is not None:
            on_epoch(epoch + 1, row)
        if checkpoint is not None:
            store.save_bundle(checkpoint, model, s, optimizer=opt,
                              meta={"epoch": epoch + 1, "trace": [asdict(r) for r in trace],
                                    "train_config": asdict(cfg)})
        if loss_csv is not None:
            write_loss_csv(loss_csv, trace)
    model.eval()
    return TrainResult(model, trace, opt)


def write_loss_csv(path: str | Path, trace: Sequence[LossBreakdown]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "l_pos", "l_atom", "l_bond", "total"])
        for i, r in enumerate(trace, start=1):
            w.writerow([i, repr(r.l_pos), repr(r.l_atom), repr(r.l_bond), repr(r.total)])


def reconstruction_accuracy(model: EGNNDenoiser, dataset: Sequence[MaskedComplex], s: NoiseSchedule,
                            t_max: int, seed: int = 0, batch_size: int = 32,
                            pad_mean: float = 2.0, pad_cap: int = 8) -> tuple[float, float]:
    """Argmax accuracy of predicted clean atom and bond types at random t <= t_max.

    Atoms are scored over all mask slots (fake padding included), bonds over the
    unordered diffused pairs.
    """
    rng = np.random.default_rng(seed)
    hits_v = tot_v = hits_b = tot_b = 0
    for start in range(0, len(dataset), batch_size):
        items = []
        for c in dataset[start:start + batch_size]:
            c = _padded(c, sample_padding(rng, pad_mean, pad_cap))
            items.append(noise_complex(c, s, int(rng.integers(1, t_max + 1)), rng))
        nb = make_noised_batch(items)
        with torch.no_grad():
            out = model(nb.batch, s.T)
        gen = nb.batch.gen_mask
        hits_v += int(((out["v0"].argmax(-1) == nb.v0.argmax(-1)) & gen).sum())
        tot_v += int(gen.sum())
        dif = torch.triu(nb.batch.diffused_pairs.to(torch.int64), diagonal=1).bool()
        hits_b += int(((out["b0"].argmax(-1) == nb.b0.argmax(-1)) & dif).sum())
        tot_b += int(dif.sum())
    return hits_v / max(tot_v, 1), hits_b / max(tot_b, 1)
