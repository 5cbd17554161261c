"""Reverse-process generation with a fixed pocket and fixed retained fragment(s)."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .affinity import PK_SCALE, AffinityHead, GuidanceConfig, GuidanceStats, grad_affinity_inputs, guide_categorical
from .affinity import guide_coords, predict_affinity
from .chemdata import (ATOM_VOCAB, BOND_VOCAB, MaskedComplex, MaskedLigand, Molecule3D, PocketContext, _components,
                       oracle_affinity, pad_with_fake_atoms, partition_retain_mask, strip_fake, write_sdf)
from .diffusion import (posterior_rows_or_prior, q_marginal_categorical, q_marginal_coords, q_posterior_coords,
                        sample_categorical)
from .egnn import DTYPE, ComplexBatch, EGNNDenoiser, collate, egnn_forward
from .schedule import NoiseSchedule
from .weights import atomic_write_bytes

logger = logging.getLogger(__name__)

__all__ = ["SampleRunConfig", "SamplerStats", "GenerationResult", "sample_prior", "prior_center", "denoise_step",
           "generate", "scaffold_hop", "strip_fake", "write_run", "fragment_rmsd"]


class SamplerError(ValueError):
    pass


@dataclass
class SampleRunConfig:
    n_samples: int = 100
    seed: int = 0
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    T: int | None = None  # must match the weights' schedule when given
    n_max_policy: str = "reference"  # "reference": reference mask + Poisson padding; "fixed": n_max slots
    n_max: int | None = None
    pad_mean: float = 2.0
    pad_cap: int = 8
    batch_size: int = 32
    output_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.guidance, dict):
            self.guidance = GuidanceConfig(**self.guidance)
        if self.n_samples < 1:
            raise SamplerError("n_samples must be >= 1")
        if self.batch_size < 1:
            raise SamplerError("batch_size must be >= 1")
        if self.n_max_policy not in ("reference", "fixed"):
            raise SamplerError(f"unknown n_max_policy {self.n_max_policy!r}")
        if self.n_max_policy == "fixed" and (self.n_max is None or self.n_max < 1):
            raise SamplerError("n_max_policy 'fixed' needs n_max >= 1")
        if self.pad_mean < 0 or self.pad_cap < 0:
            raise SamplerError("padding parameters must be non-negative")


@dataclass
class SamplerStats:
    degenerate_rows: int = 0
    guidance: GuidanceStats = field(default_factory=GuidanceStats)


def sample_seed(run_seed: int, index: int) -> int:
    """Independent per-sample seed split from the run seed."""
    return int(np.random.SeedSequence([run_seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


# --------------------------------------------------------------------------- prior


def prior_center(part: MaskedLigand) -> np.ndarray:
    """Retained centroid, or the midpoint of the two fragment centroids for linker partitions."""
    keep = part.retained_indices
    adj = part.ligand.bond_types > 0
    comps = _components(adj, keep.tolist())
    if len(comps) == 2:
        cents = [part.ligand.x[sorted(c)].mean(0) for c in comps]
        return (cents[0] + cents[1]) / 2.0
    return part.retain_centroid


def sample_prior(n_mask: int, center, k_v: int, k_b: int, rng: np.random.Generator):
    """Mask block at t = T: coordinates ~ N(center, I), uniform atom and bond categories."""
    if n_mask < 1:
        raise SamplerError("n_mask must be >= 1")
    center = torch.as_tensor(np.asarray(center, dtype=np.float64))
    x = center + torch.as_tensor(rng.standard_normal((n_mask, 3)), dtype=DTYPE)
    v = sample_categorical(torch.full((n_mask, k_v), 1.0 / k_v, dtype=DTYPE), rng)
    iu = torch.triu_indices(n_mask, n_mask, offset=1)
    upper = sample_categorical(torch.full((iu.shape[1], k_b), 1.0 / k_b, dtype=DTYPE), rng)
    b = torch.zeros(n_mask, n_mask, k_b, dtype=DTYPE)
    b[..., 0] = 1.0
    b[iu[0], iu[1]] = upper
    b[iu[1], iu[0]] = upper
    return x, v, b


def _initial_item(c: MaskedComplex, s: NoiseSchedule, rng: np.random.Generator) -> dict:
    """Complex with every mask slot and diffused bond drawn from the prior."""
    lig, m = c.ligand, c.mask
    k_v, k_b = lig.v.shape[-1], lig.b.shape[-1]
    mi, ri = np.flatnonzero(m), np.flatnonzero(~m)
    xm, vm, bm = sample_prior(len(mi), prior_center(c), k_v, k_b, rng)
    x = torch.as_tensor(lig.x, dtype=DTYPE).clone()
    v = torch.as_tensor(lig.v, dtype=DTYPE).clone()
    b = torch.as_tensor(lig.b, dtype=DTYPE).clone()
    x[mi] = xm
    v[mi] = vm
    b[np.ix_(mi, mi)] = bm
    if len(ri):
        cross = sample_categorical(torch.full((len(mi), len(ri), k_b), 1.0 / k_b, dtype=DTYPE), rng)
        b[np.ix_(mi, ri)] = cross
        b[np.ix_(ri, mi)] = cross.transpose(0, 1)
    return dict(pocket_x=c.pocket.x, pocket_v=c.pocket.v, lig_x=x, lig_v=v, lig_b=b, gen_mask=m, t=s.T,
                center=torch.as_tensor(c.retain_centroid, dtype=DTYPE))


# --------------------------------------------------------------------------- one reverse step


def _onehot_argmax(rows: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.one_hot(rows.argmax(-1), rows.shape[-1]).to(rows.dtype)


def denoise_step(model: EGNNDenoiser, head: AffinityHead | None, batch: ComplexBatch, center: torch.Tensor,
                 s: NoiseSchedule, g: GuidanceConfig, rngs: Sequence[np.random.Generator],
                 stats: SamplerStats | None = None) -> ComplexBatch:
    """Move every complex of ``batch`` from step t to t - 1.

    Order within the step: denoiser forward, affinity gradients at the current
    state, guided categorical posteriors and draws, then the guided coordinate
    draw. Pocket atoms, retained atoms and retained-retained bonds are carried over
    untouched; each complex consumes randomness only from its own generator.
    """
    ts = batch.t.unique()
    if ts.numel() != 1:
        raise SamplerError("all complexes in a batch must share the step")
    t = int(ts[0])
    if not 1 <= t <= s.T:
        raise SamplerError(f"step {t} outside [1, {s.T}]")
    if len(rngs) != batch.size:
        raise SamplerError("need one generator per complex")
    stats = stats if stats is not None else SamplerStats()
    guided = g.active
    if guided and head is None:
        raise SamplerError("guidance is enabled but no affinity head was given")

    if guided:
        out, _, gx, gv, gb = grad_affinity_inputs(model, head, batch, s.T)
    else:
        out = egnn_forward(model, batch, s.T)
        gx = gv = gb = None

    gen = batch.gen_mask
    dif = batch.diffused_pairs
    k_v, k_b = batch.lig_v.shape[-1], batch.lig_b.shape[-1]
    with torch.no_grad():
        p_v, p_b = batch.lig_v, batch.lig_b
        if guided and g.r1 != 0:
            p_v = torch.where(gen[..., None], guide_categorical(p_v, gv, g.r1, g.delta, stats.guidance), p_v)
        if guided and g.r2 != 0:
            gb_sym = gb + gb.transpose(1, 2)  # both orientations of a pair share one sampled state
            p_b = torch.where(dif[..., None], guide_categorical(p_b, gb_sym, g.r2, g.delta, stats.guidance), p_b)
        rows_v, bad_v = posterior_rows_or_prior(p_v, out["v0"], k_v, s, t)
        rows_b, bad_b = posterior_rows_or_prior(p_b, out["b0"], k_b, s, t)
        n_bad = int((bad_v[..., 0] & gen).sum()) + int((torch.triu(bad_b[..., 0] & dif, diagonal=1)).sum())
        if n_bad:
            stats.degenerate_rows += n_bad
            logger.warning("step %d: %d degenerate posterior rows resampled from the prior", t, n_bad)

        c = center[:, None, :]
        mean, var = q_posterior_coords(batch.lig_x - c, out["x0"] - c, s, batch.t)
        mean = mean + c
        new_x, new_v, new_b = batch.lig_x.clone(), batch.lig_v.clone(), batch.lig_b.clone()
        for i, rng in enumerate(rngs):
            n = int(batch.lig_mask[i].sum())
            gi = torch.nonzero(gen[i, :n]).flatten()
            iu = torch.triu_indices(n, n, offset=1)
            sel = dif[i, iu[0], iu[1]]
            ii, jj = iu[0][sel], iu[1][sel]
            if t > 1:
                vi = sample_categorical(rows_v[i, gi], rng)
                bi = sample_categorical(rows_b[i, ii, jj], rng)
            else:
                vi = _onehot_argmax(rows_v[i, gi])
                bi = _onehot_argmax(rows_b[i, ii, jj])
            new_v[i, gi] = vi
            new_b[i, ii, jj] = bi
            new_b[i, jj, ii] = bi
            grad = gx[i, gi] if gx is not None else None
            new_x[i, gi] = guide_coords(mean[i, gi], var[i], grad, g, rng)
    return batch.replace(lig_x=new_x, lig_v=new_v, lig_b=new_b, t=torch.full_like(batch.t, t - 1))


def run_chain(model, head, batch: ComplexBatch, center, s, g, rngs, stats=None, trajectory: list | None = None):
    """Apply :func:`denoise_step` from the batch's step down to 0."""
    while int(batch.t[0]) > 0:
        batch = denoise_step(model, head, batch, center, s, g, rngs, stats)
        if trajectory is not None:
            trajectory.append(batch)
    return batch


# --------------------------------------------------------------------------- decoding and runs


def _decode(batch: ComplexBatch, i: int, name: str = "") -> Molecule3D:
    n = int(batch.lig_mask[i].sum())
    x = batch.lig_x[i, :n].numpy().copy()
    types = batch.lig_v[i, :n].argmax(-1).numpy()
    bonds = batch.lig_b[i, :n, :n].argmax(-1).numpy()
    bonds = np.triu(bonds, 1)
    bonds = bonds + bonds.T
    return Molecule3D.from_indices(x, types, bonds, name=name)


@dataclass
class GenerationResult:
    molecules: list[Molecule3D | None]  # None for samples whose generated slots all came out FAKE
    records: list[dict]
    raw: list[Molecule3D]  # final slot-level states before fake stripping
    stats: SamplerStats

    @property
    def n_emitted(self) -> int:
        return sum(m is not None for m in self.molecules)

    @property
    def n_empty(self) -> int:
        return sum(m is None for m in self.molecules)


def _n_max(c: MaskedLigand, cfg: SampleRunConfig, rng: np.random.Generator) -> int:
    if cfg.n_max_policy == "fixed":
        return max(int(cfg.n_max), 1)
    extra = int(min(rng.poisson(cfg.pad_mean), cfg.pad_cap)) if cfg.pad_mean > 0 else 0
    return c.n_mask + extra


def _finish(model, head, s, cfg, pocket, batch, center, rngs, stats, meta, gen_slots, out_records, out_mols,
            out_raw, name_prefix):
    with torch.no_grad():
        final = batch
        a_hat = None
        if head is not None:
            try:
                a_hat = predict_affinity(model, head, final, s.T).tolist()
            except ValueError:
                a_hat = None
    for i in range(final.size):
        raw = _decode(final, i, name=f"{name_prefix}{meta[i]['index']:04d}")
        out_raw.append(raw)
        gen_types = raw.types[gen_slots[i]]
        rec = dict(meta[i])
        rec["n_generated"] = int((gen_types != ATOM_VOCAB.fake).sum())
        if rec["n_generated"] == 0:
            out_mols.append(None)
            rec.update(empty=True, n_atoms=0, pred_affinity=None, oracle_affinity=None)
        else:
            mol = strip_fake(raw)
            out_mols.append(mol)
            rec.update(empty=False, n_atoms=mol.n_atoms,
                       pred_affinity=None if a_hat is None else PK_SCALE * float(a_hat[i]),
                       oracle_affinity=PK_SCALE * oracle_affinity(pocket, mol))
        out_records.append(rec)


def generate(model: EGNNDenoiser, head: AffinityHead | None, s: NoiseSchedule, reference: MaskedComplex,
             cfg: SampleRunConfig, stats: SamplerStats | None = None,
             trajectory: list | None = None) -> GenerationResult:
    """Generate ``cfg.n_samples`` completions of the retained part of ``reference``.

    The reference ligand's masked atoms are never read except for their count
    (``reference`` n_max policy). Sample ``i`` uses its own generator seeded by
    ``sample_seed(cfg.seed, i)``. If ``trajectory`` is a list, every
    intermediate batch is appended to it.
    """
    if cfg.T is not None and cfg.T != s.T:
        raise SamplerError(f"config T={cfg.T} does not match the schedule T={s.T}")
    if reference.pocket is None:
        raise SamplerError("reference complex has no pocket")
    stats = stats if stats is not None else SamplerStats()
    mols, records, raws = [], [], []
    base = MaskedLigand(reference.ligand, reference.mask)
    retained = base.ligand.subset(base.retained_indices)
    for start in range(0, cfg.n_samples, cfg.batch_size):
        idx = range(start, min(start + cfg.batch_size, cfg.n_samples))
        items, rngs, meta, gen_slots = [], [], [], []
        for i in idx:
            seed = sample_seed(cfg.seed, i)
            rng = np.random.default_rng(seed)
            n_max = _n_max(base, cfg, rng)
            # retained atoms first, generated slots after; the reference's own mask atoms are discarded
            skeleton = _with_slots(retained, n_max)
            c = MaskedComplex.build(reference.pocket, skeleton)
            items.append(_initial_item(c, s, rng))
            rngs.append(rng)
            gen_slots.append(c.mask.copy())
            meta.append(dict(index=i, seed=seed, n_mask=n_max, guided=cfg.guidance.active))
        batch = collate(items)
        center = torch.stack([it["center"] for it in items])
        batch = run_chain(model, head, batch, center, s, cfg.guidance, rngs, stats, trajectory)
        _finish(model, head, s, cfg, reference.pocket, batch, center, rngs, stats, meta, gen_slots, records, mols,
                raws, "sample_")
    return GenerationResult(mols, records, raws, stats)


def _with_slots(retained: Molecule3D, n_slots: int) -> MaskedLigand:
    """Retained atoms followed by ``n_slots`` empty generated slots (FAKE at the centroid)."""
    n_r = retained.n_atoms
    k_v, k_b = retained.v.shape[-1], retained.b.shape[-1]
    x = np.concatenate([retained.x, np.repeat(retained.x.mean(0, keepdims=True), n_slots, 0)])
    v = np.zeros((n_r + n_slots, k_v))
    v[:n_r] = retained.v
    v[n_r:, ATOM_VOCAB.fake] = 1.0
    b = np.zeros((n_r + n_slots, n_r + n_slots, k_b))
    b[..., 0] = 1.0
    b[:n_r, :n_r] = retained.b
    mask = np.zeros(n_r + n_slots, dtype=bool)
    mask[n_r:] = True
    return MaskedLigand(Molecule3D(x, v, b, name=retained.name), mask)


def fragment_rmsd(original: np.ndarray, final: np.ndarray) -> float:
    """Slot-wise RMSD between the original and regenerated fragment coordinates."""
    d = np.asarray(final, dtype=np.float64) - np.asarray(original, dtype=np.float64)
    return float(np.sqrt((d ** 2).sum(-1).mean()))


def scaffold_hop(model: EGNNDenoiser, head: AffinityHead | None, s: NoiseSchedule, pocket: PocketContext,
                 ligand: Molecule3D, fragment_indices: Sequence[int], t_hop: int, cfg: SampleRunConfig,
                 stats: SamplerStats | None = None) -> GenerationResult:
    """Renoise ``fragment_indices`` to step ``t_hop`` and denoise it back to step 0.

    The fragment keeps its slot count (no extra padding); each record carries
    ``fragment_rmsd``, the slot-wise RMSD of the regenerated fragment to the input.
    """
    if not 1 <= t_hop <= s.T:
        raise SamplerError(f"t_hop must lie in [1, {s.T}], got {t_hop}")
    part = partition_retain_mask(ligand, fragment_indices)
    c = MaskedComplex.build(pocket, part)
    stats = stats if stats is not None else SamplerStats()
    k_v, k_b = ligand.v.shape[-1], ligand.b.shape[-1]
    mi = part.mask_indices
    mols, records, raws = [], [], []
    for start in range(0, cfg.n_samples, cfg.batch_size):
        idx = range(start, min(start + cfg.batch_size, cfg.n_samples))
        items, rngs, meta, gen_slots = [], [], [], []
        for i in idx:
            seed = sample_seed(cfg.seed, i)
            rng = np.random.default_rng(seed)
            items.append(_hop_item(c, s, t_hop, rng, k_v, k_b))
            rngs.append(rng)
            gen_slots.append(part.mask.copy())
            meta.append(dict(index=i, seed=seed, n_mask=len(mi), guided=cfg.guidance.active, t_hop=t_hop))
        batch = collate(items)
        center = torch.stack([it["center"] for it in items])
        batch = run_chain(model, head, batch, center, s, cfg.guidance, rngs, stats)
        n_before = len(records)
        _finish(model, head, s, cfg, pocket, batch, center, rngs, stats, meta, gen_slots, records, mols, raws,
                "hop_")
        for rec, raw in zip(records[n_before:], raws[n_before:]):
            rec["fragment_rmsd"] = fragment_rmsd(ligand.x[mi], raw.x[mi])
    return GenerationResult(mols, records, raws, stats)


def _hop_item(c: MaskedComplex, s: NoiseSchedule, t: int, rng, k_v: int, k_b: int) -> dict:
    lig, m = c.ligand, c.mask
    center = torch.as_tensor(c.retain_centroid, dtype=DTYPE)
    x = torch.as_tensor(lig.x, dtype=DTYPE).clone()
    v = torch.as_tensor(lig.v, dtype=DTYPE).clone()
    b = torch.as_tensor(lig.b, dtype=DTYPE).clone()
    mt = torch.as_tensor(m)
    x[mt] = q_marginal_coords(x[mt] - center, s, t, rng) + center
    v[mt] = sample_categorical(q_marginal_categorical(v[mt], k_v, s, t, check=False), rng)
    n = lig.n_atoms
    iu = torch.triu_indices(n, n, offset=1)
    sel = mt[iu[0]] | mt[iu[1]]
    ii, jj = iu[0][sel], iu[1][sel]
    bt = sample_categorical(q_marginal_categorical(b[ii, jj], k_b, s, t, check=False), rng)
    b[ii, jj] = bt
    b[jj, ii] = bt
    return dict(pocket_x=c.pocket.x, pocket_v=c.pocket.v, lig_x=x, lig_v=v, lig_b=b, gen_mask=m, t=t, center=center)


def write_run(run_dir: str | Path, result: GenerationResult, extra: dict | None = None) -> Path:
    """One SDF per emitted molecule plus ``manifest.json`` listing every sample."""
    run_dir = Path(run_dir)
    (run_dir / "molecules").mkdir(parents=True, exist_ok=True)
    rows = []
    for mol, rec in zip(result.molecules, result.records):
        row = dict(rec)
        if mol is not None:
            rel = f"molecules/{mol.name or 'sample_%04d' % rec['index']}.sdf"
            atomic_write_bytes(run_dir / rel, write_sdf(mol).encode())
            row["file"] = rel
        else:
            row["file"] = None
        rows.append(row)
    manifest = {"samples": rows, "n_emitted": result.n_emitted, "n_empty": result.n_empty,
                "degenerate_rows": result.stats.degenerate_rows,
                "clamped_exponents": result.stats.guidance.clamped}
    if extra:
        manifest.update(extra)
    path = run_dir / "manifest.json"
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return path
