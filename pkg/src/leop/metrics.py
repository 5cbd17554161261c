"""Desk-scale molecule metrics and run reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .chemdata import AROMATIC, ATOM_VOCAB, BOND_ORDER, NONE, SINGLE, ChemDataError, FakeAtomError, Molecule3D
from .chemdata import parse_sdf_molecule
from .weights import atomic_write_bytes

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
MAX_VALENCE = {"C": 4, "N": 3, "O": 2, "F": 1, "S": 6, "Cl": 1}
ATOMIC_MASS = {"C": 12.011, "N": 14.007, "O": 15.999, "F": 18.998, "S": 32.06, "Cl": 35.45, "H": 1.008}
HETERO = {"N", "O", "F", "S", "Cl"}


class MetricsError(ValueError):
    pass


# --------------------------------------------------------------------------- molecular graph helpers


def _elements(mol: Molecule3D) -> list[str]:
    if mol.has_fake():
        raise FakeAtomError("molecule still contains FAKE atoms")
    els = mol.elements()
    for e in els:
        if e not in MAX_VALENCE:
            raise MetricsError(f"unknown element {e!r}")
    return els


def bond_order_sums(mol: Molecule3D) -> np.ndarray:
    return BOND_ORDER[mol.bond_types].sum(1) if mol.n_atoms else np.zeros(0)


def is_connected(mol: Molecule3D) -> bool:
    n = mol.n_atoms
    if n == 0:
        return False
    adj = mol.bond_types != NONE
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(adj[i]):
            if int(j) not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return len(seen) == n


def valence_validity(mol: Molecule3D) -> bool:
    """Every atom within its maximum valence (aromatic bonds count 1.5) and one connected graph."""
    els = _elements(mol)
    if mol.n_atoms == 0:
        return False
    sums = bond_order_sums(mol)
    if any(s > MAX_VALENCE[e] + 1e-9 for e, s in zip(els, sums)):
        return False
    return is_connected(mol)


def implicit_hydrogens(mol: Molecule3D) -> np.ndarray:
    """Valence deficit per atom (maximum valence minus bond-order sum, floored at 0)."""
    els = _elements(mol)
    sums = bond_order_sums(mol)
    return np.array([max(0, int(math.floor(MAX_VALENCE[e] - s + 1e-9))) for e, s in zip(els, sums)], dtype=np.int64)


def ring_bonds(mol: Molecule3D) -> np.ndarray:
    """Boolean matrix of bonds lying on a cycle (removal keeps their ends connected)."""
    adj = mol.bond_types != NONE
    n = mol.n_atoms
    ring = np.zeros((n, n), dtype=bool)
    for i, j in zip(*np.nonzero(np.triu(adj, 1))):
        a = adj.copy()
        a[i, j] = a[j, i] = False
        seen, stack = {int(i)}, [int(i)]
        while stack:
            k = stack.pop()
            for m in np.flatnonzero(a[k]):
                if int(m) not in seen:
                    seen.add(int(m))
                    stack.append(int(m))
        ring[i, j] = ring[j, i] = int(j) in seen
    return ring


# --------------------------------------------------------------------------- LogP


@lru_cache(maxsize=None)
def load_logp_table(path: str | None = None) -> dict[tuple[str, str, str], float]:
    """Read the tab-separated contribution table; keys are (element, aromatic, hetero)."""
    if path is None:
        text = resources.files("leop").joinpath("data/logp_table.tsv").read_text()
    else:
        text = Path(path).read_text()
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    reader = csv.DictReader(rows, delimiter="\t")
    return {(r["element"], r["aromatic"], r["hetero"]): float(r["contribution"]) for r in reader}


def logp_atom_types(mol: Molecule3D) -> list[tuple[str, str, str]]:
    els = _elements(mol)
    bt = mol.bond_types
    keys = []
    for i, e in enumerate(els):
        nbrs = np.flatnonzero(bt[i] != NONE)
        arom = "1" if (bt[i] == AROMATIC).any() else "0"
        het = min(sum(els[j] in HETERO for j in nbrs), 2)
        keys.append((e, arom, str(het)))
    return keys


def crippen_logp(mol: Molecule3D, table: Mapping | None = None) -> float:
    """Additive LogP estimate from the shipped reduced contribution table."""
    table = load_logp_table() if table is None else table
    total = 0.0
    for key in logp_atom_types(mol):
        if key in table:
            total += table[key]
        else:
            logger.warning("no LogP cell for %s; using the element default", key)
            default = (key[0], "*", "*")
            if default not in table:
                raise MetricsError(f"no LogP entry or default for element {key[0]!r}")
            total += table[default]
    return total


# --------------------------------------------------------------------------- Lipinski


@dataclass
class LipinskiProps:
    mw: float
    hbd: int
    hba: int
    logp: float
    rotatable: int

    def rules(self) -> list[bool]:
        return [self.mw <= 500.0, self.hbd <= 5, self.hba <= 10, self.logp <= 5.0, self.rotatable <= 10]


def molecular_weight(mol: Molecule3D) -> float:
    els = _elements(mol)
    h = int(implicit_hydrogens(mol).sum())
    return float(sum(ATOMIC_MASS[e] for e in els) + h * ATOMIC_MASS["H"])


def rotatable_bonds(mol: Molecule3D) -> int:
    bt = mol.bond_types
    deg = (bt != NONE).sum(1)
    ring = ring_bonds(mol)
    iu = np.triu_indices(mol.n_atoms, 1)
    single = bt[iu] == SINGLE
    ok = single & ~ring[iu] & (deg[iu[0]] >= 2) & (deg[iu[1]] >= 2)
    return int(ok.sum())


def lipinski_props(mol: Molecule3D) -> LipinskiProps:
    els = _elements(mol)
    h = implicit_hydrogens(mol)
    hbd = int(sum(h[i] for i, e in enumerate(els) if e in ("N", "O")))
    hba = sum(e in ("N", "O") for e in els)
    return LipinskiProps(molecular_weight(mol), hbd, hba, crippen_logp(mol), rotatable_bonds(mol))


def lipinski_count(mol: Molecule3D) -> int:
    """Number of satisfied rules among MW, HBD, HBA, LogP and rotatable bonds (0..5)."""
    return int(sum(lipinski_props(mol).rules()))


# --------------------------------------------------------------------------- high affinity


def high_affinity_pct(generated: Mapping[str, Sequence[float]], references: Mapping[str, float | None],
                      top: int = 5) -> float | None:
    """Share (in %) of each target's top-``top`` scores reaching that target's reference score.

    Targets without a reference are skipped with a warning; returns None when no
    molecule is compared.
    """
    hits = total = 0
    for target in sorted(generated):
        ref = references.get(target)
        if ref is None:
            logger.warning("target %s has no reference score; skipped", target)
            continue
        best = sorted((float(v) for v in generated[target]), reverse=True)[:top]
        hits += sum(v >= ref for v in best)
        total += len(best)
    if total == 0:
        return None
    return 100.0 * hits / total


# --------------------------------------------------------------------------- paired comparison


@dataclass
class PairedComparison:
    n: int
    mean_a: float
    mean_b: float
    mean_gap: float  # mean of a - b
    t_statistic: float
    p_value: float  # one-sided, alternative: mean(a - b) > 0


def paired_one_sided(a: Sequence[float], b: Sequence[float]) -> PairedComparison:
    """Paired t-test of ``mean(a) > mean(b)`` over matched samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise MetricsError("paired comparison needs two equal-length sequences with at least 2 entries")
    res = stats.ttest_rel(a, b, alternative="greater")
    return PairedComparison(int(a.size), float(a.mean()), float(b.mean()), float((a - b).mean()),
                            float(res.statistic), float(res.pvalue))


# --------------------------------------------------------------------------- run reports


@dataclass
class EvalReport:
    schema_version: int = REPORT_SCHEMA_VERSION
    n_samples: int = 0
    n_emitted: int = 0
    n_empty: int = 0
    validity_pct: float | None = None
    mean_affinity: float | None = None
    median_affinity: float | None = None
    high_affinity_pct: float | None = None
    mean_lipinski: float | None = None
    mean_logp: float | None = None
    qed: None = None
    sa: None = None
    missing_files: list[str] = field(default_factory=list)


def _mean(values: Sequence[float]) -> float | None:
    return float(statistics.fmean(values)) if values else None


def evaluate_run(run_dir: str | Path, references: Mapping[str, float] | None = None) -> EvalReport:
    """Aggregate a sampling run directory into ``report.json`` and ``report.csv``.

    Affinities come from the manifest (pK-like scale). The reference for the
    high-affinity share is taken from ``references`` keyed by the manifest's
    ``target`` field, falling back to the manifest's ``reference_affinity``.
    """
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    samples = sorted(manifest.get("samples", []), key=lambda r: r["index"])
    target = str(manifest.get("target", "run"))
    rep = EvalReport(n_samples=len(samples))
    rows = []
    affinities, valid_flags, lip, logps = [], [], [], []
    for rec in samples:
        row = {"index": rec["index"], "file": rec.get("file"), "empty": bool(rec.get("empty", False)),
               "valid": None, "oracle_affinity": rec.get("oracle_affinity"), "lipinski": None, "logp": None}
        if not rec.get("empty") and rec.get("file"):
            path = run_dir / rec["file"]
            if not path.exists():
                rep.missing_files.append(rec["file"])
            else:
                mol = parse_sdf_molecule(path.read_text())
                ok = valence_validity(mol)
                row["valid"] = ok
                valid_flags.append(ok)
                if rec.get("oracle_affinity") is not None:
                    affinities.append(float(rec["oracle_affinity"]))
                if ok:
                    row["lipinski"] = lipinski_count(mol)
                    row["logp"] = crippen_logp(mol)
                    lip.append(row["lipinski"])
                    logps.append(row["logp"])
        rows.append(row)
    rep.n_empty = sum(bool(r.get("empty")) for r in samples)
    rep.n_emitted = len(samples) - rep.n_empty
    rep.validity_pct = 100.0 * sum(valid_flags) / len(valid_flags) if valid_flags else None
    rep.mean_affinity = _mean(affinities)
    rep.median_affinity = float(statistics.median(affinities)) if affinities else None
    rep.mean_lipinski = _mean(lip)
    rep.mean_logp = _mean(logps)
    ref = (references or {}).get(target, manifest.get("reference_affinity"))
    if affinities and ref is not None:
        rep.high_affinity_pct = high_affinity_pct({target: affinities}, {target: float(ref)})

    atomic_write_bytes(run_dir / "report.json", (json.dumps(asdict(rep), indent=2, sort_keys=True) + "\n").encode())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["index"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in r.items()})
    atomic_write_bytes(run_dir / "report.csv", buf.getvalue().encode())
    return rep
