"""Domain types, file formats, fake-atom padding, toy complexes and the geometric oracle.

Ligands are heavy-atom graphs stored densely: coordinates ``x`` (N, 3), one-hot
atom types ``v`` (N, K_v) and a symmetric one-hot bond tensor ``b`` (N, N, K_b).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ChemDataError(ValueError):
    pass


class ParseError(ChemDataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class EmptyPocketError(ChemDataError):
    pass


class PartitionError(ChemDataError):
    pass


class FakeAtomError(ChemDataError):
    pass


# --------------------------------------------------------------------------- vocabularies


@dataclass(frozen=True)
class AtomVocab:
    """Element symbols followed by the reserved FAKE padding category."""

    elements: tuple[str, ...] = ("C", "N", "O", "F", "S", "Cl")

    def __post_init__(self):
        if "FAKE" in self.elements:
            raise ValueError("FAKE is reserved and appended automatically")
        if len(self.elements) < 1:
            raise ValueError("need at least one element")

    @property
    def symbols(self) -> tuple[str, ...]:
        return self.elements + ("FAKE",)

    @property
    def k(self) -> int:
        return len(self.elements) + 1

    @property
    def fake(self) -> int:
        return len(self.elements)

    def index(self, symbol: str) -> int:
        return self.symbols.index(symbol)


@dataclass(frozen=True)
class BondVocab:
    names: tuple[str, ...] = ("NONE", "SINGLE", "DOUBLE", "TRIPLE", "AROMATIC")

    def __post_init__(self):
        if self.names[0] != "NONE":
            raise ValueError("NONE must be bond category 0")

    @property
    def k(self) -> int:
        return len(self.names)


ATOM_VOCAB = AtomVocab()
BOND_VOCAB = BondVocab()
NONE, SINGLE, DOUBLE, TRIPLE, AROMATIC = range(5)

# bond category -> contribution to an atom's bond-order sum
BOND_ORDER = np.array([0.0, 1.0, 2.0, 3.0, 1.5])
# V2000 bond order field <-> bond category
_SDF_TO_BOND = {1: SINGLE, 2: DOUBLE, 3: TRIPLE, 4: AROMATIC}
_BOND_TO_SDF = {v: k for k, v in _SDF_TO_BOND.items()}


def normalize_element(symbol: str) -> str:
    s = symbol.strip()
    return s[:1].upper() + s[1:].lower() if s else s


def one_hot(indices: Sequence[int] | np.ndarray, k: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros(idx.shape + (k,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


# --------------------------------------------------------------------------- domain types


@dataclass
class Molecule3D:
    x: np.ndarray
    v: np.ndarray
    b: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 3)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)

    @classmethod
    def from_indices(cls, x, types, bonds, name: str = "",
                     k_v: int = ATOM_VOCAB.k, k_b: int = BOND_VOCAB.k) -> "Molecule3D":
        """Build from integer atom types and an (N, N) integer bond matrix."""
        bonds = np.asarray(bonds, dtype=np.int64)
        return cls(np.asarray(x, dtype=np.float64), one_hot(types, k_v), one_hot(bonds, k_b), name)

    @property
    def n_atoms(self) -> int:
        return self.x.shape[0]

    @property
    def types(self) -> np.ndarray:
        return self.v.argmax(-1) if self.n_atoms else np.zeros(0, dtype=np.int64)

    @property
    def bond_types(self) -> np.ndarray:
        if not self.n_atoms:
            return np.zeros((0, 0), dtype=np.int64)
        return self.b.argmax(-1)

    def elements(self, vocab: AtomVocab = ATOM_VOCAB) -> list[str]:
        return [vocab.symbols[i] for i in self.types]

    def has_fake(self, vocab: AtomVocab = ATOM_VOCAB) -> bool:
        return bool(np.any(self.types == vocab.fake))

    def check(self) -> None:
        """Raise ChemDataError if any structural invariant is violated."""
        n = self.n_atoms
        if self.v.shape[0] != n or self.b.shape[:2] != (n, n):
            raise ChemDataError("inconsistent shapes")
        if not np.all(np.isfinite(self.x)):
            raise ChemDataError("non-finite coordinates")
        if n and not (np.allclose(self.v.sum(-1), 1.0) and np.allclose(self.b.sum(-1), 1.0)):
            raise ChemDataError("one-hot rows must sum to 1")
        if not np.array_equal(self.b, self.b.transpose(1, 0, 2)):
            raise ChemDataError("bond tensor not symmetric")
        if n and np.any(self.bond_types[np.diag_indices(n)] != NONE):
            raise ChemDataError("diagonal bonds must be NONE")

    def copy(self) -> "Molecule3D":
        return Molecule3D(self.x.copy(), self.v.copy(), self.b.copy(), self.name)

    def subset(self, keep: Sequence[int] | np.ndarray) -> "Molecule3D":
        keep = np.asarray(keep, dtype=np.int64)
        return Molecule3D(self.x[keep], self.v[keep], self.b[np.ix_(keep, keep)], self.name)


@dataclass
class PocketContext:
    x: np.ndarray
    v: np.ndarray
    pocket_id: str = ""
    n_skipped: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 3)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.x.shape[0] < 1:
            raise EmptyPocketError("pocket has no atoms")
        if not np.all(np.isfinite(self.x)):
            raise ChemDataError("non-finite pocket coordinates")

    @property
    def n_atoms(self) -> int:
        return self.x.shape[0]

    @property
    def types(self) -> np.ndarray:
        return self.v.argmax(-1)


@dataclass
class MaskedLigand:
    """Ligand plus the retain/mask partition; ``mask`` is true on generated slots."""

    ligand: Molecule3D
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.ligand.n_atoms,):
            raise PartitionError("mask indicator length must equal atom count")
        if self.mask.all() or not self.mask.any():
            raise PartitionError("need at least one retained and one masked atom")

    @property
    def n_mask(self) -> int:
        return int(self.mask.sum())

    @property
    def retained_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    @property
    def mask_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def retain_centroid(self) -> np.ndarray:
        return self.ligand.x[~self.mask].mean(0)

    def diffused_pairs(self) -> np.ndarray:
        """Boolean (N, N) matrix of bond entries touched by diffusion (off-diagonal, any end masked)."""
        m = self.mask
        pair = m[:, None] | m[None, :]
        np.fill_diagonal(pair, False)
        return pair


@dataclass
class MaskedComplex(MaskedLigand):
    pocket: PocketContext = None  # type: ignore[assignment]

    @classmethod
    def build(cls, pocket: PocketContext, part: MaskedLigand) -> "MaskedComplex":
        return cls(part.ligand, part.mask, pocket)


@dataclass
class ToyDatasetSpec:
    n_complexes: int = 200
    pocket_size_range: tuple[int, int] = (20, 28)
    ligand_size_range: tuple[int, int] = (6, 10)
    mask_fraction_range: tuple[float, float] = (0.2, 0.4)
    random_seed: int = 0
    contact_radius: float = 2.5
    task: str = "scaffold"

    def __post_init__(self):
        self.pocket_size_range = tuple(self.pocket_size_range)
        self.ligand_size_range = tuple(self.ligand_size_range)
        self.mask_fraction_range = tuple(self.mask_fraction_range)
        if self.n_complexes < 1:
            raise ChemDataError("n_complexes: must be >= 1")
        for name in ("pocket_size_range", "ligand_size_range", "mask_fraction_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ChemDataError(f"{name}: empty range ({lo}, {hi})")
        if self.pocket_size_range[0] < 1:
            raise ChemDataError("pocket_size_range: pockets need >= 1 atom")
        if self.ligand_size_range[0] < 3:
            raise ChemDataError("ligand_size_range: ligands need >= 3 atoms")
        lo, hi = self.mask_fraction_range
        if not (0.0 < lo and hi < 1.0):
            raise ChemDataError("mask_fraction_range: must lie in (0, 1)")
        if self.contact_radius <= 0:
            raise ChemDataError("contact_radius: must be positive")
        if self.task not in ("scaffold", "linker", "mixed"):
            raise ChemDataError(f"task: unknown task {self.task!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "ToyDatasetSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ChemDataError(f"{sorted(unknown)[0]}: unknown field")
        return cls(**data)


# --------------------------------------------------------------------------- PDB


def parse_pdb_pocket(text: str | Iterable[str], vocab: AtomVocab = ATOM_VOCAB,
                     pocket_id: str = "") -> PocketContext:
    """Read ATOM/HETATM records from fixed-column PDB text.

    Elements come from columns 77-78, falling back to the first letter of the atom
    name. Records whose element is outside ``vocab`` (hydrogens, metals, ...) are
    skipped and counted in ``n_skipped``. Only the first alternate location of an
    atom is kept.
    """
    lines = text.splitlines() if isinstance(text, str) else list(text)
    coords, types = [], []
    skipped = 0
    seen_alt: dict[tuple, str] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.startswith(("ATOM  ", "HETATM")):
            continue
        line = line.rstrip("\n")
        altloc = line[16:17].strip()
        if altloc:
            key = (line[12:16], line[17:20], line[21:22], line[22:27])
            first = seen_alt.setdefault(key, altloc)
            if altloc != first:
                continue
        try:
            xyz = [float(line[30:38]), float(line[38:46]), float(line[46:54])]
        except ValueError:
            raise ParseError(f"malformed coordinate field {line[30:54]!r}", lineno) from None
        element = normalize_element(line[76:78]) if len(line) >= 77 else ""
        if not element:
            name = line[12:16].strip().lstrip("0123456789")
            element = name[:1].upper()
        if element not in vocab.elements:
            skipped += 1
            continue
        coords.append(xyz)
        types.append(vocab.index(element))
    if skipped:
        logger.warning("skipped %d PDB records with unsupported elements", skipped)
    if not coords:
        raise EmptyPocketError("no usable ATOM/HETATM records")
    return PocketContext(np.array(coords), one_hot(types, vocab.k), pocket_id, skipped)


def write_pdb_pocket(pocket: PocketContext, vocab: AtomVocab = ATOM_VOCAB) -> str:
    out = []
    for i, (xyz, t) in enumerate(zip(pocket.x, pocket.types), start=1):
        el = vocab.symbols[t]
        name = f" {el:<3}" if len(el) == 1 else f"{el:<4}"
        out.append(
            f"ATOM  {i:5d} {name} UNK A{1:4d}    "
            f"{xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}{1.0:6.2f}{0.0:6.2f}          {el.upper():>2}"
        )
    out.append("END")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------- SDF V2000


def _int_field(line: str, lo: int, hi: int, lineno: int, what: str) -> int:
    try:
        return int(line[lo:hi])
    except ValueError:
        raise ParseError(f"bad {what} field {line[lo:hi]!r}", lineno) from None


def parse_sdf_molecule(text: str, vocab: AtomVocab = ATOM_VOCAB,
                       bond_vocab: BondVocab = BOND_VOCAB) -> Molecule3D:
    """Parse the first V2000 connection table in ``text``.

    Explicit hydrogens are dropped together with their bonds; any other element
    outside ``vocab`` is an error.
    """
    lines = text.splitlines()
    if len(lines) < 4:
        raise ParseError("truncated header", len(lines))
    name = lines[0].strip()
    counts = lines[3]
    if "V3000" in counts:
        raise ParseError("V3000 not supported", 4)
    n_atoms = _int_field(counts, 0, 3, 4, "atom count")
    n_bonds = _int_field(counts, 3, 6, 4, "bond count")
    end = 4 + n_atoms + n_bonds
    if len(lines) <= end or not lines[end].startswith("M  END"):
        # "M  END" may be preceded by property lines; only accept those.
        k = end
        while k < len(lines) and lines[k].startswith("M  ") and not lines[k].startswith("M  END"):
            k += 1
        if k >= len(lines) or not lines[k].startswith("M  END"):
            raise ParseError("counts line inconsistent with atom/bond blocks", 4)

    coords, symbols = [], []
    for i in range(n_atoms):
        lineno = 5 + i
        line = lines[4 + i]
        try:
            xyz = [float(line[0:10]), float(line[10:20]), float(line[20:30])]
        except ValueError:
            raise ParseError("counts line inconsistent with atom block (bad atom line)", lineno) from None
        sym = normalize_element(line[31:34])
        if not sym or sym.startswith("M"):
            raise ParseError("counts line inconsistent with atom block", lineno)
        coords.append(xyz)
        symbols.append(sym)

    keep = [i for i, s in enumerate(symbols) if s != "H"]
    remap = {old: new for new, old in enumerate(keep)}
    for i in keep:
        if symbols[i] not in vocab.elements:
            raise ParseError(f"unsupported element {symbols[i]!r}", 5 + i)

    n = len(keep)
    bonds = np.zeros((n, n), dtype=np.int64)
    for j in range(n_bonds):
        lineno = 5 + n_atoms + j
        line = lines[4 + n_atoms + j]
        a = _int_field(line, 0, 3, lineno, "bond atom")
        c = _int_field(line, 3, 6, lineno, "bond atom")
        order = _int_field(line, 6, 9, lineno, "bond order")
        if not (1 <= a <= n_atoms and 1 <= c <= n_atoms) or a == c:
            raise ParseError(f"bond references atom out of range ({a}, {c})", lineno)
        if order not in _SDF_TO_BOND:
            raise ParseError(f"unsupported bond order {order}", lineno)
        if a - 1 not in remap or c - 1 not in remap:
            continue
        ia, ic = remap[a - 1], remap[c - 1]
        bonds[ia, ic] = bonds[ic, ia] = _SDF_TO_BOND[order]

    types = [vocab.index(symbols[i]) for i in keep]
    x = np.array([coords[i] for i in keep]).reshape(-1, 3)
    return Molecule3D(x, one_hot(types, vocab.k), one_hot(bonds, bond_vocab.k), name)


def write_sdf(mol: Molecule3D, vocab: AtomVocab = ATOM_VOCAB) -> str:
    """Serialize as a single V2000 record; coordinates use 4 decimals."""
    if mol.has_fake(vocab):
        raise FakeAtomError("molecule contains FAKE atoms; call strip_fake first")
    bt = mol.bond_types
    pairs = [(i, j) for i in range(mol.n_atoms) for j in range(i + 1, mol.n_atoms) if bt[i, j] != NONE]
    lines = [mol.name, "  leop", "",
             f"{mol.n_atoms:3d}{len(pairs):3d}  0  0  0  0  0  0  0  0999 V2000"]
    for xyz, sym in zip(mol.x, mol.elements(vocab)):
        lines.append(f"{xyz[0]:10.4f}{xyz[1]:10.4f}{xyz[2]:10.4f} {sym:<3} 0  0  0  0  0  0  0  0  0  0  0  0")
    for i, j in pairs:
        lines.append(f"{i + 1:3d}{j + 1:3d}{_BOND_TO_SDF[int(bt[i, j])]:3d}  0")
    lines += ["M  END", "$$$$"]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- partition / padding


def partition_retain_mask(mol: Molecule3D, mask_indices: Iterable[int]) -> MaskedLigand:
    idx = sorted(set(int(i) for i in mask_indices))
    if not idx:
        raise PartitionError("mask_indices is empty")
    if idx[0] < 0 or idx[-1] >= mol.n_atoms:
        raise PartitionError("mask index out of range")
    if len(idx) == mol.n_atoms:
        raise PartitionError("mask covers every atom; nothing retained")
    mask = np.zeros(mol.n_atoms, dtype=bool)
    mask[idx] = True
    return MaskedLigand(mol.copy(), mask)


def pad_with_fake_atoms(part: MaskedLigand, n_max: int, vocab: AtomVocab = ATOM_VOCAB) -> MaskedLigand:
    """Append FAKE mask slots until the mask holds ``n_max`` atoms."""
    extra = n_max - part.n_mask
    if extra < 0:
        raise PartitionError(f"n_max={n_max} below current mask count {part.n_mask}")
    if extra == 0:
        return MaskedLigand(part.ligand.copy(), part.mask.copy())
    lig = part.ligand
    n, k_b = lig.n_atoms, lig.b.shape[-1]
    x = np.vstack([lig.x, np.repeat(part.retain_centroid[None], extra, 0)])
    v = np.vstack([lig.v, one_hot([vocab.fake] * extra, lig.v.shape[-1])])
    b = np.zeros((n + extra, n + extra, k_b))
    b[..., NONE] = 1.0
    b[:n, :n] = lig.b
    mask = np.concatenate([part.mask, np.ones(extra, dtype=bool)])
    return MaskedLigand(Molecule3D(x, v, b, lig.name), mask)


def strip_fake(mol: Molecule3D, vocab: AtomVocab = ATOM_VOCAB) -> Molecule3D:
    """Drop atoms whose argmax type is FAKE, together with their bond rows and columns."""
    keep = np.flatnonzero(mol.types != vocab.fake)
    return mol.subset(keep)


# --------------------------------------------------------------------------- toy complexes

# valence used while growing toy ligands (sulfur kept divalent)
_GROW_VALENCE = {"C": 4, "N": 3, "O": 2, "F": 1, "S": 2, "Cl": 1}
_GROW_WEIGHTS = {"C": 0.58, "N": 0.14, "O": 0.14, "F": 0.05, "S": 0.04, "Cl": 0.05}
_COVALENT_RADIUS = {"C": 0.76, "N": 0.71, "O": 0.66, "F": 0.57, "S": 1.05, "Cl": 1.02}
_ORDER_SHRINK = {SINGLE: 1.0, DOUBLE: 0.87, TRIPLE: 0.78}


def _bond_length(a: str, b: str, order: int) -> float:
    return (_COVALENT_RADIUS[a] + _COVALENT_RADIUS[b]) * _ORDER_SHRINK[order]


_POCKET_WEIGHTS = {"C": 0.62, "N": 0.18, "O": 0.16, "S": 0.04}


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _unit(rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal(3)
    return u / np.linalg.norm(u)


def _grow_ligand(rng: np.random.Generator, n: int, vocab: AtomVocab):
    elements: list[str] = []
    pos: list[np.ndarray] = []
    bonds = np.zeros((n, n), dtype=np.int64)

    def bond_sum(i):
        return BOND_ORDER[bonds[i, : len(elements)]].sum()

    if n >= 6 and rng.random() < 0.4:
        ring_n = rng.random() < 0.3
        for k in range(6):
            ang = k * math.pi / 3
            elements.append("N" if ring_n and k == 3 else "C")
            pos.append(1.39 * np.array([math.cos(ang), math.sin(ang), 0.0]))
        for k in range(6):
            a, c = k, (k + 1) % 6
            bonds[a, c] = bonds[c, a] = AROMATIC
    else:
        elements.append("C")
        pos.append(np.zeros(3))

    choices = list(_GROW_WEIGHTS)
    weights = np.array([_GROW_WEIGHTS[c] for c in choices])
    attempts = 0
    while len(elements) < n and attempts < 400:
        attempts += 1
        free = [i for i, e in enumerate(elements) if _GROW_VALENCE[e] - bond_sum(i) >= 1 - 1e-9]
        if not free:
            break
        parent = int(rng.choice(free))
        child = str(rng.choice(choices, p=weights / weights.sum()))
        parent_free = _GROW_VALENCE[elements[parent]] - bond_sum(parent)
        order = SINGLE
        if (parent_free >= 2 and _GROW_VALENCE[child] >= 2 and rng.random() < 0.15):
            order = DOUBLE
        length = _bond_length(elements[parent], child, order)
        nbrs = [j for j in range(len(elements)) if bonds[parent, j] != NONE]
        placed = None
        for _ in range(40):
            cand = pos[parent] + length * _unit(rng)
            d = np.linalg.norm(np.array(pos) - cand, axis=1)
            d[parent] = np.inf
            if d.min() < 2.3:
                continue
            ok = True
            for j in nbrs:
                u = pos[j] - pos[parent]
                w = cand - pos[parent]
                cosang = u @ w / (np.linalg.norm(u) * np.linalg.norm(w))
                if cosang > math.cos(math.radians(105)):
                    ok = False
                    break
            if ok:
                placed = cand
                break
        if placed is None:
            continue
        i = len(elements)
        elements.append(child)
        pos.append(placed)
        bonds[parent, i] = bonds[i, parent] = order
    m = len(elements)
    return [vocab.index(e) for e in elements], np.array(pos), bonds[:m, :m]


def _components(adj: np.ndarray, nodes: Iterable[int]) -> list[set[int]]:
    nodes = set(nodes)
    comps = []
    while nodes:
        start = nodes.pop()
        comp, stack = {start}, [start]
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(adj[i]):
                j = int(j)
                if j in nodes:
                    nodes.remove(j)
                    comp.add(j)
                    stack.append(j)
        comps.append(comp)
    return comps


def _choose_mask(rng: np.random.Generator, bonds: np.ndarray, m: int, task: str) -> list[int] | None:
    n = bonds.shape[0]
    adj = bonds != NONE
    deg = adj.sum(1)
    for _ in range(200):
        if task == "linker":
            inner = np.flatnonzero(deg >= 2)
            if inner.size == 0:
                return None
            mask = {int(rng.choice(inner))}
        else:
            leaves = np.flatnonzero(deg == 1)
            pool = leaves if leaves.size else np.arange(n)
            mask = {int(rng.choice(pool))}
        while len(mask) < m:
            frontier = sorted({int(j) for i in mask for j in np.flatnonzero(adj[i])} - mask)
            rng.shuffle(frontier)
            added = False
            for j in frontier:
                rest = set(range(n)) - mask - {j}
                if not rest:
                    continue
                comps = _components(adj, rest)
                if task != "linker" and len(comps) != 1:
                    continue
                mask.add(j)
                added = True
                break
            if not added:
                break
        if len(mask) != m:
            continue
        comps = _components(adj, set(range(n)) - mask)
        if task == "linker" and len(comps) == 2:
            return sorted(mask)
        if task != "linker" and len(comps) == 1:
            return sorted(mask)
    return None


def mask_size_choices(n_atoms: int, fraction_range: tuple[float, float]) -> list[int]:
    lo = max(1, math.ceil(fraction_range[0] * n_atoms - 1e-9))
    hi = min(n_atoms - 1, math.floor(fraction_range[1] * n_atoms + 1e-9))
    if lo > hi:
        return [min(max(1, round(fraction_range[0] * n_atoms)), n_atoms - 1)]
    return list(range(lo, hi + 1))


def gen_toy_complex(seed: int, spec: ToyDatasetSpec, vocab: AtomVocab = ATOM_VOCAB):
    """Generate one synthetic (pocket, ligand, mask_indices) triple.

    The ligand is grown as a valence-respecting tree (optionally around an aromatic
    six-ring), centred, randomly rotated and offset a little inside a partial shell
    of pocket atoms. Deterministic in ``(spec.random_seed, seed)``.
    """
    rng = np.random.default_rng([spec.random_seed, seed])
    task = spec.task
    if task == "mixed":
        task = "linker" if rng.random() < 0.5 else "scaffold"
    while True:
        n = int(rng.integers(spec.ligand_size_range[0], spec.ligand_size_range[1] + 1))
        types, pos, bonds = _grow_ligand(rng, n, vocab)
        if len(types) < spec.ligand_size_range[0]:
            continue
        m = int(rng.choice(mask_size_choices(len(types), spec.mask_fraction_range)))
        mask = _choose_mask(rng, bonds, m, task)
        if mask is None and task == "linker":
            mask = _choose_mask(rng, bonds, m, "scaffold")
        if mask is not None:
            break

    pos = (pos - pos.mean(0)) @ _random_rotation(rng).T
    radius = np.linalg.norm(pos, axis=1).max()
    n_p = int(rng.integers(spec.pocket_size_range[0], spec.pocket_size_range[1] + 1))
    opening_axis = _unit(rng)
    opening = math.cos(math.radians(rng.uniform(30.0, 70.0)))
    shell = []
    while len(shell) < n_p:
        u = _unit(rng)
        if u @ opening_axis > opening:
            continue
        shell.append(u * (radius + rng.uniform(3.0, 4.5)))
    p_elements = list(_POCKET_WEIGHTS)
    p_w = np.array([_POCKET_WEIGHTS[e] for e in p_elements])
    p_types = [vocab.index(str(rng.choice(p_elements, p=p_w / p_w.sum()))) for _ in range(n_p)]
    offset = _unit(rng) * rng.uniform(0.0, 1.5)
    pocket = PocketContext(np.array(shell), one_hot(p_types, vocab.k), f"toy-{spec.random_seed}-{seed}")
    mol = Molecule3D.from_indices(pos + offset, types, bonds, name=f"toy-{spec.random_seed}-{seed}",
                                  k_v=vocab.k)
    return pocket, mol, mask


# --------------------------------------------------------------------------- oracle

# Geometric stand-in for an external affinity model. All constants live here.
ORACLE_CONTACT_RADIUS = 2.5  # Angstrom, width of the Gaussian contact kernel
ORACLE_SATURATION = 2.0  # contact count giving 1 - 1/e of full per-atom credit
ORACLE_CLASH_DISTANCE = 1.2  # Angstrom
ORACLE_CLASH_WEIGHT = 1.0


def oracle_affinity(pocket: PocketContext, mol: Molecule3D,
                    contact_radius: float = ORACLE_CONTACT_RADIUS,
                    vocab: AtomVocab = ATOM_VOCAB) -> float:
    """Normalized contact score in [0, 1].

    Per ligand atom ``i``: ``c_i = sum_j exp(-d_ij^2 / (2 r^2))`` over pocket atoms,
    credit ``1 - exp(-c_i / ORACLE_SATURATION)``, and a clash term
    ``sum_j max(0, ORACLE_CLASH_DISTANCE - d_ij)^2``. The score is the mean credit
    minus ``ORACLE_CLASH_WEIGHT`` times the mean clash term, clipped to [0, 1].
    """
    if mol.has_fake(vocab):
        raise FakeAtomError("oracle_affinity needs a molecule without FAKE atoms")
    if mol.n_atoms == 0:
        return 0.0
    d = np.linalg.norm(mol.x[:, None, :] - pocket.x[None, :, :], axis=-1)
    contacts = np.exp(-(d ** 2) / (2.0 * contact_radius ** 2)).sum(1)
    credit = 1.0 - np.exp(-contacts / ORACLE_SATURATION)
    clash = (np.maximum(0.0, ORACLE_CLASH_DISTANCE - d) ** 2).sum(1)
    return float(np.clip(credit.mean() - ORACLE_CLASH_WEIGHT * clash.mean(), 0.0, 1.0))


# --------------------------------------------------------------------------- datasets on disk


@dataclass
class ToyRecord:
    pocket: PocketContext
    ligand: Molecule3D
    mask_indices: list[int]
    oracle: float | None = None
    key: str = ""

    def masked(self) -> MaskedComplex:
        return MaskedComplex.build(self.pocket, partition_retain_mask(self.ligand, self.mask_indices))


def generate_dataset(spec: ToyDatasetSpec) -> list[ToyRecord]:
    records = []
    for i in range(spec.n_complexes):
        pocket, mol, mask = gen_toy_complex(i, spec)
        records.append(ToyRecord(pocket, mol, mask, oracle_affinity(pocket, mol, spec.contact_radius),
                                 key=f"complex_{i:04d}"))
    return records


def write_dataset(records: Sequence[ToyRecord], out_dir: str | Path) -> Path:
    """Write pockets (PDB), ligands (SDF) and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "pockets").mkdir(parents=True, exist_ok=True)
    (out / "ligands").mkdir(parents=True, exist_ok=True)
    manifest = []
    for rec in records:
        pf = f"pockets/{rec.key}.pdb"
        lf = f"ligands/{rec.key}.sdf"
        (out / pf).write_text(write_pdb_pocket(rec.pocket))
        (out / lf).write_text(write_sdf(rec.ligand))
        entry = {"pocket_file": pf, "ligand_file": lf, "mask_indices": [int(i) for i in rec.mask_indices]}
        if rec.oracle is not None:
            entry["oracle_affinity"] = rec.oracle
        manifest.append(entry)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_dataset(manifest_path: str | Path) -> list[ToyRecord]:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    base = path.parent
    records = []
    for entry in json.loads(path.read_text()):
        pf, lf = entry["pocket_file"], entry["ligand_file"]
        pocket = parse_pdb_pocket((base / pf).read_text(), pocket_id=Path(pf).stem)
        lig = parse_sdf_molecule((base / lf).read_text())
        records.append(ToyRecord(pocket, lig, list(entry["mask_indices"]), entry.get("oracle_affinity"),
                                 key=Path(lf).stem))
    return records
