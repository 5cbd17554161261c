import math

import numpy as np
import pytest

from leop.chemdata import (AROMATIC, ATOM_VOCAB, BOND_VOCAB, NONE, SINGLE, ChemDataError, EmptyPocketError,
                           FakeAtomError, Molecule3D, ParseError, PartitionError, PocketContext, ToyDatasetSpec,
                           gen_toy_complex, generate_dataset, load_dataset, mask_size_choices, one_hot,
                           oracle_affinity, pad_with_fake_atoms, parse_pdb_pocket, parse_sdf_molecule,
                           partition_retain_mask, strip_fake, write_dataset, write_pdb_pocket, write_sdf)
from leop.metrics import valence_validity


def pdb_line(serial, name, x, y, z, element, res="ALA"):
    return (f"ATOM  {serial:5d} {name:<4} {res} A   1    "
            f"{x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00          {element:>2}")


def chain(n, element="C"):
    x = np.stack([np.arange(n) * 1.5, np.zeros(n), np.zeros(n)], 1)
    bonds = np.zeros((n, n), dtype=int)
    for i in range(n - 1):
        bonds[i, i + 1] = bonds[i + 1, i] = SINGLE
    return Molecule3D.from_indices(x, [ATOM_VOCAB.index(element)] * n, bonds)


ETHANE_SDF = """ethane
  hand

  2  1  0  0  0  0  0  0  0  0999 V2000
    0.0000    0.0000    0.0000 C   0  0  0  0  0  0  0  0  0  0  0  0
    1.5400    0.0000    0.0000 C   0  0  0  0  0  0  0  0  0  0  0  0
  1  2  1  0
M  END
$$$$
"""


def benzene_sdf():
    lines = ["benzene", "  hand", "", "  6  6  0  0  0  0  0  0  0  0999 V2000"]
    for k in range(6):
        a = k * math.pi / 3
        lines.append(f"{1.39 * math.cos(a):10.4f}{1.39 * math.sin(a):10.4f}{0.0:10.4f} C   0  0  0  0  0  0  0  0  0  0  0  0")
    for k in range(6):
        lines.append(f"{k + 1:3d}{(k + 1) % 6 + 1:3d}  4  0")
    return "\n".join(lines + ["M  END", "$$$$"]) + "\n"


# ---------------------------------------------------------------- vocab / types


def test_vocab_layout():
    assert ATOM_VOCAB.symbols[-1] == "FAKE" and ATOM_VOCAB.k == 7 and ATOM_VOCAB.fake == 6
    assert BOND_VOCAB.names[0] == "NONE" and BOND_VOCAB.k == 5


def test_molecule_rejects_asymmetric_bonds():
    b = np.zeros((2, 2), dtype=int)
    b[0, 1] = SINGLE
    with pytest.raises(ChemDataError):
        Molecule3D.from_indices(np.zeros((2, 3)), [0, 0], b).check()
    chain(3).check()


# ---------------------------------------------------------------- PDB


def test_pdb_single_nitrogen():
    p = parse_pdb_pocket(pdb_line(1, "N", 1.0, 2.0, 3.0, "N"))
    assert p.n_atoms == 1
    assert ATOM_VOCAB.symbols[int(p.v[0].argmax())] == "N"
    np.testing.assert_array_equal(p.x[0], [1.0, 2.0, 3.0])


def test_pdb_without_atoms_is_empty():
    with pytest.raises(EmptyPocketError):
        parse_pdb_pocket("HEADER    nothing here\nEND\n")


def test_pdb_skips_unknown_element():
    lines = [pdb_line(1, "N", 0, 0, 0, "N"), pdb_line(2, "CA", 1, 0, 0, "C"), pdb_line(3, "X1", 2, 0, 0, "X"),
             pdb_line(4, "O", 3, 0, 0, "O"), pdb_line(5, "SG", 4, 0, 0, "S")]
    p = parse_pdb_pocket("\n".join(lines))
    assert p.n_atoms == 4 and p.n_skipped == 1


def test_pdb_malformed_coordinate_reports_line():
    bad = pdb_line(2, "CA", 1, 0, 0, "C")
    bad = bad[:30] + "   abc.x" + bad[38:]
    with pytest.raises(ParseError) as err:
        parse_pdb_pocket("\n".join([pdb_line(1, "N", 0, 0, 0, "N"), bad]))
    assert err.value.line == 2


def test_pdb_element_fallback_and_roundtrip():
    line = pdb_line(1, "OG", 1.5, -2.25, 0.125, "")
    p = parse_pdb_pocket(line.rstrip())
    assert ATOM_VOCAB.symbols[int(p.v[0].argmax())] == "O"
    again = parse_pdb_pocket(write_pdb_pocket(p))
    np.testing.assert_array_equal(again.x, p.x)
    np.testing.assert_array_equal(again.v, p.v)


# ---------------------------------------------------------------- SDF


def test_sdf_ethane():
    m = parse_sdf_molecule(ETHANE_SDF)
    assert m.n_atoms == 2
    assert m.bond_types[0, 1] == SINGLE and m.bond_types[1, 0] == SINGLE


def test_sdf_benzene_aromatic_roundtrip():
    m = parse_sdf_molecule(benzene_sdf())
    bt = m.bond_types
    assert all(bt[k, (k + 1) % 6] == AROMATIC for k in range(6))
    assert (bt != NONE).sum() == 12
    again = parse_sdf_molecule(write_sdf(m))
    np.testing.assert_array_equal(again.b, m.b)
    np.testing.assert_array_equal(again.v, m.v)


def test_sdf_counts_mismatch():
    bad = ETHANE_SDF.replace("  2  1  0", "  3  1  0")
    with pytest.raises(ParseError):
        parse_sdf_molecule(bad)


def test_sdf_bond_out_of_range():
    bad = ETHANE_SDF.replace("  1  2  1  0", "  1  5  1  0")
    with pytest.raises(ParseError):
        parse_sdf_molecule(bad)


def test_sdf_coordinate_format():
    m = Molecule3D.from_indices(np.array([[1.23456, 0.0, 0.0]]), [0], np.zeros((1, 1), dtype=int))
    text = write_sdf(m)
    assert "1.2346" in text
    assert abs(parse_sdf_molecule(text).x[0, 0] - 1.23456) < 1e-4


def test_sdf_refuses_fake():
    m = Molecule3D.from_indices(np.zeros((1, 3)), [ATOM_VOCAB.fake], np.zeros((1, 1), dtype=int))
    with pytest.raises(FakeAtomError):
        write_sdf(m)


def test_generated_ligands_roundtrip():
    for rec in generate_dataset(ToyDatasetSpec(n_complexes=20, random_seed=11)):
        again = parse_sdf_molecule(write_sdf(rec.ligand))
        np.testing.assert_array_equal(again.v, rec.ligand.v)
        np.testing.assert_array_equal(again.b, rec.ligand.b)
        assert np.abs(again.x - rec.ligand.x).max() <= 5e-5 + 1e-12


# ---------------------------------------------------------------- partition / padding


def test_partition_chain():
    part = partition_retain_mask(chain(5), [3, 4])
    assert part.n_mask == 2 and len(part.retained_indices) == 3
    np.testing.assert_array_equal(part.mask, [False, False, False, True, True])


def test_partition_rejects_all_or_none():
    with pytest.raises(PartitionError):
        partition_retain_mask(chain(3), [0, 1, 2])
    with pytest.raises(PartitionError):
        partition_retain_mask(chain(3), [])


def test_partition_linker_two_fragments():
    part = partition_retain_mask(chain(3), [1])
    np.testing.assert_array_equal(part.retained_indices, [0, 2])
    assert part.ligand.bond_types[0, 2] == NONE


def test_padding_rules():
    mol = chain(5)
    part = partition_retain_mask(mol, [3, 4])
    padded = pad_with_fake_atoms(part, 5)
    assert padded.n_mask == 5 and padded.ligand.n_atoms == 8
    fakes = np.flatnonzero(padded.ligand.types == ATOM_VOCAB.fake)
    np.testing.assert_array_equal(fakes, [5, 6, 7])
    centroid = mol.x[:3].mean(0)
    np.testing.assert_array_equal(padded.ligand.x[5:], np.repeat(centroid[None], 3, 0))
    bt = padded.ligand.bond_types
    assert (bt[fakes] == NONE).all() and (bt[:, fakes] == NONE).all()
    np.testing.assert_array_equal(padded.ligand.b[:5, :5], mol.b)
    same = pad_with_fake_atoms(part, 2)
    np.testing.assert_array_equal(same.ligand.x, part.ligand.x)
    np.testing.assert_array_equal(same.mask, part.mask)
    with pytest.raises(PartitionError):
        pad_with_fake_atoms(part, 1)


def test_strip_fake():
    part = pad_with_fake_atoms(partition_retain_mask(chain(2), [1]), 4)
    stripped = strip_fake(part.ligand)
    assert stripped.n_atoms == 2
    np.testing.assert_array_equal(stripped.b, chain(2).b)
    no_fake = chain(4)
    np.testing.assert_array_equal(strip_fake(no_fake).b, no_fake.b)


# ---------------------------------------------------------------- toy generator


def test_toy_determinism():
    spec = ToyDatasetSpec()
    a, b = gen_toy_complex(7, spec), gen_toy_complex(7, spec)
    np.testing.assert_array_equal(a[0].x, b[0].x)
    np.testing.assert_array_equal(a[1].x, b[1].x)
    np.testing.assert_array_equal(a[1].b, b[1].b)
    assert a[2] == b[2]


def test_toy_ligands_valid_and_masks_in_range():
    spec = ToyDatasetSpec(n_complexes=1000, random_seed=5)
    recs = generate_dataset(spec)
    assert all(valence_validity(r.ligand) for r in recs)
    for r in recs:
        n = r.ligand.n_atoms
        assert spec.ligand_size_range[0] <= n <= spec.ligand_size_range[1]
        assert len(r.mask_indices) in mask_size_choices(n, spec.mask_fraction_range)


def test_mask_size_choices_arithmetic():
    assert mask_size_choices(10, (0.2, 0.4)) == [2, 3, 4]


def test_scaffold_and_linker_partitions():
    for task, n_comp in (("scaffold", 1), ("linker", 2)):
        spec = ToyDatasetSpec(n_complexes=30, task=task, random_seed=2)
        for r in generate_dataset(spec):
            keep = [i for i in range(r.ligand.n_atoms) if i not in set(r.mask_indices)]
            adj = r.ligand.bond_types[np.ix_(keep, keep)] != NONE
            seen, comps = set(), 0
            for s in range(len(keep)):
                if s in seen:
                    continue
                comps += 1
                stack = [s]
                seen.add(s)
                while stack:
                    u = stack.pop()
                    for w in np.flatnonzero(adj[u]):
                        if int(w) not in seen:
                            seen.add(int(w))
                            stack.append(int(w))
            assert comps == n_comp


def test_spec_validation_names_field():
    with pytest.raises(ChemDataError, match="ligand_size_range"):
        ToyDatasetSpec(ligand_size_range=(2, 4))
    with pytest.raises(ChemDataError, match="bogus"):
        ToyDatasetSpec.from_dict({"bogus": 1})


def test_dataset_roundtrip(tmp_path, toy_records):
    write_dataset(toy_records, tmp_path)
    back = load_dataset(tmp_path / "manifest.json")
    assert len(back) == len(toy_records)
    for a, b in zip(toy_records, back):
        assert a.mask_indices == b.mask_indices
        np.testing.assert_array_equal(a.ligand.b, b.ligand.b)
        assert np.abs(a.pocket.x - b.pocket.x).max() <= 5e-4 + 1e-12
        assert b.oracle == a.oracle


def test_fake_bond_coupling_in_padded_data(toy_records):
    for r in toy_records:
        padded = pad_with_fake_atoms(r.masked(), r.masked().n_mask + 3)
        fake = padded.ligand.types == ATOM_VOCAB.fake
        isolated = (padded.ligand.bond_types == NONE).all(1)
        np.testing.assert_array_equal(fake, isolated)


# ---------------------------------------------------------------- oracle


def _pocket(points, elements=None):
    points = np.asarray(points, dtype=float)
    elements = elements or ["C"] * len(points)
    return PocketContext(points, one_hot([ATOM_VOCAB.index(e) for e in elements], ATOM_VOCAB.k))


def _atoms(points):
    points = np.asarray(points, dtype=float)
    return Molecule3D.from_indices(points, [0] * len(points), np.zeros((len(points),) * 2, dtype=int))


def test_oracle_far_ligand():
    assert oracle_affinity(_pocket([[0, 0, 0], [1, 0, 0]]), _atoms([[100, 0, 0], [101, 0, 0]])) < 0.01


def test_oracle_steric_penalty():
    pocket = _pocket([[0, 0, 0], [0, 3, 0], [3, 0, 0]])
    overlap = oracle_affinity(pocket, _atoms([[0, 0, 0]]))
    apart = oracle_affinity(pocket, _atoms([[0, 0, 3.0]]))
    assert overlap < apart


def test_oracle_hand_fixture():
    pocket = [[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 4.0, 0.0]]
    lig = [[1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [5.0, 5.0, 5.0]]
    r, sat, clash_d = 2.5, 2.0, 1.2
    credits, clashes = [], []
    for a in lig:
        c, cl = 0.0, 0.0
        for p in pocket:
            d = math.dist(a, p)
            c += math.exp(-d * d / (2 * r * r))
            cl += max(0.0, clash_d - d) ** 2
        credits.append(1 - math.exp(-c / sat))
        clashes.append(cl)
    expected = min(max(sum(credits) / 3 - sum(clashes) / 3, 0.0), 1.0)
    assert oracle_affinity(_pocket(pocket), _atoms(lig)) == pytest.approx(expected, abs=1e-12)


def test_oracle_rigid_invariance(toy_records):
    from conftest import rotation

    rng = np.random.default_rng(0)
    for r in toy_records:
        q, tau = rotation(rng), rng.normal(size=3) * 5
        p2 = PocketContext(r.pocket.x @ q.T + tau, r.pocket.v)
        m2 = Molecule3D(r.ligand.x @ q.T + tau, r.ligand.v, r.ligand.b)
        assert abs(oracle_affinity(p2, m2) - oracle_affinity(r.pocket, r.ligand)) < 1e-9


def test_oracle_refuses_fake():
    m = Molecule3D.from_indices(np.zeros((1, 3)), [ATOM_VOCAB.fake], np.zeros((1, 1), dtype=int))
    with pytest.raises(FakeAtomError):
        oracle_affinity(_pocket([[0, 0, 0]]), m)
