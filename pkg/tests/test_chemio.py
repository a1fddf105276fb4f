import logging
import pytest

from pyequicpi import *

from structures import amide_ligand, pdb_atom_line, protein_pdb_text, sdf_record, write_manifest

METHANE = sdf_record(
    "methane",
    [("C", 0.0, 0.0, 0.0), ("H", 0.63, 0.63, 0.63), ("H", -0.63, -0.63, 0.63), ("H", -0.63, 0.63, -0.63), ("H", 0.63, -0.63, -0.63)],
    [(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1)],
)

ETHANE = sdf_record(
    "ethane",
    [
        ("C", 0.0, 0.0, 0.0),
        ("C", 1.54, 0.0, 0.0),
        ("H", -0.4, 1.0, 0.0),
        ("H", -0.4, -0.5, 0.9),
        ("H", -0.4, -0.5, -0.9),
        ("H", 1.94, 1.0, 0.0),
        ("H", 1.94, -0.5, 0.9),
        ("H", 1.94, -0.5, -0.9),
    ],
    [(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1), (1, 5, 1), (1, 6, 1), (1, 7, 1)],
)


def test_parse_pdb_single_ca():
    line = pdb_atom_line(1, "CA", "ALA", "A", 1, (1.0, 2.0, 3.0), "C")
    protein = parse_pdb(line + "\n", "one")
    assert len(protein.residues) == 1
    residue = protein.residues[0]
    assert residue.aa == "ALA"
    assert residue.chain == "A"
    assert residue.seq_index == 1
    assert residue.ca_position == (1.0, 2.0, 3.0)


def test_parse_pdb_first_altloc_wins():
    text = "\n".join(
        [
            pdb_atom_line(1, "CA", "SER", "A", 5, (1.0, 1.0, 1.0), "C", altloc="A"),
            pdb_atom_line(2, "CA", "SER", "A", 5, (9.0, 9.0, 9.0), "C", altloc="B"),
        ]
    )
    protein = parse_pdb(text)
    assert len(protein.residues) == 1
    assert protein.residues[0].ca_position == (1.0, 1.0, 1.0)
    assert len(protein.atoms) == 1


def test_parse_pdb_hetatm_only():
    text = pdb_atom_line(1, "C1", "LIG", "A", 1, (0.0, 0.0, 0.0), "C", record="HETATM")
    with pytest.raises(EmptyStructureError):
        parse_pdb(text)


def test_parse_pdb_malformed_coordinate():
    good = pdb_atom_line(1, "CA", "ALA", "A", 1, (1.0, 2.0, 3.0), "C")
    bad = pdb_atom_line(2, "CA", "GLY", "A", 2, (1.0, 2.0, 3.0), "C")
    bad = bad[:30] + "   x.abc" + bad[38:]
    with pytest.raises(ParseError) as e:
        parse_pdb(good + "\n" + bad + "\n")
    assert e.value.line == 2


def test_parse_pdb_nonstandard_residue(caplog):
    text = pdb_atom_line(1, "CA", "MSE", "A", 1, (0.0, 0.0, 0.0), "C")
    with caplog.at_level(logging.WARNING, logger="pyequicpi"):
        protein = parse_pdb(text, "mse")
    assert protein.residues[0].aa == "UNK"
    assert protein.sequence == "X"
    assert "UNK" in caplog.text


def test_parse_pdb_pocket(pocket_pdb):
    protein = parse_pdb(pocket_pdb, "pocket")
    assert protein.sequence == "ASGLDKVT"
    assert protein.ca_positions.shape == (8, 3)
    # 7 residues with CB plus GLY
    assert len(protein.atoms) == 7 * 5 + 4
    assert protein.residues[2].ca_position == pytest.approx((7.6, 0.0, 0.0))


def test_parse_pdb_is_pure(pocket_pdb):
    assert parse_pdb(pocket_pdb.encode("utf-8"), "p") == parse_pdb(pocket_pdb, "p")


def test_parse_sdf_methane():
    molecules = parse_sdf(METHANE)
    assert len(molecules) == 1
    assert len(molecules[0].atoms) == 1
    assert molecules[0].bonds == ()


def test_parse_sdf_ethane():
    (mol,) = parse_sdf(ETHANE)
    assert [a.element for a in mol.atoms] == ["C", "C"]
    assert mol.bonds == (Bond(0, 1, BondOrder.SINGLE),)


def test_parse_sdf_two_records():
    molecules = parse_sdf(METHANE + ETHANE)
    assert [m.id for m in molecules] == ["methane", "ethane"]


def test_parse_sdf_remaps_bonds_after_hydrogens():
    text = sdf_record(
        "methanol",
        [("H", 0.0, 1.0, 0.0), ("C", 0.0, 0.0, 0.0), ("O", 1.4, 0.0, 0.0), ("H", 1.8, 0.9, 0.0)],
        [(0, 1, 1), (1, 2, 1), (2, 3, 1)],
    )
    (mol,) = parse_sdf(text)
    assert [a.element for a in mol.atoms] == ["C", "O"]
    assert mol.bonds == (Bond(0, 1, BondOrder.SINGLE),)


def test_parse_sdf_count_mismatch():
    text = sdf_record("short", [("C", 0.0, 0.0, 0.0), ("C", 1.5, 0.0, 0.0)], [(0, 1, 1)])
    text = text.replace("  2  1  0", "  3  1  0", 1)
    with pytest.raises(ParseError):
        parse_sdf(text)


def test_parse_sdf_unknown_element():
    text = sdf_record("odd", [("Xx", 0.0, 0.0, 0.0)])
    with pytest.raises(ParseError) as e:
        parse_sdf(text)
    assert e.value.line == 5


def test_parse_sdf_rejects_v3000():
    text = sdf_record("v3", [("C", 0.0, 0.0, 0.0)]).replace("V2000", "V3000")
    with pytest.raises(ParseError):
        parse_sdf(text)


def test_parse_sdf_aromatic_and_charges():
    ring = [("C", 1.4, 0.0, 0.0), ("C", 0.7, 1.2, 0.0), ("C", -0.7, 1.2, 0.0), ("C", -1.4, 0.0, 0.0)]
    ring += [("C", -0.7, -1.2, 0.0), ("N", 0.7, -1.2, 0.0), ("O", 2.8, 0.0, 0.0)]
    bonds = [(k, (k + 1) % 6, 4) for k in range(6)] + [(0, 6, 1)]
    text = sdf_record("pyridinium", ring, bonds, charge_codes={6: 5}, extra_lines=["M  CHG  1   6   1"])
    (mol,) = parse_sdf(text)
    assert all(a.aromatic for a in mol.atoms[:6])
    assert not mol.atoms[6].aromatic
    # M  CHG supersedes the atom block field
    assert mol.atoms[5].formal_charge == 1
    assert mol.atoms[6].formal_charge == 0


def test_parse_sdf_skips_legacy_property_lines():
    extra = ["A    1", "R#", "V    2 tag", "G    1  1", "Ph", "S  SKP  1", "anything", "M  CHG  1   2  -1"]
    text = sdf_record("alias", [("C", 0.0, 0.0, 0.0), ("O", 1.4, 0.0, 0.0)], [(0, 1, 1)], extra_lines=extra)
    (mol,) = parse_sdf(text)
    assert [a.element for a in mol.atoms] == ["C", "O"]
    assert mol.atoms[1].formal_charge == -1


def test_parse_sdf_alias_line_after_atom_block():
    text = sdf_record("alias", [("C", 0.0, 0.0, 0.0)], extra_lines=["A    1", "Me"], properties={"confidence": "0.5"})
    (mol,) = parse_sdf(text)
    assert mol.confidence == pytest.approx(0.5)


def test_parse_sdf_malformed_charge_entry():
    atoms = [("C", 0.0, 0.0, 0.0), ("O", 1.4, 0.0, 0.0)]
    text = sdf_record("bad", atoms, [(0, 1, 1)], extra_lines=["M  CHG  1   2   x"])
    with pytest.raises(ParseError) as e:
        parse_sdf(text)
    assert e.value.line == 8
    short = sdf_record("short", [("C", 0.0, 0.0, 0.0)], extra_lines=["M  CHG  2   1   1"])
    with pytest.raises(ParseError) as e:
        parse_sdf(short)
    assert e.value.line == 6


def test_parse_sdf_properties():
    text = sdf_record("pose1", [("C", 0.0, 0.0, 0.0)], properties={"confidence": "0.73", "source": "dock"})
    (mol,) = parse_sdf(text)
    assert mol.properties == {"confidence": "0.73", "source": "dock"}
    assert mol.confidence == pytest.approx(0.73)


def test_write_sdf_round_trip():
    mol = LigandMolecule(
        id="charged",
        atoms=(Atom("C", (0.1234, -1.5, 2.0)), Atom("N", (1.4, 0.0, 2.0), formal_charge=1)),
        bonds=(Bond(0, 1, BondOrder.SINGLE),),
        properties={"confidence": "0.5"},
    )
    (parsed,) = parse_sdf(write_sdf([mol]))
    assert parsed == mol
    assert parsed.properties == mol.properties


def test_ligand_rejects_hydrogen():
    with pytest.raises(ValidationError):
        LigandMolecule(id="h", atoms=(Atom("H", (0.0, 0.0, 0.0)),))


def test_ligand_neighbors_and_degree():
    mol = amide_ligand()
    assert mol.degree(2) == 3
    assert sorted(j for j, _ in mol.neighbors()[2]) == [1, 3, 4]


def test_complex_record_defaults(pocket):
    ligand = amide_ligand()
    record = ComplexRecord("c", ligand, pocket)
    assert record.poses == (ligand,)
    with pytest.raises(ValidationError):
        ComplexRecord("c", ligand, pocket, label_ec50_nm=-1.0)


def _dataset(tmp_path, rows):
    (tmp_path / "protein.pdb").write_text(protein_pdb_text(), encoding="utf-8")
    (tmp_path / "ligand.sdf").write_text(ETHANE, encoding="utf-8")
    return write_manifest(tmp_path, rows)


def test_load_manifest_three_rows(tmp_path):
    rows = [
        {"complex_id": f"c{k}", "ligand_sdf": "ligand.sdf", "protein_pdb": "protein.pdb", "ec50_nm": 10.0 * (k + 1)}
        for k in range(3)
    ]
    records = load_manifest(_dataset(tmp_path, rows))
    assert [r.complex_id for r in records] == ["c0", "c1", "c2"]
    assert records[2].label_ec50_nm == 30.0
    # the shared protein is parsed once
    assert records[0].protein is records[1].protein


def test_load_manifest_confidence_and_activity(tmp_path):
    rows = [
        {
            "complex_id": "c0",
            "ligand_sdf": "ligand.sdf",
            "protein_pdb": "protein.pdb",
            "confidence": "0.87",
            "is_active": "true",
        }
    ]
    (record,) = load_manifest(_dataset(tmp_path, rows))
    assert record.upstream_confidence == 0.87
    assert record.is_active is True
    assert record.label_ec50_nm is None


def test_load_manifest_zero_ec50(tmp_path):
    rows = [{"complex_id": "c0", "ligand_sdf": "ligand.sdf", "protein_pdb": "protein.pdb", "ec50_nm": "0"}]
    with pytest.raises(ValidationError, match="row 1"):
        load_manifest(_dataset(tmp_path, rows))


def test_load_manifest_missing_file(tmp_path):
    rows = [
        {"complex_id": "c0", "ligand_sdf": "ligand.sdf", "protein_pdb": "protein.pdb"},
        {"complex_id": "c1", "ligand_sdf": "absent.sdf", "protein_pdb": "protein.pdb"},
    ]
    with pytest.raises(FileNotFoundError, match=r"row 2 \(c1\)"):
        load_manifest(_dataset(tmp_path, rows))
