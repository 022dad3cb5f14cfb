import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnnpose.errors import ContractError, FormatError, StructureError, TypingError
from cnnpose.molecule import (AtomTypeTable, ConformationDOF, Ligand, Receptor, apply_dof, bounding_box,
                              load_molecule, load_type_table, parse_molecule, rmsd, save_molecule,
                              save_type_table)

finite = st.floats(-5.0, 5.0, allow_nan=False)


def quat_mul(p, q):
    w1, x1, y1, z1 = p
    w2, x2, y2, z2 = q
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_rotate(point, pivot, axis, angle):
    """Rotate ``point`` about the line through ``pivot`` along ``axis``
    with Hamilton quaternion products."""
    u = np.asarray(axis, float) / np.linalg.norm(axis)
    q = np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * u])
    qc = q * np.array([1, -1, -1, -1])
    v = np.concatenate([[0.0], np.asarray(point) - pivot])
    return quat_mul(quat_mul(q, v), qc)[1:] + pivot


# -- type table ---------------------------------------------------------------

def test_type_table_lookup(table):
    assert table.index("B") == 1
    assert table.name(0) == "A"
    assert table.radius("B") == 1.9
    assert table.radius(0) == 1.5


def test_type_table_rejects_duplicates_and_bad_radii():
    with pytest.raises(ContractError):
        AtomTypeTable((("A", 1.0), ("A", 2.0)))
    with pytest.raises(ContractError):
        AtomTypeTable((("A", 0.0),))


def test_type_table_unknown_name_names_offender(table):
    with pytest.raises(TypingError, match="Xx"):
        table.index("Xx")


def test_default_table_has_boron_and_no_hydrogen():
    t = AtomTypeTable.default()
    assert "B" in t.names
    assert "H" not in t.names


def test_type_table_round_trip(tmp_path, table):
    save_type_table(table, tmp_path / "t.json")
    assert load_type_table(tmp_path / "t.json") == table


# -- apply_dof ---------------------------------------------------------------

def test_zero_dof_is_exact_identity(chain):
    out = apply_dof(chain, ConformationDOF.zeros(1))
    assert np.array_equal(out, chain.coords)


def test_pure_translation_shifts_x(chain):
    out = apply_dof(chain, ConformationDOF([1.0, 0, 0], np.zeros(3), [0.0]))
    assert np.array_equal(out[:, 0], chain.coords[:, 0] + 1.0)
    assert np.array_equal(out[:, 1:], chain.coords[:, 1:])


def test_chain_torsion_pi_matches_quaternion_oracle(chain):
    out = apply_dof(chain, ConformationDOF(np.zeros(3), np.zeros(3), [math.pi]))
    b, c, d = chain.coords[1], chain.coords[2], chain.coords[3]
    expected = quat_rotate(d, c, c - b, math.pi)
    assert np.allclose(out[3], expected, atol=1e-12)
    assert np.array_equal(out[:3], chain.coords[:3])


def test_reference_conformation_is_not_mutated(chain):
    before = chain.coords.copy()
    apply_dof(chain, ConformationDOF([1, 2, 3], [0.3, 0.1, -0.2], [1.0]))
    assert np.array_equal(chain.coords, before)
    with pytest.raises(ValueError):
        chain.coords[0, 0] = 5.0


def test_dimension_mismatch_is_contract_error(chain):
    with pytest.raises(ContractError):
        apply_dof(chain, ConformationDOF.zeros(2))


def test_nested_torsions_apply_leaf_to_root(table):
    # bond 0 (1->2) moves {3,4,5}; bond 1 (3->4) moves {5}
    coords = [[0, 0, 0], [1.5, 0, 0], [2.1, 1.3, 0], [3.6, 1.3, 0.2], [4.2, 2.6, 0.1], [5.7, 2.7, 0.5]]
    lig = Ligand(coords, [0] * 6, table, 0, [(1, 2, {3, 4, 5}), (3, 4, {5})])
    a0, a1 = 0.8, -1.1
    out = apply_dof(lig, ConformationDOF(np.zeros(3), np.zeros(3), [a0, a1]))
    ref = lig.coords
    # child first on the reference geometry, then the parent moves the whole subtree
    p5 = quat_rotate(ref[5], ref[4], ref[4] - ref[3], a1)
    expected = [quat_rotate(p, ref[2], ref[2] - ref[1], a0) for p in (ref[3], ref[4], p5)]
    assert np.allclose(out[3:], expected, atol=1e-12)


def test_rotation_is_about_reference_centroid(chain):
    rot = np.array([0.4, -0.2, 0.9])
    out = apply_dof(chain, ConformationDOF(np.zeros(3), rot, [0.0]))
    assert np.allclose(out.mean(axis=0), chain.reference_centroid, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3), finite)
def test_rigid_motion_preserves_distances(t, r, tor):
    table = AtomTypeTable((("A", 1.5),))
    coords = [[0, 0, 0], [1.5, 0, 0], [2.0, 1.4, 0], [3.5, 1.6, 0.3]]
    lig = Ligand(coords, [0] * 4, table, 0, [(1, 2, {3})])
    out = apply_dof(lig, ConformationDOF(t, r, [tor]))
    ref = apply_dof(lig, ConformationDOF(np.zeros(3), np.zeros(3), [tor]))
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    d_ref = np.linalg.norm(ref[:, None] - ref[None], axis=-1)
    assert np.allclose(d_out, d_ref, atol=1e-9)
    # atoms on the same side of the rotated bond keep their distances to the reference
    d0 = np.linalg.norm(lig.coords[:, None] - lig.coords[None], axis=-1)
    assert np.allclose(d_out[:3, :3], d0[:3, :3], atol=1e-9)
    assert np.allclose(d_out[2, 3], d0[2, 3], atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3))
def test_translation_composes(t1, t2):
    table = AtomTypeTable((("A", 1.5),))
    lig = Ligand([[0, 0, 0], [1.5, 0, 0], [2.0, 1.4, 0]], [0, 0, 0], table)
    a = apply_dof(lig, ConformationDOF(t1, np.zeros(3), [])) + np.asarray(t2)
    b = apply_dof(lig, ConformationDOF(np.add(t1, t2), np.zeros(3), []))
    assert np.allclose(a, b, atol=1e-12)


def test_dof_vector_and_dict_round_trip():
    dof = ConformationDOF([1, 2, 3], [0.1, 0.2, 0.3], [0.5, -0.5])
    assert ConformationDOF.from_vector(dof.to_vector()) == dof
    assert ConformationDOF.from_dict(json.loads(json.dumps(dof.to_dict()))) == dof
    assert len(dof) == 8


def test_dof_rejects_non_finite():
    with pytest.raises(ContractError):
        ConformationDOF([np.nan, 0, 0], np.zeros(3), [])


# -- torsion tree validation ---------------------------------------------------

def test_overlapping_downstream_sets_are_structure_errors(table):
    coords = np.arange(18, dtype=float).reshape(6, 3) * [1.0, 0.3, 0.1]
    with pytest.raises(StructureError):
        Ligand(coords, [0] * 6, table, 0, [(1, 2, {3, 4}), (2, 3, {4, 5})])


def test_downstream_containing_axis_atom_is_rejected(table):
    coords = np.arange(12, dtype=float).reshape(4, 3) * [1.0, 0.3, 0.1]
    with pytest.raises(StructureError):
        Ligand(coords, [0] * 4, table, 0, [(1, 2, {2, 3})])


def test_root_downstream_and_out_of_range_are_rejected(table):
    coords = np.arange(12, dtype=float).reshape(4, 3) * [1.0, 0.3, 0.1]
    with pytest.raises(StructureError):
        Ligand(coords, [0] * 4, table, 0, [(1, 2, {0, 3})])
    with pytest.raises(StructureError):
        Ligand(coords, [0] * 4, table, 0, [(1, 2, {7})])


def test_identical_downstream_sets_are_not_strictly_nested(table):
    coords = np.arange(15, dtype=float).reshape(5, 3) * [1.0, 0.3, 0.1]
    with pytest.raises(StructureError):
        Ligand(coords, [0] * 5, table, 0, [(1, 2, {3, 4}), (0, 1, {3, 4})])


# -- rmsd / bounding box ---------------------------------------------------------

def test_rmsd_examples(rng):
    a = rng.normal(size=(4, 3))
    assert rmsd(a, a) == 0.0
    b = a.copy()
    b[2, 1] += 2.0
    assert rmsd(a, b) == pytest.approx(1.0, abs=1e-15)
    x, y = rng.normal(size=(2, 10, 3))
    brute = math.sqrt(sum(sum((x[i, k] - y[i, k]) ** 2 for k in range(3)) for i in range(10)) / 10)
    assert rmsd(x, y) == pytest.approx(brute, rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 31))
def test_rmsd_properties(n, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(2, n, 3))
    assert rmsd(a, b) == rmsd(b, a)
    assert rmsd(a, b) >= np.linalg.norm(a - b, axis=1).max() / math.sqrt(n) - 1e-12


def test_rmsd_errors():
    with pytest.raises(ContractError):
        rmsd(np.zeros((3, 3)), np.zeros((2, 3)))
    with pytest.raises(ContractError):
        rmsd(np.zeros((0, 3)), np.zeros((0, 3)))


def test_bounding_box_examples():
    lo, hi = bounding_box([[1.0, 2.0, 3.0]])
    assert np.array_equal(lo, hi)
    lo, hi = bounding_box([[0, 0, 0], [1, 2, 3]])
    assert np.array_equal(lo, [0, 0, 0]) and np.array_equal(hi, [1, 2, 3])
    lo, hi = bounding_box([[0, 0, 0], [1, 2, 3]], padding=1)
    assert np.array_equal(lo, [-1, -1, -1]) and np.array_equal(hi, [2, 3, 4])
    with pytest.raises(ContractError):
        bounding_box(np.zeros((0, 3)))


# -- parsing -------------------------------------------------------------------

def test_minimal_ligand_document():
    lig = parse_molecule({"format_version": 1, "atoms": [{"x": 0, "y": 0, "z": 0, "type": "C"}]})
    assert isinstance(lig, Ligand)
    assert len(lig) == 1 and lig.num_torsions == 0


def test_unknown_type_is_typing_error():
    doc = {"format_version": 1, "atoms": [{"x": 0, "y": 0, "z": 0, "type": "Xx"}]}
    with pytest.raises(TypingError, match="Xx"):
        parse_molecule(doc)


def test_chain_document_round_trips_through_apply_dof(tmp_path, chain, table):
    save_molecule(chain, tmp_path / "lig.json")
    loaded = load_molecule(tmp_path / "lig.json", table)
    dof = ConformationDOF([0.1, 0.2, 0.3], [0.2, 0.0, -0.1], [math.pi])
    assert np.array_equal(apply_dof(loaded, dof), apply_dof(chain, dof))


def test_cyclic_tree_in_document_is_structure_error():
    doc = {
        "format_version": 1,
        "atoms": [{"x": float(i), "y": 0.3 * i, "z": 0.0, "type": "C"} for i in range(5)],
        "rotatable_bonds": [{"axis": [1, 2], "downstream": [3, 4]}, {"axis": [2, 3], "downstream": [1, 4]}],
    }
    with pytest.raises(StructureError):
        parse_molecule(doc)


def test_bad_version_and_malformed_json_are_format_errors():
    with pytest.raises(FormatError):
        parse_molecule({"format_version": 2, "atoms": []})
    with pytest.raises(FormatError):
        parse_molecule("{not json")


def test_receptor_document(table):
    rec = parse_molecule({"format_version": 1, "kind": "receptor",
                          "atoms": [{"x": 1, "y": 2, "z": 3, "type": "B"}]}, table)
    assert isinstance(rec, Receptor)
    assert rec.atoms[0].type_index == 1
