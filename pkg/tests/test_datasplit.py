import logging
import pytest
import numpy as np

from pyequicpi import *

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"


def test_normalize_label_examples():
    assert normalize_label(1e9) == pytest.approx(0.0, abs=1e-12)
    assert normalize_label(0.003) == pytest.approx(-11.523, abs=1e-3)
    assert normalize_label(4.59e8) == pytest.approx(-0.338, abs=1e-3)
    assert denormalize_label(normalize_label(250.0)) == pytest.approx(250.0)


@pytest.mark.parametrize("value", [0.0, -5.0, float("nan"), float("inf")])
def test_normalize_label_rejects(value):
    with pytest.raises(ValidationError):
        normalize_label(value)


def test_split_setting_from_name():
    assert SplitSetting.from_name("novel-pair") == SplitSetting.NOVEL_PAIR
    assert SplitSetting.from_name("NOVEL_COMPOUND") == SplitSetting.NOVEL_COMPOUND
    with pytest.raises(ArgumentError):
        SplitSetting.from_name("random")


def test_split_config_validation():
    with pytest.raises(ValidationError):
        SplitConfig(compound_threshold=1.0)
    with pytest.raises(ValidationError):
        SplitConfig(folds=1)
    with pytest.raises(ValidationError):
        SplitConfig(linkage="ward")


def test_cluster_extremes():
    assert cluster_similarity_matrix(np.ones((3, 3)), 0.4) == [0, 0, 0]
    assert cluster_similarity_matrix(np.zeros((3, 3)), 0.3) == [0, 1, 2]
    assert cluster_similarity_matrix(np.zeros((0, 0)), 0.4) == []
    assert cluster_similarity_matrix(np.ones((1, 1)), 0.4) == [0]


def test_cluster_three_items():
    sim = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.2], [0.1, 0.2, 1.0]])
    assert cluster_similarity_matrix(sim, 0.4) == [0, 0, 1]


def test_linkage_methods_differ_on_chains():
    sim = np.array([[1.0, 0.9, 0.0], [0.9, 1.0, 0.8], [0.0, 0.8, 1.0]])
    assert cluster_similarity_matrix(sim, 0.5, "complete") == [0, 0, 1]
    assert cluster_similarity_matrix(sim, 0.5, "single") == [0, 0, 0]


def test_cluster_errors():
    with pytest.raises(ArgumentError):
        cluster_similarity_matrix(np.ones((2, 3)), 0.4)
    with pytest.raises(ArgumentError):
        cluster_similarity_matrix(np.ones((2, 2)), 0.0)
    with pytest.raises(ArgumentError):
        cluster_similarity_matrix(np.ones((2, 2)), 0.4, "ward")


def test_hierarchical_cluster_with_callable():
    values = [0.0, 0.1, 5.0, 5.2]
    labels = hierarchical_cluster(values, lambda a, b: 1.0 if abs(a - b) < 1.0 else 0.0, 0.5)
    assert labels == [0, 0, 1, 1]


def test_assign_singletons_evenly():
    ids = [f"r{i}" for i in range(10)]
    singletons = {r: i for i, r in enumerate(ids)}
    assignment = assign_folds(ids, SplitSetting.NOVEL_COMPOUND, k=5, compound_cluster_of=singletons)
    assert assignment.sizes == [2, 2, 2, 2, 2]
    assert assignment.balance == 1.0
    assert sorted(r for fold in assignment.folds for r in fold) == sorted(ids)


def test_assign_large_cluster_warns(caplog):
    ids = [f"r{i}" for i in range(10)]
    clusters = {r: (0 if i < 6 else i) for i, r in enumerate(ids)}
    with caplog.at_level(logging.WARNING, logger="pyequicpi"):
        assignment = assign_folds(ids, SplitSetting.NOVEL_COMPOUND, k=5, compound_cluster_of=clusters)
    assert sorted(assignment.sizes, reverse=True) == [6, 1, 1, 1, 1]
    assert "exceeds" in caplog.text


def test_assign_errors():
    ids = ["a", "b"]
    with pytest.raises(ArgumentError):
        assign_folds(ids, SplitSetting.NOVEL_COMPOUND, k=1, compound_cluster_of={"a": 0, "b": 1})
    with pytest.raises(ArgumentError):
        assign_folds(ids, SplitSetting.NOVEL_PROTEIN, k=2, compound_cluster_of={"a": 0, "b": 1})
    with pytest.raises(ArgumentError):
        assign_folds(["a", "a"], SplitSetting.NOVEL_COMPOUND, k=2, compound_cluster_of={"a": 0})


def test_assign_is_seeded():
    ids = [f"r{i}" for i in range(20)]
    clusters = {r: i // 2 for i, r in enumerate(ids)}
    first = assign_folds(ids, "novel_compound", k=4, seed=3, compound_cluster_of=clusters)
    again = assign_folds(ids, "novel_compound", k=4, seed=3, compound_cluster_of=clusters)
    assert first.folds == again.folds


@pytest.mark.parametrize("protein_of", [lambda i: i // 4, lambda i: (i + 1) // 2, lambda i: i % 3])
def test_novel_pair_keeps_both_clusterings_whole(protein_of):
    ids = [f"r{i:02d}" for i in range(12)]
    compound = {r: i // 2 for i, r in enumerate(ids)}
    protein = {r: protein_of(i) for i, r in enumerate(ids)}
    assignment = assign_folds(
        ids, SplitSetting.NOVEL_PAIR, k=3, compound_cluster_of=compound, protein_cluster_of=protein
    )
    assert assignment.spanning_clusters(compound) == []
    assert assignment.spanning_clusters(protein) == []


def _family_items(rng, n=500, nbits=1024):
    """化合物 50 系列（i // 10）とタンパク質 20 系列（i % 20）の近縁記録"""
    centers = [rng.choice(nbits, size=40, replace=False) for _ in range(50)]
    sequences = ["".join(rng.choice(list(AMINO_ACIDS), size=60)) for _ in range(20)]
    items = []
    for i in range(n):
        bits = set(int(b) for b in centers[i // 10])
        for b in rng.choice(sorted(bits), size=2, replace=False):
            bits.discard(int(b))
        while len(bits) < 40:
            bits.add(int(rng.integers(nbits)))
        residues = list(sequences[i % 20])
        for pos in rng.choice(60, size=2, replace=False):
            residues[pos] = str(rng.choice(list(AMINO_ACIDS)))
        items.append(
            SplitItem(
                record_id=f"r{i:03d}",
                fingerprint=Fingerprint.from_indices(sorted(bits), nbits=nbits),
                kmers=protein_kmer_set("".join(residues), 3),
            )
        )
    return items


def _item_tanimoto(a, b):
    return tanimoto(a.fingerprint, b.fingerprint)


def _item_jaccard(a, b):
    return jaccard(a.kmers, b.kmers)


def _oracle_max(items, fold_a, fold_b, similarity):
    position = {it.record_id: it for it in items}
    return max(similarity(position[a], position[b]) for a in fold_a for b in fold_b)


@pytest.mark.parametrize(
    "setting, field_name, similarity, n_clusters",
    [
        (SplitSetting.NOVEL_COMPOUND, "max_compound_tanimoto", _item_tanimoto, 50),
        (SplitSetting.NOVEL_PROTEIN, "max_protein_jaccard", _item_jaccard, 20),
    ],
)
def test_split_has_no_cross_fold_leakage(rng, setting, field_name, similarity, n_clusters):
    items = _family_items(rng)
    assignment, report = make_split(items, setting, SplitConfig(folds=5), seed=1)
    assert report.passed
    assert len(report.pairs) == 10
    cluster_of = assignment.compound_cluster_of if setting.uses_compounds else assignment.protein_cluster_of
    assert len(set(cluster_of.values())) == n_clusters
    assert assignment.spanning_clusters(cluster_of) == []
    for pair in report.pairs:
        a, b = pair.folds
        assert getattr(pair, field_name) == _oracle_max(items, assignment.folds[a], assignment.folds[b], similarity)


def test_leakage_detected_for_interleaved_folds(rng):
    items = _family_items(rng, n=100)
    ids = [it.record_id for it in items]
    assignment = FoldAssignment(SplitSetting.NOVEL_COMPOUND, [tuple(ids[0::2]), tuple(ids[1::2])])
    report = leakage_report(assignment, items)
    assert not report.passed
    assert report.pairs[0].max_compound_tanimoto > 0.4
    assert report.to_dict()["passed"] is False


def test_split_items_from_records(complex_record, pocket):
    items = split_items_from_records([complex_record], nbits=256)
    assert items[0].record_id == "cpx1"
    assert items[0].fingerprint.nbits == 256
    assert "ASG" in items[0].kmers.kmers
