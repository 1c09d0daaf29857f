import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage
from scipy.spatial import cKDTree

from cellgraph.data import (GraphFormatError, ManifestRow, crop_augment, crop_origins, graph_to_doc,
                            graphs_equal, group_of, label_from_mask, load_graph, make_folds,
                            read_manifest, read_png, save_graph, synth_sample, train_val_split,
                            write_manifest, write_png)
from cellgraph.features import extract_instances, morphology
from cellgraph.gnn import CellGraph
from cellgraph.graph import EdgeList


def mask_with(counts, shape=(20, 20)):
    m = np.zeros(shape[0] * shape[1], dtype=np.uint8)
    pos = 0
    for grade, n in counts.items():
        m[pos:pos + n] = grade
        pos += n
    return m.reshape(shape)


# ---------------------------------------------------------------- labels

def test_label_examples():
    assert tuple(vars(label_from_mask(mask_with({3: 60, 4: 40}))).values()) == (3, 4, 7, 1)
    assert tuple(vars(label_from_mask(mask_with({2: 50}))).values()) == (2, 2, 4, 0)
    assert tuple(vars(label_from_mask(np.zeros((5, 5), np.uint8))).values()) == (0, 0, 0, 0)


def test_three_plus_three_counts_as_high_risk():
    lab = label_from_mask(mask_with({3: 10}))
    assert (lab.score, lab.label) == (6, 1)
    assert label_from_mask(mask_with({3: 10, 2: 9})).label == 0


def test_area_tie_goes_to_higher_grade():
    lab = label_from_mask(mask_with({2: 30, 4: 30, 1: 5}))
    assert (lab.primary, lab.secondary) == (4, 2)


def test_invalid_grade_rejected():
    with pytest.raises(ValueError, match="<= 5"):
        label_from_mask(np.array([[6]], dtype=np.uint8))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_label_depends_only_on_grade_areas(seed):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 6, size=(12, 15)).astype(np.uint8)
    base = label_from_mask(m)
    assert label_from_mask(rng.permutation(m.ravel()).reshape(15, 12)) == base
    assert label_from_mask(np.roll(m, (3, -5), axis=(0, 1))) == base


# ---------------------------------------------------------------- crops

def test_crop_origins_geometry():
    assert [n for n, _ in crop_origins(3000, 3100, 1550)] == ["tl", "tr", "bl", "br", "c"]
    assert crop_origins(1550, 1550, 1550) == [("tl", (0, 0))]
    assert crop_origins(100, 2000, 1550) == [("full", (0, 0))]


def test_blank_crops_discarded_and_labelled_individually():
    inst = np.zeros((40, 40), dtype=np.uint16)
    inst[2:8, 2:8] = 1  # top-left only
    inst[30:36, 30:36] = 2  # bottom-right only
    grades = np.zeros((40, 40), dtype=np.uint8)
    grades[:20, :20] = 3
    grades[20:, 20:] = 5
    image = np.zeros((40, 40, 3), dtype=np.uint8)
    crops = crop_augment(image, inst, grades, size=16)
    assert [c.name for c in crops] == ["tl", "br"]
    assert crops[0].grade_label.score == 6 and crops[1].grade_label.score == 10
    assert crops[1].image.shape == (16, 16, 3)


def test_small_image_is_a_single_crop():
    inst = np.ones((10, 12), dtype=np.uint16)
    (c,) = crop_augment(np.zeros((10, 12)), inst, None, size=16)
    assert c.name == "full" and c.instances.shape == (10, 12) and c.grade_label is None


# ---------------------------------------------------------------- folds

def test_folds_100_balanced_samples():
    labels = np.array([0, 1] * 50)
    fold_of, splits = make_folds(labels, folds=5, seed=3)
    for f, s in enumerate(splits):
        assert np.count_nonzero(labels[s.test] == 0) == 10 and np.count_nonzero(labels[s.test] == 1) == 10
        assert sorted(np.concatenate([s.train, s.val, s.test]).tolist()) == list(range(100))
        assert np.array_equal(np.sort(s.test), np.flatnonzero(fold_of == f))
        assert 0.05 * 80 <= len(s.val) <= 0.15 * 80


def test_folds_deterministic_in_seed():
    labels = np.array([0] * 23 + [1] * 17)
    a, sa = make_folds(labels, seed=9)
    b, sb = make_folds(labels, seed=9)
    assert np.array_equal(a, b)
    assert all(np.array_equal(x.val, y.val) for x, y in zip(sa, sb))
    c, _ = make_folds(labels, seed=10)
    assert not np.array_equal(a, c)


def test_class_with_too_few_samples():
    with pytest.raises(ValueError, match="fewer than 5"):
        make_folds([0] * 10 + [1] * 4, folds=5)


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 80), st.integers(10, 80), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_group_folds_partition_without_leakage(n0, n1, crops, seed):
    labels = np.array([0] * n0 + [1] * n1)
    # each source image contributes `crops` consecutive samples
    groups = np.array([f"{'ab'[y]}{i // crops}" for i, y in enumerate(labels)])
    _, splits = make_folds(labels, groups, folds=5, seed=seed)
    test_count = np.zeros(len(labels), dtype=int)
    for s in splits:
        parts = [set(groups[p].tolist()) for p in (s.train, s.val, s.test)]
        assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])
        assert len(s.train) + len(s.val) + len(s.test) == len(labels)
        test_count[s.test] += 1
    assert np.all(test_count == 1)
    if crops == 1:
        for cls in (0, 1):
            per = [np.count_nonzero(labels[s.test] == cls) for s in splits]
            assert max(per) - min(per) <= 1


def test_train_val_split_keeps_groups_whole():
    labels = np.array([0] * 40 + [1] * 40)
    groups = np.array([f"g{i // 4}" for i in range(80)])
    tr, va = train_val_split(labels, groups, 0.1, seed=1)
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(80))
    assert not set(groups[tr]) & set(groups[va])
    assert np.count_nonzero(labels[va] == 0) == np.count_nonzero(labels[va] == 1) == 4


def test_group_of():
    assert group_of("s00012#tl") == "s00012" and group_of("plain") == "plain"


# ---------------------------------------------------------------- synthetic tissue

def test_synthetic_same_seed_is_bit_identical():
    a, b = synth_sample(3, seed=4, side=256), synth_sample(3, seed=4, side=256)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.instances, b.instances)
    assert not np.array_equal(a.image, synth_sample(3, seed=5, side=256).image)


def test_synthetic_side_lower_bound():
    with pytest.raises(ValueError, match="256"):
        synth_sample(0, side=128)


def test_synthetic_components_equal_placements_and_labels_agree():
    for k in range(6):
        s = synth_sample(k, seed=1, side=256)
        assert s.image.shape == (256, 256, 3) and s.image.dtype == np.uint8
        _, n8 = ndimage.label(s.instances > 0, structure=np.ones((3, 3)))
        assert n8 == len(s.centers) == int(s.instances.max())
        assert label_from_mask(s.grades).label == s.label == k % 2


def test_synthetic_eccentricity_separates_classes():
    for k in range(4):
        s = synth_sample(k, seed=2, side=512)
        ecc = np.mean([morphology(r)[3] for r in extract_instances(s.instances)])
        if s.label == 0:
            assert ecc < 0.4
        else:
            assert ecc > 0.6


def _mean_nn(centers):
    pts = np.asarray(centers)
    d, _ = cKDTree(pts).query(pts, k=2)
    return d[:, 1].mean()


def test_synthetic_nn_distance_ratio_over_100_pairs():
    lo, hi = [], []
    for i in range(100):
        lo.append(_mean_nn(synth_sample(2 * i, seed=0, side=256).centers))
        hi.append(_mean_nn(synth_sample(2 * i + 1, seed=0, side=256).centers))
    assert np.mean(lo) >= 2.0 * np.mean(hi)


# ---------------------------------------------------------------- files

def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
    inst = rng.integers(0, 3000, size=(9, 7)).astype(np.uint16)
    write_png(tmp_path / "a" / "i.png", img)
    write_png(tmp_path / "a" / "m.png", inst)
    assert np.array_equal(read_png(tmp_path / "a" / "i.png"), img)
    back = read_png(tmp_path / "a" / "m.png")
    assert back.dtype == np.uint16 and np.array_equal(back, inst)


def test_manifest_roundtrip_and_missing_path(tmp_path):
    (tmp_path / "img.png").write_bytes(b"")
    (tmp_path / "m.png").write_bytes(b"")
    rows = [ManifestRow("s0", "img.png", "m.png", "", 1, None)]
    write_manifest(tmp_path / "manifest.csv", rows)
    assert read_manifest(tmp_path / "manifest.csv") == rows
    write_manifest(tmp_path / "manifest.csv", [ManifestRow("s1", "gone.png", "m.png")])
    with pytest.raises(FileNotFoundError, match="gone.png"):
        read_manifest(tmp_path / "manifest.csv")


# ---------------------------------------------------------------- graph files

def sample_graph(rng, n=6, f=3, label=1):
    pts = rng.uniform(0, 50, size=(n, 2))
    from cellgraph.graph import knn_graph
    return CellGraph(rng.normal(size=(n, f)) * 10.0 ** rng.integers(-8, 8, size=(n, f)),
                     knn_graph(pts, 3, 30), label, "s1#tl", pts, np.arange(n) + 5)


def test_graph_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(6)
    for i in range(20):
        g = sample_graph(rng, n=int(rng.integers(1, 30)))
        save_graph(g, tmp_path / f"g{i}.json")
        assert graphs_equal(load_graph(tmp_path / f"g{i}.json"), g)


def test_empty_edge_graph_roundtrips(tmp_path):
    g = CellGraph(np.array([[1.5, -2.0]]), EdgeList(np.zeros((0, 2)), 1), 0, "x")
    save_graph(g, tmp_path / "g.json")
    assert graphs_equal(load_graph(tmp_path / "g.json"), g)


def _write_doc(tmp_path, doc):
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    return tmp_path / "bad.json"


def test_corrupted_edge_is_named(tmp_path):
    doc = graph_to_doc(sample_graph(np.random.default_rng(7), n=4))
    doc["edges"].append([2, 4])
    with pytest.raises(GraphFormatError, match=r"\[2, 4\]"):
        load_graph(_write_doc(tmp_path, doc))


@pytest.mark.parametrize("mutate,pattern", [
    (lambda d: d.update(format_version=2), "format_version"),
    (lambda d: d.update(nodes=[]), "at least one node"),
    (lambda d: d["nodes"][1]["feat"].pop(), "node 1"),
    (lambda d: d.update(label=3), "label"),
    (lambda d: d["edges"].insert(0, list(reversed(d["edges"][0]))), "edge"),
    (lambda d: d["nodes"][0].update(id=d["nodes"][1]["id"]), "duplicate"),
])
def test_graph_format_errors(tmp_path, mutate, pattern):
    doc = graph_to_doc(sample_graph(np.random.default_rng(8), n=5))
    mutate(doc)
    with pytest.raises(GraphFormatError, match=pattern):
        load_graph(_write_doc(tmp_path, doc))
