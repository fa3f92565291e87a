import numpy as np
import pytest

from incseg.dataset import (
    AnnotationSet,
    ClassEntry,
    ClassRegistry,
    DatasetError,
    LabeledDataset,
    ScenarioConfig,
    Volume,
    build_scenario,
    load_volume,
    restack,
    restack_masks,
    save_volume,
    slice_volume,
)

from conftest import make_volume


def test_slice_count_matches_depth():
    vol = Volume(np.zeros((8, 8, 64)), (0.91, 0.91, 3.0), "v")
    assert len(slice_volume(vol, AnnotationSet({}))) == 64


def test_depth_one_is_identity():
    plane = np.arange(12, dtype=np.float32).reshape(3, 4, 1)
    samples = slice_volume(Volume(plane, (1, 1, 1), "v"), AnnotationSet({}))
    assert len(samples) == 1
    np.testing.assert_array_equal(samples[0].image, plane[:, :, 0])


def test_all_ones_mask_sums_per_plane():
    vol = Volume(np.zeros((4, 4, 3)), (1, 1, 1), "v")
    samples = slice_volume(vol, AnnotationSet({"A": np.ones((4, 4, 3), np.uint8)}))
    assert len(samples) == 3
    assert [int(s.masks["A"].sum()) for s in samples] == [16, 16, 16]


def test_slicing_is_lossless():
    vol, ann = make_volume(shape=(6, 5, 7))
    samples = slice_volume(vol, ann)
    np.testing.assert_array_equal(restack(samples), vol.voxels)
    np.testing.assert_array_equal(restack_masks(samples, "A"), ann.masks["A"])


def test_shape_mismatch_rejected():
    vol = Volume(np.zeros((4, 4, 3)), (1, 1, 1), "v")
    with pytest.raises(DatasetError, match="shape"):
        slice_volume(vol, AnnotationSet({"A": np.zeros((4, 4, 2), np.uint8)}))


def test_volume_invariants():
    with pytest.raises(DatasetError):
        Volume(np.full((2, 2, 2), np.nan), (1, 1, 1), "v")
    with pytest.raises(DatasetError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1), "v")
    with pytest.raises(DatasetError):
        AnnotationSet({"A": np.full((2, 2, 2), 2)})
    with pytest.raises(DatasetError):
        AnnotationSet({"A": np.zeros((2, 2, 2))}, frozenset({"A", "B"}))


def test_registry_invariants():
    with pytest.raises(DatasetError):
        ClassRegistry([ClassEntry("a", "a", 0), ClassEntry("a", "b", 1)])
    with pytest.raises(DatasetError):
        ClassRegistry([ClassEntry("a", "a", 1), ClassEntry("b", "b", 0)])
    reg = ClassRegistry([ClassEntry("a", "a", 0)]).add("b")
    assert reg.classes_at(1) == ["b"] and reg.classes_before(1) == ["a"]
    assert ClassRegistry.from_list(reg.to_list()).class_ids == ["a", "b"]


def test_dataset_rejects_unknown_class():
    vol, ann = make_volume()
    reg = ClassRegistry([ClassEntry("A", "A", 0)])
    with pytest.raises(DatasetError, match="not in registry"):
        LabeledDataset(slice_volume(vol, ann), reg, "D_init")


def _scenario(n_init, n_inc, init_cls="A", inc_cls="B"):
    ids = [f"v{i}" for i in range(n_init + n_inc + 2)]
    return ScenarioConfig("s", ids[:n_init], ids[n_init:n_init + n_inc], [ids[-2]], [ids[-1]], [init_cls], [inc_cls])


def test_case1_partition_sizes():
    vols = [make_volume(f"v{i}", seed=i) for i in range(10)]
    d_init, d_inc, val, test = build_scenario(vols, _scenario(4, 4))
    sizes = tuple(len(d.volumes) for d in (d_init, d_inc, val, test))
    assert sizes == (4, 4, 1, 1)
    ids = [set(d.volumes) for d in (d_init, d_inc, val, test)]
    assert sum(len(s) for s in ids) == len(set().union(*ids))
    assert all(s.annotated_classes == {"A"} for s in d_init)
    assert all(s.annotated_classes == {"B"} for s in d_inc)
    assert all(s.annotated_classes == {"A", "B"} for s in test)


def test_case2_partition_sizes():
    vols = [make_volume(f"v{i}", seed=i) for i in range(9)]
    parts = build_scenario(vols, _scenario(6, 1, "B", "A"))
    assert tuple(len(d.volumes) for d in parts) == (6, 1, 1, 1)


def test_insufficient_volumes():
    vols = [make_volume(f"v{i}") for i in range(2)]
    with pytest.raises(DatasetError, match="needs 10"):
        build_scenario(vols, _scenario(4, 4))


def test_absent_class_rejected():
    vol, ann = make_volume("v0")
    others = [make_volume(f"v{i}") for i in range(1, 4)]
    vols = [(vol, ann.restricted(["B"]))] + others
    scen = ScenarioConfig("s", ["v0"], ["v1"], ["v2"], ["v3"], ["A"], ["B"])
    with pytest.raises(DatasetError, match="lacks annotations"):
        build_scenario(vols, scen)


def test_overlapping_partitions_rejected():
    vols = [make_volume(f"v{i}") for i in range(4)]
    scen = ScenarioConfig("s", ["v0"], ["v0"], ["v2"], ["v3"], ["A"], ["B"])
    with pytest.raises(DatasetError, match="more than one"):
        build_scenario(vols, scen)


def test_disk_round_trip_is_bit_exact(tmp_path):
    vol, ann = make_volume(shape=(5, 6, 3), seed=4, contrast="B")
    h = save_volume(tmp_path / "v0", vol, ann)
    vol2, ann2 = load_volume(tmp_path / "v0")
    np.testing.assert_array_equal(vol2.voxels, vol.voxels)
    assert vol2.spacing == vol.spacing and vol2.contrast_profile == "B"
    for c in ann.annotated_classes:
        np.testing.assert_array_equal(ann2.masks[c], ann.masks[c])
    from incseg.dataset import volume_hash
    assert volume_hash(vol2, ann2) == h


def test_truncated_image_rejected(tmp_path):
    vol, ann = make_volume()
    save_volume(tmp_path / "v0", vol, ann)
    p = tmp_path / "v0" / "image.f32"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(DatasetError, match="expected"):
        load_volume(tmp_path / "v0")
