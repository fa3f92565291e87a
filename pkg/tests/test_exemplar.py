import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from incseg.dataset import ClassEntry, ClassRegistry, ImageSample, LabeledDataset
from incseg.exemplar import (
    AffinityCache,
    EncoderContent,
    ExemplarError,
    ExemplarStore,
    IdentityContent,
    RandomConvContent,
    abstraction_vector,
    abstraction_vectors,
    content_distance,
    content_distance_matrix,
    cosine_matrix,
    cosine_similarity,
    coverage_objective,
    greedy_max_coverage,
    load_store,
    save_store,
    select_exemplars_aeiseg,
    select_exemplars_coriseg,
    store_exemplars,
    trim,
)
from incseg.losses import PredictionSnapshot
from incseg.network import NetworkConfig, build_network


def brute_force(A, k):
    best = -np.inf
    for combo in itertools.combinations(range(A.shape[0]), k):
        best = max(best, A[list(combo)].max(axis=0).sum())
    return best


# -- cosine / content distance ---------------------------------------------------


def test_cosine_values():
    assert cosine_similarity([2, 3], [2, 3]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0, 0], [0, 1, 0]) == 0.0
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    with pytest.raises(ExemplarError, match="zero"):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ExemplarError):
        cosine_similarity([1, 0], [1, 0, 0])


def test_cosine_matrix_matches_pairwise(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    M = cosine_matrix(a, b)
    for i in range(4):
        for j in range(3):
            assert M[i, j] == pytest.approx(cosine_similarity(a[i], b[j]), abs=1e-12)


def test_content_distance_identity_fixture():
    a = np.zeros((4, 4))
    b = a.copy()
    b[1, 2] = 1.0
    d = content_distance(IdentityContent(), a, b)
    assert abs(d - 1 / 16) <= 1e-7
    assert content_distance(IdentityContent(), a, a) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_content_distance_properties(seed):
    r = np.random.default_rng(seed)
    cn = RandomConvContent(channels=(3, 4), seed=7)
    x, y = r.normal(size=(2, 8, 8))
    dxy, dyx = content_distance(cn, x, y), content_distance(cn, y, x)
    assert dxy == dyx
    assert dxy >= 0
    assert content_distance(cn, x, x) == 0.0


def test_content_distance_shape_error():
    with pytest.raises(ExemplarError):
        content_distance(IdentityContent(), np.zeros((4, 4)), np.zeros((4, 5)))


def test_distance_matrix_matches_pairwise(rng):
    cn = RandomConvContent(channels=(3, 4), seed=1)
    imgs = list(rng.normal(size=(5, 8, 8)))
    D = content_distance_matrix(cn, imgs, imgs)
    D2 = content_distance_matrix(cn, imgs, imgs, workers=3)
    assert np.array_equal(D, D2)
    for i in range(5):
        for j in range(5):
            assert D[i, j] == pytest.approx(content_distance(cn, imgs[i], imgs[j]), rel=1e-10, abs=1e-12)


# -- abstraction vectors -------------------------------------------------------------


def test_abstraction_vector_matches_explicit_average(tiny_net, tiny_config, rng):
    img = rng.normal(size=tiny_config.input_shape).astype(np.float32)
    vec = abstraction_vector(tiny_net, img).values
    with torch.no_grad():
        _, act = tiny_net(torch.from_numpy(img)[None], mode="eval")
    act = act[0].double().numpy()
    oracle = np.array([sum(act[k].ravel().tolist()) / act[k].size for k in range(act.shape[0])])
    assert vec.shape == (tiny_config.abstraction_channels,)
    assert np.max(np.abs(vec - oracle)) <= 1e-6
    batch = abstraction_vectors(tiny_net, [img, img])
    assert np.max(np.abs(batch[0] - vec)) <= 1e-6


def test_abstraction_vector_zero_image_bias_free(tiny_config):
    net = build_network(tiny_config, ClassRegistry([ClassEntry("A", "A", 0)]), 0)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.bias.zero_()
                m.running_mean.zero_()
    vec = abstraction_vector(net, np.zeros(tiny_config.input_shape)).values
    assert np.all(vec == 0)


# -- greedy coverage ------------------------------------------------------------------


def test_greedy_k1_is_exact(rng):
    A = rng.uniform(size=(6, 9))
    res = greedy_max_coverage(list(range(6)), list(range(9)), 1, A)
    assert res.objective == pytest.approx(brute_force(A, 1))
    assert res.selected == [int(np.argmax(A.sum(1)))]


def test_greedy_self_coverage():
    vecs = np.eye(5) + 0.0
    keys = [f"s{i}" for i in range(5)]
    res = greedy_max_coverage(keys, keys, 5, cosine_matrix(vecs, vecs))
    assert sorted(res.selected) == keys
    assert res.objective == pytest.approx(5.0)


@pytest.mark.parametrize("seed", range(5))
def test_greedy_bound_against_exhaustive(seed):
    r = np.random.default_rng(seed)
    A = r.uniform(size=(10, 20))
    res = greedy_max_coverage(list(range(10)), list(range(20)), 3, A)
    assert res.objective >= (1 - 1 / math.e) * brute_force(A, 3)


def test_greedy_callable_affinity_and_ties():
    cands = ["b", "a", "c"]
    res = greedy_max_coverage(cands, [0, 1], 3, lambda c, s: 1.0)
    assert res.selected == ["a", "b", "c"]
    assert res.gains[1:] == [0.0, 0.0]


def test_greedy_errors():
    with pytest.raises(ExemplarError):
        greedy_max_coverage([], [1], 1, np.zeros((0, 1)))
    with pytest.raises(ExemplarError, match="affinity"):
        greedy_max_coverage([1], [1], 1, lambda c, s: 1 / 0)


def test_greedy_threshold_variant():
    A = np.array([[0.9, 0.9, 0.1], [0.1, 0.2, 0.95], [0.8, 0.1, 0.1]])
    res = greedy_max_coverage([0, 1, 2], [0, 1, 2], 2, A, threshold=0.5)
    assert res.selected == [0, 1] and res.objective == 3.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_prefix_property_and_monotone_gains(seed, k):
    r = np.random.default_rng(seed)
    A = r.normal(size=(8, 12))
    keys = [f"c{i}" for i in range(8)]
    full = greedy_max_coverage(keys, list(range(12)), k, A)
    for m in range(1, k + 1):
        assert greedy_max_coverage(keys, list(range(12)), m, A).selected == full.selected[:m]
    assert all(g >= 0 for g in full.gains)
    assert all(b >= a for a, b in zip(full.objectives, full.objectives[1:]))
    idx = [keys.index(c) for c in full.selected]
    assert full.objective == pytest.approx(coverage_objective(A, idx))


def test_greedy_deterministic(rng):
    A = rng.normal(size=(7, 9))
    runs = {tuple(greedy_max_coverage(list("abcdefg"), list(range(9)), 4, A).selected) for _ in range(3)}
    assert len(runs) == 1


def test_two_clusters_one_exemplar_each():
    r = np.random.default_rng(3)
    c1 = np.array([1.0, 0.0, 0.1]) + 0.05 * r.normal(size=(3, 3))
    c2 = np.array([0.0, 1.0, 0.1]) + 0.05 * r.normal(size=(3, 3))
    V = np.vstack([c1, c2])
    keys = [f"x{i}" for i in range(6)]
    A = cosine_matrix(V, V)
    res = greedy_max_coverage(keys, keys, 2, A)
    clusters = {int(k[1:]) // 3 for k in res.selected}
    assert clusters == {0, 1}
    best = max(itertools.combinations(range(6), 2), key=lambda c: A[list(c)].max(axis=0).sum())
    assert {i // 3 for i in best} == {0, 1}
    assert res.objective >= (1 - 1 / math.e) * brute_force(A, 2)


def test_duplicate_candidate_has_zero_gain_and_comes_last():
    V = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.7, 0.7]])
    keys = ["a", "b", "c_dup", "d"]
    res = greedy_max_coverage(keys, keys, 4, cosine_matrix(V, V))
    assert res.selected.index("c_dup") > res.selected.index("a") or res.selected.index("a") > res.selected.index("c_dup")
    first = min(res.selected.index("a"), res.selected.index("c_dup"))
    second = max(res.selected.index("a"), res.selected.index("c_dup"))
    assert res.gains[second] == 0.0
    assert second == 3 and first < 3


def test_coriseg_identity_onehot_matches_exhaustive():
    # eight one-hot-pixel images on a 4x4 grid, some sharing pixels
    pix = [0, 0, 1, 5, 5, 5, 10, 15]
    imgs = []
    for p in pix:
        im = np.zeros(16)
        im[p] = 1.0
        imgs.append(im.reshape(4, 4))
    keys = [f"i{k}" for k in range(8)]
    D = content_distance_matrix(IdentityContent(), imgs, imgs)
    res = greedy_max_coverage(keys, keys, 2, -D)
    assert res.objective == pytest.approx(brute_force(-D, 2))
    chosen_pixels = {pix[keys.index(k)] for k in res.selected}
    assert chosen_pixels == {0, 5}


# -- pipelines ------------------------------------------------------------------------


def _dataset(n=10, seed=0, shape=(16, 16)):
    r = np.random.default_rng(seed)
    reg = ClassRegistry([ClassEntry("A", "A", 0)])
    samples = []
    for i in range(n):
        img = r.normal(size=shape).astype(np.float32)
        m = np.zeros(shape, np.uint8)
        if i % 4 != 3:
            m[4:4 + i % 5 + 1, 5:9] = 1
        samples.append(ImageSample(img, {"A": m}, frozenset({"A"}), (f"v{i // 5}", i % 5)))
    return LabeledDataset(samples, reg, "D_init")


def test_aeiseg_pipeline_subset_and_determinism(tiny_net):
    ds = _dataset()
    a = select_exemplars_aeiseg(tiny_net, ds, "A", k_c=5, k_r=3, t_mc=4, seed=1)
    b = select_exemplars_aeiseg(tiny_net, ds, "A", k_c=5, k_r=3, t_mc=4, seed=1, workers=3)
    assert a.keys == b.keys and len(a.keys) == 3
    assert set(a.keys) <= set(a.certain_keys)
    assert all(ds.by_key()[k].has_foreground("A") for k in a.keys)


def test_aeiseg_saturation(tiny_net):
    ds = _dataset()
    n_cand = sum(s.has_foreground("A") for s in ds)
    sel = select_exemplars_aeiseg(tiny_net, ds, "A", k_c=n_cand, k_r=n_cand, t_mc=4, seed=0)
    assert sorted(sel.keys) == sorted(sel.certain_keys)


def test_coriseg_pipeline_with_cache(tmp_path, tiny_net):
    ds = _dataset()
    cn = RandomConvContent(channels=(3, 4), seed=2)
    cache = AffinityCache(tmp_path)
    a = select_exemplars_coriseg(tiny_net, cn, ds, "A", 5, 3, 4, 1, cache=cache, cache_key="k")
    assert len(list(tmp_path.glob("*.mat"))) == 1
    b = select_exemplars_coriseg(tiny_net, cn, ds, "A", 5, 3, 4, 1, cache=cache, cache_key="k", workers=2)
    assert a.keys == b.keys
    assert set(a.keys) <= set(a.certain_keys)
    ukeys = sorted(ds.by_key())
    full = cache.get("k", ukeys)
    imgs = [ds.by_key()[k].image for k in ukeys]
    assert np.array_equal(full, content_distance_matrix(cn, imgs, imgs))


def _negating_encoder_net():
    """levels=2 net whose only live encoder feature is relu(-x); other layers output 0."""
    cfg = NetworkConfig(levels=2, base_filters=1, dropout_rate=0.2, input_shape=(4, 4))
    net = build_network(cfg, ClassRegistry([ClassEntry("A", "A", 0)]), 0)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0 - m.eps)
            if isinstance(m, torch.nn.Conv2d):
                m.weight.zero_()
        net.enc[0][0].conv.weight[0, 0, 1, 1] = -1.0
    return net


def test_self_content_changes_selection():
    # Identity features see every pixel; the negating encoder only sees negative pixels.
    def img(vals):
        a = np.zeros(16)
        for p, v in vals:
            a[p] = v
        return a.reshape(4, 4)

    imgs = [img([(0, 1.0)]), img([(0, 1.0), (1, 0.2)]), img([(5, -1.0)]), img([(5, -1.0), (6, 3.0)]),
            img([(6, 3.0)]), img([(6, 3.0), (7, 0.1)])]
    keys = [f"k{i}" for i in range(6)]
    enc = EncoderContent(_negating_encoder_net())
    D_id = content_distance_matrix(IdentityContent(), imgs, imgs)
    D_enc = content_distance_matrix(enc, imgs, imgs)
    s_id = greedy_max_coverage(keys, keys, 2, -D_id).selected
    s_enc = greedy_max_coverage(keys, keys, 2, -D_enc).selected
    assert greedy_max_coverage(keys, keys, 2, -D_id).objective == pytest.approx(brute_force(-D_id, 2))
    assert greedy_max_coverage(keys, keys, 2, -D_enc).objective == pytest.approx(brute_force(-D_enc, 2))
    assert s_id != s_enc


# -- store ---------------------------------------------------------------------------------


def _store(n=30):
    ds = _dataset(n)
    snap = PredictionSnapshot(["A"])
    for s in ds:
        snap.add(s.key, np.full((1, 2, 16, 16), 0.5, np.float32))
    store = ExemplarStore("AeiSeg", k_r=n)
    return store_exemplars(store, "A", ds.samples, snap), ds


def test_trim_identity_and_prefix():
    store, ds = _store(30)
    trim(store, 30)
    assert len(store) == 30
    trim(store, 10)
    assert [r.rank for r in store.entries["A"]] == list(range(10))
    assert store.keys("A") == [s.key for s in ds.samples[:10]]
    assert store.history[-1]["irreversible"] is True
    with pytest.raises(ExemplarError):
        store_exemplars(store, "A", ds.samples[:20], store.snapshot())
    with pytest.raises(ExemplarError):
        trim(store, -1)


def test_store_requires_snapshots():
    store, ds = _store(4)
    with pytest.raises(Exception):
        store_exemplars(store, "B", ds.samples[:2], PredictionSnapshot(["A"]))


def test_store_round_trip(tmp_path):
    store, _ = _store(5)
    trim(store, 3)
    h = save_store(store, tmp_path / "store")
    back = load_store(tmp_path / "store")
    assert back.content_hash() == h == store.content_hash()
    assert back.keys() == store.keys()
    assert any(e["op"] == "trim" for e in back.history)
    np.testing.assert_array_equal(back.entries["A"][0].sample.image, store.entries["A"][0].sample.image)
