import numpy as np
import pytest
import torch

from sanpose.data import load_dataset
from sanpose.errors import ConfigError, DataError
from sanpose.reid import (EmbedderConfig, MetricModel, augment, distance, embed_images, fit_kissme,
                          kissme_pairs, load_embedder, pairwise_distances, query_gallery_split,
                          rank_metrics, run_protocol, save_embedder, train_ide)
from sanpose.trainer import Trainer, make_config

FAST = EmbedderConfig(channels=8, embed_dim=16, epochs=3, batch_size=8)


@pytest.fixture(scope="module")
def gen_ckpt(small_train, tmp_path_factory):
    cfg = make_config("synthetic", dict(base_channels=8, d_channels=8, sab_count=1))
    return Trainer(cfg, small_train).save(tmp_path_factory.mktemp("g") / "g.ckpt")


# ---- augmentation ----------------------------------------------------------

def test_augment_factor_one_is_noop(small_train, tmp_path):
    assert augment(small_train, None, 1, 0, tmp_path) is small_train
    assert not any(tmp_path.iterdir())


def test_augment_counts_and_labels(small_train, gen_ckpt, tmp_path):
    out = augment(small_train, gen_ckpt, 3, 0, tmp_path / "aug")
    n = len(small_train.records)
    assert len(out.records) == 3 * n
    synth = [r for r in out.records if r.synthetic]
    assert len(synth) == 2 * n
    for ident in small_train.identities():
        real = sum(r.identity == ident and not r.synthetic for r in out.records)
        assert sum(r.identity == ident for r in synth) == 2 * real
    reloaded = load_dataset(tmp_path / "aug", small_train.split)
    assert len(reloaded.records) == 3 * n
    assert reloaded.to_json() == out.to_json()


def test_augment_leaves_input_untouched(small_train, gen_ckpt, tmp_path):
    before = {p: p.read_bytes() for p in small_train.split_dir.rglob("*") if p.is_file()}
    augment(small_train, gen_ckpt, 2, 1, tmp_path / "aug")
    after = {p: p.read_bytes() for p in small_train.split_dir.rglob("*") if p.is_file()}
    assert before == after


def test_augment_rejects_bad_factor(small_train, tmp_path):
    with pytest.raises(ConfigError):
        augment(small_train, None, 0, 0, tmp_path)


def test_augment_rejects_in_place(small_train, gen_ckpt):
    with pytest.raises(ConfigError):
        augment(small_train, gen_ckpt, 2, 0, small_train.root)


# ---- KISSME and distances ----------------------------------------------------

def test_kissme_one_dimensional():
    same = np.array([[1.0], [-1.0], [0.0], [0.0]])           # second moment 0.5
    diff = np.array([[np.sqrt(2)], [-np.sqrt(2)]])           # second moment 2.0
    m = fit_kissme(same, diff)
    assert m.matrix.shape == (1, 1)
    assert m.matrix[0, 0] == pytest.approx(1.5, abs=1e-12)


def test_kissme_identical_covariances_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 3))
    m = fit_kissme(x, x)
    assert np.abs(m.matrix).max() < 1e-12


def test_kissme_psd_and_symmetric():
    rng = np.random.default_rng(1)
    m = fit_kissme(rng.normal(size=(100, 5)) * 0.3, rng.normal(size=(150, 5)) * [1, 2, 0.1, 1, 3])
    assert np.array_equal(m.matrix, m.matrix.T)
    assert np.linalg.eigvalsh(m.matrix).min() >= -1e-10


def test_kissme_singular_warns():
    with pytest.warns(RuntimeWarning, match="singular"):
        fit_kissme(np.zeros((3, 2)), np.eye(2))


def test_kissme_pairs_shapes():
    emb = np.arange(12, dtype=float).reshape(6, 2)
    same, diff = kissme_pairs(emb, ["a", "a", "b", "b", "c", "c"], seed=0)
    assert same.shape == (3, 2)
    assert diff.shape == (12, 2)


def test_distance_euclidean_345():
    assert distance(MetricModel(), [0, 0], [3, 4]) == 5.0


def test_identity_kissme_is_squared_euclidean():
    rng = np.random.default_rng(2)
    q, g = rng.normal(size=(7, 4)), rng.normal(size=(11, 4))
    eye = MetricModel("kissme", np.eye(4))
    d_k = pairwise_distances(eye, q, g)
    d_e = pairwise_distances(MetricModel(), q, g)
    assert np.allclose(d_k, d_e ** 2)
    assert np.array_equal(np.argsort(d_k, axis=1, kind="stable"), np.argsort(d_e, axis=1, kind="stable"))
    assert distance(eye, q[0], g[0]) == pytest.approx(np.sum((q[0] - g[0]) ** 2))


def test_metric_model_validation():
    with pytest.raises(ConfigError):
        MetricModel("xqda")
    with pytest.raises(ConfigError):
        MetricModel("kissme")


# ---- ranking -------------------------------------------------------------------

def test_rank_metrics_hand_built():
    # query a: matches at ranks 1 and 3 -> AP (1 + 2/3)/2 ; query b: match at rank 2 -> AP 1/2
    dist = np.array([[0.1, 0.5, 0.3, 0.9],
                     [0.2, 0.8, 0.4, 0.1]])
    gallery = ["a", "b", "c", "a"]
    # query a order: g0(a) g2(c) g1(b) g3(a) -> hits at 1 and 4
    # query b order: g3(a) g0(a) g2(c) g1(b) -> hit at 4
    r = rank_metrics(dist, ["a", "b"], gallery, ranks=(1, 2, 4))
    assert r["rank1"] == 0.5
    assert r["rank2"] == 0.5
    assert r["rank4"] == 1.0
    assert r["mAP"] == pytest.approx(((1 + 2 / 4) / 2 + 1 / 4) / 2)


def test_rank_metrics_gallery_permutation_invariant():
    rng = np.random.default_rng(3)
    dist = rng.random((6, 12))
    q_ids = np.array(list("abcabc"))
    g_ids = np.array(list("abcabcabcabc"))
    base = rank_metrics(dist, q_ids, g_ids)
    perm = rng.permutation(12)
    assert rank_metrics(dist[:, perm], q_ids, g_ids[perm]) == base


def test_rank_metrics_exclude_self():
    # without the diagonal: q0 -> g1(a) hit, q1 -> g2(b) miss, q2 -> g3(b) hit, q3 -> g0(a) miss
    dist = np.array([[0.0, 1.0, 2.0, 3.0],
                     [1.0, 0.0, 0.5, 2.0],
                     [2.0, 3.0, 0.0, 1.0],
                     [0.5, 2.0, 1.0, 0.0]])
    ids = ["a", "a", "b", "b"]
    r = rank_metrics(dist, ids, ids, exclude_self=True, ranks=(1,))
    assert r["rank1"] == 0.5


def test_rank_metrics_missing_match():
    with pytest.raises(DataError):
        rank_metrics(np.zeros((1, 2)), ["z"], ["a", "b"])


# ---- IDE -------------------------------------------------------------------------

def test_train_ide_deterministic(small_train):
    a, info = train_ide(small_train, FAST)
    b, _ = train_ide(small_train, FAST)
    x = torch.rand(3, 3, 32, 32) * 2 - 1
    ea, eb = embed_images(a, x), embed_images(b, x)
    assert ea.shape == (3, 16)
    assert np.array_equal(ea, eb)
    assert 0.0 <= info["train_accuracy"] <= 1.0


def test_embedder_roundtrip(small_train, tmp_path):
    model, _ = train_ide(small_train, FAST)
    save_embedder(tmp_path / "e.ckpt", model, small_train.identities())
    loaded = load_embedder(tmp_path / "e.ckpt")
    x = torch.rand(2, 3, 32, 32)
    assert np.array_equal(embed_images(model, x), embed_images(loaded, x))


def test_query_gallery_split(small_test):
    (qx, qid), (gx, gid) = query_gallery_split(small_test, 2)
    assert len(qid) == 2 * len(small_test.identities())
    assert len(qid) + len(gid) == len(small_test.records)
    assert set(qid) == set(gid)


def test_run_protocol_keys(small_train, small_test, gen_ckpt, tmp_path):
    r = run_protocol(small_train, small_test, FAST, alpha=2, generator_ckpt=gen_ckpt,
                     metric_kind="kissme", work_dir=tmp_path)
    assert {"rank1", "rank5", "rank10", "mAP", "train_accuracy"} <= set(r)
    assert r["train_images"] == 2 * len(small_train.records)
