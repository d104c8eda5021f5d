import numpy as np
import pytest

from mcslam.errors import EmptyVocabulary
from mcslam.geometry import SE3Pose
from mcslam.sim import NoiseSpec, generate_scene, render_frame
from mcslam.vocabulary import (RecognitionDatabase, Vocabulary, default_vocabulary,
                               query_candidates, similarity_score, training_descriptors)


@pytest.fixture(scope="module")
def voc():
    return default_vocabulary()


def test_shipped_vocabulary_shape(voc):
    assert voc.k == 10 and voc.depth == 3 and voc.n_words == 1000


def test_bow_normalized_and_self_score(voc):
    d, _ = training_descriptors(2000)
    bow = voc.compute_bow(d)
    assert sum(bow.values()) == pytest.approx(1.0, abs=1e-12)
    assert similarity_score(bow, bow) == pytest.approx(1.0, abs=1e-12)
    again = voc.compute_bow(d.copy())
    assert similarity_score(bow, again) == pytest.approx(1.0, abs=1e-12)


def test_score_matches_l1_form(voc, rng):
    d, _ = training_descriptors(4000)
    a = voc.compute_bow(d[:400])
    b = voc.compute_bow(d[300:800])
    va, vb = np.zeros(1000), np.zeros(1000)
    for w, x in a.items():
        va[w] = x
    for w, x in b.items():
        vb[w] = x
    assert similarity_score(a, b) == pytest.approx(1 - 0.5 * np.abs(va - vb).sum(), abs=1e-12)
    assert 0.0 <= similarity_score(a, b) <= 1.0


def test_disjoint_words_score_zero():
    assert similarity_score({1: 0.5, 2: 0.5}, {3: 1.0}) == 0.0
    assert similarity_score({}, {3: 1.0}) == 0.0


def test_empty_vocabulary():
    with pytest.raises(EmptyVocabulary):
        Vocabulary.train(np.zeros((0, 4), dtype=np.uint64), np.zeros(0))
    with pytest.raises(EmptyVocabulary):
        Vocabulary(np.zeros((3, 4), dtype=np.uint64), np.zeros(2))


def test_train_small_tree_deterministic():
    d, docs = training_descriptors(2000, per_doc=100)
    a = Vocabulary.train(d, docs, k=4, depth=2, seed=1)
    b = Vocabulary.train(d, docs, k=4, depth=2, seed=1)
    assert np.array_equal(a.centers, b.centers)
    assert a.n_words == 16
    w = a.quantize(d)
    assert w.min() >= 0 and w.max() < 16


def test_database_query(voc, r1):
    scene = generate_scene({"count": 4000, "region": {"kind": "box", "min": [-30, -3, -1],
                                                      "max": [30, 3, 3]}, "seed": 8})
    rng = np.random.default_rng(0)
    noise = NoiseSpec(pixel_sigma=0.5, bit_flips=8, seed=0)
    db = RecognitionDatabase(voc)
    assert db.query({1: 1.0}) == []
    places = [-24, -12, 0, 12, 24]
    for i, x in enumerate(places):
        rec = render_frame(scene, SE3Pose(np.eye(3), [x, 0, 1]), r1, noise, rng)
        db.add(i, voc.compute_bow(np.concatenate([c[2] for c in rec.cameras])))
    assert len(db) == 5
    rec = render_frame(scene, SE3Pose(np.eye(3), [12.1, 0.05, 1]), r1, noise, rng)
    bow = voc.compute_bow(np.concatenate([c[2] for c in rec.cameras]))
    db.add(99, bow)
    scores = {m: db.score(99, m) for m in range(5)}
    s_sim = max(v for m, v in scores.items() if m != 3)
    assert query_candidates(db, 99, s_sim) == [3]
    assert query_candidates(db, 99, s_sim, covisible=[3]) == []
    assert query_candidates(db, 99, 1.0) == []
    db.erase(3)
    assert 3 not in db.bows and all(3 not in ids for ids in db.index.values())
