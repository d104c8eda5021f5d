"""Vocabulary tree over binary descriptors, BoW vectors and the recognition database."""

from __future__ import annotations

from collections import defaultdict
from importlib import resources

import numpy as np

from .errors import EmptyVocabulary
from .features import DESC_WORDS, hamming
from .sim import LANDMARK_FLIPS, flip_bits, pack_bits, universe, unpack_bits

VOCAB_K = 10
VOCAB_DEPTH = 3


def _majority(desc: np.ndarray) -> np.ndarray:
    bits = unpack_bits(desc)
    return pack_bits(bits.mean(axis=0, keepdims=True) > 0.5)[0]


def _kmedians(desc: np.ndarray, k: int, rng: np.random.Generator, iterations: int = 10):
    """Hamming k-medians with k-means++ seeding and bitwise-majority centroids."""
    n = desc.shape[0]
    if n <= k:
        centers = np.vstack([desc, np.repeat(desc[-1:], k - n, axis=0)]) if n else \
            np.zeros((k, DESC_WORDS), dtype=np.uint64)
        labels = np.arange(n)
        return centers, labels
    centers = [desc[rng.integers(n)]]
    dmin = hamming(desc, centers[0][None]).astype(float)
    for _ in range(1, k):
        w = dmin ** 2
        if w.sum() == 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=w / w.sum())
        centers.append(desc[idx])
        dmin = np.minimum(dmin, hamming(desc, desc[idx][None]))
    centers = np.array(centers)
    labels = None
    for _ in range(iterations):
        D = hamming(desc[:, None, :], centers[None, :, :])
        new = np.argmin(D, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = desc[labels == j]
            if members.shape[0]:
                centers[j] = _majority(members)
    return centers, labels


class Vocabulary:
    """Complete k-ary tree in heap layout; node i has children i*k+1 .. i*k+k."""

    def __init__(self, centers: np.ndarray, idf: np.ndarray, k: int = VOCAB_K,
                 depth: int = VOCAB_DEPTH):
        self.k = k
        self.depth = depth
        self.centers = np.asarray(centers, dtype=np.uint64)
        self.idf = np.asarray(idf, dtype=float)
        self.leaf_offset = sum(k**l for l in range(depth))
        if self.centers.shape[0] != self.leaf_offset + k**depth or self.idf.size != k**depth:
            raise EmptyVocabulary("vocabulary arrays do not describe a complete tree")

    @property
    def n_words(self) -> int:
        return self.idf.size

    @classmethod
    def train(cls, desc: np.ndarray, docs: np.ndarray, k: int = VOCAB_K,
              depth: int = VOCAB_DEPTH, seed: int = 0) -> "Vocabulary":
        """Build the tree from descriptors; ``docs`` gives the pseudo-image of each row."""
        desc = np.asarray(desc, dtype=np.uint64)
        if desc.shape[0] == 0:
            raise EmptyVocabulary("no training descriptors")
        rng = np.random.default_rng(seed)
        n_nodes = sum(k**l for l in range(depth + 1))
        centers = np.zeros((n_nodes, DESC_WORDS), dtype=np.uint64)
        stack = [(0, np.arange(desc.shape[0]), 0)]
        while stack:
            node, members, level = stack.pop()
            if level == depth:
                continue
            c, labels = _kmedians(desc[members], k, rng)
            for j in range(k):
                child = node * k + 1 + j
                centers[child] = c[j]
                stack.append((child, members[labels == j] if labels.size else members[:0],
                              level + 1))
        voc = cls(centers, np.zeros(k**depth), k, depth)
        words = voc.quantize(desc)
        docs = np.asarray(docs)
        n_docs = np.unique(docs).size
        pairs = np.unique(np.column_stack([docs, words]), axis=0)
        df = np.bincount(pairs[:, 1], minlength=voc.n_words)
        voc.idf = np.log(n_docs / np.maximum(df, 1))
        return voc

    def quantize(self, desc: np.ndarray) -> np.ndarray:
        """Leaf word id per descriptor."""
        if self.n_words == 0:
            raise EmptyVocabulary("vocabulary has no words")
        desc = np.atleast_2d(np.asarray(desc, dtype=np.uint64))
        node = np.zeros(desc.shape[0], dtype=np.int64)
        ar = np.arange(self.k)
        for _ in range(self.depth):
            children = node[:, None] * self.k + 1 + ar
            D = hamming(desc[:, None, :], self.centers[children])
            node = children[np.arange(desc.shape[0]), np.argmin(D, axis=1)]
        return node - self.leaf_offset

    def bow_from_words(self, words: np.ndarray) -> dict[int, float]:
        if words.size == 0:
            return {}
        counts = np.bincount(words, minlength=self.n_words).astype(float)
        v = counts / words.size * self.idf
        total = v.sum()
        if total <= 0:
            return {}
        nz = np.flatnonzero(v)
        return {int(w): float(v[w] / total) for w in nz}

    def compute_bow(self, desc: np.ndarray) -> dict[int, float]:
        """tf-idf weighted, L1-normalized bag of words."""
        return self.bow_from_words(self.quantize(desc) if len(desc) else np.zeros(0, int))

    def save(self, path) -> None:
        np.savez_compressed(path, centers=self.centers, idf=self.idf,
                            k=self.k, depth=self.depth)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with np.load(path) as z:
            return cls(z["centers"], z["idf"], int(z["k"]), int(z["depth"]))


def similarity_score(a: dict[int, float], b: dict[int, float]) -> float:
    """1 - 0.5 |a - b|_1 for L1-normalized vectors, computed over shared words."""
    if not a or not b:
        return 0.0
    if len(a) > len(b):
        a, b = b, a
    l1 = 0.0
    for w, va in a.items():
        vb = b.get(w)
        if vb is None:
            l1 += va
        else:
            l1 += abs(va - vb) - vb
    l1 += sum(b.values())
    return float(min(max(1.0 - 0.5 * l1, 0.0), 1.0))


_DEFAULT: Vocabulary | None = None


def default_vocabulary() -> Vocabulary:
    """The shipped vocabulary trained on simulator descriptors."""
    global _DEFAULT
    if _DEFAULT is None:
        with resources.as_file(resources.files("mcslam") / "data" / "vocabulary.npz") as p:
            _DEFAULT = Vocabulary.load(p)
    return _DEFAULT


def training_descriptors(n: int = 100_000, per_doc: int = 400, seed: int = 7):
    """Simulator-distributed descriptors grouped into pseudo-images of one palette each."""
    uni = universe()
    rng = np.random.default_rng(seed)
    n_docs = n // per_doc
    desc, docs = [], []
    for d in range(n_docs):
        pal = uni.palette(tuple(rng.integers(-50, 50, 3)))
        cls = pal[rng.integers(pal.size, size=per_doc)]
        lm = flip_bits(uni.classes[cls], LANDMARK_FLIPS, rng)
        desc.append(flip_bits(lm, 8, rng))
        docs.append(np.full(per_doc, d))
    return np.concatenate(desc), np.concatenate(docs)


def build_default_vocabulary(path, seed: int = 0) -> Vocabulary:
    desc, docs = training_descriptors()
    voc = Vocabulary.train(desc, docs, seed=seed)
    voc.save(path)
    return voc


class RecognitionDatabase:
    """Inverted index word -> MKF ids over stored BoW vectors."""

    def __init__(self, vocabulary: Vocabulary):
        self.vocabulary = vocabulary
        self.bows: dict[int, dict[int, float]] = {}
        self.index: dict[int, set[int]] = defaultdict(set)

    def __len__(self) -> int:
        return len(self.bows)

    def add(self, mkf_id: int, bow: dict[int, float]):
        if mkf_id in self.bows:
            self.erase(mkf_id)
        self.bows[mkf_id] = bow
        for w in bow:
            self.index[w].add(mkf_id)

    def erase(self, mkf_id: int):
        bow = self.bows.pop(mkf_id, None)
        if bow is None:
            return
        for w in bow:
            self.index[w].discard(mkf_id)

    def score(self, a: int, b: int) -> float:
        return similarity_score(self.bows.get(a, {}), self.bows.get(b, {}))

    def query(self, bow: dict[int, float], min_score: float = 0.0,
              exclude=()) -> list[tuple[int, float]]:
        """(id, score) with score > min_score, best first; ids in ``exclude`` skipped."""
        cands = set()
        for w in bow:
            cands |= self.index.get(w, set())
        cands -= set(exclude)
        out = []
        for m in cands:
            s = similarity_score(bow, self.bows[m])
            if s > min_score:
                out.append((m, s))
        out.sort(key=lambda x: (-x[1], x[0]))
        return out


def query_candidates(db: RecognitionDatabase, query_id: int, s_sim: float,
                     covisible=()) -> list[int]:
    bow = db.bows.get(query_id, {})
    return [m for m, _ in db.query(bow, s_sim, exclude=set(covisible) | {query_id})]
