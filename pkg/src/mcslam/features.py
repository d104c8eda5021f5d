"""256-bit binary descriptors, Hamming matching and per-camera keypoint grids."""

from __future__ import annotations

import numpy as np

DESC_WORDS = 4  # 4 x uint64 = 256 bits
MATCH_THRESHOLD = 50
RATIO = 0.8
GRID_CELL = 32.0


def hex_to_desc(h: str) -> np.ndarray:
    if len(h) != 64:
        raise ValueError(f"descriptor needs 64 hex chars, got {len(h)}")
    return np.frombuffer(bytes.fromhex(h), dtype="<u8").copy()


def desc_to_hex(d: np.ndarray) -> str:
    return np.asarray(d, dtype="<u8").tobytes().hex()


def descs_from_hex(items) -> np.ndarray:
    if len(items) == 0:
        return np.zeros((0, DESC_WORDS), dtype=np.uint64)
    raw = bytes.fromhex("".join(items))
    return np.frombuffer(raw, dtype="<u8").reshape(-1, DESC_WORDS).astype(np.uint64)


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Bit distance between broadcastable (..., 4) uint64 descriptor arrays."""
    return np.bitwise_count(np.bitwise_xor(a, b)).sum(axis=-1, dtype=np.int64)


def hamming_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if A.shape[0] == 0 or B.shape[0] == 0:
        return np.zeros((A.shape[0], B.shape[0]), dtype=np.int64)
    return hamming(A[:, None, :], B[None, :, :])


def hamming_match(query: np.ndarray, candidates: np.ndarray, max_distance: int = MATCH_THRESHOLD,
                  ratio: float = RATIO):
    """Index of the best candidate or None; ratio test when >= 2 candidates."""
    candidates = np.atleast_2d(candidates)
    if candidates.shape[0] == 0:
        return None
    d = hamming(candidates, np.asarray(query)[None])
    best = int(np.argmin(d))
    if d[best] > max_distance:
        return None
    if d.size >= 2:
        second = np.partition(d, 1)[1]
        if d[best] >= ratio * second:
            return None
    return best


def best_matches(D: np.ndarray, allowed: np.ndarray, max_distance: int = MATCH_THRESHOLD,
                 ratio: float = RATIO, unique: bool = True) -> np.ndarray:
    """Row-wise best column under a mask with threshold and ratio test; -1 = none.

    With ``unique`` each column is granted to its closest row only.
    """
    n, m = D.shape
    out = -np.ones(n, dtype=np.int64)
    if n == 0 or m == 0:
        return out
    big = np.iinfo(np.int64).max // 4
    Dm = np.where(allowed, D, big)
    best = np.argmin(Dm, axis=1)
    bd = Dm[np.arange(n), best]
    if m >= 2:
        second = np.partition(Dm, 1, axis=1)[:, 1]
    else:
        second = np.full(n, big)
    ok = (bd <= max_distance) & ((second >= big) | (bd < ratio * second))
    rows = np.flatnonzero(ok)
    cols = best[rows]
    if unique and rows.size:
        order = np.lexsort((rows, bd[rows]))
        rows, cols = rows[order], cols[order]
        _, first = np.unique(cols, return_index=True)
        rows, cols = rows[first], cols[first]
    out[rows] = cols
    return out


class KeypointGrid:
    """Uniform-cell spatial index over one camera image, CSR layout."""

    def __init__(self, uv: np.ndarray, image_size, cell: float = GRID_CELL):
        uv = np.atleast_2d(np.asarray(uv, dtype=float)).reshape(-1, 2)
        self.uv = uv
        self.cell = cell
        self.nx = int(np.ceil(image_size[0] / cell)) + 1
        self.ny = int(np.ceil(image_size[1] / cell)) + 1
        cx, cy = self._cells(uv)
        cid = cy * self.nx + cx
        order = np.argsort(cid, kind="stable")
        self.items = order
        counts = np.bincount(cid, minlength=self.nx * self.ny)
        self.start = np.concatenate([[0], np.cumsum(counts)])

    def _cells(self, uv):
        cx = np.clip((uv[:, 0] // self.cell).astype(int), 0, self.nx - 1)
        cy = np.clip((uv[:, 1] // self.cell).astype(int), 0, self.ny - 1)
        return cx, cy

    def query(self, u: float, v: float, radius: float) -> np.ndarray:
        """Indices of points within ``radius`` of (u, v), ascending."""
        x0 = max(int((u - radius) // self.cell), 0)
        x1 = min(int((u + radius) // self.cell), self.nx - 1)
        y0 = max(int((v - radius) // self.cell), 0)
        y1 = min(int((v + radius) // self.cell), self.ny - 1)
        if x0 > x1 or y0 > y1:
            return np.zeros(0, dtype=np.int64)
        parts = []
        for cy in range(y0, y1 + 1):
            a = self.start[cy * self.nx + x0]
            b = self.start[cy * self.nx + x1 + 1]
            parts.append(self.items[a:b])
        cand = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        d2 = np.sum((self.uv[cand] - (u, v)) ** 2, axis=1)
        return np.sort(cand[d2 <= radius * radius])
