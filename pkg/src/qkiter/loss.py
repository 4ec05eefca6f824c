"""Binary cross-entropy over (query, key) pair scores with hard negative mining.

A pair's score is ``P = exp(-||q - k||^2 / tau)``. The loss is::

    L_pos = sum_{positives} -log P / B
    L_neg = sum_{mined negatives} -log(1 - P) / (B * M)
    L     = w_pos * L_pos + w_neg * L_neg

where the mined negatives are the B*M highest-scoring non-positive pairs of
the whole B x N score block. Probabilities are clamped to
``[eps_clamp, 1 - eps_clamp]`` before either log.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateInputError, MappingError, ShapeError

SCORE_TILE = 256


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    M: int = 10
    w_pos: float = 1.0
    w_neg: float = 3.0
    eps_clamp: float = 1e-7
    mining: str = "global"  # or "per_row"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.w_pos < 0 or self.w_neg < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.eps_clamp < 0.5:
            raise ValueError("eps_clamp must lie in (0, 0.5)")
        if self.mining not in ("global", "per_row"):
            raise ValueError(f"unknown mining mode {self.mining!r}")


@dataclass
class ScoreMatrix:
    values: np.ndarray  # (B, N) scores in [0, 1]
    positive_map: np.ndarray  # (B,) db column of each row's positive, -1 if none
    batch_ids: np.ndarray = None
    db_ids: np.ndarray = None

    def __post_init__(self):
        B, N = self.values.shape
        if self.batch_ids is None:
            self.batch_ids = np.arange(B)
        if self.db_ids is None:
            self.db_ids = np.arange(N)

    @property
    def B(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def positive_pairs(self) -> np.ndarray:
        rows = np.flatnonzero(self.positive_map >= 0)
        return np.stack([rows, self.positive_map[rows]], axis=1)


@dataclass
class LossBreakdown:
    L_pos: float
    L_neg: float
    L: float
    mined: np.ndarray = field(repr=False)  # (n_mined, 2) of (row, col)
    short_mine: bool = False

    def as_dict(self) -> dict:
        return {
            "L": self.L,
            "L_pos": self.L_pos,
            "L_neg": self.L_neg,
            "n_mined": int(len(self.mined)),
            "short_mine": self.short_mine,
        }


def pair_score(q, k, tau: float) -> float:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape:
        raise ShapeError(f"descriptor shapes differ: {q.shape} vs {k.shape}")
    diff = q - k
    return float(np.exp(-np.dot(diff, diff) / tau))


def _cross(q, k):
    # Fixed-width zero-padded tiles: every BLAS call has the same shape, so a
    # column's result does not depend on how the database was chunked.
    out = np.empty((q.shape[0], k.shape[0]))
    for lo in range(0, k.shape[0], SCORE_TILE):
        blk = k[lo : lo + SCORE_TILE]
        n = blk.shape[0]
        if n < SCORE_TILE:
            blk = np.vstack([blk, np.zeros((SCORE_TILE - n, k.shape[1]))])
        out[:, lo : lo + n] = (q @ blk.T)[:, :n]
    return out


def squared_distances(q, k) -> np.ndarray:
    """All-pairs squared L2 distances, chunking-invariant bit for bit."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"descriptor widths differ: {q.shape[1]} vs {k.shape[1]}")
    qq = np.einsum("ij,ij->i", q, q)
    kk = np.einsum("ij,ij->i", k, k)
    d2 = qq[:, None] + kk[None, :] - 2.0 * _cross(q, k)
    return np.maximum(d2, 0.0)


def score_block(q, k, tau: float) -> np.ndarray:
    # exponents past 700 are flushed to exactly 0 rather than computed as slow
    # subnormals; such scores are far below any usable clamp
    z = squared_distances(q, k) / tau
    p = np.exp(-np.minimum(z, 700.0))
    p[z > 700.0] = 0.0
    return p


def score_matrix(batch_desc, db_chunks, tau: float, positive_map, workers: int = 1) -> ScoreMatrix:
    """Score a batch against a database given as an iterable of row blocks."""
    from .parallel import map_ordered

    batch_desc = np.asarray(batch_desc, dtype=np.float64)
    chunks = [np.asarray(c, dtype=np.float64) for c in db_chunks]
    parts = map_ordered(lambda c: score_block(batch_desc, c, tau), chunks, workers)
    if parts:
        values = np.concatenate(parts, axis=1)
    else:
        values = np.zeros((batch_desc.shape[0], 0))
    positive_map = np.asarray(positive_map, dtype=np.int64)
    if positive_map.shape != (batch_desc.shape[0],):
        raise MappingError("positive_map needs one entry per batch row")
    if np.any(positive_map >= values.shape[1]) or np.any(positive_map < -1):
        raise MappingError(
            f"positive_map refers to columns outside the {values.shape[1]}-row database"
        )
    return ScoreMatrix(values, positive_map)


def _top_flat(flat: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries; ties go to the lower flat index.
    Returned in (descending value, ascending index) order."""
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    thresh = np.partition(flat, flat.size - k)[flat.size - k]
    above = np.flatnonzero(flat > thresh)
    equal = np.flatnonzero(flat == thresh)
    chosen = np.concatenate([above, equal[: k - above.size]])
    return chosen[np.lexsort((chosen, -flat[chosen]))]


def mine_hard_negatives(sm: ScoreMatrix, B: int | None = None, M: int = 10, mode: str = "global"):
    """The B*M highest-scoring negative pairs as an (n, 2) array of (row, col)."""
    B = sm.B if B is None else B
    vals = sm.values.copy()
    pos = sm.positive_pairs()
    vals[pos[:, 0], pos[:, 1]] = -np.inf
    n_avail = vals.size - len(pos)
    if mode == "per_row":
        picked = []
        for r in range(sm.B):
            row = vals[r]
            avail = row.size - int(sm.positive_map[r] >= 0)
            cols = _top_flat(row, min(M, avail))
            picked.append(np.stack([np.full(cols.size, r), cols], axis=1))
        return np.concatenate(picked) if picked else np.zeros((0, 2), dtype=np.int64)
    flat_idx = _top_flat(vals.ravel(), min(B * M, n_avail))
    return np.stack(np.divmod(flat_idx, sm.N), axis=1).astype(np.int64)


def _clamped(p, eps):
    return np.clip(p, eps, 1.0 - eps)


def contrastive_bce(sm: ScoreMatrix, cfg: LossConfig, mined=None) -> LossBreakdown:
    B = sm.B
    if B == 0:
        raise DegenerateInputError("empty batch")
    if mined is None:
        mined = mine_hard_negatives(sm, B, cfg.M, cfg.mining)
    pos = sm.positive_pairs()
    p_pos = _clamped(sm.values[pos[:, 0], pos[:, 1]], cfg.eps_clamp)
    p_neg = _clamped(sm.values[mined[:, 0], mined[:, 1]], cfg.eps_clamp)
    L_pos = float(np.sum(-np.log(p_pos)) / B)
    L_neg = float(np.sum(-np.log1p(-p_neg)) / (B * cfg.M))
    L = cfg.w_pos * L_pos + cfg.w_neg * L_neg
    return LossBreakdown(L_pos, L_neg, L, mined, short_mine=len(mined) < B * cfg.M)


@dataclass
class LossGrads:
    grad_batch: np.ndarray  # (B, d)
    db_cols: np.ndarray  # sorted unique participating columns
    grad_db: np.ndarray  # (len(db_cols), d)

    def dense_db(self, n_db: int) -> np.ndarray:
        out = np.zeros((n_db, self.grad_batch.shape[1]))
        out[self.db_cols] = self.grad_db
        return out


def loss_backward(sm: ScoreMatrix, cfg: LossConfig, mined, batch_desc, db_desc) -> LossGrads:
    """Gradients of L wrt the batch descriptors and the participating database
    descriptors. ``db_desc`` is indexed only at positive and mined columns."""
    batch_desc = np.asarray(batch_desc, dtype=np.float64)
    mined = np.asarray(mined, dtype=np.int64).reshape(-1, 2)
    B = sm.B
    pos = sm.positive_pairs()
    if len(mined):
        if mined[:, 0].max() >= B or mined[:, 1].max() >= sm.N or mined.min() < 0:
            raise ContractError("mined pair outside the score matrix")
        if np.any(sm.positive_map[mined[:, 0]] == mined[:, 1]):
            raise ContractError("mined pair coincides with a positive pair")
    eps = cfg.eps_clamp
    pairs = np.concatenate([pos, mined])
    p = sm.values[pairs[:, 0], pairs[:, 1]]
    inside = (p > eps) & (p < 1.0 - eps)
    n_pos = len(pos)
    # dL/d(d^2) per pair; zero where the clamp is active
    coef = np.zeros(len(pairs))
    coef[:n_pos] = np.where(inside[:n_pos], cfg.w_pos / (B * cfg.tau), 0.0)
    pn = p[n_pos:]
    coef[n_pos:] = np.where(
        inside[n_pos:], -cfg.w_neg / (B * cfg.M) * pn / (cfg.tau * (1.0 - pn)), 0.0
    )
    cols, inverse = np.unique(pairs[:, 1], return_inverse=True)
    k = np.asarray(db_desc[cols], dtype=np.float64)
    diff = batch_desc[pairs[:, 0]] - k[inverse]
    contrib = (2.0 * coef)[:, None] * diff
    grad_batch = np.zeros_like(batch_desc)
    np.add.at(grad_batch, pairs[:, 0], contrib)
    grad_db = np.zeros((len(cols), batch_desc.shape[1]))
    np.add.at(grad_db, inverse, -contrib)
    return LossGrads(grad_batch, cols, grad_db)
