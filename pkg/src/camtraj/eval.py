"""Downstream evaluation: MCQ retrieval, linear probes, fusion, self-similarity
maps, repetition counting and temporal-context sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import DataError, InvalidInputError, LengthError, MissingEmbeddingError, ShapeError
from .rng import make_rng

log = logging.getLogger(__name__)

N_CHOICES = 5
STOP_PREFIXES = ("c", "the", "a")


def extract_verb(text: str) -> str:
    """First token of the lowercased narration, skipping a few stop prefixes."""
    toks = [t.strip(".,;:!?\"'") for t in text.lower().split()]
    toks = [t for t in toks if t]
    i = 0
    while i < len(toks) - 1 and toks[i] in STOP_PREFIXES:
        i += 1
    return toks[i] if toks else ""


def record_verb(rec) -> str:
    return rec.verb if getattr(rec, "verb", None) else extract_verb(rec.text)


# ---------------------------------------------------------------------------
# MCQ


@dataclass(frozen=True)
class MCQItem:
    query_id: str
    candidate_ids: tuple
    correct_index: int
    query_verb: str
    candidate_verbs: tuple
    groups: dict = field(default_factory=dict)
    # "take", "activity" or "global": the widest pool the distractors came from
    negative_source: str = "take"

    def __post_init__(self):
        if len(self.candidate_ids) != N_CHOICES or len(self.candidate_verbs) != N_CHOICES:
            raise LengthError(f"MCQ item needs exactly {N_CHOICES} candidates")
        if not 0 <= self.correct_index < N_CHOICES:
            raise InvalidInputError("correct index out of range")
        if len(set(self.candidate_ids)) != N_CHOICES:
            raise InvalidInputError("candidate texts must be distinct")
        if self.negative_source not in ("take", "activity", "global"):
            raise InvalidInputError(f"unknown negative source {self.negative_source!r}")
        if any(v == self.query_verb for j, v in enumerate(self.candidate_verbs) if j != self.correct_index):
            raise InvalidInputError("distractor shares the query verb")

    @property
    def correct_id(self) -> str:
        return self.candidate_ids[self.correct_index]

    def to_json(self) -> dict:
        d = asdict(self)
        d["candidate_ids"] = list(self.candidate_ids)
        d["candidate_verbs"] = list(self.candidate_verbs)
        return d

    @classmethod
    def from_json(cls, d) -> "MCQItem":
        d = dict(d)
        d["candidate_ids"] = tuple(d["candidate_ids"])
        d["candidate_verbs"] = tuple(d["candidate_verbs"])
        return cls(**d)


class MCQSet(list):
    """List of items that also remembers how many queries had to be skipped."""

    skipped: int = 0


def _group_tags(rec) -> dict:
    out = {}
    if rec.activity_label is not None:
        out["activity"] = rec.activity_label
    if rec.visibility is not None:
        out["visibility"] = rec.visibility
    return out


def _balance(queries, rng, balance_keys, cap):
    cells: Dict[tuple, list] = {}
    for i, q in enumerate(queries):
        cells.setdefault(tuple(getattr(q, k) for k in balance_keys), []).append(i)
    n = min(len(v) for v in cells.values())
    if cap is not None:
        n = min(n, int(cap))
    keep = []
    for key in sorted(cells, key=str):
        idx = cells[key]
        keep.extend(idx[j] for j in sorted(rng.permutation(len(idx))[:n]))
    return [queries[i] for i in sorted(keep)]


def build_mcq(records, rng=0, balance_keys: Optional[Sequence[str]] = None, cap: Optional[int] = None,
              queries=None) -> MCQSet:
    """Five-way items with hard negatives.

    Distractors are texts whose verb differs from the query verb, taken from
    the query's take first, then from records with the same activity label,
    then from anywhere. ``queries`` defaults to ``records``; with
    ``balance_keys`` the queries are subsampled to equal counts per cell,
    at most ``cap`` each.
    """
    rng = make_rng(rng)
    records = list(records)
    queries = list(records if queries is None else queries)
    if balance_keys:
        queries = _balance(queries, rng, balance_keys, cap)
    by_take: Dict[str, list] = {}
    by_act: Dict[str, list] = {}
    for r in records:
        by_take.setdefault(r.take_id, []).append(r)
        by_act.setdefault(r.activity_label, []).append(r)

    items = MCQSet()
    for q in queries:
        qv = record_verb(q)
        chosen: List = []
        seen = {q.embedding_id}
        source = "take"
        tiers = (("take", by_take.get(q.take_id, [])),
                 ("activity", by_act.get(q.activity_label, []) if q.activity_label is not None else []),
                 ("global", records))
        for name, pool in tiers:
            if len(chosen) >= N_CHOICES - 1:
                break
            cands, cand_ids = [], set()
            for r in pool:
                if r.embedding_id in seen or r.embedding_id in cand_ids or record_verb(r) == qv:
                    continue
                cands.append(r)
                cand_ids.add(r.embedding_id)
            if not cands:
                continue
            need = N_CHOICES - 1 - len(chosen)
            pick = rng.permutation(len(cands))[:need]
            for j in sorted(pick):
                chosen.append(cands[j])
                seen.add(cands[j].embedding_id)
            source = name
        if len(chosen) < N_CHOICES - 1:
            items.skipped += 1
            continue
        correct = int(rng.integers(N_CHOICES))
        ids = [r.embedding_id for r in chosen]
        verbs = [record_verb(r) for r in chosen]
        ids.insert(correct, q.embedding_id)
        verbs.insert(correct, qv)
        items.append(MCQItem(q.key, tuple(ids), correct, qv, tuple(verbs), _group_tags(q), source))
    if items.skipped:
        warnings.warn(f"{items.skipped} MCQ queries skipped: fewer than {N_CHOICES} usable candidates")
    return items


@dataclass
class MCQResult:
    overall: float
    n: int
    per_group: Dict[str, float] = field(default_factory=dict)
    predictions: List[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"overall": self.overall, "n": self.n, "per_group": self.per_group}


def _unit(v, what):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise InvalidInputError(f"zero-norm {what} embedding")
    return v / n


def eval_mcq(embeddings: Mapping[str, np.ndarray], items: Sequence[MCQItem], text_store) -> MCQResult:
    """Pick the candidate text with the highest cosine similarity; ties go to
    the lowest index (``np.argmax``)."""
    preds, hits = [], []
    groups: Dict[str, List[bool]] = {}
    for it in items:
        if it.query_id not in embeddings:
            raise MissingEmbeddingError(f"no trajectory embedding for {it.query_id!r}")
        z = _unit(embeddings[it.query_id], "trajectory")
        cand = _unit(text_store.matrix(list(it.candidate_ids)), "text")
        p = int(np.argmax(cand @ z))
        preds.append(p)
        ok = p == it.correct_index
        hits.append(ok)
        for k, v in sorted(it.groups.items()):
            groups.setdefault(f"{k}={v}", []).append(ok)
    overall = float(np.mean(hits)) if hits else float("nan")
    return MCQResult(overall, len(hits), {k: float(np.mean(v)) for k, v in sorted(groups.items())}, preds)


def embed_for_items(model, dataset, context: float = 0.0, records=None) -> Dict[str, np.ndarray]:
    from .training import embed_records

    recs = list(dataset.records if records is None else records)
    z = embed_records(model, recs, dataset.trajectories, _rate(dataset, recs), context)
    return {r.key: z[i] for i, r in enumerate(recs)}


def _rate(dataset, recs) -> float:
    return float(dataset.trajectories[recs[0].trajectory_id].sample_rate_hz) if recs else 20.0


def write_jsonl(rows, path) -> None:
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# fusion


def fuse(z_traj, z_video) -> np.ndarray:
    """Mean of two unit embeddings, renormalized."""
    a = np.asarray(z_traj, dtype=np.float64)
    b = np.asarray(z_video, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch {a.shape} vs {b.shape}")
    for v in (a, b):
        if np.any(np.abs(np.linalg.norm(v, axis=-1) - 1) > 1e-3):
            raise InvalidInputError("fuse expects unit-norm inputs")
    m = (a + b) / 2
    n = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InvalidInputError("antipodal inputs have no fused direction")
    return m / n


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class LinearProbe:
    weight: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    classes: List[str]
    lam: float = 1e-3
    epochs: int = 200

    def __post_init__(self):
        if len(self.classes) < 2:
            raise InvalidInputError("probe needs at least two classes")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise InvalidInputError("non-finite probe weights")

    def scores(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weight.T + self.bias

    def predict(self, X) -> List[str]:
        return [self.classes[j] for j in np.argmax(self.scores(X), axis=1)]

    def accuracy(self, X, y) -> float:
        return float(np.mean(np.array(self.predict(X)) == np.asarray(y)))


def train_probe(X, y, lam: float = 1e-3, epochs: int = 200, rng=0, lr: float = 0.1,
                batch_size: int = 32) -> LinearProbe:
    """One-vs-rest linear SVM: hinge loss plus (lam/2)|w|^2, minibatch
    subgradient descent with step lr / (1 + lr * lam * t)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError("features must be (M, D) with one label per row")
    classes = sorted({str(v) for v in y})
    if len(classes) < 2:
        raise InvalidInputError("single-class labels")
    if len(X) < len(classes):
        raise InvalidInputError("fewer samples than classes")
    rng = make_rng(rng)
    Y = np.where(np.array([str(v) for v in y])[:, None] == np.array(classes)[None, :], 1.0, -1.0)
    C, D = len(classes), X.shape[1]
    W = np.zeros((C, D))
    b = np.zeros(C)
    t = 0
    for _ in range(epochs):
        perm = rng.permutation(len(X))
        for s in range(0, len(X), batch_size):
            idx = perm[s:s + batch_size]
            xb, yb = X[idx], Y[idx]
            margin = yb * (xb @ W.T + b)
            active = (margin < 1.0) * yb  # (n, C)
            gW = lam * W - active.T @ xb / len(idx)
            gb = -active.mean(axis=0)
            eta = lr / (1.0 + lr * lam * t)
            W -= eta * gW
            b -= eta * gb
            t += 1
    return LinearProbe(W, b, classes, lam, epochs)


def split_80_20(n: int, rng=0):
    perm = make_rng(rng).permutation(n)
    k = int(round(0.8 * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


# ---------------------------------------------------------------------------
# self-similarity and counting


@dataclass
class SimilarityMap:
    matrix: np.ndarray
    rate_hz: float

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError("similarity map must be square")
        if not np.allclose(m, m.T, atol=1e-6, rtol=0):
            raise InvalidInputError("similarity map not symmetric")
        if not np.allclose(np.diag(m), 1.0, atol=1e-6, rtol=0):
            raise InvalidInputError("similarity map diagonal must be 1")
        self.matrix = m

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def self_similarity(features, rate_hz: float = 20.0) -> SimilarityMap:
    """Pairwise cosine similarity of feature rows. Zero rows are similar to
    nothing (0 off the diagonal) and the case is reported as a warning."""
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ShapeError("need an (N, D) feature matrix with N >= 2")
    norms = np.linalg.norm(F, axis=1)
    zero = norms <= 1e-12
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm feature rows get similarity 0")
    U = np.where(zero[:, None], 0.0, F / np.where(zero, 1.0, norms)[:, None])
    M = np.clip(U @ U.T, -1.0, 1.0)
    M = (M + M.T) / 2
    np.fill_diagonal(M, 1.0)
    return SimilarityMap(M, rate_hz)


@dataclass
class CountResult:
    count: int
    period_s: Optional[float]
    period_samples: Optional[float]
    aperiodic: bool
    peak: float = 0.0
    noise_floor: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def lag_profile(M: np.ndarray) -> np.ndarray:
    """a[l] = mean_i M[i, i + l] for l = 0 .. N-1."""
    N = M.shape[0]
    return np.array([np.mean(np.diagonal(M, offset=l)) for l in range(N)])


def count_repetitions(smap: SimilarityMap, n_masked: Optional[int] = None, min_lag: int = 2,
                      harmonic_tol: float = 0.9) -> CountResult:
    """Repetition count from the diagonal lag profile of a self-similarity map.

    The dominant period is the strongest interior local maximum of the
    mean-subtracted profile over lags [min_lag, N/2] past its first negative
    value; among peaks reaching
    ``harmonic_tol`` of the strongest, the shortest lag wins so that multiples
    of the period are not selected. The lag is refined by a parabola through
    its neighbours and the count is ``round(n / period)``. Peaks below three
    standard errors of the off-diagonal similarities are reported aperiodic.
    """
    M = smap.matrix
    N = M.shape[0]
    if N < 8:
        raise LengthError("counting needs N >= 8")
    n = N if n_masked is None else int(n_masked)
    hi = N // 2
    a = lag_profile(M)[: hi + 2]
    prof = a - a[1:hi + 1].mean()
    # a genuine period sits beyond the first dip below the mean; earlier
    # bumps are noise on the central ridge
    below = np.nonzero(prof[1:hi + 1] < 0)[0]
    first = int(below[0]) + 1 if below.size else hi + 1
    peaks = [l for l in range(max(min_lag, first, 1), hi + 1)
             if l + 1 < len(prof) and prof[l] >= prof[l - 1] and prof[l] > prof[l + 1]]
    off = M[~np.eye(N, dtype=bool)]
    sd = float(off.std())
    if not peaks:
        return CountResult(0, None, None, True, 0.0, 0.0)
    best = max(prof[l] for l in peaks)
    lstar = min(l for l in peaks if prof[l] >= harmonic_tol * best)
    peak = float(prof[lstar])
    floor = 3.0 * sd / math.sqrt(N - lstar)
    if peak <= 0 or peak < floor:
        return CountResult(0, None, None, True, peak, floor)
    y0, y1, y2 = prof[lstar - 1], prof[lstar], prof[lstar + 1]
    den = y0 - 2 * y1 + y2
    delta = 0.0 if den == 0 else float(np.clip(0.5 * (y0 - y2) / den, -0.5, 0.5))
    period = lstar + delta
    count = int(math.floor(n / period + 0.5))
    return CountResult(count, period / smap.rate_hz, period, False, peak, floor)


def pose_oracle_features(seq) -> np.ndarray:
    """Raw-pose features for counting: translation rows with the window mean removed."""
    t = np.asarray(seq.rows if hasattr(seq, "rows") else seq, dtype=np.float64)[:, :3]
    return t - t.mean(axis=0)


def write_similarity_csv(smap: SimilarityMap, path) -> None:
    np.savetxt(path, smap.matrix, delimiter=",", fmt="%.6f")


def write_pgm(smap: SimilarityMap, path) -> None:
    """8-bit binary PGM, row-major, values mapped linearly from [-1, 1] to [0, 255]."""
    img = np.clip(np.rint((smap.matrix + 1.0) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise DataError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# context sweep


def context_sweep(model, dataset, w_values: Sequence[float], items=None, rng=0,
                  csv_path=None) -> List[dict]:
    """Re-embed every query with symmetric context w/2 on each side and
    re-score the same MCQ items for each w."""
    from .training import clip_context, window_extent

    recs = dataset.split("test") or list(dataset.records)
    if items is None:
        items = build_mcq(recs, rng)
    by_key = {r.key: r for r in recs}
    queries = [by_key[it.query_id] for it in items]
    rows = []
    for w in w_values:
        n_clip = 0
        for r in queries:
            spec = clip_context(r.t1, r.t2, w / 2, w / 2, window_extent(dataset.trajectories[r.trajectory_id]))
            n_clip += spec.clipped_start or spec.clipped_end
        emb = embed_for_items(model, dataset, float(w), queries)
        res = eval_mcq(emb, items, dataset.text_store)
        rows.append({"w": float(w), "accuracy": res.overall, "n": res.n, "n_clipped": int(n_clip)})
    if csv_path is not None:
        write_csv(rows, csv_path)
    return rows


def write_csv(rows: Sequence[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
