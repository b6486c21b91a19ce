"""Pairing manifests, text-embedding stores, the embedding-service client and
the synthetic trajectory generator used for desk-scale experiments."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import struct
import threading
import time
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import geometry as geo
from .errors import (DataError, EmbeddingDimensionError, EmbeddingHTTPError,
                     EmbeddingServiceError, EmbeddingTimeoutError, InvalidInputError,
                     ManifestError, MissingEmbeddingError)
from .geometry import Frame, Trajectory
from .rng import child_rng, make_rng

log = logging.getLogger(__name__)

EMBED_DIM = 512
GRAVITY = np.array([0.0, -9.81, 0.0])
SPLITS = ("train", "val", "test")
VISIBILITY = ("iv", "oov")


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class PairManifestRecord:
    trajectory_id: str
    t1: float
    t2: float
    text: str
    embedding_id: str
    take_id: str
    split: str
    verb: Optional[str] = None
    activity_label: Optional[str] = None
    visibility: Optional[str] = None
    record_id: Optional[str] = None

    def validate(self, line=None):
        for name in ("trajectory_id", "text", "embedding_id", "take_id"):
            v = getattr(self, name)
            if not isinstance(v, str) or not v:
                raise ManifestError(f"field {name!r} must be a nonempty string", line, name)
        for name in ("t1", "t2"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ManifestError(f"field {name!r} must be a finite number", line, name)
        if not self.t1 < self.t2:
            raise ManifestError(f"t1 ({self.t1}) must be < t2 ({self.t2})", line, "t1")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}", line, "split")
        if self.visibility is not None and self.visibility not in VISIBILITY:
            raise ManifestError(f"unknown visibility {self.visibility!r}", line, "visibility")

    @property
    def key(self) -> str:
        return self.record_id if self.record_id is not None else f"{self.trajectory_id}@{self.t1:g}-{self.t2:g}"

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


_REQUIRED = ("trajectory_id", "t1", "t2", "text", "embedding_id", "take_id", "split")
_FIELDS = {f.name for f in fields(PairManifestRecord)}


def parse_record(obj: dict, line=None) -> PairManifestRecord:
    if not isinstance(obj, dict):
        raise ManifestError("record must be a JSON object", line)
    for name in _REQUIRED:
        if name not in obj:
            raise ManifestError(f"missing required field {name!r}", line, name)
    unknown = sorted(set(obj) - _FIELDS)
    if unknown:
        raise ManifestError(f"unknown field(s) {unknown}", line, unknown[0])
    rec = PairManifestRecord(**obj)
    rec.validate(line)
    return rec


def load_manifest(path) -> List[PairManifestRecord]:
    """Read a JSON-lines manifest; blank lines are skipped."""
    records = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON ({exc.msg})", lineno) from None
            rec = parse_record(obj, lineno)
            dup = (rec.trajectory_id, rec.t1, rec.t2, rec.text)
            if dup in seen:
                raise ManifestError(f"duplicate record {dup}", lineno)
            seen.add(dup)
            if rec.record_id is None:
                rec = PairManifestRecord(**{**asdict(rec), "record_id": f"{rec.trajectory_id}/{lineno}"})
            records.append(rec)
    return records


def write_manifest(records: Iterable[PairManifestRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# text embeddings


class Provenance(str, enum.Enum):
    FILE = "file"
    SERVICE = "service"
    ORACLE = "oracle"


_EMB_MAGIC = b"CTEMB\x00\x00\x00"
_EMB_VERSION = 1
_EMB_HEAD = struct.Struct("<8sIII")


class TextEmbeddingStore:
    """embedding_id -> unit-norm float32 vector of length ``dim``."""

    def __init__(self, dim: int = EMBED_DIM, provenance: Provenance = Provenance.FILE):
        self.dim = dim
        self.provenance = Provenance(provenance)
        self._vecs: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._vecs)

    def __contains__(self, key):
        return key in self._vecs

    def ids(self) -> List[str]:
        return list(self._vecs)

    def add(self, key: str, vec) -> None:
        v = np.asarray(vec, dtype=np.float64).reshape(-1)
        if v.shape != (self.dim,):
            raise EmbeddingDimensionError(f"embedding {key!r} has length {v.size}, expected {self.dim}")
        n = np.linalg.norm(v)
        if not n > 0 or not np.isfinite(n):
            raise DataError(f"embedding {key!r} has zero or non-finite norm")
        with self._lock:
            self._vecs[key] = (v / n).astype(np.float32)

    def get(self, key: str) -> np.ndarray:
        try:
            return self._vecs[key]
        except KeyError:
            raise MissingEmbeddingError(f"unresolvable embedding id {key!r}") from None

    def matrix(self, keys: Sequence[str]) -> np.ndarray:
        return np.stack([self.get(k) for k in keys]) if keys else np.zeros((0, self.dim), np.float32)

    def save(self, path) -> None:
        keys = sorted(self._vecs)
        parts = [_EMB_HEAD.pack(_EMB_MAGIC, _EMB_VERSION, len(keys), self.dim)]
        for k in keys:
            b = k.encode("utf-8")
            parts.append(struct.pack("<I", len(b)) + b)
        parts.append(self.matrix(keys).astype("<f4").tobytes())
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)

    @classmethod
    def load(cls, path, provenance: Provenance = Provenance.FILE) -> "TextEmbeddingStore":
        blob = Path(path).read_bytes()
        if len(blob) < _EMB_HEAD.size:
            raise DataError(f"{path}: truncated embedding file")
        magic, version, count, dim = _EMB_HEAD.unpack_from(blob, 0)
        if magic != _EMB_MAGIC:
            raise DataError(f"{path}: not an embedding cache file")
        if version != _EMB_VERSION:
            raise DataError(f"{path}: embedding cache version {version}, expected {_EMB_VERSION}")
        off = _EMB_HEAD.size
        keys = []
        for _ in range(count):
            if off + 4 > len(blob):
                raise DataError(f"{path}: truncated id table")
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            keys.append(blob[off:off + n].decode("utf-8"))
            off += n
        need = count * dim * 4
        if len(blob) - off != need:
            raise DataError(f"{path}: payload has {len(blob) - off} bytes, expected {need}")
        mat = np.frombuffer(blob, dtype="<f4", offset=off).reshape(count, dim)
        store = cls(dim=dim, provenance=provenance)
        for k, v in zip(keys, mat):
            store.add(k, v)
        return store


def text_embedding_id(text: str) -> str:
    return "txt:" + hashlib.sha1(text.encode("utf-8")).hexdigest()[:16]


class EmbeddingClient:
    """Client for an external frozen text encoder.

    Protocol: ``POST endpoint`` with ``{"texts": [...]}``; the response is
    ``{"embeddings": [[...], ...]}`` with one vector per text.
    """

    def __init__(self, endpoint: str, store: Optional[TextEmbeddingStore] = None,
                 cache_path=None, timeout: float = 30.0, attempts: int = 3,
                 backoff_s: float = 0.5, batch_size: int = 64):
        self.endpoint = endpoint
        self.store = store if store is not None else TextEmbeddingStore(provenance=Provenance.SERVICE)
        self.cache_path = Path(cache_path) if cache_path else None
        self.timeout = timeout
        self.attempts = attempts
        self.backoff_s = backoff_s
        self.batch_size = batch_size
        self.cache_hits = 0
        self.requests = 0
        self._write_lock = threading.Lock()

    def _post(self, texts: List[str]) -> list:
        body = json.dumps({"texts": texts}).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        last = None
        for attempt in range(self.attempts):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            self.requests += 1
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                break
            except urllib.error.HTTPError as exc:
                last = EmbeddingHTTPError(exc.code)
                if exc.code < 500:
                    raise last from None
            except (TimeoutError, OSError) as exc:
                reason = getattr(exc, "reason", exc)
                if isinstance(reason, TimeoutError) or "timed out" in str(reason):
                    last = EmbeddingTimeoutError(f"embedding request timed out after {self.timeout}s")
                else:
                    last = EmbeddingServiceError(f"embedding request failed: {reason}")
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise EmbeddingServiceError(f"malformed response: {exc}") from None
        else:
            raise last
        vecs = payload.get("embeddings") if isinstance(payload, dict) else None
        if not isinstance(vecs, list) or len(vecs) != len(texts):
            got = len(vecs) if isinstance(vecs, list) else None
            raise EmbeddingServiceError(f"expected {len(texts)} embeddings, got {got}")
        for v in vecs:
            if not isinstance(v, list) or len(v) != self.store.dim:
                n = len(v) if isinstance(v, list) else None
                raise EmbeddingDimensionError(f"embedding has length {n}, expected {self.store.dim}")
        return vecs

    def fetch(self, texts: Sequence[str]) -> List[str]:
        """Resolve ``texts`` to embedding ids, querying the service for misses."""
        ids = [text_embedding_id(t) for t in texts]
        missing = []
        for t, k in zip(texts, ids):
            if k in self.store:
                self.cache_hits += 1
            elif t not in missing:
                missing.append(t)
        for i in range(0, len(missing), self.batch_size):
            chunk = missing[i:i + self.batch_size]
            vecs = self._post(chunk)
            # validated in full above; only now touch the store
            for t, v in zip(chunk, vecs):
                self.store.add(text_embedding_id(t), v)
            if self.cache_path is not None:
                with self._write_lock:
                    self.store.save(self.cache_path)
        return ids


def fetch_embeddings(texts, endpoint, store=None, cache_path=None, **kw) -> List[np.ndarray]:
    client = EmbeddingClient(endpoint, store=store, cache_path=cache_path, **kw)
    return [client.store.get(k) for k in client.fetch(texts)]


# ---------------------------------------------------------------------------
# trajectory collections


def load_trajectories(directory) -> Dict[str, Trajectory]:
    out = {}
    for p in sorted(Path(directory).glob("*.tum")):
        out[p.stem] = geo.read_tum(p)
    return out


def save_trajectories(trajs: Dict[str, Trajectory], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k in sorted(trajs):
        geo.write_tum(trajs[k], d / f"{k}.tum")


@dataclass
class Dataset:
    records: List[PairManifestRecord]
    trajectories: Dict[str, Trajectory]
    text_store: TextEmbeddingStore

    def split(self, name: str) -> List[PairManifestRecord]:
        return [r for r in self.records if r.split == name]

    def preflight(self) -> None:
        """Every record resolves to a trajectory and an embedding."""
        for r in self.records:
            if r.embedding_id not in self.text_store:
                raise MissingEmbeddingError(f"record {r.key}: unresolvable embedding id {r.embedding_id!r}")
            if r.trajectory_id not in self.trajectories:
                raise DataError(f"record {r.key}: unknown trajectory {r.trajectory_id!r}")

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_manifest(self.records, d / "manifest.jsonl")
        save_trajectories(self.trajectories, d / "trajectories")
        self.text_store.save(d / "text_embeddings.bin")

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        if not (d / "manifest.jsonl").exists():
            raise DataError(f"{d}: no manifest.jsonl")
        ds = cls(load_manifest(d / "manifest.jsonl"), load_trajectories(d / "trajectories"),
                 TextEmbeddingStore.load(d / "text_embeddings.bin"))
        ds.preflight()
        return ds


# ---------------------------------------------------------------------------
# synthetic trajectories


class SynthFamily(str, enum.Enum):
    ORBIT = "orbit"
    OSCILLATING_WALK = "oscillating_walk"
    UPWARD_TILT = "upward_tilt"
    DOWNWARD_SWEEP = "downward_sweep"
    PERIODIC_CHOP = "periodic_chop"
    STATIC_JITTER = "static_jitter"


DEFAULT_FAMILIES = (SynthFamily.ORBIT, SynthFamily.OSCILLATING_WALK, SynthFamily.UPWARD_TILT,
                    SynthFamily.DOWNWARD_SWEEP, SynthFamily.PERIODIC_CHOP)

CANONICAL_TEXT = {
    SynthFamily.ORBIT: "c circles around the table",
    SynthFamily.OSCILLATING_WALK: "c walks forward down the hallway",
    SynthFamily.UPWARD_TILT: "c looks up toward the hoop",
    SynthFamily.DOWNWARD_SWEEP: "c scans the floor from left to right",
    SynthFamily.PERIODIC_CHOP: "c chops the onion on the board",
    SynthFamily.STATIC_JITTER: "c stands still by the counter",
}

# (low, high) ranges; a value given to synth_generate must lie inside them
PARAM_RANGES = {
    SynthFamily.ORBIT: {"radius": (0.5, 3.0), "period_s": (2.0, 30.0)},
    SynthFamily.OSCILLATING_WALK: {"speed": (0.3, 2.0), "step_hz": (1.0, 3.0), "bob_m": (0.0, 0.1)},
    SynthFamily.UPWARD_TILT: {"tilt_rate_deg": (1.0, 15.0), "rise_speed": (0.0, 0.3)},
    SynthFamily.DOWNWARD_SWEEP: {"pitch_deg": (-70.0, -15.0), "sweep_rate_deg": (5.0, 40.0)},
    SynthFamily.PERIODIC_CHOP: {"repetitions": (1, 200), "dip_m": (0.01, 0.2)},
    SynthFamily.STATIC_JITTER: {},
}
COMMON_RANGES = {"noise": (0.0, 0.1)}


def sample_params(family, rng: np.random.Generator, duration_s: float) -> dict:
    """Draw desk-scale parameters for ``family``."""
    f = SynthFamily(family)
    if f is SynthFamily.ORBIT:
        p = {"radius": rng.uniform(0.8, 2.0), "period_s": rng.uniform(8.0, 16.0)}
    elif f is SynthFamily.OSCILLATING_WALK:
        p = {"speed": rng.uniform(0.8, 1.5), "step_hz": rng.uniform(1.6, 2.2), "bob_m": rng.uniform(0.02, 0.05)}
    elif f is SynthFamily.UPWARD_TILT:
        p = {"tilt_rate_deg": rng.uniform(3.0, 8.0), "rise_speed": rng.uniform(0.02, 0.1)}
    elif f is SynthFamily.DOWNWARD_SWEEP:
        p = {"pitch_deg": rng.uniform(-50.0, -30.0), "sweep_rate_deg": rng.uniform(10.0, 25.0)}
    elif f is SynthFamily.PERIODIC_CHOP:
        period = rng.uniform(1.0, 2.5)
        p = {"repetitions": max(1, int(round(duration_s / period))), "dip_m": rng.uniform(0.04, 0.08)}
    else:
        p = {}
    p["noise"] = rng.uniform(0.002, 0.006)
    return p


def _rot_y(a):
    return geo.axis_angle_to_matrix([0.0, 1.0, 0.0], a)


def _rot_x(a):
    return geo.axis_angle_to_matrix([1.0, 0.0, 0.0], a)


def _look(yaw, pitch):
    """Camera-to-world rotation; x left, y up, z forward. Positive pitch looks up."""
    return _rot_y(yaw) @ _rot_x(-np.asarray(pitch))


def _validate_params(family: SynthFamily, params: dict) -> None:
    ranges = {**PARAM_RANGES[family], **COMMON_RANGES}
    unknown = sorted(set(params) - set(ranges))
    if unknown:
        raise InvalidInputError(f"{family.value}: unknown parameter(s) {unknown}")
    missing = sorted(set(PARAM_RANGES[family]) - set(params))
    if missing:
        raise InvalidInputError(f"{family.value}: missing parameter(s) {missing}")
    for k, v in params.items():
        lo, hi = ranges[k]
        if not lo <= v <= hi:
            raise InvalidInputError(f"{family.value}: {k}={v} outside [{lo}, {hi}]")
    if family is SynthFamily.PERIODIC_CHOP and int(params["repetitions"]) != params["repetitions"]:
        raise InvalidInputError("periodic_chop: repetitions must be an integer")


def synth_generate(family, params: dict, duration_s: float, rate_hz: float, rng,
                   placement: bool = True):
    """One synthetic trajectory.

    Returns ``(trajectory, label, canonical_text)``. With ``placement`` the
    whole trajectory is moved by a random yaw and offset, which the
    midpoint-relative encoding removes again.
    """
    f = SynthFamily(family)
    _validate_params(f, params)
    if not duration_s > 0 or not rate_hz > 0:
        raise InvalidInputError("duration_s and rate_hz must be positive")
    rng = make_rng(rng)
    n = int(round(duration_s * rate_hz))
    t = np.arange(n) / rate_hz
    pos = np.zeros((n, 3))
    pos[:, 1] = 1.6
    yaw = np.zeros(n)
    pitch = np.zeros(n)

    if f is SynthFamily.ORBIT:
        r, period = params["radius"], params["period_s"]
        phi = 2 * np.pi * t / period
        pos[:, 0] = r * np.cos(phi)
        pos[:, 2] = r * np.sin(phi)
        # heading along the tangent (-sin, 0, cos) in the x-z plane
        yaw = np.arctan2(-np.sin(phi), np.cos(phi))
    elif f is SynthFamily.OSCILLATING_WALK:
        v, fs, bob = params["speed"], params["step_hz"], params["bob_m"]
        pos[:, 2] = v * t
        pos[:, 1] += bob * np.sin(2 * np.pi * fs * t)
        pos[:, 0] = 0.5 * bob * np.sin(np.pi * fs * t)
        yaw = np.deg2rad(2.0) * np.sin(np.pi * fs * t)
        pitch = np.deg2rad(1.5) * np.sin(2 * np.pi * fs * t)
    elif f is SynthFamily.UPWARD_TILT:
        rate, rise = np.deg2rad(params["tilt_rate_deg"]), params["rise_speed"]
        pitch = np.deg2rad(-20.0) + rate * t
        pos[:, 1] += rise * t
        pos[:, 2] = 0.1 * t
    elif f is SynthFamily.DOWNWARD_SWEEP:
        pitch = np.full(n, np.deg2rad(params["pitch_deg"]))
        # left-to-right: yaw decreases (x axis points left)
        yaw = -np.deg2rad(params["sweep_rate_deg"]) * t
        pos[:, 0] = -0.15 * t
    elif f is SynthFamily.PERIODIC_CHOP:
        k, dip = int(params["repetitions"]), params["dip_m"]
        cycle = 0.5 * (1 - np.cos(2 * np.pi * k * t / duration_s))
        pos[:, 1] -= dip * cycle
        pos[:, 2] = 0.5 * dip * cycle
        pitch = np.deg2rad(-50.0) - np.deg2rad(6.0) * cycle

    R = _look(yaw, pitch)
    sigma = params.get("noise", 0.0)
    if sigma > 0:
        pos = pos + sigma * rng.standard_normal(pos.shape)
    traj = Trajectory(timestamps=t, translations=pos, rotations=R, frame=Frame.ARIA,
                      sample_rate_hz=rate_hz, gravity_world=GRAVITY.copy(), uniform=True)
    if placement:
        G = _rot_y(rng.uniform(-np.pi, np.pi))
        offset = np.array([rng.uniform(-5, 5), 0.0, rng.uniform(-5, 5)])
        traj = geo.transform_trajectory(traj, G, offset)
    return traj, f.value, CANONICAL_TEXT[f]


def oracle_text_store(families: Sequence, seed: int = 0, dim: int = EMBED_DIM) -> TextEmbeddingStore:
    """Mutually orthogonal unit vectors, one per family text."""
    if len(families) > dim:
        raise InvalidInputError(f"cannot build {len(families)} orthogonal vectors in {dim} dimensions")
    rng = make_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, len(families))))
    store = TextEmbeddingStore(dim=dim, provenance=Provenance.ORACLE)
    for i, fam in enumerate(families):
        store.add(family_embedding_id(fam), q[:, i])
    return store


def family_embedding_id(fam) -> str:
    return f"txt:{SynthFamily(fam).value}"


def _verb(text: str) -> str:
    from .eval import extract_verb
    return extract_verb(text)


def split_counts(n: int, fractions=(0.7, 0.15, 0.15)) -> tuple:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


def make_synth_dataset(n_per_family: int, families=DEFAULT_FAMILIES, rng=0,
                       duration_s: float = 10.0, window_s: float = 4.0, rate_hz: float = 20.0) -> Dataset:
    """Balanced synthetic pairing dataset.

    Trajectory ``i`` of every family shares the take ``take{i}``, so each take
    holds one record per family and MCQ distractors can come from the same
    take. Splits are assigned per take, 70/15/15.
    """
    if n_per_family < 1:
        raise InvalidInputError("n_per_family must be >= 1")
    families = [SynthFamily(f) for f in families]
    rng = make_rng(rng)
    store = oracle_text_store(families, seed=int(rng.integers(2 ** 31)))
    n_train, n_val, _ = split_counts(n_per_family)
    take_order = rng.permutation(n_per_family)
    take_split = {}
    for rank, i in enumerate(take_order):
        take_split[int(i)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    records, trajs = [], {}
    n_win = int(round(window_s * rate_hz))
    n_all = int(round(duration_s * rate_hz))
    if n_win > n_all:
        raise InvalidInputError("window longer than trajectory")
    for fi, fam in enumerate(families):
        for i in range(n_per_family):
            r = child_rng(rng, fi, i)
            params = sample_params(fam, r, duration_s)
            traj, label, text = synth_generate(fam, params, duration_s, rate_hz, r)
            tid = f"{fam.value}_{i:04d}"
            trajs[tid] = traj
            start = int(r.integers(0, n_all - n_win + 1))
            t1 = start / rate_hz
            records.append(PairManifestRecord(
                trajectory_id=tid, t1=t1, t2=t1 + window_s, text=text,
                embedding_id=family_embedding_id(fam), take_id=f"take{i:04d}",
                split=take_split[i], verb=_verb(text), activity_label=label,
                visibility=VISIBILITY[int(r.integers(2))], record_id=tid))
    return Dataset(records, trajs, store)


def _chain(segments: Sequence[Trajectory], rate_hz: float) -> Trajectory:
    """Concatenate trajectories end to start, rigidly aligning each segment's
    first pose with the previous segment's last pose advanced by one step."""
    ts, tr, rot = [], [], []
    t_off = 0.0
    prev_R = prev_t = None
    prev_v = np.zeros(3)
    for seg in segments:
        R, t = seg.rotations, seg.translations
        if prev_R is None:
            G_R, G_t = np.eye(3), np.zeros(3)
        else:
            G_R = prev_R @ R[0].T
            G_t = prev_t + prev_v - G_R @ t[0]
        R2 = np.einsum("ij,njk->nik", G_R, R)
        t2 = t @ G_R.T + G_t
        ts.append(seg.timestamps - seg.timestamps[0] + t_off)
        tr.append(t2)
        rot.append(R2)
        t_off = ts[-1][-1] + 1.0 / rate_hz
        prev_R, prev_t = R2[-1], t2[-1]
        prev_v = t2[-1] - t2[-2] if len(t2) > 1 else np.zeros(3)
    return Trajectory(np.concatenate(ts), np.concatenate(tr), np.concatenate(rot), frame=Frame.ARIA,
                      sample_rate_hz=rate_hz, gravity_world=GRAVITY.copy(), uniform=True)


def make_context_task(kind: str, n_per_family: int, families=DEFAULT_FAMILIES, rng=0,
                      window_s: float = 1.0, core_s: float = 5.0, flank_s: float = 6.0,
                      rate_hz: float = 20.0, text_store: Optional[TextEmbeddingStore] = None) -> Dataset:
    """Evaluation sets for temporal-context sweeps; every record is split ``test``.

    ``global``: one family throughout a trajectory of ``core_s + 2 * flank_s``
    seconds, so any amount of context carries label evidence.

    ``localized``: a ``core_s`` segment of the labelled family sits between
    two ``flank_s`` segments of other families. Context up to
    ``core_s - window_s`` stays inside the labelled segment; beyond that it
    pulls in the neighbours.
    """
    if kind not in ("global", "localized"):
        raise InvalidInputError(f"unknown context task kind {kind!r}")
    families = [SynthFamily(f) for f in families]
    rng = make_rng(rng)
    store = text_store or oracle_text_store(families, seed=int(rng.integers(2 ** 31)))
    total = core_s + 2 * flank_s
    records, trajs = [], {}
    for fi, fam in enumerate(families):
        for i in range(n_per_family):
            r = child_rng(rng, fi, i)
            if kind == "global":
                traj, label, text = synth_generate(fam, sample_params(fam, r, total), total, rate_hz, r)
            else:
                others = [f for f in families if f is not fam]
                left, right = (others[j] for j in r.choice(len(others), 2, replace=False))
                segs = []
                for part, dur in ((left, flank_s), (fam, core_s), (right, flank_s)):
                    seg, _, _ = synth_generate(part, sample_params(part, r, dur), dur, rate_hz, r,
                                               placement=False)
                    segs.append(seg)
                traj = _chain(segs, rate_hz)
                label, text = fam.value, CANONICAL_TEXT[fam]
            tid = f"{kind}_{fam.value}_{i:04d}"
            trajs[tid] = traj
            center = flank_s + core_s / 2
            t1 = round((center - window_s / 2) * rate_hz) / rate_hz
            records.append(PairManifestRecord(
                trajectory_id=tid, t1=t1, t2=t1 + window_s, text=text,
                embedding_id=family_embedding_id(fam), take_id=f"{kind}{i:04d}", split="test",
                verb=_verb(text), activity_label=label, record_id=tid))
    return Dataset(records, trajs, store)
