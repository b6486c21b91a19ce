"""CamFormer: a small pre-norm transformer mapping 9D pose sequences to
unit-norm embeddings, plus the binary checkpoint format."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (CheckpointFormatError, CheckpointIntegrityError, CheckpointVersionError,
                     ConfigError, InvalidInputError, LengthError, ShapeError)
from .geometry import RelativePoseSequence

POSE_DIM = 9
GRAVITY_DIM = 3
NEG_INF = -1e9


@dataclass
class CamFormerConfig:
    d_in: int = 128
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    d_out: int = 512
    max_seq_len: int = 512
    use_gravity_token: bool = False
    # diagnostic switch: False drops the attention branch so tokens never mix
    attention: bool = True

    def __post_init__(self):
        errs = []
        for name in ("d_in", "layers", "heads", "ffn_dim", "d_out", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                errs.append(f"model.{name}")
        if self.heads >= 1 and self.d_in % self.heads:
            errs.append("model.d_in (not divisible by heads)")
        if not 0.0 <= self.dropout < 1.0:
            errs.append("model.dropout")
        if errs:
            raise ConfigError(errs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CamFormerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"model.{k} (unknown key)" for k in unknown])
        return cls(**d)


def init_params(config: CamFormerConfig, rng: np.random.Generator, dtype=np.float32) -> Dict[str, Tensor]:
    """Xavier-uniform linear weights, zero biases, unit LayerNorm gains,
    N(0, 0.02) positional table."""
    d = config.d_in
    params: Dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.weight"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        params[f"{name}.bias"] = np.zeros(fan_out)

    linear("in_proj", POSE_DIM, d)
    if config.use_gravity_token:
        linear("gravity_proj", GRAVITY_DIM, d)
    params["pos_embed"] = 0.02 * rng.standard_normal((config.max_seq_len, d))
    for i in range(config.layers):
        p = f"blocks.{i}"
        for ln in ("ln1", "ln2"):
            params[f"{p}.{ln}.weight"] = np.ones(d)
            params[f"{p}.{ln}.bias"] = np.zeros(d)
        for proj in ("q", "k", "v", "o"):
            linear(f"{p}.attn.{proj}", d, d)
        linear(f"{p}.ffn.fc1", d, config.ffn_dim)
        linear(f"{p}.ffn.fc2", config.ffn_dim, d)
    linear("out_proj", d, config.d_out)
    return {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


@dataclass
class Batch:
    """Right-padded model input.

    ``rows`` (B, T, 9); ``valid`` marks real (non-pad) poses; ``pool`` marks
    poses inside the original window; ``gravity`` is (B, 3) or None.
    """

    rows: np.ndarray
    valid: np.ndarray
    pool: np.ndarray
    gravity: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.rows)


def collate(seqs: Sequence[RelativePoseSequence], pool_masks: Sequence, use_gravity: bool = False) -> Batch:
    """Pad sequences to a common length. Pool masks cover poses only."""
    if len(seqs) != len(pool_masks):
        raise ShapeError("one pool mask per sequence required")
    T = max(len(s) for s in seqs)
    B = len(seqs)
    rows = np.zeros((B, T, POSE_DIM))
    valid = np.zeros((B, T), dtype=bool)
    pool = np.zeros((B, T), dtype=bool)
    grav = np.zeros((B, GRAVITY_DIM)) if use_gravity else None
    for i, (s, m) in enumerate(zip(seqs, pool_masks)):
        m = np.asarray(m, dtype=bool)
        if m.shape != (len(s),):
            raise ShapeError(f"pool mask length {m.shape} vs sequence length {len(s)}")
        n = len(s)
        rows[i, :n] = s.rows
        valid[i, :n] = True
        pool[i, :n] = m
        if use_gravity:
            if s.gravity_ref is None:
                raise InvalidInputError("gravity token enabled but sequence has no gravity_ref")
            grav[i] = s.gravity_ref
    return Batch(rows, valid, pool, grav)


class CamFormer:
    """Encoder weights plus config. Weights are not mutated by inference."""

    def __init__(self, config: CamFormerConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: CamFormerConfig, rng, dtype=np.float32) -> "CamFormer":
        return cls(config, init_params(config, rng, dtype))

    @property
    def dtype(self):
        return self.params["in_proj.weight"].dtype

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def astype(self, dtype) -> "CamFormer":
        return CamFormer(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                                       for k, v in self.params.items()})

    # -- core ---------------------------------------------------------------

    def _tokens(self, batch: Batch):
        cfg, P = self.config, self.params
        B, T, _ = batch.rows.shape
        if T > cfg.max_seq_len:
            raise LengthError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
        dt = self.dtype
        x = ad.linear(Tensor(batch.rows.astype(dt)), P["in_proj.weight"], P["in_proj.bias"])
        x = ad.add(x, ad.embedding_lookup(P["pos_embed"], np.arange(T)))
        valid, pool = batch.valid, batch.pool
        if cfg.use_gravity_token:
            if batch.gravity is None:
                raise InvalidInputError("config uses a gravity token but batch has no gravity")
            g = np.asarray(batch.gravity, dtype=np.float64)
            norm = np.linalg.norm(g, axis=1, keepdims=True)
            g = (g / np.where(norm > 0, norm, 1.0)).astype(dt)
            gt = ad.linear(Tensor(g), P["gravity_proj.weight"], P["gravity_proj.bias"])
            x = ad.concat([ad.reshape(gt, (B, 1, cfg.d_in)), x], axis=1)
            valid = np.concatenate([np.ones((B, 1), bool), valid], axis=1)
            pool = np.concatenate([np.zeros((B, 1), bool), pool], axis=1)
        return x, valid, pool

    def _block(self, x, i, attn_bias, train, rng):
        cfg, P = self.config, self.params
        p = f"blocks.{i}"
        B, T, d = x.shape
        H = cfg.heads
        dh = d // H
        if cfg.attention:
            h = ad.layer_norm(x, 1e-5, P[f"{p}.ln1.weight"], P[f"{p}.ln1.bias"])

            def heads(name):
                y = ad.linear(h, P[f"{p}.attn.{name}.weight"], P[f"{p}.attn.{name}.bias"])
                return ad.transpose(ad.reshape(y, (B, T, H, dh)), (0, 2, 1, 3))

            q, k, v = heads("q"), heads("k"), heads("v")
            s = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
            a = ad.softmax(ad.add(s, attn_bias), axis=-1)
            o = ad.reshape(ad.transpose(ad.matmul(a, v), (0, 2, 1, 3)), (B, T, d))
            o = ad.linear(o, P[f"{p}.attn.o.weight"], P[f"{p}.attn.o.bias"])
            x = ad.add(x, ad.dropout(o, cfg.dropout, rng, train))
        h = ad.layer_norm(x, 1e-5, P[f"{p}.ln2.weight"], P[f"{p}.ln2.bias"])
        f = ad.gelu(ad.linear(h, P[f"{p}.ffn.fc1.weight"], P[f"{p}.ffn.fc1.bias"]))
        f = ad.dropout(f, cfg.dropout, rng, train)
        f = ad.linear(f, P[f"{p}.ffn.fc2.weight"], P[f"{p}.ffn.fc2.bias"])
        return ad.add(x, ad.dropout(f, cfg.dropout, rng, train))

    def features(self, batch: Batch, train: bool = False, rng=None):
        """Token features after the last block: (features (B, T', d_in), pool mask (B, T'))."""
        x, valid, pool = self._tokens(batch)
        if not np.all(pool.any(axis=1)):
            raise InvalidInputError("pooling mask selects no positions")
        if train and self.config.dropout > 0 and rng is None:
            raise InvalidInputError("training forward needs an rng for dropout")
        bias = np.where(valid, 0.0, NEG_INF).astype(self.dtype)[:, None, None, :]
        for i in range(self.config.layers):
            x = self._block(x, i, bias, train, rng)
        return x, pool

    def pool_project(self, feats, pool):
        P = self.params
        pooled = ad.masked_mean(feats, pool, axis=1)
        z = ad.linear(pooled, P["out_proj.weight"], P["out_proj.bias"])
        return ad.l2_normalize(z, axis=-1)

    def encode(self, batch: Batch, train: bool = False, rng=None) -> Tensor:
        """Embeddings (B, d_out), unit norm. Records on the active tape, if any."""
        feats, pool = self.features(batch, train, rng)
        return self.pool_project(feats, pool)

    # -- single-sequence API ------------------------------------------------

    def _single(self, seq: RelativePoseSequence, mask) -> Batch:
        mask = np.asarray(mask, dtype=bool)
        n = len(seq)
        grav = self.config.use_gravity_token
        if grav and mask.shape == (n + 1,):
            if mask[0]:
                raise InvalidInputError("gravity token position must not be pooled")
            mask = mask[1:]
        if mask.shape != (n,):
            raise ShapeError(f"mask length {mask.shape[0]} does not match token count")
        return collate([seq], [mask], use_gravity=grav)

    def forward(self, seq: RelativePoseSequence, mask=None, train: bool = False, rng=None) -> np.ndarray:
        if mask is None:
            mask = np.ones(len(seq), dtype=bool)
        return self.encode(self._single(seq, mask), train, rng).data[0]

    def temporal_features(self, seq: RelativePoseSequence, mask=None) -> np.ndarray:
        """Per-pose features at pooled positions, in temporal order."""
        if mask is None:
            mask = np.ones(len(seq), dtype=bool)
        feats, pool = self.features(self._single(seq, mask))
        return feats.data[0][pool[0]]

    def project(self, pooled: np.ndarray) -> np.ndarray:
        """Output projection + normalization of a pre-projection pooled vector."""
        P = self.params
        z = pooled @ P["out_proj.weight"].data + P["out_proj.bias"].data
        return z / np.linalg.norm(z, axis=-1, keepdims=True)


def forward(seq, mask, model: CamFormer, train=False, rng=None) -> np.ndarray:
    return model.forward(seq, mask, train, rng)


def temporal_features(seq, mask, model: CamFormer) -> np.ndarray:
    return model.temporal_features(seq, mask)


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic "CAMFRMR\0" | u32 version | u32 header length | header JSON | payload
#
# The header lists every tensor's name, shape, byte offset and byte count;
# the payload is the concatenation of little-endian float32 row-major data.

MAGIC = b"CAMFRMR\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def save_checkpoint(path, model: CamFormer, meta: Optional[dict] = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config": model.config.to_dict(),
        "meta": meta or {},
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(payload)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(model, meta)``. Nothing is constructed unless the whole file validates."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointFormatError(f"{path}: truncated header")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None
    payload = blob[start + hlen:]
    if len(payload) != header.get("payload_bytes"):
        if len(payload) < header.get("payload_bytes", 0):
            raise CheckpointFormatError(f"{path}: truncated payload")
        raise CheckpointIntegrityError(f"{path}: payload size does not match header")
    arrays = {}
    end = 0
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * 4
        if n != e["nbytes"] or e["offset"] != end:
            raise CheckpointIntegrityError(f"{path}: manifest entry {e['name']} disagrees with payload layout")
        end += n
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f4", count=n // 4,
                                          offset=e["offset"]).reshape(e["shape"])
    if end != len(payload):
        raise CheckpointIntegrityError(f"{path}: manifest covers {end} of {len(payload)} payload bytes")
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CheckpointIntegrityError(f"{path}: payload checksum mismatch")
    config = CamFormerConfig.from_dict(header["config"])
    expected = init_params_shapes(config)
    if set(expected) != set(arrays):
        raise CheckpointIntegrityError(f"{path}: tensor names do not match config")
    for k, shape in expected.items():
        if tuple(arrays[k].shape) != shape:
            raise CheckpointIntegrityError(f"{path}: tensor {k} has shape {arrays[k].shape}, config implies {shape}")
    params = {k: Tensor(v.astype(np.float32), requires_grad=True, name=k) for k, v in arrays.items()}
    return CamFormer(config, params), header.get("meta", {})


def init_params_shapes(config: CamFormerConfig) -> Dict[str, tuple]:
    d, f = config.d_in, config.ffn_dim
    shapes = {"in_proj.weight": (POSE_DIM, d), "in_proj.bias": (d,),
              "pos_embed": (config.max_seq_len, d),
              "out_proj.weight": (d, config.d_out), "out_proj.bias": (config.d_out,)}
    if config.use_gravity_token:
        shapes["gravity_proj.weight"] = (GRAVITY_DIM, d)
        shapes["gravity_proj.bias"] = (d,)
    for i in range(config.layers):
        p = f"blocks.{i}"
        for ln in ("ln1", "ln2"):
            shapes[f"{p}.{ln}.weight"] = (d,)
            shapes[f"{p}.{ln}.bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{proj}.weight"] = (d, d)
            shapes[f"{p}.attn.{proj}.bias"] = (d,)
        shapes[f"{p}.ffn.fc1.weight"] = (d, f)
        shapes[f"{p}.ffn.fc1.bias"] = (f,)
        shapes[f"{p}.ffn.fc2.weight"] = (f, d)
        shapes[f"{p}.ffn.fc2.bias"] = (d,)
    return shapes
