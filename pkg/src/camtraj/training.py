"""Contrastive training of CamFormer against frozen text embeddings."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import AdamWState, Tensor
from .data import Dataset, PairManifestRecord, TextEmbeddingStore
from .errors import ConfigError, DataError, InvalidInputError, NonFiniteLossError
from .model import CamFormer, CamFormerConfig, collate, save_checkpoint
from .rng import child_rng, make_rng

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-3


@dataclass
class TrainConfig:
    batch_size: int = 64
    temperature: float = 0.07
    epochs: int = 40
    seed: int = 0
    w_max: float = 8.0
    sample_rate_hz: float = 20.0
    lr: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_every: int = 1
    # permits batch_size == 1, where the contrastive loss is identically zero
    diagnostic: bool = False

    def __post_init__(self):
        errs = []
        if self.batch_size < 1 or (self.batch_size < 2 and not self.diagnostic):
            errs.append("train.batch_size (>= 2 unless diagnostic)")
        if not self.temperature > 0:
            errs.append("train.temperature")
        if self.w_max < 0:
            errs.append("train.w_max")
        if not self.sample_rate_hz > 0:
            errs.append("train.sample_rate_hz")
        if self.epochs < 0:
            errs.append("train.epochs")
        if not self.lr > 0:
            errs.append("train.lr")
        if errs:
            raise ConfigError(errs)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"train.{k} (unknown key)" for k in unknown])
        return cls(**d)


@dataclass(frozen=True)
class ContextWindowSpec:
    t1: float
    t2: float
    w1: float
    w2: float
    clipped_start: bool = False
    clipped_end: bool = False

    @property
    def start(self):
        return self.t1 - self.w1

    @property
    def end(self):
        return self.t2 + self.w2


# ---------------------------------------------------------------------------
# loss


def infonce_loss(z_traj, z_text, temperature: float) -> Tensor:
    """Symmetric InfoNCE: mean cross-entropy trajectory->text plus text->trajectory,
    positives on the diagonal of the (B, B) similarity matrix."""
    z_traj = z_traj if isinstance(z_traj, Tensor) else Tensor(z_traj)
    z_text = z_text if isinstance(z_text, Tensor) else Tensor(np.asarray(z_text, dtype=z_traj.dtype))
    if z_traj.shape != z_text.shape or z_traj.ndim != 2:
        raise InvalidInputError(f"embedding batches must match: {z_traj.shape} vs {z_text.shape}")
    B = z_traj.shape[0]
    if B < 1:
        raise InvalidInputError("empty batch")
    for name, z in (("trajectory", z_traj), ("text", z_text)):
        dev = np.abs(np.linalg.norm(z.data.astype(np.float64), axis=1) - 1.0)
        if np.any(dev > UNIT_NORM_TOL):
            raise InvalidInputError(f"{name} embeddings are not unit norm (max deviation {dev.max():.3g})")
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive")
    logits = ad.scale(ad.matmul(z_traj, ad.transpose(z_text)), 1.0 / temperature)
    eye = np.eye(B, dtype=z_traj.dtype)
    p2t = ad.sum(ad.mul(ad.log_softmax(logits, axis=1), eye))
    t2p = ad.sum(ad.mul(ad.log_softmax(logits, axis=0), eye))
    return ad.scale(ad.add(p2t, t2p), -1.0 / B)


def topk_hits(sim: np.ndarray, groups: Optional[Sequence] = None) -> tuple:
    """In-batch top-1 accuracy in both directions.

    With ``groups`` (e.g. embedding ids), retrieving any item of the same
    group counts as a hit, which matters when texts repeat within a batch.
    """
    B = sim.shape[0]
    p2t = np.argmax(sim, axis=1)
    t2p = np.argmax(sim, axis=0)
    idx = np.arange(B)
    if groups is None:
        return float(np.mean(p2t == idx)), float(np.mean(t2p == idx))
    g = np.asarray(groups)
    return float(np.mean(g[p2t] == g)), float(np.mean(g[t2p] == g))


# ---------------------------------------------------------------------------
# windows and batches


def window_extent(traj: geo.Trajectory) -> tuple:
    """Half-open time span covered by the samples: [first, last + 1/rate)."""
    t0, t1 = traj.extent
    return t0, t1 + 1.0 / traj.sample_rate_hz


def sample_context(t1: float, t2: float, w_max: float, rng, extent) -> ContextWindowSpec:
    """w ~ U(0, w_max), split at u ~ U(0, w) into (w1, w2) = (u, w - u), then
    clipped to ``extent`` with the clipping recorded."""
    w = rng.uniform(0.0, w_max) if w_max > 0 else 0.0
    u = rng.uniform(0.0, 1.0) * w
    return clip_context(t1, t2, u, w - u, extent)


def clip_context(t1, t2, w1, w2, extent) -> ContextWindowSpec:
    lo, hi = extent
    tol = 1e-9
    if t1 < lo - tol or t2 > hi + tol:
        raise DataError(f"window [{t1}, {t2}] outside trajectory extent [{lo}, {hi}]")
    max1 = max(0.0, t1 - lo)
    max2 = max(0.0, hi - t2)
    c1 = w1 > max1 + tol
    c2 = w2 > max2 + tol
    return ContextWindowSpec(t1, t2, min(w1, max1), min(w2, max2), c1, c2)


def window_sequence(traj: geo.Trajectory, spec: ContextWindowSpec, rate_hz: float,
                    use_gravity: bool = False):
    """Resample the extended window on a grid anchored at t1 and encode it.

    Returns ``(sequence, pool_mask)``; the mask is true on the
    ``round((t2 - t1) * rate)`` samples of the original window.
    """
    n_before = int(math.floor(spec.w1 * rate_hz + 1e-6))
    n_win = int(round((spec.t2 - spec.t1) * rate_hz))
    n_after = int(math.floor(spec.w2 * rate_hz + 1e-6))
    if n_win < 1:
        raise InvalidInputError("window shorter than one sample")
    times = spec.t1 + np.arange(-n_before, n_win + n_after) / rate_hz
    lo, hi = traj.extent
    times = np.clip(times, lo, hi)
    if len(traj) >= 2:
        sub = geo.interpolate(traj, times)
    else:
        sub = traj
    seq = geo.relative_to_midpoint(sub, use_gravity=use_gravity)
    mask = np.zeros(len(seq), dtype=bool)
    mask[n_before:n_before + n_win] = True
    return seq, mask


def build_batch(records: Sequence[PairManifestRecord], trajectories: Dict[str, geo.Trajectory],
                text_store: TextEmbeddingStore, rng, w_max: float, rate_hz: float,
                use_gravity: bool = False, fixed_context: Optional[float] = None):
    """Assemble one padded batch.

    Context is sampled per record unless ``fixed_context`` is given, in which
    case it is split symmetrically. Returns ``(batch, text_matrix, specs)``.
    """
    seqs, masks, specs = [], [], []
    for r in records:
        traj = trajectories.get(r.trajectory_id)
        if traj is None:
            raise DataError(f"record {r.key}: unknown trajectory {r.trajectory_id!r}")
        ext = window_extent(traj)
        if fixed_context is None:
            spec = sample_context(r.t1, r.t2, w_max, rng, ext)
        else:
            spec = clip_context(r.t1, r.t2, fixed_context / 2, fixed_context / 2, ext)
        seq, mask = window_sequence(traj, spec, rate_hz, use_gravity)
        seqs.append(seq)
        masks.append(mask)
        specs.append(spec)
    text = text_store.matrix([r.embedding_id for r in records])
    return collate(seqs, masks, use_gravity), text, specs


def embed_records(model: CamFormer, records, trajectories, rate_hz: float, context: float = 0.0,
                  batch_size: int = 64) -> np.ndarray:
    """Frozen embeddings (M, d_out) with symmetric context ``context`` seconds."""
    out = []
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        seqs, masks = [], []
        for r in chunk:
            traj = trajectories[r.trajectory_id]
            spec = clip_context(r.t1, r.t2, context / 2, context / 2, window_extent(traj))
            s, m = window_sequence(traj, spec, rate_hz, model.config.use_gravity_token)
            seqs.append(s)
            masks.append(m)
        out.append(model.encode(collate(seqs, masks, model.config.use_gravity_token)).data)
    if not out:
        return np.zeros((0, model.config.d_out), dtype=np.float32)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: CamFormer
    metrics: List[dict] = field(default_factory=list)
    val_metrics: List[dict] = field(default_factory=list)
    wall_s: float = 0.0

    def epoch_means(self) -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for m in self.metrics:
            by_epoch.setdefault(m["epoch"], []).append(m["loss"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _batches(n: int, batch_size: int, rng) -> List[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def validate(model: CamFormer, records, trajectories, text_store, cfg: TrainConfig) -> dict:
    if not records:
        return {}
    z = embed_records(model, records, trajectories, cfg.sample_rate_hz, 0.0, cfg.batch_size)
    p2t, t2p, losses = [], [], []
    for i in range(0, len(records), cfg.batch_size):
        chunk = records[i:i + cfg.batch_size]
        if len(chunk) < 2:
            continue
        zt = text_store.matrix([r.embedding_id for r in chunk])
        zp = z[i:i + len(chunk)]
        a, b = topk_hits(zp @ zt.T, [r.embedding_id for r in chunk])
        p2t.append(a * len(chunk))
        t2p.append(b * len(chunk))
        losses.append(float(infonce_loss(zp, zt, cfg.temperature).data) * len(chunk))
    n = sum(len(records[i:i + cfg.batch_size]) for i in range(0, len(records), cfg.batch_size)
            if len(records[i:i + cfg.batch_size]) >= 2)
    return {"loss": sum(losses) / n, "p2t_top1": sum(p2t) / n, "t2p_top1": sum(t2p) / n}


def train(cfg: TrainConfig, model_cfg: CamFormerConfig, dataset: Dataset,
          out_dir=None, init: Optional[CamFormer] = None, dtype=np.float32) -> TrainResult:
    """Train on the ``train`` split; validate on ``val`` every ``val_every`` epochs.

    With ``out_dir`` the step log goes to ``metrics.jsonl``, validation to
    ``val_metrics.jsonl`` and the final weights to ``checkpoint.bin``.
    """
    train_recs = dataset.split("train")
    if not train_recs:
        raise DataError("no training records")
    dataset.preflight()
    val_recs = dataset.split("val")
    rng = make_rng(cfg.seed)
    model = init if init is not None else CamFormer.init(model_cfg, child_rng(rng, 0), dtype)
    state = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay, beta1=cfg.beta1,
                       beta2=cfg.beta2, eps=cfg.eps)
    out = Path(out_dir) if out_dir is not None else None
    mfile = vfile = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mfile = open(out / "metrics.jsonl", "w")
        vfile = open(out / "val_metrics.jsonl", "w")
    result = TrainResult(model)
    t_start = time.perf_counter()
    step = 0
    use_g = model.config.use_gravity_token
    try:
        for epoch in range(cfg.epochs):
            for bi, idx in enumerate(_batches(len(train_recs), cfg.batch_size, child_rng(rng, 1, epoch))):
                t0 = time.perf_counter()
                recs = [train_recs[i] for i in idx]
                batch, text, _ = build_batch(recs, dataset.trajectories, dataset.text_store,
                                             child_rng(rng, 2, step), cfg.w_max, cfg.sample_rate_hz, use_g)
                tape = ad.Tape()
                with tape:
                    z = model.encode(batch, train=True, rng=child_rng(rng, 3, step))
                    loss = infonce_loss(z, text.astype(model.dtype), cfg.temperature)
                lval = float(loss.data)
                if not math.isfinite(lval):
                    dump = None
                    if out is not None:
                        dump = out / f"nonfinite_batch_{step}.npz"
                        np.savez(dump, rows=batch.rows, valid=batch.valid, pool=batch.pool,
                                 text=text, record_ids=np.array([r.key for r in recs]))
                    raise NonFiniteLossError(step, f"epoch{epoch}/batch{bi}", dump)
                grads = tape.backward(loss, model.params)
                ad.adamw_step(model.params, grads, state)
                p2t, t2p = topk_hits(z.data @ text.T, [r.embedding_id for r in recs])
                rec = {"step": step, "epoch": epoch, "loss": lval, "p2t_top1": p2t, "t2p_top1": t2p,
                       "lr": state.lr, "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
                result.metrics.append(rec)
                if mfile:
                    mfile.write(json.dumps(rec) + "\n")
                step += 1
            if val_recs and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
                v = {"step": step, "epoch": epoch, **validate(model, val_recs, dataset.trajectories,
                                                              dataset.text_store, cfg)}
                result.val_metrics.append(v)
                if vfile:
                    vfile.write(json.dumps(v) + "\n")
                log.info("epoch %d val %s", epoch, v)
    finally:
        if mfile:
            mfile.close()
            vfile.close()
    result.wall_s = time.perf_counter() - t_start
    if out is not None:
        # wall time stays out of the checkpoint so reruns are byte-identical
        save_checkpoint(out / "checkpoint.bin", model, {"seed": cfg.seed, "step": step, "train": cfg.to_dict()})
        (out / "timing.json").write_text(json.dumps({"wall_s": result.wall_s, "steps": step}) + "\n")
    return result


# ---------------------------------------------------------------------------
# end-to-end fine-tuning with a linear head


def finetune(model: CamFormer, records, trajectories, labels: Sequence[str], cfg: TrainConfig,
             context: float = 0.0):
    """Train encoder and a linear softmax head jointly on class labels.

    Returns ``(model, head_params, classes)``; the head acts on the pooled
    pre-projection features.
    """
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise InvalidInputError("fine-tuning needs at least two classes")
    y = np.array([classes.index(l) for l in labels])
    rng = make_rng(cfg.seed)
    d = model.config.d_in
    bound = math.sqrt(6.0 / (d + len(classes)))
    head = {"head.weight": Tensor(child_rng(rng, 0).uniform(-bound, bound, (d, len(classes))).astype(model.dtype),
                                  requires_grad=True),
            "head.bias": Tensor(np.zeros(len(classes), dtype=model.dtype), requires_grad=True)}
    params = {**model.params, **head}
    state = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    use_g = model.config.use_gravity_token
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(records), cfg.batch_size, child_rng(rng, 1, epoch)):
            seqs, masks = [], []
            for i in idx:
                r = records[i]
                traj = trajectories[r.trajectory_id]
                spec = clip_context(r.t1, r.t2, context / 2, context / 2, window_extent(traj))
                s, m = window_sequence(traj, spec, cfg.sample_rate_hz, use_g)
                seqs.append(s)
                masks.append(m)
            batch = collate(seqs, masks, use_g)
            onehot = np.eye(len(classes), dtype=model.dtype)[y[idx]]
            tape = ad.Tape()
            with tape:
                feats, pool = model.features(batch, train=True, rng=child_rng(rng, 3, step))
                pooled = ad.masked_mean(feats, pool, axis=1)
                logits = ad.linear(pooled, head["head.weight"], head["head.bias"])
                loss = ad.scale(ad.sum(ad.mul(ad.log_softmax(logits, axis=1), onehot)), -1.0 / len(idx))
            grads = tape.backward(loss, params)
            ad.adamw_step(params, grads, state)
            step += 1
    return model, head, classes


def predict_finetuned(model: CamFormer, head, classes, records, trajectories, rate_hz, context=0.0):
    from .model import collate as _collate
    preds = []
    for i in range(0, len(records), 64):
        seqs, masks = [], []
        for r in records[i:i + 64]:
            traj = trajectories[r.trajectory_id]
            spec = clip_context(r.t1, r.t2, context / 2, context / 2, window_extent(traj))
            s, m = window_sequence(traj, spec, rate_hz, model.config.use_gravity_token)
            seqs.append(s)
            masks.append(m)
        feats, pool = model.features(_collate(seqs, masks, model.config.use_gravity_token))
        pooled = ad.masked_mean(feats, pool, axis=1).data
        logits = pooled @ head["head.weight"].data + head["head.bias"].data
        preds.extend(classes[j] for j in np.argmax(logits, axis=1))
    return preds
