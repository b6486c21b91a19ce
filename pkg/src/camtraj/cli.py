"""Command-line entry point.

Every command reads an optional JSON run config (sections ``data``,
``model``, ``train``, ``eval``), applies ``--set section.key=value``
overrides, validates the result, writes its artifacts plus a
``run_manifest.json`` under the output directory and prints one JSON
summary line on stdout.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import math
import os
import platform
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from . import data as data_mod
from . import eval as ev
from . import geometry as geo
from .errors import CamtrajError, ConfigError, InputNotFoundError, InvalidInputError
from .model import CamFormerConfig, load_checkpoint
from .rng import make_rng
from .training import TrainConfig, embed_records, train

log = logging.getLogger("camtraj")

ENV_ENDPOINT = "CAMTRAJ_EMBED_ENDPOINT"
ENV_LOG = "CAMTRAJ_LOG"
STOCHASTIC = {"gen-synth", "train", "eval-mcq", "probe", "context-sweep"}


# ---------------------------------------------------------------------------
# run config


@dataclass
class DataSection:
    n_per_family: int = 200
    families: list = field(default_factory=lambda: [f.value for f in data_mod.DEFAULT_FAMILIES])
    duration_s: float = 10.0
    window_s: float = 4.0
    rate_hz: float = 20.0

    def __post_init__(self):
        errs = []
        if self.n_per_family < 1:
            errs.append("data.n_per_family")
        bad = [f for f in self.families if f not in {x.value for x in data_mod.SynthFamily}]
        if bad or not self.families:
            errs.append("data.families")
        if not 0 < self.window_s <= self.duration_s:
            errs.append("data.window_s")
        if not self.rate_hz > 0:
            errs.append("data.rate_hz")
        if errs:
            raise ConfigError(errs)


@dataclass
class EvalSection:
    split: str = "test"
    balance_keys: list = field(default_factory=list)
    cap: Optional[int] = None
    w_values: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0])
    context_n_per_family: int = 40
    probe_lam: float = 1e-3
    probe_epochs: int = 200
    probe_shuffles: int = 5
    min_lag: int = 2

    def __post_init__(self):
        errs = []
        if self.split not in data_mod.SPLITS:
            errs.append("eval.split")
        if any(not isinstance(w, (int, float)) or isinstance(w, bool) or w < 0 for w in self.w_values):
            errs.append("eval.w_values")
        if self.cap is not None and self.cap < 1:
            errs.append("eval.cap")
        for name in ("context_n_per_family", "probe_epochs", "probe_shuffles", "min_lag"):
            if getattr(self, name) < 1:
                errs.append(f"eval.{name}")
        if errs:
            raise ConfigError(errs)


SECTIONS = {"data": DataSection, "model": CamFormerConfig, "train": TrainConfig, "eval": EvalSection}


def _type_ok(value, default, optional_int=False) -> bool:
    if optional_int:
        return value is None or (isinstance(value, int) and not isinstance(value, bool))
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _defaults(cls) -> dict:
    return asdict(cls())


def _build_section(name, cls, given: dict, errs: List[str]):
    if not isinstance(given, dict):
        errs.append(f"{name} (must be an object)")
        return None
    defaults = _defaults(cls)
    opt = {f.name for f in fields(cls) if f.default is None}
    ok = True
    for k, v in given.items():
        if k not in defaults:
            errs.append(f"{name}.{k} (unknown key)")
            ok = False
        elif not _type_ok(v, defaults[k], k in opt):
            errs.append(f"{name}.{k} (expected {type(defaults[k]).__name__})")
            ok = False
    if not ok:
        return None
    try:
        return cls(**{**defaults, **given})
    except ConfigError as exc:
        errs.extend(exc.paths)
        return None


@dataclass
class RunConfig:
    data: DataSection
    model: CamFormerConfig
    train: TrainConfig
    eval: EvalSection
    seed: Optional[int] = None
    output_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Validate the whole document; the error lists every offending path."""
        if not isinstance(d, dict):
            raise ConfigError(["<root> (must be an object)"])
        errs: List[str] = []
        for k in sorted(set(d) - set(SECTIONS) - {"seed", "output_dir"}):
            errs.append(f"{k} (unknown key)")
        if d.get("seed") is not None and not _type_ok(d["seed"], 0):
            errs.append("seed (expected int)")
        if d.get("output_dir") is not None and not isinstance(d["output_dir"], str):
            errs.append("output_dir (expected str)")
        built = {name: _build_section(name, c, d.get(name, {}), errs) for name, c in SECTIONS.items()}
        if errs:
            raise ConfigError(errs)
        return cls(seed=d.get("seed"), output_dir=d.get("output_dir"), **built)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "output_dir": self.output_dir,
                **{name: asdict(getattr(self, name)) for name in SECTIONS}}


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError([f"{text} (override must be key.path=value)"])
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def resolve_config(path: Optional[str], overrides: List[str], seed: Optional[int], out: Optional[str]) -> RunConfig:
    doc: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise InputNotFoundError(f"config file {p} not found")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<root> (invalid JSON: {exc.msg} at line {exc.lineno})"]) from None
    for ov in overrides or []:
        keys, value = _parse_override(ov)
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError([".".join(keys) + " (parent is not an object)"])
        node[keys[-1]] = value
    if seed is not None:
        doc["seed"] = seed
        doc.setdefault("train", {})["seed"] = seed
    if out is not None:
        doc["output_dir"] = out
    return RunConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# helpers


def _need(path, what) -> Path:
    if path is None:
        raise InvalidInputError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise InputNotFoundError(f"{what} {p} not found")
    return p


def _out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.output_dir or "out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_traj(path, rate_hz) -> geo.Trajectory:
    traj = geo.read_tum(_need(path, "traj"))
    if not traj.uniform or abs(traj.sample_rate_hz - rate_hz) > 1e-9:
        traj = geo.resample(traj, rate_hz)
    return traj


def _count_features(args, cfg: RunConfig):
    traj = _load_traj(args.traj, cfg.data.rate_hz)
    source = args.features or ("model" if args.ckpt else "pose")
    if source == "model":
        model, _ = load_checkpoint(_need(args.ckpt, "ckpt"))
        seq = geo.relative_to_midpoint(traj, model.config.use_gravity_token)
        return model.temporal_features(seq), cfg.data.rate_hz, source
    return ev.pose_oracle_features(geo.relative_to_midpoint(traj)), cfg.data.rate_hz, source


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args, cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    d = cfg.data
    ds = data_mod.make_synth_dataset(d.n_per_family, d.families, rng=cfg.seed, duration_s=d.duration_s,
                                     window_s=d.window_s, rate_hz=d.rate_hz)
    ds.save(out / "dataset")
    counts = {s: len(ds.split(s)) for s in data_mod.SPLITS}
    return {"dataset": str(out / "dataset"), "records": len(ds.records), "splits": counts}


def cmd_train(args, cfg: RunConfig) -> dict:
    ds = data_mod.Dataset.load(_need(args.data, "data"))
    out = _out_dir(cfg)
    res = train(cfg.train, cfg.model, ds, out_dir=out)
    last_val = res.val_metrics[-1] if res.val_metrics else {}
    return {"checkpoint": str(out / "checkpoint.bin"), "steps": len(res.metrics),
            "epoch_mean_loss": res.epoch_means(), "val": last_val, "wall_s": res.wall_s}


def cmd_embed(args, cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    if args.texts:
        endpoint = args.endpoint or os.environ.get(ENV_ENDPOINT)
        if not endpoint:
            raise InvalidInputError(f"no embedding endpoint: pass --endpoint or set {ENV_ENDPOINT}")
        src = _need(args.texts, "texts")
        if src.suffix == ".jsonl":
            texts = [r.text for r in data_mod.load_manifest(src)]
        else:
            texts = [t for t in src.read_text().splitlines() if t.strip()]
        client = data_mod.EmbeddingClient(endpoint, cache_path=out / "text_embeddings.bin")
        ids = client.fetch(texts)
        return {"texts": len(texts), "unique": len(set(ids)), "requests": client.requests,
                "cache_hits": client.cache_hits, "store": str(out / "text_embeddings.bin")}
    ds = data_mod.Dataset.load(_need(args.data, "data"))
    model, _ = load_checkpoint(_need(args.ckpt, "ckpt"))
    recs = ds.split(args.split) if args.split else list(ds.records)
    z = embed_records(model, recs, ds.trajectories, cfg.data.rate_hz, args.context)
    np.savez(out / "embeddings.npz", keys=np.array([r.key for r in recs]), embeddings=z)
    return {"embeddings": str(out / "embeddings.npz"), "n": len(recs), "dim": int(z.shape[1])}


def _trajectory_embeddings(args, ds, recs, cfg) -> dict:
    if args.embeddings:
        f = np.load(_need(args.embeddings, "embeddings"))
        return {str(k): v for k, v in zip(f["keys"], f["embeddings"])}
    model, _ = load_checkpoint(_need(args.ckpt, "ckpt"))
    z = embed_records(model, recs, ds.trajectories, cfg.data.rate_hz, args.context)
    return {r.key: z[i] for i, r in enumerate(recs)}


def cmd_eval_mcq(args, cfg: RunConfig) -> dict:
    ds = data_mod.Dataset.load(_need(args.data, "data"))
    out = _out_dir(cfg)
    e = cfg.eval
    recs = ds.split(e.split)
    items = ev.build_mcq(recs, rng=cfg.seed, balance_keys=e.balance_keys or None, cap=e.cap)
    by_key = {r.key: r for r in recs}
    emb = _trajectory_embeddings(args, ds, [by_key[it.query_id] for it in items], cfg)
    res = ev.eval_mcq(emb, items, ds.text_store)
    ev.write_jsonl([it.to_json() for it in items], out / "mcq_items.jsonl")
    summary = {**res.to_json(), "skipped": items.skipped, "split": e.split}
    ev.write_jsonl([summary], out / "mcq_results.jsonl")
    return summary


def cmd_probe(args, cfg: RunConfig) -> dict:
    ds = data_mod.Dataset.load(_need(args.data, "data"))
    out = _out_dir(cfg)
    e = cfg.eval
    model, _ = load_checkpoint(_need(args.ckpt, "ckpt"))
    fit = ds.split("train") + ds.split("val")
    test = ds.split(e.split)
    if not fit or not test:
        raise InvalidInputError("probe needs train/val records and records in the evaluation split")
    X = embed_records(model, fit, ds.trajectories, cfg.data.rate_hz, args.context)
    Xt = embed_records(model, test, ds.trajectories, cfg.data.rate_hz, args.context)
    y = np.array([r.activity_label for r in fit])
    yt = np.array([r.activity_label for r in test])
    rng = make_rng(cfg.seed)
    probe = ev.train_probe(X, y, e.probe_lam, e.probe_epochs, rng=int(rng.integers(2 ** 31)))
    rows = [{"labels": "true", "run": 0, "accuracy": probe.accuracy(Xt, yt)}]
    for s in range(e.probe_shuffles):
        perm = rng.permutation(len(y))
        p = ev.train_probe(X, y[perm], e.probe_lam, e.probe_epochs, rng=int(rng.integers(2 ** 31)))
        rows.append({"labels": "shuffled", "run": s, "accuracy": p.accuracy(Xt, rng.permutation(yt))})
    ev.write_csv(rows, out / "probe.csv")
    shuffled = [r["accuracy"] for r in rows[1:]]
    return {"accuracy": rows[0]["accuracy"], "shuffled_mean": float(np.mean(shuffled)),
            "classes": probe.classes, "n_fit": len(fit), "n_test": len(test)}


def cmd_count(args, cfg: RunConfig) -> dict:
    feats, rate, source = _count_features(args, cfg)
    res = ev.count_repetitions(ev.self_similarity(feats, rate), min_lag=cfg.eval.min_lag)
    summary = {**res.to_json(), "features": source, "n": int(len(feats))}
    if args.out:
        out = _out_dir(cfg)
        (out / "count.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    return summary


def cmd_export_ssm(args, cfg: RunConfig) -> dict:
    feats, rate, source = _count_features(args, cfg)
    out = _out_dir(cfg)
    smap = ev.self_similarity(feats, rate)
    ev.write_similarity_csv(smap, out / "ssm.csv")
    ev.write_pgm(smap, out / "ssm.pgm")
    return {"csv": str(out / "ssm.csv"), "pgm": str(out / "ssm.pgm"), "n": smap.n, "features": source}


def cmd_context_sweep(args, cfg: RunConfig) -> dict:
    ds = data_mod.Dataset.load(_need(args.data, "data"))
    model, _ = load_checkpoint(_need(args.ckpt, "ckpt"))
    out = _out_dir(cfg)
    kinds = ["global", "localized"] if args.kind == "both" else [args.kind]
    result = {}
    for kind in kinds:
        task = data_mod.make_context_task(kind, cfg.eval.context_n_per_family, families=cfg.data.families,
                                          rng=cfg.seed, rate_hz=cfg.data.rate_hz, text_store=ds.text_store)
        rows = ev.context_sweep(model, task, cfg.eval.w_values, rng=cfg.seed,
                                csv_path=out / f"context_sweep_{kind}.csv")
        result[kind] = rows
    return result


def cmd_inspect(args, cfg: RunConfig) -> dict:
    p = _need(args.path, "path")
    if p.is_dir():
        ds = data_mod.Dataset.load(p)
        fams = {}
        for r in ds.records:
            fams[r.activity_label] = fams.get(r.activity_label, 0) + 1
        return {"kind": "dataset", "records": len(ds.records), "trajectories": len(ds.trajectories),
                "splits": {s: len(ds.split(s)) for s in data_mod.SPLITS}, "activities": fams,
                "text_embeddings": len(ds.text_store)}
    if p.suffix == ".tum":
        t = geo.read_tum(p)
        return {"kind": "trajectory", "poses": len(t), "frame": t.frame.value, "rate_hz": t.sample_rate_hz,
                "extent": list(t.extent), "gravity": t.gravity_world is not None}
    model, meta = load_checkpoint(p)
    return {"kind": "checkpoint", "config": model.config.to_dict(), "parameters": model.num_parameters(),
            "meta": meta}


def cmd_replay(args, cfg: RunConfig) -> dict:
    man = json.loads(_need(args.manifest, "manifest").read_text())
    try:
        command, snap, recorded = man["command"], man["config"], man["args"]
    except KeyError as exc:
        raise InvalidInputError(f"run manifest lacks {exc}") from None
    if command == "replay":
        raise InvalidInputError("cannot replay a replay")
    ns = argparse.Namespace(**recorded)
    if args.out:
        snap = {**snap, "output_dir": args.out}
    rcfg = RunConfig.from_dict(snap)
    summary = run_command(command, ns, rcfg)
    return {"replayed": command, "summary": summary}


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval-mcq": cmd_eval_mcq,
    "probe": cmd_probe,
    "count": cmd_count,
    "context-sweep": cmd_context_sweep,
    "inspect": cmd_inspect,
    "export-ssm": cmd_export_ssm,
    "replay": cmd_replay,
}


# ---------------------------------------------------------------------------
# plumbing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="camtraj", description="Camera-trajectory representation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.epochs=2")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
        return p

    common(sub.add_parser("gen-synth", help="generate a synthetic dataset"))
    p = common(sub.add_parser("train", help="contrastive pre-training"))
    p.add_argument("--data", help="dataset directory")
    p = common(sub.add_parser("embed", help="trajectory or text embeddings"))
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--split", choices=data_mod.SPLITS)
    p.add_argument("--context", type=float, default=0.0)
    p.add_argument("--texts", help="text file (one narration per line) or manifest to embed remotely")
    p.add_argument("--endpoint", help=f"embedding service URL (default ${ENV_ENDPOINT})")
    p = common(sub.add_parser("eval-mcq", help="5-way MCQ retrieval"))
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--embeddings", help="precomputed embeddings.npz instead of a checkpoint")
    p.add_argument("--context", type=float, default=0.0)
    p = common(sub.add_parser("probe", help="linear probe on frozen embeddings"))
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--context", type=float, default=0.0)
    for name, hlp in (("count", "repetition count from a self-similarity map"),
                      ("export-ssm", "write a self-similarity map as CSV and PGM")):
        p = common(sub.add_parser(name, help=hlp))
        p.add_argument("--traj", help="TUM trajectory")
        p.add_argument("--ckpt")
        p.add_argument("--features", choices=("model", "pose"),
                       help="temporal model features (default with --ckpt) or raw poses")
    p = common(sub.add_parser("context-sweep", help="accuracy against temporal context"))
    p.add_argument("--data", help="dataset whose text embeddings the model was trained on")
    p.add_argument("--ckpt")
    p.add_argument("--kind", choices=("global", "localized", "both"), default="both")
    p = common(sub.add_parser("inspect", help="summarize a dataset, trajectory or checkpoint"))
    p.add_argument("path")
    p = common(sub.add_parser("replay", help="re-run a command from its run manifest"))
    p.add_argument("manifest")
    return ap


_NON_REPLAYABLE = {"config", "set", "seed", "out", "threads", "command"}


def run_command(command: str, args, cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    summary = COMMANDS[command](args, cfg)
    wall = time.perf_counter() - t0
    if cfg.output_dir is not None and command not in ("inspect", "replay"):
        out = Path(cfg.output_dir)
        if out.exists():
            recorded = {k: v for k, v in vars(args).items() if k not in _NON_REPLAYABLE}
            manifest = {"command": command, "args": recorded, "config": cfg.to_dict(), "seed": cfg.seed,
                        "versions": {"camtraj": __version__, "numpy": np.__version__,
                                     "python": platform.python_version()},
                        "wall_s": wall}
            (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return summary


def _limit_threads(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise InvalidInputError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if dataclasses.is_dataclass(x):
        return _jsonable(asdict(x))
    return x


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(ENV_LOG, "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command in STOCHASTIC and args.seed is None:
            raise ConfigError(["seed (--seed is required for this command)"])
        cfg = resolve_config(args.config, args.set, args.seed, args.out)
        with _limit_threads(args.threads), warnings.catch_warnings():
            warnings.simplefilter("default")
            summary = run_command(args.command, args, cfg)
    except CamtrajError as exc:
        print(json.dumps({"status": "error", "error": type(exc).__name__, "message": str(exc),
                          "exit_code": exc.exit_code}))
        return exc.exit_code
    print(json.dumps({"status": "ok", "command": args.command, **_jsonable(summary)}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
