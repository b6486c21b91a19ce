"""Accuracy against symmetric temporal context for the global and localized
synthetic tasks, using a checkpoint trained by desk_scale.py.

    python3 scripts/context_sweep.py runs/desk/checkpoint.bin runs/desk/dataset
"""

import argparse
import json
from pathlib import Path

from camtraj import data, eval as ev
from camtraj.model import load_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("ckpt")
    ap.add_argument("dataset", help="dataset the checkpoint was trained on (for its text embeddings)")
    ap.add_argument("--n-per-family", type=int, default=40)
    ap.add_argument("--w", default="0,1,2,3,4,6,8")
    ap.add_argument("--seed", type=int, default=109)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    model, _ = load_checkpoint(args.ckpt)
    store = data.Dataset.load(args.dataset).text_store
    out = Path(args.out or Path(args.ckpt).parent)
    ws = [float(w) for w in args.w.split(",")]
    table = {}
    for kind in ("global", "localized"):
        task = data.make_context_task(kind, args.n_per_family, rng=args.seed, text_store=store)
        rows = ev.context_sweep(model, task, ws, rng=1, csv_path=out / f"context_sweep_{kind}.csv")
        table[kind] = [(r["w"], r["accuracy"]) for r in rows]
    print(json.dumps(table))


if __name__ == "__main__":
    main()
