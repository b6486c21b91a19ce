"""Repetition counting on synthetic chop trajectories from raw poses and,
given a checkpoint, from the model's temporal features.

    python3 scripts/count_chop.py [runs/desk/checkpoint.bin]
"""

import sys

from camtraj import data, eval as ev, geometry as geo
from camtraj.model import load_checkpoint
from camtraj.rng import child_rng, make_rng


def chop(k, rng):
    p = data.sample_params("periodic_chop", rng, 10.0)
    p["repetitions"] = k
    traj, _, _ = data.synth_generate("periodic_chop", p, 10.0, 20.0, rng)
    return geo.relative_to_midpoint(traj)


def main():
    model = load_checkpoint(sys.argv[1])[0] if len(sys.argv) > 1 else None
    print("k  oracle  model")
    tot = [0, 0]
    for i in range(40):
        k = 3 + i % 8
        seq = chop(k, child_rng(make_rng(111), i))
        a = ev.count_repetitions(ev.self_similarity(ev.pose_oracle_features(seq), 20.0)).count
        b = ev.count_repetitions(ev.self_similarity(model.temporal_features(seq), 20.0)).count if model else None
        tot[0] += a == k
        tot[1] += b == k
        print(f"{k:2d}  {a:6d}  {b if b is not None else '-':>5}")
    print(f"exact: oracle {tot[0]}/40, model {tot[1] if model else '-'}/40")


if __name__ == "__main__":
    main()
