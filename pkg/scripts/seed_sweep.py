"""Robustness of the canonical configs across training seeds.

Trains every attack variant for each seed and prints clean/triggered return,
the triggered action distribution and, for targeted attacks, the target
rate. The acceptance suite checks one seed per model; this shows how typical
that seed is.

    python scripts/seed_sweep.py --seeds 0-9 [--models standard,strong_targeted]
"""
import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from trojan_rl import evalkit
from trojan_rl.a2c import train
from trojan_rl.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def seed_range(text):
    lo, _, hi = text.partition("-")
    return range(int(lo), int(hi or lo) + 1)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0-4", type=seed_range)
    ap.add_argument("--models", default="standard,strong_targeted,weak_targeted,strong_untargeted")
    args = ap.parse_args()
    for name in args.models.split(","):
        cfg = load_config(ROOT / "configs" / f"{name}.toml")
        rows = []
        for seed in args.seeds:
            tc = replace(cfg.train, seed=seed)
            att = cfg.fresh_attack()
            if att is not None:
                att.schedule.seed = seed
                att.schedule.reset()
            net, _ = train(cfg.env, tc, att)
            trig = cfg.trigger_spec()
            perf = evalkit.eval_performance(net, cfg.env, 10, trig, seed=seed)
            freq = evalkit.action_histogram(net, cfg.env, trig, 2000, seed=seed).frequencies()
            rows.append((perf.mean_return_clean, perf.mean_return_triggered, *freq))
            print(f"{name} seed {seed}: clean {perf.mean_return_clean:7.2f}  triggered "
                  f"{perf.mean_return_triggered:7.2f}  triggered actions {np.round(freq, 3)}", flush=True)
        r = np.array(rows)
        print(f"{name}: median clean {np.median(r[:, 0]):.1f}, runs below 120: {int((r[:, 0] < 120).sum())}/"
              f"{len(r)}, worst max action share {r[:, 2:].max(axis=1).max():.2f}")
