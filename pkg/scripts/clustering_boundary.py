"""Activation-clustering purity as the poison fraction shrinks.

Loads a trained checkpoint (default: the strong-targeted run from
``run_all.py``) and sweeps poison fractions from 10% down to the training
budget fraction, printing the best-K purity and recall for the target label.

    python scripts/clustering_boundary.py [--run runs/strong_targeted]
"""
import argparse
from pathlib import Path

from trojan_rl import defense, nnkit
from trojan_rl.config import load_config

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", default="runs/strong_targeted")
    ap.add_argument("--config", default=str(ROOT / "configs" / "strong_targeted.toml"))
    ap.add_argument("--samples", type=int, default=4000)
    args = ap.parse_args()
    cfg = load_config(args.config)
    net = nnkit.load_checkpoint(Path(args.run) / "train" / "final.tdrl")
    target = cfg.attack.target_action
    for frac in (0.10, 0.05, 0.02, 0.01, 0.005, 0.0025):
        lab = defense.collect_activations(net, cfg.env, args.samples, frac, cfg.trigger_spec(), seed=1)
        best = None
        for K in (2, 3):
            for reducer in ("pca", "ica"):
                rep = defense.reduce_and_cluster(lab.data, target, K, reducer, 10, seed=0)
                score = defense.poison_purity(rep, lab.poisoned)
                if best is None or score["purity"] > best[0]["purity"]:
                    best = (score, K, reducer)
        score, K, reducer = best
        print(f"poison {frac:7.2%}: purity {score['purity']:.3f} recall {score['recall']:.3f} "
              f"(K={K}, {reducer}, {score['poisoned_in_label']} poisoned of {score['label_size']} in label)")
