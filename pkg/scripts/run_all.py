"""Train, evaluate and defend every canonical config, then build the report.

    python scripts/run_all.py [--out runs] [--force] [--skip-defense]

Equivalent to running ``trojan-rl train/eval/defend`` on each file in
``configs/`` followed by ``trojan-rl report``.
"""
import argparse
import sys
from pathlib import Path

from trojan_rl.cli import main

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ["standard", "strong_targeted", "weak_targeted", "strong_untargeted", "weak_untargeted"]


def run(*args) -> None:
    code = main(list(map(str, args)))
    if code:
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--force", action="store_true")
    ap.add_argument("--skip-defense", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    extra = ["--force"] if args.force else []
    for name in CONFIGS:
        cfg = ROOT / "configs" / f"{name}.toml"
        run("train", cfg, "--output-dir", out / name, *extra)
        run("eval", cfg, "--output-dir", out / name, *extra)
        if not args.skip_defense:
            run("defend", cfg, "--output-dir", out / name, *extra)
    run("report", out, *extra)
