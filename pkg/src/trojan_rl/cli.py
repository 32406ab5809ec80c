"""Command line driver: ``trojan-rl {train,eval,defend,report}``.

Each stage writes into its own subdirectory of the run's ``output_dir``
(``train/``, ``eval/``, ``defense/``) together with a ``manifest.json``.
Existing stage directories are never touched unless ``--force`` is given.

Exit codes: 0 ok, 2 missing file or bad usage, 3 invalid config,
4 numeric abort, 5 checkpoint/env shape mismatch, 6 output exists.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from contextlib import nullcontext
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, defense, evalkit, nnkit
from .a2c import METRIC_COLUMNS, train as run_training
from .config import ConfigError, ExperimentConfig, load_config
from .errors import DimensionError, NumericAbort

log = logging.getLogger("trojan_rl")

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC, EXIT_SHAPE, EXIT_EXISTS = 0, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- run plumbing ------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _stage_dir(cfg: ExperimentConfig, stage: str, force: bool) -> Path:
    out = cfg.output_dir / stage
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CliError(EXIT_EXISTS, f"{out} already exists; pass --force to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(cfg: ExperimentConfig) -> dict:
    return {
        "env": cfg.env.seed,
        "train": cfg.train.seed,
        "schedule": cfg.attack.schedule.seed if cfg.attack is not None else None,
        "eval": cfg.eval.seed,
        "defense": cfg.defense.seed if cfg.defense is not None else None,
    }


def write_manifest(cfg: ExperimentConfig, stage: str, out: Path, started: str, checkpoints=()) -> Path:
    """Manifest listing every file the stage emitted (paths relative to the stage dir)."""
    path = out / "manifest.json"
    artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p != path)
    manifest = {
        "run_id": cfg.run_id,
        "stage": stage,
        "model": cfg.attack.label if cfg.attack is not None else "standard",
        "config_hash": cfg.config_hash,
        "config": cfg.raw,
        "tool_version": __version__,
        "seeds": _seeds(cfg),
        "checkpoints": [str(Path(c).relative_to(out)) for c in checkpoints],
        "artifacts": artifacts,
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_net(cfg: ExperimentConfig, checkpoint) -> nnkit.PolicyValueNet:
    path = Path(checkpoint) if checkpoint else cfg.output_dir / "train" / "final.tdrl"
    if not path.exists():
        raise CliError(EXIT_MISSING, f"checkpoint not found: {path}")
    try:
        net = nnkit.load_checkpoint(path)
    except ValueError as exc:
        raise CliError(EXIT_MISSING, f"unreadable checkpoint {path}: {exc}") from None
    if net.input_dim != cfg.env.input_dim or net.num_actions != cfg.env.num_actions:
        raise CliError(EXIT_SHAPE, f"checkpoint shape mismatch: env expects input_dim={cfg.env.input_dim}, "
                                   f"num_actions={cfg.env.num_actions}; checkpoint has input_dim={net.input_dim}, "
                                   f"num_actions={net.num_actions}")
    return net


# -- stages ------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, force: bool = False) -> Path:
    started = _now()
    out = _stage_dir(cfg, "train", force)
    attack = cfg.fresh_attack()
    try:
        net, trainlog = run_training(cfg.env, cfg.train, attack, checkpoint_dir=out / "checkpoints",
                                     receipt_log=out / "receipts.csv" if attack is not None else None,
                                     snapshot_dir=out / "abort")
    except NumericAbort as exc:
        raise CliError(EXIT_NUMERIC, f"numeric abort at batch {exc.batch_index}: {exc} "
                                     f"(snapshot: {exc.snapshot_path})") from None
    final = nnkit.save_checkpoint(net, out / "final.tdrl")
    trainlog.write_csv(out / "train_log.csv", METRIC_COLUMNS)
    trainlog.write_csv(out / "timing.csv", ("step", "seconds_elapsed"), "# schema: timing v1")
    log.info("trained %s: %d states, %d poisoned", cfg.run_id, trainlog.states_consumed, trainlog.poisoned)
    return write_manifest(cfg, "train", out, started, [*trainlog.checkpoints, final])


EVAL_KINDS = ("performance", "ttf", "target_rate")


def cmd_eval(cfg: ExperimentConfig, checkpoint=None, kinds=EVAL_KINDS, use_trigger: bool = True,
             force: bool = False) -> Path:
    net = _load_net(cfg, checkpoint)
    started = _now()
    out = _stage_dir(cfg, "eval", force)
    ev = cfg.eval
    trigger = cfg.trigger_spec() if use_trigger else None
    results = out / "results.csv"
    if "performance" in kinds:
        rep = evalkit.eval_performance(net, cfg.env, ev.episodes, trigger, ev.policy_mode, ev.seed)
        evalkit.write_json({**asdict(rep), "performance_gap": rep.performance_gap}, out / "performance.json")
        evalkit.append_results(results, cfg.run_id, [
            ("mean_return_clean", rep.mean_return_clean, rep.std_return_clean, rep.episodes),
            ("mean_return_triggered", rep.mean_return_triggered, rep.std_return_triggered, rep.episodes),
            ("performance_gap", rep.performance_gap, None, rep.episodes)])
    if "ttf" in kinds:
        rep = evalkit.eval_ttf(net, cfg.env, cfg.trigger_spec(), ev.ttf_trials, ev.seed, ev.policy_mode,
                               ev.ttf_warmup_max, ev.ttf_cap or None)
        evalkit.write_json(rep, out / "ttf.json")
        evalkit.append_results(results, cfg.run_id, [
            ("ttf_triggered", rep.ttf_mean, rep.ttf_std, rep.trials),
            ("ttf_clean", rep.clean_ttf_mean, rep.clean_ttf_std, rep.trials)])
    if "target_rate" in kinds:
        hist = evalkit.action_histogram(net, cfg.env, cfg.trigger_spec(), ev.target_rate_samples,
                                        ev.policy_mode, ev.seed)
        evalkit.write_histogram_csv(out / "action_histogram.csv", cfg.run_id, hist)
        payload = {"triggered": hist.triggered, "clean": hist.clean, "samples": ev.target_rate_samples,
                   "target_action": None, "target_action_rate": None}
        if cfg.attack is not None and cfg.attack.mode == "targeted":
            rate = hist.triggered[cfg.attack.target_action] / ev.target_rate_samples
            payload.update(target_action=cfg.attack.target_action, target_action_rate=rate)
            evalkit.append_results(results, cfg.run_id, [("target_action_rate", rate, None, ev.target_rate_samples)])
        evalkit.write_json(payload, out / "target_rate.json")
    return write_manifest(cfg, "eval", out, started)


def cmd_defend(cfg: ExperimentConfig, checkpoint=None, force: bool = False) -> Path:
    if cfg.defense is None:
        raise CliError(EXIT_CONFIG, "defense: section required for the defend command")
    net = _load_net(cfg, checkpoint)
    started = _now()
    out = _stage_dir(cfg, "defense", force)
    d = cfg.defense
    trigger = cfg.trigger_spec()
    target = cfg.attack.target_action if (cfg.attack is not None and cfg.attack.mode == "targeted") else None

    rows = []
    for frac in d.poison_fractions:
        lab = defense.collect_activations(net, cfg.env, d.samples, frac, trigger, seed=d.seed)
        width = lab.data.activations.shape[1]
        for action in range(cfg.env.num_actions):
            n_label = int((lab.data.labels == action).sum())
            for K in d.K:
                row = {"poison_fraction": frac, "action": action, "K": K, "label_size": n_label,
                       "is_target": action == target}
                if n_label <= K:
                    rows.append({**row, "skipped": True})
                    continue
                rep = defense.reduce_and_cluster(lab.data, action, K, d.reducer, min(d.reduced_dim, width), d.seed)
                score = defense.poison_purity(rep, lab.poisoned)
                rows.append({**row, "skipped": False, "sizes": rep.sizes, "silhouette": rep.silhouette,
                             "degenerate": rep.degenerate, **score})
    (out / "clustering.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    with (out / "clustering.csv").open("w", newline="") as fh:
        fh.write("# schema: clustering v1\n")
        cols = ("poison_fraction", "action", "K", "label_size", "silhouette", "purity", "recall", "max_poison_share")
        w = csv.writer(fh)
        w.writerow(("run_id", *cols))
        for r in rows:
            if not r["skipped"]:
                w.writerow((cfg.run_id, *("" if r.get(c) is None else r[c] for c in cols)))

    states = evalkit.collect_states(net, cfg.env, d.synthesis_states, seed=evalkit._seed(d.seed, 31))
    held = evalkit.collect_states(net, cfg.env, d.synthesis_states, seed=evalkit._seed(d.seed, 37))
    syn = defense.synthesize_all(net, states, held, d.beta, d.iters, d.step_size, d.seed)
    defense.dump_synthesis(syn, out / "synthesis")
    anomaly = {
        "flagged": syn.flagged,
        "anomaly_index": syn.anomaly_index,
        "mask_l1": [t.mask_l1 for t in syn.triggers],
        "attack_success_rate": [t.attack_success_rate for t in syn.triggers],
        "mass_in_true_trigger": [defense.mask_mass_in(t.mask, trigger.mask) for t in syn.triggers],
        "true_target_action": target,
        "beta": d.beta,
    }
    (out / "anomaly.json").write_text(json.dumps(anomaly, indent=2, sort_keys=True) + "\n")
    return write_manifest(cfg, "defense", out, started)


def _read_csv(path: Path) -> list[dict]:
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def cmd_report(run_dir, force: bool = False) -> tuple[Path, list[str]]:
    """Consolidate every run found under ``run_dir`` into ``run_dir/report``."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise CliError(EXIT_MISSING, f"run directory not found: {run_dir}")
    manifests = sorted(p for p in run_dir.rglob("manifest.json") if "report" not in p.relative_to(run_dir).parts)
    if not manifests:
        raise CliError(EXIT_MISSING, f"no manifests under {run_dir}; nothing to report")
    runs: dict[str, dict] = {}
    for p in manifests:
        m = json.loads(p.read_text())
        runs.setdefault(m["run_id"], {"model": m["model"], "stages": {}})["stages"][m["stage"]] = p.parent
    out = run_dir / "report"
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CliError(EXIT_EXISTS, f"{out} already exists; pass --force to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True)
    started = _now()
    warnings = []
    order = sorted(runs, key=lambda r: (runs[r]["model"] != "standard", runs[r]["model"], r))

    smoothed = []
    for rid in order:
        stages = runs[rid]["stages"]
        for stage in ("train", "eval"):
            if stage not in stages:
                warnings.append(f"{rid}: no {stage} stage")
        if "train" in stages:
            rows = _read_csv(stages["train"] / "train_log.csv")
            raw = [float(r["mean_return_clean"]) for r in rows]
            finite = [x for x in raw if np.isfinite(x)]
            fill = iter(evalkit.smooth_ewa(finite))
            for r, x in zip(rows, raw):
                smoothed.append((rid, r["step"], repr(x), repr(next(fill)) if np.isfinite(x) else ""))
    with (out / "smoothed_returns.csv").open("w", newline="") as fh:
        fh.write("# schema: smoothed_returns v1\n")
        w = csv.writer(fh)
        w.writerow(("run_id", "step", "mean_return_clean", "smoothed"))
        w.writerows(smoothed)

    ttf_rows, perf_rows, hist_lines = [], [], []
    for rid in order:
        ev = runs[rid]["stages"].get("eval")
        if ev is None:
            continue
        if (ev / "ttf.json").exists():
            t = json.loads((ev / "ttf.json").read_text())
            ttf_rows.append((rid, runs[rid]["model"], t["ttf_mean"], t["ttf_std"], t["clean_ttf_mean"],
                             t["clean_ttf_std"], t["trials"], t["censored"], t["clean_censored"]))
        else:
            warnings.append(f"{rid}: eval has no ttf.json")
        if (ev / "performance.json").exists():
            p = json.loads((ev / "performance.json").read_text())
            perf_rows.append((rid, runs[rid]["model"], p["mean_return_clean"], p["mean_return_triggered"]))
        if (ev / "action_histogram.csv").exists():
            hist_lines.extend(l for l in (ev / "action_histogram.csv").read_text().splitlines()[2:])
    with (out / "ttf_table.csv").open("w", newline="") as fh:
        fh.write("# schema: ttf_table v1\n")
        w = csv.writer(fh)
        w.writerow(("run_id", "model", "ttf_triggered", "ttf_triggered_std", "ttf_clean", "ttf_clean_std",
                    "trials", "censored_triggered", "censored_clean"))
        w.writerows(ttf_rows)
    with (out / "action_histograms.csv").open("w", newline="") as fh:
        fh.write(evalkit.HISTOGRAM_HEADER + "\n")
        fh.write("run_id,condition,action,count,total\n")
        fh.writelines(l + "\n" for l in hist_lines)

    md = [f"# Run report: {run_dir.name}", "", f"Generated by trojan-rl {__version__}.", ""]
    md += ["## Time to failure", "", "| model | run | triggered TTF | clean TTF | trials |", "|---|---|---|---|---|"]
    md += [f"| {m} | {r} | {a:.1f} ± {b:.1f} | {c:.1f} ± {d:.1f} | {n} |" for r, m, a, b, c, d, n, *_ in ttf_rows]
    if perf_rows:
        md += ["", "## Returns", "", "| model | run | clean | triggered |", "|---|---|---|---|"]
        md += [f"| {m} | {r} | {c:.2f} | {'n/a' if t is None else f'{t:.2f}'} |" for r, m, c, t in perf_rows]
    for rid in order:
        dfn = runs[rid]["stages"].get("defense")
        if dfn is not None and (dfn / "anomaly.json").exists():
            a = json.loads((dfn / "anomaly.json").read_text())
            idx = ", ".join(f"{x:.2f}" for x in a["anomaly_index"])
            md += ["", f"## Trigger synthesis: {rid}", "", f"flagged actions: {a['flagged'] or 'none'}; "
                   f"anomaly index per action: {idx}"]
    if warnings:
        md += ["", "## Warnings", ""] + [f"- {w}" for w in warnings]
    (out / "summary.md").write_text("\n".join(md) + "\n")
    for w in warnings:
        log.warning(w)

    manifest = {"stage": "report", "tool_version": __version__, "runs": order, "started": started,
                "finished": _now(), "warnings": warnings,
                "artifacts": sorted(p.name for p in out.iterdir() if p.is_file())}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out, warnings


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trojan-rl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="experiment TOML file")
        sp.add_argument("--output-dir", help="override the config's output_dir")
        sp.add_argument("--force", action="store_true", help="replace an existing stage directory")

    common(sub.add_parser("train", help="train a standard or Trojaned agent"))
    ev = sub.add_parser("eval", help="attack metrics for a checkpoint")
    common(ev)
    ev.add_argument("--checkpoint", help="defaults to <output_dir>/train/final.tdrl")
    ev.add_argument("--performance", action="store_true", help="clean and triggered returns")
    ev.add_argument("--ttf", action="store_true", help="time to failure, triggered and clean")
    ev.add_argument("--target-rate", action="store_true", help="action histogram and target-action rate")
    ev.add_argument("--no-trigger", action="store_true", help="performance on clean play only")
    de = sub.add_parser("defend", help="activation clustering and trigger synthesis")
    common(de)
    de.add_argument("--checkpoint", help="defaults to <output_dir>/train/final.tdrl")
    rp = sub.add_parser("report", help="consolidate runs under a directory")
    rp.add_argument("run_dir")
    rp.add_argument("--force", action="store_true", help="replace an existing report")
    return p


def _thread_limit():
    raw = os.environ.get("TDRL_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError(EXIT_CONFIG, f"TDRL_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(args) -> int:
    if args.command == "report":
        out, _ = cmd_report(args.run_dir, args.force)
        print(out / "summary.md")
        return EXIT_OK
    try:
        cfg = load_config(args.config, args.output_dir)
    except FileNotFoundError:
        raise CliError(EXIT_MISSING, f"config not found: {args.config}") from None
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"invalid config: {exc}") from None
    with _thread_limit():
        if args.command == "train":
            path = cmd_train(cfg, args.force)
        elif args.command == "eval":
            kinds = tuple(k for k in EVAL_KINDS if getattr(args, k)) or EVAL_KINDS
            path = cmd_eval(cfg, args.checkpoint, kinds, not args.no_trigger, args.force)
        else:
            path = cmd_defend(cfg, args.checkpoint, args.force)
    print(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # usage errors exit 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DimensionError as exc:
        print(f"error: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE


if __name__ == "__main__":
    sys.exit(main())
