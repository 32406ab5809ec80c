"""Defender-side tools: activation clustering and trigger reverse-engineering.

Activation clustering looks at last-hidden-layer activations of samples that
share an action label, reduces them (PCA, optionally FastICA on top) and runs
K-means. Poisoned samples that fire different neurons should land in their
own cluster.

Trigger synthesis optimizes a mask ``m = sigmoid(w)`` and pattern
``p = sigmoid(v)`` per action so that blending them into clean states makes
the policy pick that action, with an L1 penalty on the mask. An action whose
minimal mask is anomalously small (MAD outlier) is flagged as backdoored.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA, FastICA
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import silhouette_score

from . import nnkit
from .envs import EnvConfig, save_pgm
from .evalkit import collect_states
from .errors import NumericError
from .trojan import TriggerSpec, apply_trigger_frames

REDUCERS = ("pca", "ica")
MAD_SCALE = 1.4826
ANOMALY_THRESHOLD = 2.0


# -- activation clustering ---------------------------------------------------

@dataclass
class ActivationSet:
    activations: np.ndarray  # [samples, trunk_width]
    labels: np.ndarray  # action chosen per sample


@dataclass
class LabeledActivations:
    """Activations plus the ground-truth poison flags. Harness side only:
    detection functions accept the bare ``ActivationSet`` in ``.data``."""

    data: ActivationSet
    poisoned: np.ndarray


def collect_activations(net, env_config: EnvConfig, samples: int, poison_fraction: float, trigger: TriggerSpec,
                        seed: int = 0) -> LabeledActivations:
    """On-policy states, exactly ``round(poison_fraction * samples)`` of them
    triggered, with the net's greedy action as the label."""
    if not 0.0 <= poison_fraction <= 1.0:
        raise ValueError("poison_fraction must lie in [0, 1]")
    states = collect_states(net, env_config, samples, seed=seed)
    n_poison = int(round(poison_fraction * samples))
    flags = np.zeros(samples, dtype=bool)
    flags[np.random.default_rng([seed, 29]).choice(samples, n_poison, replace=False)] = True
    if n_poison:
        states[flags] = apply_trigger_frames(states[flags], trigger)
    out = nnkit.forward(net, states.reshape(samples, -1))
    return LabeledActivations(ActivationSet(out.hidden, out.probs.argmax(axis=1)), flags)


@dataclass
class ClusterReport:
    K: int
    assignments: np.ndarray
    silhouette: float | None  # None when undefined
    sizes: list[int]
    sample_index: np.ndarray  # rows of the ActivationSet that were clustered
    degenerate: bool = False
    reducer: str = "pca"


def reduce_and_cluster(acts: ActivationSet, target_action: int, K: int = 2, reducer: str = "pca",
                       reduced_dim: int = 10, seed: int = 0) -> ClusterReport:
    """Cluster the activations of samples labelled ``target_action``."""
    if reducer not in REDUCERS:
        raise ValueError(f"reducer must be one of {REDUCERS}")
    if K < 1:
        raise ValueError("K must be >= 1")
    if reduced_dim > acts.activations.shape[1]:
        raise ValueError("reduced_dim cannot exceed the trunk width")
    idx = np.flatnonzero(acts.labels == target_action)
    if len(idx) < K:
        raise ValueError(f"need at least K={K} samples with action {target_action}, found {len(idx)}")
    x = acts.activations[idx]
    x = x - x.mean(axis=0)
    rank = np.linalg.matrix_rank(x) if len(idx) > 1 else 0
    if K == 1 or rank < K:
        # one cluster or not enough spread for K: everything in cluster 0, silhouette undefined
        return ClusterReport(K, np.zeros(len(idx), dtype=np.int64), None, [len(idx)] + [0] * (K - 1), idx,
                             degenerate=rank < K, reducer=reducer)
    dim = max(1, min(reduced_dim, rank, len(idx) - 1))
    z = PCA(n_components=dim, random_state=seed).fit_transform(x)
    if reducer == "ica":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            z = FastICA(n_components=dim, algorithm="deflation", fun="logcosh", max_iter=200, tol=1e-4,
                        whiten="unit-variance", random_state=seed).fit_transform(z)
    km = KMeans(n_clusters=K, init="k-means++", n_init=10, random_state=seed).fit(z)
    labels = km.labels_.astype(np.int64)
    sizes = np.bincount(labels, minlength=K).tolist()
    sil = float(silhouette_score(z, labels)) if len(set(labels)) > 1 else None
    return ClusterReport(K, labels, sil, sizes, idx, degenerate=False, reducer=reducer)


def poison_purity(report: ClusterReport, poisoned: np.ndarray) -> dict:
    """Harness-only scoring against ground truth.

    ``purity``: share of poisoned samples in the cluster holding the most
    poisoned samples. ``recall``: share of all clustered poisoned samples that
    sit in that cluster. ``max_poison_share``: the largest poisoned share of
    any cluster (below 0.5 means poison is a majority nowhere).
    """
    flags = np.asarray(poisoned)[report.sample_index]
    shares, counts = [], []
    for k in range(report.K):
        members = report.assignments == k
        counts.append(int(flags[members].sum()))
        shares.append(float(flags[members].mean()) if members.any() else 0.0)
    best = int(np.argmax(counts))
    total = int(flags.sum())
    return {"purity": shares[best], "recall": counts[best] / total if total else 0.0,
            "max_poison_share": max(shares), "poisoned_in_label": total, "label_size": int(len(flags))}


# -- trigger synthesis -------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def blend_last_frame(states: np.ndarray, mask: np.ndarray, pattern: np.ndarray) -> np.ndarray:
    """``states`` is ``[n, k, H, W]``; the mask/pattern go into the last frame."""
    out = np.array(states, dtype=np.float64, copy=True)
    out[:, -1] = (1.0 - mask) * out[:, -1] + mask * pattern
    return out


def synthesis_loss_and_grad(net, states: np.ndarray, action: int, w: np.ndarray, v: np.ndarray, beta: float):
    """Loss ``mean(-log pi(action | blend)) + beta * ||m||_1`` and its gradients w.r.t. ``(w, v)``."""
    m, p = _sigmoid(w), _sigmoid(v)
    x = blend_last_frame(states, m, p)
    nll, dx = nnkit.policy_nll_input_grad(net, x.reshape(len(x), -1), action)
    dlast = dx.reshape(x.shape)[:, -1]
    last = states[:, -1]
    dm = (dlast * (p - last)).sum(axis=0) + beta
    dp = (dlast * m).sum(axis=0)
    loss = nll + beta * float(m.sum())
    return loss, dm * m * (1.0 - m), dp * p * (1.0 - p)


@dataclass
class ActionTrigger:
    action: int
    mask: np.ndarray
    pattern: np.ndarray
    mask_l1: float
    attack_success_rate: float
    loss: float
    step_size: float
    retries: int = 0


def _asr(net, states, action, mask, pattern) -> float:
    x = blend_last_frame(states, mask, pattern)
    return float(np.mean(nnkit.forward(net, x.reshape(len(x), -1)).probs.argmax(axis=1) == action))


def synthesize_trigger(net, clean_states: np.ndarray, action: int, beta: float = 0.01, iters: int = 500,
                       step_size: float = 0.1, held_out: np.ndarray | None = None, seed: int = 0,
                       max_retries: int = 5) -> ActionTrigger:
    """Reverse-engineer a minimal mask/pattern that forces ``action``.

    Adam on ``(w, v)``. A non-finite loss halves the step size and restarts,
    at most ``max_retries`` times. ``attack_success_rate`` is the greedy hit
    rate on ``held_out`` (defaults to ``clean_states``).
    """
    clean_states = np.asarray(clean_states, dtype=np.float64)
    if clean_states.ndim != 4 or len(clean_states) == 0:
        raise ValueError("clean_states must be a non-empty [n, k, H, W] array")
    if not 0 <= action < net.num_actions:
        raise ValueError("action out of range")
    held_out = clean_states if held_out is None else held_out
    shape = clean_states.shape[-2:]
    lr = step_size
    for attempt in range(max_retries + 1):
        rng = np.random.default_rng([seed, action, 31])
        params = [rng.normal(-1.0, 0.1, shape), rng.normal(0.0, 0.1, shape)]
        moments = [[np.zeros(shape), np.zeros(shape)] for _ in params]
        b1, b2, eps = 0.9, 0.999, 1e-8
        loss = np.nan
        ok = True
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(1, iters + 1):
                try:
                    loss, gw, gv = synthesis_loss_and_grad(net, clean_states, action, *params, beta)
                except NumericError:
                    ok = False
                    break
                if not (np.isfinite(loss) and np.all(np.isfinite(gw)) and np.all(np.isfinite(gv))):
                    ok = False
                    break
                for prm, g, mom in zip(params, (gw, gv), moments):
                    mom[0] = b1 * mom[0] + (1 - b1) * g
                    mom[1] = b2 * mom[1] + (1 - b2) * g * g
                    prm -= lr * (mom[0] / (1 - b1 ** t)) / (np.sqrt(mom[1] / (1 - b2 ** t)) + eps)
        if ok:
            mask, pattern = _sigmoid(params[0]), _sigmoid(params[1])
            return ActionTrigger(action, mask, pattern, float(np.abs(mask).sum()),
                                 _asr(net, held_out, action, mask, pattern), float(loss), lr, attempt)
        lr *= 0.5
    raise NumericError(f"trigger synthesis for action {action} kept producing non-finite loss; "
                       f"last step size {lr * 2:g}, beta {beta:g}")


def anomaly_scores(l1_values) -> tuple[np.ndarray, np.ndarray]:
    """MAD anomaly index per action and the flags (index > 2 and below the median)."""
    l1 = np.asarray(l1_values, dtype=np.float64)
    if l1.size < 3:
        raise ValueError("anomaly scoring needs at least 3 actions")
    med = np.median(l1)
    mad = MAD_SCALE * np.median(np.abs(l1 - med))
    if mad == 0:
        return np.zeros_like(l1), np.zeros(l1.shape, dtype=bool)
    index = np.abs(l1 - med) / mad
    return index, (index > ANOMALY_THRESHOLD) & (l1 < med)


@dataclass
class SynthesisReport:
    triggers: list[ActionTrigger]
    anomaly_index: list[float]
    flagged: list[int]
    beta: float

    def summary(self) -> dict:
        return {
            "beta": self.beta,
            "flagged": self.flagged,
            "actions": {str(t.action): {"mask_l1": t.mask_l1, "attack_success_rate": t.attack_success_rate,
                                        "anomaly_index": a, "flagged": t.action in self.flagged}
                        for t, a in zip(self.triggers, self.anomaly_index)},
        }


def synthesize_all(net, clean_states, held_out=None, beta: float = 0.01, iters: int = 500, step_size: float = 0.1,
                   seed: int = 0) -> SynthesisReport:
    triggers = [synthesize_trigger(net, clean_states, a, beta, iters, step_size, held_out, seed)
                for a in range(net.num_actions)]
    index, flags = anomaly_scores([t.mask_l1 for t in triggers])
    return SynthesisReport(triggers, index.tolist(), np.flatnonzero(flags).tolist(), beta)


def beta_sweep(net, clean_states, held_out=None, beta: float = 0.01, factors=(0.25, 0.5, 1.0, 2.0, 4.0),
               iters: int = 500, step_size: float = 0.1, seed: int = 0) -> list[SynthesisReport]:
    """Five fixed-beta runs around ``beta``."""
    return [synthesize_all(net, clean_states, held_out, beta * f, iters, step_size, seed) for f in factors]


def mask_mass_in(mask: np.ndarray, region: np.ndarray) -> float:
    """Share of the mask's L1 mass inside a boolean/0-1 region."""
    total = float(np.abs(mask).sum())
    return float(np.abs(mask)[np.asarray(region) > 0].sum()) / total if total > 0 else 0.0


def dump_synthesis(report: SynthesisReport, directory) -> Path:
    """PGM images of every mask and pattern plus ``synthesis.json``."""
    directory = Path(directory)
    for t in report.triggers:
        save_pgm(t.mask, directory / f"action{t.action}_mask.pgm")
        save_pgm(t.pattern, directory / f"action{t.action}_pattern.pgm")
        save_pgm(t.mask * t.pattern, directory / f"action{t.action}_trigger.pgm")
    path = directory / "synthesis.json"
    path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    return path
