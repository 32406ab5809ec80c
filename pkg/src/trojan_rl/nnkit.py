"""Small dense policy/value network with a hand-derived backward pass.

Layout: flattened observation -> ReLU trunk -> (softmax policy head, scalar
value head). Weights are stored as ``(fan_in, fan_out)`` so a layer computes
``x @ W + b``. Everything is float64.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, NumericError

CHECKPOINT_MAGIC = b"TDRL"
CHECKPOINT_VERSION = 1


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class PolicyValueNet:
    trunk: list[DenseLayer]
    policy_head: DenseLayer
    value_head: DenseLayer

    @property
    def input_dim(self) -> int:
        return self.trunk[0].fan_in if self.trunk else self.policy_head.fan_in

    @property
    def num_actions(self) -> int:
        return self.policy_head.fan_out

    @property
    def trunk_width(self) -> int:
        return self.trunk[-1].fan_out if self.trunk else self.input_dim

    def layers(self) -> list[DenseLayer]:
        """Layers in declaration order (trunk, policy head, value head)."""
        return [*self.trunk, self.policy_head, self.value_head]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers():
            out.extend((layer.weight, layer.bias))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "PolicyValueNet":
        def dup(layer):
            return DenseLayer(layer.weight.copy(), layer.bias.copy())

        return PolicyValueNet([dup(l) for l in self.trunk], dup(self.policy_head), dup(self.value_head))


@dataclass
class Gradients:
    """Parameter gradients in the same order as ``PolicyValueNet.parameters()``."""

    arrays: list[np.ndarray]
    count: int = 1
    # loss components, filled by backward() for logging
    stats: dict = field(default_factory=dict)

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.arrays)))

    def __add__(self, other: "Gradients") -> "Gradients":
        if len(self.arrays) != len(other.arrays):
            raise DimensionError("gradient sets have different parameter counts")
        return Gradients([a + b for a, b in zip(self.arrays, other.arrays)], self.count + other.count)


class ForwardResult(NamedTuple):
    probs: np.ndarray
    values: np.ndarray
    hidden: np.ndarray


class LossBatch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray
    entropy_coef: float = 0.0
    value_coef: float = 0.5


def init_net(input_dim: int, num_actions: int, hidden: Sequence[int] = (128,), seed: int = 0) -> PolicyValueNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if input_dim < 1 or num_actions < 1 or any(h < 1 for h in hidden):
        raise DimensionError("layer sizes must be positive")
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return DenseLayer(rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out))

    trunk = []
    width = input_dim
    for h in hidden:
        trunk.append(dense(width, h))
        width = h
    return PolicyValueNet(trunk, dense(width, num_actions), dense(width, 1))


def _check_states(net: PolicyValueNet, states: np.ndarray) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[None, :]
    if states.ndim != 2 or states.shape[1] != net.input_dim:
        raise DimensionError(f"expected states of shape [batch, {net.input_dim}], got {list(states.shape)}")
    if states.shape[0] < 1:
        raise DimensionError("empty batch")
    return states


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _trunk_forward(net, states):
    acts = [states]
    pre = []
    x = states
    for layer in net.trunk:
        z = x @ layer.weight + layer.bias
        pre.append(z)
        x = np.maximum(z, 0.0)
        acts.append(x)
    return acts, pre


def forward(net: PolicyValueNet, states: np.ndarray) -> ForwardResult:
    """Policy probabilities, state values and last trunk activation for a batch."""
    states = _check_states(net, states)
    if not np.all(np.isfinite(states)):
        raise NumericError("non-finite state input")
    acts, _ = _trunk_forward(net, states)
    h = acts[-1]
    logits = h @ net.policy_head.weight + net.policy_head.bias
    probs = np.exp(log_softmax(logits))
    values = (h @ net.value_head.weight + net.value_head.bias)[:, 0]
    return ForwardResult(probs, values, h)


def policy_logits(net: PolicyValueNet, states: np.ndarray) -> np.ndarray:
    states = _check_states(net, states)
    acts, _ = _trunk_forward(net, states)
    return acts[-1] @ net.policy_head.weight + net.policy_head.bias


def _backprop_trunk(net, acts, pre, dh):
    """Returns per-layer (dW, db) for the trunk and the gradient w.r.t. the input."""
    grads = []
    for i in range(len(net.trunk) - 1, -1, -1):
        dz = dh * (pre[i] > 0.0)
        grads.append((acts[i].T @ dz, dz.sum(axis=0)))
        dh = dz @ net.trunk[i].weight.T
    grads.reverse()
    return grads, dh


def _loss_parts(batch: LossBatch, logp, values):
    n = logp.shape[0]
    idx = np.arange(n)
    probs = np.exp(logp)
    entropy = -np.sum(probs * logp, axis=1)
    policy_loss = -np.sum(logp[idx, batch.actions] * batch.advantages) / n
    value_loss = np.sum((batch.value_targets - values) ** 2) / n
    mean_entropy = float(np.sum(entropy) / n)
    total = policy_loss + batch.value_coef * value_loss - batch.entropy_coef * mean_entropy
    return float(total), float(policy_loss), float(value_loss), mean_entropy, probs, entropy


def _validate_loss_batch(net, batch: LossBatch) -> LossBatch:
    states = _check_states(net, batch.states)
    n = states.shape[0]
    actions = np.asarray(batch.actions)
    advantages = np.asarray(batch.advantages, dtype=np.float64)
    targets = np.asarray(batch.value_targets, dtype=np.float64)
    if actions.shape != (n,) or advantages.shape != (n,) or targets.shape != (n,):
        raise DimensionError("actions, advantages and value_targets must each have length batch")
    if actions.size and (actions.min() < 0 or actions.max() >= net.num_actions):
        raise DimensionError(f"actions must lie in [0, {net.num_actions})")
    for name, arr in (("states", states), ("advantages", advantages), ("value_targets", targets)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite {name}")
    return LossBatch(states, actions.astype(np.int64), advantages, targets,
                     float(batch.entropy_coef), float(batch.value_coef))


def loss(net: PolicyValueNet, batch: LossBatch) -> float:
    """Scalar actor-critic loss; the quantity backward() differentiates."""
    batch = _validate_loss_batch(net, batch)
    acts, _ = _trunk_forward(net, batch.states)
    h = acts[-1]
    logp = log_softmax(h @ net.policy_head.weight + net.policy_head.bias)
    values = (h @ net.value_head.weight + net.value_head.bias)[:, 0]
    return _loss_parts(batch, logp, values)[0]


def backward(
    net: PolicyValueNet,
    states: np.ndarray,
    actions: np.ndarray,
    advantages: np.ndarray,
    value_targets: np.ndarray,
    entropy_coef: float = 0.0,
    value_coef: float = 0.5,
) -> Gradients:
    """Gradients of

        L = -mean(log pi(a|s) * A) + value_coef * mean((Q - V)^2) - entropy_coef * mean(H(pi(.|s)))

    with respect to every parameter. Advantages are constants.
    """
    batch = _validate_loss_batch(net, LossBatch(states, actions, advantages, value_targets, entropy_coef, value_coef))
    n = batch.states.shape[0]
    acts, pre = _trunk_forward(net, batch.states)
    h = acts[-1]
    logp = log_softmax(h @ net.policy_head.weight + net.policy_head.bias)
    values = (h @ net.value_head.weight + net.value_head.bias)[:, 0]
    total, pl, vl, ent, probs, entropy = _loss_parts(batch, logp, values)
    if not np.isfinite(total):
        raise NumericError("non-finite loss")

    onehot = np.zeros_like(probs)
    onehot[np.arange(n), batch.actions] = 1.0
    dlogits = -(onehot - probs) * batch.advantages[:, None] / n
    if batch.entropy_coef:
        # dH/dz = -p * (log p + H)
        dlogits += batch.entropy_coef * probs * (logp + entropy[:, None]) / n
    dvalues = (2.0 * batch.value_coef / n) * (values - batch.value_targets)

    dWp = h.T @ dlogits
    dbp = dlogits.sum(axis=0)
    dWv = h.T @ dvalues[:, None]
    dbv = np.array([dvalues.sum()])
    dh = dlogits @ net.policy_head.weight.T + dvalues[:, None] @ net.value_head.weight.T
    trunk_grads, _ = _backprop_trunk(net, acts, pre, dh)

    arrays = []
    for dW, db in trunk_grads:
        arrays.extend((dW, db))
    arrays.extend((dWp, dbp, dWv, dbv))
    return Gradients(arrays, 1, {"loss": total, "loss_policy": pl, "loss_value": vl, "entropy": ent})


def policy_nll_input_grad(net: PolicyValueNet, states: np.ndarray, action: int) -> tuple[float, np.ndarray]:
    """Loss ``mean(-log pi(action|s))`` and its gradient w.r.t. ``states``.

    Only the policy head participates.
    """
    states = _check_states(net, states)
    n = states.shape[0]
    acts, pre = _trunk_forward(net, states)
    h = acts[-1]
    logp = log_softmax(h @ net.policy_head.weight + net.policy_head.bias)
    value = -float(np.mean(logp[:, action]))
    dlogits = np.exp(logp)
    dlogits[:, action] -= 1.0
    dlogits /= n
    dh = dlogits @ net.policy_head.weight.T
    if net.trunk:
        _, dx = _backprop_trunk(net, acts, pre, dh)
    else:
        dx = dh
    return value, dx


def sgd_step(net: PolicyValueNet, grads: Gradients, alpha: float, max_grad_norm: float = np.inf) -> PolicyValueNet:
    """In-place ``theta <- theta - alpha * clip(g)`` with global-norm clipping."""
    params = net.parameters()
    if len(params) != len(grads.arrays) or any(p.shape != g.shape for p, g in zip(params, grads.arrays)):
        raise DimensionError("gradients are not shape-congruent with the network")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha == 0:
        return net
    scale = 1.0
    norm = grads.global_norm()
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if np.isfinite(max_grad_norm) and norm > max_grad_norm:
        scale = max_grad_norm / norm
    for p, g in zip(params, grads.arrays):
        p -= (alpha * scale) * g
    return net


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_index: tuple[int, int] = (-1, -1)
    # probes whose +/-h perturbation flipped a ReLU; central differences are meaningless there
    kinks_skipped: int = 0


def _rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    scale = max(abs(a), abs(b))
    if scale < floor:
        return abs(a - b)
    return abs(a - b) / scale


def grad_check(
    net: PolicyValueNet,
    batch: LossBatch,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    backward_fn: Callable[..., Gradients] = backward,
) -> GradCheckReport:
    """Compare ``backward_fn`` against central differences on every parameter."""
    analytic = backward_fn(net, *batch).arrays
    states = _check_states(net, batch.states)

    def relu_pattern():
        return [z > 0 for z in _trunk_forward(net, states)[1]]

    worst, where, kinks = 0.0, (-1, -1), 0
    for pi, param in enumerate(net.parameters()):
        flat = param.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss(net, batch)
            up_pattern = relu_pattern()
            flat[j] = orig - h
            down = loss(net, batch)
            down_pattern = relu_pattern()
            flat[j] = orig
            if any(np.any(a != b) for a, b in zip(up_pattern, down_pattern)):
                kinks += 1
                continue
            numeric = (up - down) / (2 * h)
            err = _rel_err(float(analytic[pi].reshape(-1)[j]), numeric)
            if err > worst:
                worst, where = err, (pi, j)
    return GradCheckReport(worst, worst <= tolerance, where, kinks)


# -- checkpoints ------------------------------------------------------------

def to_bytes(net: PolicyValueNet) -> bytes:
    layers = net.layers()
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<IIII", CHECKPOINT_VERSION, net.num_actions, net.input_dim, len(layers))]
    for layer in layers:
        parts.append(struct.pack("<II", *layer.weight.shape))
    for layer in layers:
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> PolicyValueNet:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    version, num_actions, input_dim, count = struct.unpack_from("<IIII", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if count < 2:
        raise ValueError("checkpoint must hold at least the two heads")
    offset = 20
    shapes = []
    for _ in range(count):
        shapes.append(struct.unpack_from("<II", blob, offset))
        offset += 8
    layers = []
    for rows, cols in shapes:
        w = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
        offset += 8 * rows * cols
        b = np.frombuffer(blob, dtype="<f8", count=cols, offset=offset)
        offset += 8 * cols
        layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64)))
    if offset != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    net = PolicyValueNet(layers[:-2], layers[-2], layers[-1])
    if net.input_dim != input_dim or net.num_actions != num_actions or net.value_head.fan_out != 1:
        raise DimensionError("checkpoint header disagrees with layer shapes")
    return net


def save_checkpoint(net: PolicyValueNet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(net))
    return path


def load_checkpoint(path) -> PolicyValueNet:
    return from_bytes(Path(path).read_bytes())
