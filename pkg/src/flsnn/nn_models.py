"""Spiking (LIF) and dense multilayer perceptrons over a flat parameter vector.

Both model kinds are bias-free stacks of weight matrices ``W_l`` of shape
``(n_in, n_out)`` stored back to back in a single flat array, so a client
update, a Top-k selection and an aggregated mean are all plain 1-D vectors.

The spiking network runs a leaky integrate-and-fire recurrence per layer::

    U^t = I^t + beta * U^{t-1} - S^{t-1} * u_thr
    S^t = 1[U^t > u_thr]

where ``I^t`` is the weighted input at the same timestep (frame ``t`` for
the first layer, spikes ``S^t`` of the layer below otherwise). Training uses
backpropagation through time with the Heaviside derivative replaced by a
fast-sigmoid surrogate, including the path through the reset term.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Raised when arrays do not agree with a topology or parameter layout."""


@dataclass(frozen=True)
class LifParams:
    beta: float = 0.99
    u_thr: float = 1.0
    timesteps: int = 25
    surrogate_slope: float = 25.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.u_thr <= 0:
            raise ValueError(f"u_thr must be positive, got {self.u_thr}")
        if self.timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {self.timesteps}")
        if self.surrogate_slope <= 0:
            raise ValueError("surrogate_slope must be positive")


@dataclass(frozen=True)
class MlpTopology:
    layer_sizes: Tuple[int, ...]
    kind: Literal["snn", "ann"] = "snn"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("topology needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.kind not in ("snn", "ann"):
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def layout(self) -> Tuple[Tuple[int, int, int, int], ...]:
        """(layer index, offset, rows, cols) for every weight matrix."""
        out = []
        offset = 0
        for i, (r, c) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            out.append((i, offset, r, c))
            offset += r * c
        return tuple(out)

    @property
    def num_params(self) -> int:
        return sum(r * c for _, _, r, c in self.layout())


@dataclass
class ParameterVector:
    """Flat weights plus the layout that maps layers to index ranges."""

    values: np.ndarray
    layout: Tuple[Tuple[int, int, int, int], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 1:
            raise ShapeError("parameter values must be a flat array")
        pos = 0
        for _, offset, rows, cols in self.layout:
            if offset != pos:
                raise ShapeError("layout ranges must tile the values array in order")
            pos += rows * cols
        if pos != self.values.size:
            raise ShapeError(f"layout covers {pos} values, array has {self.values.size}")

    def weights(self) -> List[np.ndarray]:
        """Per-layer (rows, cols) views into ``values``."""
        return [self.values[o:o + r * c].reshape(r, c) for _, o, r, c in self.layout]

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def __len__(self):
        return self.values.size


def init_params(topo: MlpTopology, rng: np.random.Generator,
                dtype=np.float32) -> ParameterVector:
    """Glorot-uniform weights, bound sqrt(6 / (fan_in + fan_out))."""
    values = np.empty(topo.num_params, dtype=dtype)
    for _, o, r, c in topo.layout():
        bound = np.sqrt(6.0 / (r + c))
        values[o:o + r * c] = rng.uniform(-bound, bound, size=r * c)
    return ParameterVector(values, topo.layout())


def _check_params(params: ParameterVector, topo: MlpTopology):
    if tuple(params.layout) != topo.layout():
        raise ShapeError("parameter layout does not match topology")


# ---------------------------------------------------------------------------
# LIF neuron
# ---------------------------------------------------------------------------

def lif_step(u_prev, weighted_input, s_prev, p: LifParams):
    """One LIF update with reset by subtraction. Works on scalars or arrays."""
    u = weighted_input + p.beta * u_prev - s_prev * p.u_thr
    s = (u > p.u_thr).astype(np.asarray(u).dtype) if isinstance(u, np.ndarray) else int(u > p.u_thr)
    return u, s


def surrogate_derivative(u, p: LifParams):
    """Fast-sigmoid stand-in for dS/dU, peak 1 at the threshold."""
    return 1.0 / (1.0 + p.surrogate_slope * np.abs(u - p.u_thr)) ** 2


@dataclass
class ForwardTrace:
    """Everything BPTT needs from a forward pass.

    ``potentials[l]`` and ``spikes[l]`` have shape (T, B, n_l) for the l-th
    weight layer's neurons; ``frames`` is the (T, B, d) input.
    """

    frames: np.ndarray
    potentials: List[np.ndarray] = field(default_factory=list)
    spikes: List[np.ndarray] = field(default_factory=list)

    @property
    def timesteps(self) -> int:
        return self.frames.shape[0]


def _is_constant_over_time(frames: np.ndarray) -> bool:
    return frames.shape[0] == 1 or frames.strides[0] == 0


def snn_forward(params: ParameterVector, frames: np.ndarray, topo: MlpTopology,
                p: LifParams) -> Tuple[np.ndarray, ForwardTrace]:
    """Run the spiking MLP over ``frames`` of shape (T, B, d).

    Returns per-class output spike counts (B, num_classes) and the trace.
    Membrane potentials start at zero.
    """
    if topo.kind != "snn":
        raise ShapeError("snn_forward needs a spiking topology")
    _check_params(params, topo)
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[2] != topo.layer_sizes[0]:
        raise ShapeError(f"expected frames (T, B, {topo.layer_sizes[0]}), got {frames.shape}")
    T, B, _ = frames.shape
    dtype = params.values.dtype
    trace = ForwardTrace(frames=frames)

    if _is_constant_over_time(frames):
        current = np.broadcast_to(frames[0].astype(dtype, copy=False) @ params.weights()[0],
                                  (T, B, topo.layer_sizes[1]))
    else:
        current = frames.astype(dtype, copy=False) @ params.weights()[0]

    for li, W in enumerate(params.weights()):
        if li > 0:
            current = trace.spikes[-1] @ W
        n = W.shape[1]
        U = np.empty((T, B, n), dtype=dtype)
        S = np.empty((T, B, n), dtype=dtype)
        u = np.zeros((B, n), dtype=dtype)
        s = np.zeros((B, n), dtype=dtype)
        for t in range(T):
            u = current[t] + p.beta * u - s * p.u_thr
            s = (u > p.u_thr).astype(dtype)
            U[t] = u
            S[t] = s
        trace.potentials.append(U)
        trace.spikes.append(S)
    counts = trace.spikes[-1].sum(axis=0)
    return counts, trace


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss_rate_ce(spike_counts, T: int, label) -> float:
    """Softmax cross-entropy on output firing rates ``counts / T``.

    Accepts a single count vector with an integer label, or a (B, C) batch
    with a label array (mean over the batch).
    """
    counts = np.asarray(spike_counts, dtype=np.float64)
    labels = np.asarray(label)
    if counts.ndim == 1:
        counts, labels = counts[None], labels.reshape(1)
    return _cross_entropy(counts / T, labels)


def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def snn_backward_bptt(trace: ForwardTrace, params: ParameterVector, label,
                      p: LifParams) -> np.ndarray:
    """Gradient of the batch-mean rate-coded CE loss w.r.t. the flat weights."""
    weights = params.weights()
    if len(trace.spikes) != len(weights):
        raise ShapeError("trace and parameters disagree on the number of layers")
    for W, S in zip(weights, trace.spikes):
        if S.shape[-1] != W.shape[1]:
            raise ShapeError("trace and parameters disagree on layer widths")
    labels = np.atleast_1d(np.asarray(label))
    dtype = params.values.dtype
    T = trace.timesteps
    out_spikes = trace.spikes[-1]
    B, C = out_spikes.shape[1:]
    if len(labels) != B:
        raise ShapeError("one label per sample expected")

    rates = out_spikes.sum(axis=0) / T
    # dL/dS_out^t is the same for every t: (softmax - onehot) / (T * B)
    d_spike_out = ((_softmax(rates.astype(np.float64)) - _one_hot(labels, C, np.float64))
                   / (T * B)).astype(dtype)

    grad = np.empty_like(params.values)
    d_spike_from_above = np.broadcast_to(d_spike_out, (T, B, C))
    for li in range(len(weights) - 1, -1, -1):
        U = trace.potentials[li]
        sg = surrogate_derivative(U, p).astype(dtype, copy=False)
        n = U.shape[-1]
        d_current = np.empty((T, B, n), dtype=dtype)
        du_next = np.zeros((B, n), dtype=dtype)
        for t in range(T - 1, -1, -1):
            # S^t feeds the layer above at t and the reset of U^{t+1}
            ds = d_spike_from_above[t] - p.u_thr * du_next
            du = ds * sg[t] + p.beta * du_next
            d_current[t] = du
            du_next = du
        layer_in = trace.frames if li == 0 else trace.spikes[li - 1]
        _, o, r, c = params.layout[li]
        if li == 0 and _is_constant_over_time(layer_in):
            gW = layer_in[0].astype(dtype, copy=False).T @ d_current.sum(axis=0)
        else:
            gW = layer_in.reshape(T * B, r).astype(dtype, copy=False).T @ d_current.reshape(T * B, c)
        grad[o:o + r * c] = gW.ravel()
        if li > 0:
            d_spike_from_above = d_current @ weights[li].T
    return grad


# ---------------------------------------------------------------------------
# Dense network
# ---------------------------------------------------------------------------

def ann_forward(params: ParameterVector, x: np.ndarray,
                topo: MlpTopology) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Linear+ReLU hidden layers, linear output. Returns (logits, activations).

    ``activations[0]`` is the input, ``activations[l]`` the post-ReLU output of
    hidden layer l; the logits are not included.
    """
    if topo.kind != "ann":
        raise ShapeError("ann_forward needs a dense topology")
    _check_params(params, topo)
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != topo.layer_sizes[0]:
        raise ShapeError(f"expected input (B, {topo.layer_sizes[0]}), got {x.shape}")
    h = x.astype(params.values.dtype, copy=False)
    acts = [h]
    weights = params.weights()
    for W in weights[:-1]:
        h = np.maximum(h @ W, 0)
        acts.append(h)
    return h @ weights[-1], acts


def ann_loss(logits: np.ndarray, label) -> float:
    return _cross_entropy(np.asarray(logits, dtype=np.float64), np.atleast_1d(label))


def ann_backward(activations: Sequence[np.ndarray], logits: np.ndarray,
                 params: ParameterVector, label) -> np.ndarray:
    """Gradient of batch-mean softmax cross-entropy w.r.t. the flat weights."""
    weights = params.weights()
    if len(activations) != len(weights):
        raise ShapeError("activation list does not match the number of layers")
    labels = np.atleast_1d(np.asarray(label))
    dtype = params.values.dtype
    B, C = logits.shape
    delta = ((_softmax(logits.astype(np.float64)) - _one_hot(labels, C, np.float64)) / B).astype(dtype)
    grad = np.empty_like(params.values)
    for li in range(len(weights) - 1, -1, -1):
        _, o, r, c = params.layout[li]
        grad[o:o + r * c] = (activations[li].T @ delta).ravel()
        if li > 0:
            delta = (delta @ weights[li].T) * (activations[li] > 0)
    return grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    buffer: Optional[np.ndarray] = None

    def ensure_buffer(self, size: int, dtype=np.float32) -> np.ndarray:
        if self.buffer is None:
            self.buffer = np.zeros(size, dtype=dtype)
        elif self.buffer.size != size:
            raise ShapeError("momentum buffer length differs from parameter length")
        return self.buffer


def sgd_step(params: ParameterVector, grad: np.ndarray, opt: OptimizerState) -> ParameterVector:
    """Heavy-ball SGD with L2 decay folded into the momentum buffer.

    ``m <- mu * m + grad + decay * w``; ``w <- w - lr * m``. The buffer is
    updated in ``opt``; a new ParameterVector is returned.
    """
    grad = np.asarray(grad)
    if grad.shape != params.values.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {params.values.shape}")
    dtype = params.values.dtype
    m = opt.ensure_buffer(params.values.size, dtype)
    m *= dtype.type(opt.momentum)
    m += grad
    if opt.weight_decay:
        m += dtype.type(opt.weight_decay) * params.values
    return ParameterVector(params.values - dtype.type(opt.lr) * m, params.layout)


# ---------------------------------------------------------------------------
# Uniform entry points used by the FL engine
# ---------------------------------------------------------------------------

def loss_and_grad(params: ParameterVector, topo: MlpTopology, inputs: np.ndarray,
                  labels: np.ndarray, lif: Optional[LifParams] = None) -> Tuple[float, np.ndarray]:
    """Batch loss and gradient. ``inputs`` are frames (T, B, d) for SNNs, (B, d) for ANNs."""
    if topo.kind == "snn":
        counts, trace = snn_forward(params, inputs, topo, lif)
        return loss_rate_ce(counts, lif.timesteps, labels), snn_backward_bptt(trace, params, labels, lif)
    logits, acts = ann_forward(params, inputs, topo)
    return ann_loss(logits, labels), ann_backward(acts, logits, params, labels)


def predict_scores(params: ParameterVector, topo: MlpTopology, inputs: np.ndarray,
                   lif: Optional[LifParams] = None) -> np.ndarray:
    """Spike counts for SNNs, logits for ANNs; argmax gives the prediction."""
    if topo.kind == "snn":
        return snn_forward(params, inputs, topo, lif)[0]
    return ann_forward(params, inputs, topo)[0]
