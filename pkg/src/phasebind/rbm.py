"""Restricted Boltzmann machine layers with local receptive fields.

Layers are stacked into a DBM-shaped model but trained greedily, one layer at
a time, with CD-k or persistent CD.  Unit vectors are flattened from
``(height, width, channels)`` arrays in row-major order.  Every hidden unit at
grid site ``(i, j)`` connects to the ``rf x rf`` input window whose top-left
corner is ``(i, j)``, across all input channels; the binary mask ``M`` keeps
all other weights at exactly zero.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, logsumexp

log = logging.getLogger(__name__)

INIT_WEIGHT_RANGE = 0.05
INIT_BIAS = -4.0


@dataclass(frozen=True)
class LayerGeometry:
    in_height: int
    in_width: int
    in_channels: int
    rf: int
    hid_channels: int

    def __post_init__(self):
        if self.rf < 1 or self.rf > min(self.in_height, self.in_width):
            raise ValueError(f"receptive field {self.rf} does not fit a "
                             f"{self.in_height}x{self.in_width} input")
        if min(self.in_channels, self.hid_channels) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def hid_height(self) -> int:
        return self.in_height - self.rf + 1

    @property
    def hid_width(self) -> int:
        return self.in_width - self.rf + 1

    @property
    def n_visible(self) -> int:
        return self.in_height * self.in_width * self.in_channels

    @property
    def n_hidden(self) -> int:
        return self.hid_height * self.hid_width * self.hid_channels

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return (self.in_height, self.in_width, self.in_channels)

    @property
    def hid_shape(self) -> tuple[int, int, int]:
        return (self.hid_height, self.hid_width, self.hid_channels)

    @property
    def fully_connected(self) -> bool:
        return self.hid_height == 1 and self.hid_width == 1

    def next(self, rf: int, hid_channels: int) -> "LayerGeometry":
        """Geometry of the layer stacked on top of this one."""
        return LayerGeometry(self.hid_height, self.hid_width, self.hid_channels, rf, hid_channels)

    def mask(self) -> np.ndarray:
        """Binary ``(n_hidden, n_visible)`` receptive-field mask."""
        m = np.zeros(self.hid_shape + self.in_shape, dtype=bool)
        for i in range(self.hid_height):
            for j in range(self.hid_width):
                m[i, j, :, i:i + self.rf, j:j + self.rf, :] = True
        return m.reshape(self.n_hidden, self.n_visible)


def dense_geometry(n_visible: int, n_hidden: int) -> LayerGeometry:
    """Fully connected layer treating the input as a 1x1 grid of channels."""
    return LayerGeometry(1, 1, n_visible, 1, n_hidden)


def stack_geometries(in_shape: tuple[int, int, int], layers: Sequence[tuple[int, int]]) -> list[LayerGeometry]:
    """Chain ``(rf, hid_channels)`` specs upward from an input shape."""
    geoms = [LayerGeometry(*in_shape, *layers[0])]
    for rf, ch in layers[1:]:
        geoms.append(geoms[-1].next(rf, ch))
    return geoms


# Architectures for the four experiment datasets: input shape, (rf, channels)
ARCHITECTURES = {
    "bars": ((20, 20, 1), [(7, 3)]),
    "corners": ((28, 28, 1), [(7, 2), (10, 4), (13, 676)]),
    "three_shapes": ((20, 20, 1), [(7, 3), (7, 10), (8, 676)]),
    "mnist_plus_shape": ((28, 28, 1), [(7, 2), (10, 4), (13, 676)]),
}


def architecture(name: str) -> list[LayerGeometry]:
    in_shape, layers = ARCHITECTURES[name]
    return stack_geometries(in_shape, layers)


@dataclass
class RbmLayer:
    """Weights ``W`` (hidden x visible), mask, and both bias vectors."""

    W: np.ndarray
    b_v: np.ndarray
    b_h: np.ndarray
    mask: np.ndarray
    geometry: LayerGeometry | None = None

    def __post_init__(self):
        nh, nv = self.W.shape
        if self.b_v.shape != (nv,) or self.b_h.shape != (nh,) or self.mask.shape != (nh, nv):
            raise ValueError("inconsistent layer shapes")
        self.mask = self.mask.astype(bool)

    @property
    def n_visible(self) -> int:
        return self.W.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "RbmLayer":
        return replace(self, W=self.W.copy(), b_v=self.b_v.copy(), b_h=self.b_h.copy(),
                       mask=self.mask.copy())

    @classmethod
    def from_params(cls, W, b_v, b_h, mask=None) -> "RbmLayer":
        W = np.asarray(W, dtype=np.float64)
        if W.ndim == 1:
            W = W[None, :]
        mask = np.ones(W.shape, bool) if mask is None else np.asarray(mask, bool)
        return cls(W * mask, np.asarray(b_v, np.float64).reshape(-1),
                   np.asarray(b_h, np.float64).reshape(-1), mask)


@dataclass
class DbmModel:
    layers: list[RbmLayer]

    def __post_init__(self):
        for lower, upper in zip(self.layers, self.layers[1:]):
            if lower.n_hidden != upper.n_visible:
                raise ValueError(f"layer sizes do not chain: {lower.n_hidden} -> {upper.n_visible}")

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].n_visible] + [l.n_hidden for l in self.layers]

    @property
    def geometries(self) -> list[LayerGeometry | None]:
        return [l.geometry for l in self.layers]


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "cd"
    k: int = 1
    lr: float = 0.1
    momentum: float = 0.5
    weight_decay: float = 1e-4
    epochs: int = 60
    batch_size: int = 100
    lr_decay: float = 1.0
    n_chains: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("cd", "pcd"):
            raise ValueError(f"algorithm must be 'cd' or 'pcd', got {self.algorithm!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.k < 1:
            raise ValueError("batch_size and k must be >= 1")
        if self.lr_decay < 1:
            raise ValueError("lr_decay must be >= 1")


# Layer-wise training settings for the experiment datasets
TRAIN_PRESETS = {
    "bars": TrainConfig(),
    "corners": TrainConfig(),
    "three_shapes": TrainConfig(),
    "mnist_plus_shape": TrainConfig(algorithm="pcd", k=5, lr=0.005, lr_decay=1 + 1.5e-5),
}


def init_layer(geom: LayerGeometry, seed: int | np.random.Generator = 0,
               dtype=np.float32) -> RbmLayer:
    """Uniform [-0.05, 0.05] weights inside receptive fields, biases -4."""
    rng = np.random.default_rng(seed)
    mask = geom.mask()
    W = rng.uniform(-INIT_WEIGHT_RANGE, INIT_WEIGHT_RANGE, size=mask.shape).astype(dtype)
    W *= mask
    return RbmLayer(W, np.full(geom.n_visible, INIT_BIAS, dtype),
                    np.full(geom.n_hidden, INIT_BIAS, dtype), mask, geom)


def _check_width(x: np.ndarray, n: int, what: str) -> None:
    if x.shape[-1] != n:
        raise ValueError(f"{what} vector has {x.shape[-1]} units, layer expects {n}")


def hidden_probs(layer: RbmLayer, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    _check_width(v, layer.n_visible, "visible")
    return expit(v @ layer.W.T + layer.b_h)


def visible_probs(layer: RbmLayer, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h)
    _check_width(h, layer.n_hidden, "hidden")
    return expit(h @ layer.W + layer.b_v)


def bernoulli(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(p.shape) < p).astype(p.dtype)


@dataclass
class GibbsResult:
    v: np.ndarray
    h: np.ndarray
    v_prob: np.ndarray
    h_prob: np.ndarray


def gibbs_chain(layer: RbmLayer, v0: np.ndarray, k: int, rng: np.random.Generator) -> GibbsResult:
    """Run ``k`` alternating h|v, v|h sweeps starting from visible ``v0``.

    ``v0`` may hold one chain or a batch of chains.  The returned ``h`` and
    ``h_prob`` belong to the final visible sample.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    v = np.asarray(v0)
    for _ in range(k):
        h = bernoulli(hidden_probs(layer, v), rng)
        v_prob = visible_probs(layer, h)
        v = bernoulli(v_prob, rng)
    h_prob = hidden_probs(layer, v)
    return GibbsResult(v, bernoulli(h_prob, rng), v_prob, h_prob)


@dataclass
class Gradient:
    W: np.ndarray
    b_v: np.ndarray
    b_h: np.ndarray
    recon_err: float = 0.0


def _statistics(layer, v_pos, v_neg, h_neg_prob) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ph_pos = hidden_probs(layer, v_pos)
    dW = ph_pos.T @ v_pos / len(v_pos) - h_neg_prob.T @ v_neg / len(v_neg)
    dW *= layer.mask
    db_v = v_pos.mean(axis=0) - v_neg.mean(axis=0)
    db_h = ph_pos.mean(axis=0) - h_neg_prob.mean(axis=0)
    return dW, db_v, db_h


def cd_gradient(layer: RbmLayer, batch: np.ndarray, k: int, rng: np.random.Generator) -> Gradient:
    """CD-k estimate of the log-likelihood gradient on a minibatch.

    Negative statistics use the sampled visibles after ``k`` steps together
    with the hidden probabilities they induce.
    """
    batch = np.atleast_2d(batch)
    res = gibbs_chain(layer, batch, k, rng)
    dW, db_v, db_h = _statistics(layer, batch, res.v, res.h_prob)
    err = float(np.mean((batch - res.v_prob) ** 2))
    return Gradient(dW, db_v, db_h, err)


def pcd_gradient(layer: RbmLayer, batch: np.ndarray, chains: np.ndarray, k: int,
                 rng: np.random.Generator) -> tuple[Gradient, np.ndarray]:
    """Persistent CD: the negative phase continues the fantasy ``chains``.

    Returns the gradient and the advanced chain states.
    """
    batch = np.atleast_2d(batch)
    if len(chains) < 1:
        raise ValueError("need at least one persistent chain")
    res = gibbs_chain(layer, chains, k, rng)
    dW, db_v, db_h = _statistics(layer, batch, res.v, res.h_prob)
    recon = visible_probs(layer, bernoulli(hidden_probs(layer, batch), rng))
    err = float(np.mean((batch - recon) ** 2))
    return Gradient(dW, db_v, db_h, err), res.v


@dataclass
class OptimizerState:
    lr: float
    vW: np.ndarray
    vb_v: np.ndarray
    vb_h: np.ndarray
    updates: int = 0

    @classmethod
    def fresh(cls, layer: RbmLayer, lr: float) -> "OptimizerState":
        return cls(lr, np.zeros_like(layer.W), np.zeros_like(layer.b_v), np.zeros_like(layer.b_h))


def apply_update(layer: RbmLayer, grad: Gradient, state: OptimizerState,
                 config: TrainConfig) -> tuple[RbmLayer, OptimizerState]:
    """Momentum SGD ascent step with L2 decay on the weights.

    The layer and state are updated in place and also returned.
    """
    m, lr = config.momentum, state.lr
    state.vW *= m
    state.vW += lr * (grad.W - config.weight_decay * layer.W)
    state.vb_v *= m
    state.vb_v += lr * grad.b_v
    state.vb_h *= m
    state.vb_h += lr * grad.b_h
    layer.W += state.vW
    layer.W *= layer.mask
    layer.b_v += state.vb_v
    layer.b_h += state.vb_h
    state.updates += 1
    if config.lr_decay != 1.0:
        state.lr = lr / config.lr_decay
    return layer, state


EpochCallback = Callable[[int, float, float], None]


def format_epoch_line(epoch: int, recon_err: float, lr: float) -> str:
    return f"epoch={epoch} recon_err={recon_err:.6g} lr={lr:.6g}"


def train_layer(data: np.ndarray, geom: LayerGeometry | None, config: TrainConfig,
                layer: RbmLayer | None = None, on_epoch: EpochCallback | None = None) -> RbmLayer:
    """Train one RBM layer on ``data`` (rows are visible vectors in [0, 1]).

    Either a geometry (fresh initialisation) or an initial ``layer`` is
    required.  Minibatches are drawn from a fresh permutation every epoch;
    a trailing partial batch is used as is.
    """
    data = np.asarray(data)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("training data must be a non-empty 2-D array")
    rng = np.random.default_rng(config.seed)
    if layer is None:
        if geom is None:
            raise ValueError("need a geometry or an initial layer")
        layer = init_layer(geom, rng)
    else:
        layer = layer.copy()
    if data.shape[1] != layer.n_visible:
        raise ValueError(f"data has {data.shape[1]} columns, layer expects {layer.n_visible}")
    data = data.astype(layer.W.dtype, copy=False)
    state = OptimizerState.fresh(layer, config.lr)
    chains = None
    if config.algorithm == "pcd":
        n_chains = config.n_chains or config.batch_size
        chains = data[rng.choice(len(data), size=n_chains, replace=len(data) < n_chains)].copy()
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data))
        errs = []
        for start in range(0, len(data), bs):
            batch = data[order[start:start + bs]]
            if chains is None:
                grad = cd_gradient(layer, batch, config.k, rng)
            else:
                grad, chains = pcd_gradient(layer, batch, chains, config.k, rng)
            apply_update(layer, grad, state, config)
            errs.append(grad.recon_err * len(batch))
        err = float(np.sum(errs) / len(data))
        log.debug(format_epoch_line(epoch, err, state.lr))
        if on_epoch is not None:
            on_epoch(epoch, err, state.lr)
    return layer


def propagate_up(layer: RbmLayer, data: np.ndarray) -> np.ndarray:
    """Mean hidden activations, used as training data for the next layer."""
    return hidden_probs(layer, data)


def train_stack(data: np.ndarray, geometries: Sequence[LayerGeometry],
                configs: TrainConfig | Sequence[TrainConfig],
                on_epoch: Callable[[int, int, float, float], None] | None = None) -> DbmModel:
    """Greedy layer-wise training, no joint fine-tuning.

    ``on_epoch`` receives ``(layer_index, epoch, recon_err, lr)``.
    """
    for lower, upper in zip(geometries, geometries[1:]):
        if lower.n_hidden != upper.n_visible:
            raise ValueError("geometries do not chain")
    if isinstance(configs, TrainConfig):
        configs = [replace(configs, seed=configs.seed + i) for i in range(len(geometries))]
    if len(configs) != len(geometries):
        raise ValueError("need one training config per layer")
    layers = []
    x = np.asarray(data)
    for i, (geom, cfg) in enumerate(zip(geometries, configs)):
        cb = None if on_epoch is None else (lambda e, r, lr, i=i: on_epoch(i, e, r, lr))
        layer = train_layer(x, geom, cfg, on_epoch=cb)
        layers.append(layer)
        if i + 1 < len(geometries):
            x = propagate_up(layer, x)
    return DbmModel(layers)


def sample_model(model: DbmModel, steps: int, rng: np.random.Generator | int,
                 interval: int = 1, burn_in: int = 0) -> np.ndarray:
    """Generate images by Gibbs sampling the top RBM and projecting down.

    The top layer's visible units are sampled by alternating Gibbs steps; lower
    layers are traversed with mean visible probabilities.  Returns the
    bottom-layer mean images recorded every ``interval`` steps after
    ``burn_in``, shape ``(frames, n_visible)``.
    """
    rng = np.random.default_rng(rng)
    top = model.layers[-1]
    h = bernoulli(expit(top.b_h).astype(np.float64), rng)
    frames = []
    for step in range(1, steps + 1):
        v_top = bernoulli(visible_probs(top, h), rng)
        h = bernoulli(hidden_probs(top, v_top), rng)
        if step > burn_in and (step - burn_in) % interval == 0:
            x = visible_probs(top, h)
            for layer in reversed(model.layers[:-1]):
                x = visible_probs(layer, x)
            frames.append(x)
    if not frames:
        return np.zeros((0, model.layers[0].n_visible))
    return np.stack(frames)


# -- exact oracle ------------------------------------------------------------

MAX_EXACT_UNITS = 20


def all_states(n: int) -> np.ndarray:
    """All ``2**n`` binary vectors, first unit most significant."""
    return np.array(list(itertools.product((0.0, 1.0), repeat=n))).reshape(2 ** n, n)


def log_partition(layer: RbmLayer) -> float:
    """log Z by explicit summation over every joint (v, h) configuration."""
    nv, nh = layer.n_visible, layer.n_hidden
    if nv + nh > MAX_EXACT_UNITS:
        raise ValueError(f"exact enumeration limited to {MAX_EXACT_UNITS} units, got {nv + nh}")
    W = layer.W.astype(np.float64)
    V, H = all_states(nv), all_states(nh)
    neg_energy = (V @ layer.b_v)[:, None] + (H @ layer.b_h)[None, :] + V @ W.T @ H.T
    return float(logsumexp(neg_energy))


def exact_loglik(layer: RbmLayer, data: np.ndarray) -> float:
    """Mean ``log p(v)`` over ``data`` for a small RBM, by full enumeration."""
    nv, nh = layer.n_visible, layer.n_hidden
    if nv + nh > MAX_EXACT_UNITS:
        raise ValueError(f"exact enumeration limited to {MAX_EXACT_UNITS} units, got {nv + nh}")
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    _check_width(data, nv, "visible")
    H = all_states(nh)
    W = layer.W.astype(np.float64)
    neg_energy = (data @ layer.b_v)[:, None] + (H @ layer.b_h)[None, :] + data @ W.T @ H.T
    return float(np.mean(logsumexp(neg_energy, axis=1)) - log_partition(layer))


def boltzmann_distribution(layer: RbmLayer) -> np.ndarray:
    """Exact joint probabilities, shape ``(2**nv, 2**nh)`` in :func:`all_states` order."""
    W = layer.W.astype(np.float64)
    V, H = all_states(layer.n_visible), all_states(layer.n_hidden)
    neg_energy = (V @ layer.b_v)[:, None] + (H @ layer.b_h)[None, :] + V @ W.T @ H.T
    return np.exp(neg_energy - logsumexp(neg_energy))


def reconstruction_error(layer: RbmLayer, data: np.ndarray) -> float:
    """Mean squared error of the deterministic v -> p(h) -> p(v) round trip."""
    return float(np.mean((data - visible_probs(layer, hidden_probs(layer, data))) ** 2))


def lr_after(config: TrainConfig, updates: int) -> float:
    return config.lr / config.lr_decay ** updates if config.lr_decay != 1.0 else config.lr
