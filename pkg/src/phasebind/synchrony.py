"""Phase inference in a converted (complex-valued) Boltzmann machine stack.

A trained real-valued :class:`~phasebind.rbm.DbmModel` is run as a recurrent
network of complex units.  Visible magnitudes are clamped to the input image
and only their phases evolve; hidden layers update rate and phase from the
layers directly below and above.  All state arrays carry the unit axis last,
so a batch of images can be run at once by stacking them along a leading axis.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .complexunit import (
    DEFAULT_MIX,
    ActivationMode,
    ComplexDrive,
    circular_distance,
    logistic,
    output_phases,
    preactivation_arrays,
    sample_rates,
    wrap_phases,
)
from .rbm import DbmModel


@dataclass
class ComplexLayerState:
    rates: np.ndarray
    phases: np.ndarray
    clamped: bool = False

    def __post_init__(self):
        if self.rates.shape != self.phases.shape:
            raise ValueError("rates and phases must have equal shape")

    @property
    def z(self) -> np.ndarray:
        return self.rates * np.exp(1j * self.phases)

    def copy(self) -> "ComplexLayerState":
        return ComplexLayerState(self.rates.copy(), self.phases.copy(), self.clamped)


@dataclass
class NetworkState:
    """Per-layer complex states, visible layer first."""

    layers: list[ComplexLayerState]
    iteration: int = 0

    def copy(self) -> "NetworkState":
        return NetworkState([l.copy() for l in self.layers], self.iteration)

    def rotated(self, delta: float) -> "NetworkState":
        """Every phase shifted by ``delta`` (wrapped)."""
        s = self.copy()
        for l in s.layers:
            l.phases = wrap_phases(l.phases + delta)
        return s

    def select(self, index) -> "NetworkState":
        """One image out of a batched state."""
        return NetworkState([ComplexLayerState(l.rates[index], l.phases[index], l.clamped)
                             for l in self.layers], self.iteration)

    @property
    def visible(self) -> ComplexLayerState:
        return self.layers[0]


@dataclass(frozen=True)
class InferenceConfig:
    iterations: int = 100
    mode: ActivationMode = ActivationMode.DETERMINISTIC
    seed: int = 0
    record_trajectory: bool = False
    record_stride: int = 1
    mix: float = DEFAULT_MIX

    def __post_init__(self):
        object.__setattr__(self, "mode", ActivationMode.parse(self.mode))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")


class SynchronyNetwork:
    """A trained stack viewed as a complex-valued recurrent network.

    Weights are held in float64 so that phases are computed at full precision
    regardless of the storage type of the trained model.
    """

    def __init__(self, model: DbmModel, mix: float = DEFAULT_MIX):
        self.model = model
        self.mix = mix
        self.weights = [l.W.astype(np.float64) for l in model.layers]
        self.hidden_bias = [l.b_h.astype(np.float64) for l in model.layers]
        self.visible_bias = model.layers[0].b_v.astype(np.float64)

    @property
    def sizes(self) -> list[int]:
        return self.model.sizes

    @property
    def n_layers(self) -> int:
        """Number of state layers including the visible one."""
        return len(self.weights) + 1

    def drive(self, state: NetworkState, l: int) -> tuple[np.ndarray, np.ndarray]:
        """Synchrony and classic input terms to every unit of state layer ``l``.

        Hidden layers receive bottom-up input through the rows of the weight
        matrix below and top-down input through the columns of the matrix
        above; the visible layer only receives top-down input.
        """
        if not 0 <= l < self.n_layers:
            raise IndexError(f"layer index {l} out of range")
        sync = 0.0
        classic = 0.0
        if l > 0:
            below = state.layers[l - 1]
            W = self.weights[l - 1]
            sync = below.z @ W.T
            classic = below.rates @ W.T
        if l + 1 < self.n_layers:
            above = state.layers[l + 1]
            W = self.weights[l]
            sync = sync + above.z @ W
            classic = classic + above.rates @ W
        return np.asarray(sync, dtype=np.complex128), np.asarray(classic, dtype=np.float64)

    def bias(self, l: int) -> np.ndarray:
        return self.visible_bias if l == 0 else self.hidden_bias[l - 1]


def as_network(model: DbmModel | SynchronyNetwork, mix: float = DEFAULT_MIX) -> SynchronyNetwork:
    return model if isinstance(model, SynchronyNetwork) else SynchronyNetwork(model, mix)


def init_state(model, image: np.ndarray, rng: np.random.Generator | int,
               mode: ActivationMode | str = ActivationMode.DETERMINISTIC) -> NetworkState:
    """Clamp the visible rates to ``image`` and draw all phases uniformly.

    ``image`` may be one image (any shape with ``n_visible`` pixels) or a
    batch ``(n, ...)``.  Hidden rates start at ``logistic(b_h)``, or at a
    Bernoulli sample of it in stochastic mode.
    """
    net = as_network(model)
    rng = np.random.default_rng(rng)
    mode = ActivationMode.parse(mode)
    img = np.asarray(image, dtype=np.float64)
    nv = net.sizes[0]
    if img.size % nv:
        raise ValueError(f"image has {img.size} pixels, model expects {nv}")
    batch = () if img.size == nv else (img.size // nv,)
    if batch and img.shape[0] != batch[0]:
        raise ValueError(f"image has {img.size} pixels, model expects {nv}")
    vis = img.reshape(batch + (nv,))
    layers = [ComplexLayerState(vis.copy(), rng.uniform(-np.pi, np.pi, vis.shape), clamped=True)]
    for b in net.hidden_bias:
        p = np.broadcast_to(logistic(b), batch + b.shape).copy()
        rates = sample_rates(p, mode, rng)
        layers.append(ComplexLayerState(rates, rng.uniform(-np.pi, np.pi, p.shape)))
    return NetworkState(layers)


def layer_drive(model, state: NetworkState, l: int, unit: int) -> ComplexDrive:
    """Drive to a single unit; see :meth:`SynchronyNetwork.drive`."""
    sync, classic = as_network(model).drive(state, l)
    return ComplexDrive.from_terms(complex(sync[..., unit]), float(classic[..., unit]))


def sweep(model, state: NetworkState, config: InferenceConfig,
          rng: np.random.Generator | None = None) -> NetworkState:
    """One inference iteration, in place.

    Hidden layers are updated bottom to top, each seeing the already updated
    layer below, then the visible phases are updated from the first hidden
    layer.  Clamped layers keep their rates.
    """
    net = as_network(model, config.mix)
    for l in list(range(1, net.n_layers)) + [0]:
        layer = state.layers[l]
        sync, classic = net.drive(state, l)
        if not layer.clamped:
            p = logistic(preactivation_arrays(sync, classic, net.bias(l), net.mix))
            layer.rates = sample_rates(p, config.mode, rng)
        layer.phases = output_phases(sync, layer.phases)
    state.iteration += 1
    return state


@dataclass
class Trajectory:
    steps: list[int] = field(default_factory=list)
    rates: list[list[np.ndarray]] = field(default_factory=list)
    phases: list[list[np.ndarray]] = field(default_factory=list)

    def record(self, state: NetworkState) -> None:
        self.steps.append(state.iteration)
        self.rates.append([l.rates.copy() for l in state.layers])
        self.phases.append([l.phases.copy() for l in state.layers])

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class RunResult:
    state: NetworkState
    trajectory: Trajectory | None = None
    drift: list[float] = field(default_factory=list)


def phase_drift(before: np.ndarray, after: np.ndarray, rates: np.ndarray) -> float:
    """Rate-weighted mean absolute phase change."""
    w = np.asarray(rates, dtype=np.float64)
    total = w.sum()
    if total == 0:
        return 0.0
    return float(np.sum(w * circular_distance(before, after)) / total)


def run(model, image: np.ndarray, config: InferenceConfig = InferenceConfig(),
        state: NetworkState | None = None) -> RunResult:
    """Initialise from ``image`` and run ``config.iterations`` sweeps.

    The returned drift list holds the visible-layer phase drift of every
    sweep; it is reported, never used as a stopping rule.
    """
    net = as_network(model, config.mix)
    rng = np.random.default_rng(config.seed)
    if state is None:
        state = init_state(net, image, rng, config.mode)
    traj = Trajectory() if config.record_trajectory else None
    if traj is not None:
        traj.record(state)
    drift = []
    for _ in range(config.iterations):
        before = state.visible.phases.copy()
        sweep(net, state, config, rng)
        drift.append(phase_drift(before, state.visible.phases, state.visible.rates))
        if traj is not None and state.iteration % config.record_stride == 0:
            traj.record(state)
    return RunResult(state, traj, drift)


# -- persistence -------------------------------------------------------------

TRAJ_MAGIC = "PBTRAJ v1"


def write_trajectory(traj: Trajectory, dest: Path | BinaryIO, manifest: dict) -> None:
    """Binary trajectory dump preceded by a one-line JSON manifest.

    After the ``PBTRAJ v1 <json>`` line, each recorded step is
    ``uint32 step, uint32 n_layers`` followed per layer by
    ``uint32 layer_index, uint32 n, float32[n] rates, float32[n] phases``,
    all little-endian.  Batched states are flattened.
    """
    own = not hasattr(dest, "write")
    f = open(dest, "wb") if own else dest
    try:
        f.write(f"{TRAJ_MAGIC} {json.dumps(manifest, sort_keys=True)}\n".encode())
        for step, rates, phases in zip(traj.steps, traj.rates, traj.phases):
            f.write(struct.pack("<II", step, len(rates)))
            for i, (r, p) in enumerate(zip(rates, phases)):
                r = np.asarray(r, "<f4").reshape(-1)
                f.write(struct.pack("<II", i, r.size))
                f.write(r.tobytes())
                f.write(np.asarray(p, "<f4").reshape(-1).tobytes())
    finally:
        if own:
            f.close()


def read_trajectory(src: Path | bytes) -> tuple[dict, Trajectory]:
    buf = src if isinstance(src, (bytes, bytearray)) else Path(src).read_bytes()
    f = io.BytesIO(buf)
    head = f.readline().decode()
    if not head.startswith(TRAJ_MAGIC + " "):
        raise ValueError("not a trajectory file")
    manifest = json.loads(head[len(TRAJ_MAGIC) + 1:])
    traj = Trajectory()
    while True:
        hdr = f.read(8)
        if not hdr:
            break
        if len(hdr) < 8:
            raise ValueError("truncated trajectory record")
        step, n_layers = struct.unpack("<II", hdr)
        rates, phases = [], []
        for _ in range(n_layers):
            _, n = struct.unpack("<II", f.read(8))
            blob = f.read(8 * n)
            if len(blob) < 8 * n:
                raise ValueError("truncated trajectory record")
            rates.append(np.frombuffer(blob[:4 * n], "<f4").copy())
            phases.append(np.frombuffer(blob[4 * n:], "<f4").copy())
        traj.steps.append(step)
        traj.rates.append(rates)
        traj.phases.append(phases)
    return manifest, traj


def save_states(path, state: NetworkState, **extra) -> None:
    """Store a (possibly batched) network state as ``.npz``."""
    arrays = {}
    for i, l in enumerate(state.layers):
        arrays[f"rates_{i}"] = l.rates
        arrays[f"phases_{i}"] = l.phases
        arrays[f"clamped_{i}"] = np.array(l.clamped)
    np.savez(path, n_layers=len(state.layers), iteration=state.iteration, **arrays, **extra)


def load_states(path) -> tuple[NetworkState, dict]:
    with np.load(path) as z:
        n = int(z["n_layers"])
        layers = [ComplexLayerState(z[f"rates_{i}"], z[f"phases_{i}"], bool(z[f"clamped_{i}"]))
                  for i in range(n)]
        known = {"n_layers", "iteration"} | {f"{k}_{i}" for i in range(n)
                                             for k in ("rates", "phases", "clamped")}
        extra = {k: z[k] for k in z.files if k not in known}
        return NetworkState(layers, int(z["iteration"])), extra


def config_dict(config: InferenceConfig) -> dict:
    d = asdict(config)
    d["mode"] = config.mode.value
    return d
