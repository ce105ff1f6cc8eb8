"""Complex-valued unit activations.

A unit state is z = r * exp(i*phi) with firing rate r in [0, 1] and phase phi.
Incoming messages are scaled by real weights and summed two ways: in the
complex plane (the synchrony term, ``sync``) and over magnitudes only (the
classic term, ``classic``).  The output phase follows the synchrony term, the
output rate is the logistic of a mix of both terms plus a bias.

Scalar functions here operate on single units and are used as the reference
for the vectorised array helpers at the bottom of the module, which the
network inference code calls.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

#: below this synchrony magnitude the phase of a unit is left unchanged
PHASE_EPS = 1e-12

#: default weight on the synchrony term; the classic term gets 1 - mix
DEFAULT_MIX = 0.5


class ActivationMode(str, enum.Enum):
    DETERMINISTIC = "det"
    STOCHASTIC = "stoch"

    @classmethod
    def parse(cls, value: "ActivationMode | str") -> "ActivationMode":
        if isinstance(value, cls):
            return value
        aliases = {"det": cls.DETERMINISTIC, "deterministic": cls.DETERMINISTIC,
                   "stoch": cls.STOCHASTIC, "stochastic": cls.STOCHASTIC}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown activation mode {value!r}") from None


def wrap_phase(angle: float) -> float:
    """Map an angle in radians onto [-pi, pi).

    Angles already in range are returned unchanged, so wrapping is exactly
    idempotent.
    """
    if not math.isfinite(angle):
        raise ValueError(f"phase must be finite, got {angle!r}")
    if -math.pi <= angle < math.pi:
        return float(angle)
    wrapped = math.fmod(angle + math.pi, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    wrapped -= math.pi
    # fmod of a tiny negative can round up to exactly 2*pi
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    return wrapped


def wrap_phases(angles) -> np.ndarray:
    """Vectorised :func:`wrap_phase`."""
    a = np.asarray(angles, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("phases must be finite")
    out = np.mod(a + np.pi, TWO_PI) - np.pi
    out = np.where(out >= np.pi, out - TWO_PI, out)
    return np.where((a >= -np.pi) & (a < np.pi), a, out)


def circular_distance(a, b):
    """Absolute angular distance in [0, pi]."""
    d = np.abs(np.mod(np.asarray(a) - np.asarray(b) + np.pi, TWO_PI) - np.pi)
    return d if np.ndim(d) else float(d)


@dataclass(frozen=True)
class ComplexDrive:
    """Total input to one unit: synchrony term (complex) and classic term (real)."""

    sync_re: float
    sync_im: float
    classic: float

    @property
    def sync(self) -> complex:
        return complex(self.sync_re, self.sync_im)

    @classmethod
    def from_terms(cls, sync: complex, classic: float) -> "ComplexDrive":
        return cls(float(sync.real), float(sync.imag), float(classic))


@dataclass(frozen=True)
class UnitOutput:
    rate: float
    phase: float

    @property
    def z(self) -> complex:
        return self.rate * complex(math.cos(self.phase), math.sin(self.phase))


def accumulate_drive(messages: Iterable[tuple[float, float, float]]) -> ComplexDrive:
    """Sum ``(weight, rate, phase)`` messages into a :class:`ComplexDrive`."""
    sync = 0j
    classic = 0.0
    for weight, rate, phase in messages:
        if not (math.isfinite(weight) and math.isfinite(rate) and math.isfinite(phase)):
            raise ValueError("messages must be finite")
        if rate < 0:
            raise ValueError(f"rates must be non-negative, got {rate}")
        sync += weight * rate * complex(math.cos(phase), math.sin(phase))
        classic += weight * rate
    return ComplexDrive.from_terms(sync, classic)


def preactivation(d: ComplexDrive, bias: float = 0.0, mix: float = DEFAULT_MIX) -> float:
    """Argument of the logistic: ``mix*|sync| + (1-mix)*classic + bias``."""
    return mix * abs(d.sync) + (1.0 - mix) * d.classic + bias


def synchrony_only_preactivation(d: ComplexDrive) -> float:
    """``|sync|``; the purely complex formulation without the classic term."""
    return abs(d.sync)


def logistic(x):
    """Numerically stable logistic sigmoid (scalar or array)."""
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activate(
    d: ComplexDrive,
    bias: float = 0.0,
    mode: ActivationMode | str = ActivationMode.DETERMINISTIC,
    prev_phase: float = 0.0,
    rng: np.random.Generator | None = None,
    mix: float = DEFAULT_MIX,
) -> UnitOutput:
    """Compute the output rate and phase of one unit.

    The phase is ``arg(sync)`` unless the synchrony term is (numerically)
    zero, in which case ``prev_phase`` is kept.  In stochastic mode the rate is
    a Bernoulli sample of the logistic probability drawn from ``rng``.
    """
    mode = ActivationMode.parse(mode)
    sync = d.sync
    if abs(sync) >= PHASE_EPS:
        phase = wrap_phase(math.atan2(sync.imag, sync.real))
    else:
        phase = wrap_phase(prev_phase)
    p = logistic(preactivation(d, bias, mix))
    if mode is ActivationMode.STOCHASTIC:
        if rng is None:
            raise ValueError("stochastic activation needs a random generator")
        rate = 1.0 if rng.random() < p else 0.0
    else:
        rate = p
    return UnitOutput(rate=rate, phase=phase)


def phase_response_table(
    w1: float, w2: float, r1: float, r2: float, n_points: int = 33, mix: float = DEFAULT_MIX
) -> list[tuple[float, float, float]]:
    """Preactivation of a unit with two inputs as their phase difference varies.

    Returns rows ``(delta_phi, mixed, sync_only)`` with ``delta_phi`` uniform
    on [0, pi].  The first input sits at phase 0 and the second at delta_phi.
    """
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    rows = []
    for dphi in np.linspace(0.0, math.pi, n_points):
        d = accumulate_drive([(w1, r1, 0.0), (w2, r2, float(dphi))])
        rows.append((float(dphi), preactivation(d, 0.0, mix), synchrony_only_preactivation(d)))
    return rows


# -- array versions used by network inference -------------------------------


def drive_arrays(weights: np.ndarray, rates: np.ndarray, phases: np.ndarray):
    """Synchrony and classic terms for every row of ``weights``.

    ``rates`` and ``phases`` may carry leading batch dimensions; the unit axis
    is last.  Returns ``(sync, classic)`` shaped ``(..., n_rows)``.
    """
    z = rates * np.exp(1j * phases)
    return z @ weights.T, rates @ weights.T


def preactivation_arrays(sync: np.ndarray, classic: np.ndarray, bias, mix: float = DEFAULT_MIX):
    return mix * np.abs(sync) + (1.0 - mix) * classic + bias


def output_phases(sync: np.ndarray, prev_phases: np.ndarray) -> np.ndarray:
    """``arg(sync)`` wrapped to [-pi, pi), falling back to ``prev_phases``."""
    ang = np.angle(sync)
    ang = np.where(ang >= np.pi, ang - TWO_PI, ang)
    return np.where(np.abs(sync) >= PHASE_EPS, ang, prev_phases)


def sample_rates(p: np.ndarray, mode: ActivationMode, rng: np.random.Generator | None) -> np.ndarray:
    if mode is ActivationMode.STOCHASTIC:
        return (rng.random(p.shape) < p).astype(np.float64)
    return p


__all__: Sequence[str] = [
    "ActivationMode", "ComplexDrive", "UnitOutput", "PHASE_EPS", "DEFAULT_MIX",
    "wrap_phase", "wrap_phases", "circular_distance", "accumulate_drive",
    "preactivation", "synchrony_only_preactivation", "logistic", "activate",
    "phase_response_table", "drive_arrays", "preactivation_arrays",
    "output_phases", "sample_rates",
]
