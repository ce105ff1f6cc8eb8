"""Reading out synchronous assemblies from phases.

Units are grouped by their activity vectors ``r * exp(i*phi)`` in the complex
plane, either with k-means (caller supplies k) or by picking peaks in the
phase histogram.  Groups become masks that can be decoded back to image space
through the trained stack, and phase coherence can be scored against ground
truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .complexunit import TWO_PI, circular_distance, logistic
from .data import GroundTruth
from .rbm import DbmModel
from .synchrony import ComplexLayerState

OFF_THRESHOLD = 0.5
BACKGROUND = 0


class TooFewPointsError(ValueError):
    pass


@dataclass
class PhaseClusters:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray  # complex
    objective_history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def objective(self) -> float:
        return self.objective_history[-1]

    def background(self) -> int:
        """Cluster whose centroid lies closest to the origin."""
        return int(np.argmin(np.abs(self.centroids)))


def _as_points(layer) -> np.ndarray:
    if isinstance(layer, ComplexLayerState):
        z = layer.z
    else:
        z = np.asarray(layer)
    z = np.asarray(z, dtype=np.complex128).reshape(-1)
    return np.column_stack([z.real, z.imag])


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a centre already
            idx = rng.integers(len(X))
        else:
            idx = rng.choice(len(X), p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans_complex(layer, k: int, seed: int = 0, max_iters: int = 100) -> PhaseClusters:
    """Lloyd's k-means on unit activity vectors, with k-means++ seeding.

    ``layer`` is a :class:`ComplexLayerState` or an array of complex values.
    An empty cluster is repaired by moving to it the point farthest from its
    own centroid.  Stops once assignments no longer change.
    """
    X = _as_points(layer)
    if k < 1:
        raise ValueError("k must be >= 1")
    n_distinct = len(np.unique(X, axis=0))
    if n_distinct < k:
        raise TooFewPointsError(f"{n_distinct} distinct points cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(X, C)
        new = d2.argmin(axis=1)
        for c in range(k):
            if not np.any(new == c):
                own = d2[np.arange(len(X)), new]
                # only steal from clusters that keep at least one member
                sizes = np.bincount(new, minlength=k)
                own = np.where(sizes[new] > 1, own, -1.0)
                far = int(own.argmax())
                new[far] = c
        C = np.array([X[new == c].mean(axis=0) for c in range(k)])
        history.append(float(((X - C[new]) ** 2).sum()))
        if labels is not None and np.array_equal(new, labels):
            labels = new
            break
        labels = new
    return PhaseClusters(k, labels, C[:, 0] + 1j * C[:, 1], history, it)


def masks_from_clusters(clusters: PhaseClusters, layer: ComplexLayerState,
                        off_threshold: float = OFF_THRESHOLD) -> tuple[np.ndarray, int]:
    """Boolean ``(k, n_units)`` masks of active units per cluster.

    Returns the masks and the index of the background cluster (smallest
    centroid magnitude).
    """
    rates = np.asarray(layer.rates).reshape(-1)
    active = rates >= off_threshold
    masks = np.stack([(clusters.assignments == c) & active for c in range(clusters.k)])
    return masks, clusters.background()


def align_clusters(reference: PhaseClusters, other: PhaseClusters) -> np.ndarray:
    """Permutation of ``other``'s non-background clusters matched by centroid phase.

    Returns an array mapping each cluster id of ``other`` to the id of the
    reference cluster with the nearest centroid phase (background maps to
    background).  Used to relate clusters found independently per layer.
    """
    ref_bg, oth_bg = reference.background(), other.background()
    ref_ids = [c for c in range(reference.k) if c != ref_bg]
    mapping = np.full(other.k, ref_bg)
    for c in range(other.k):
        if c == oth_bg or not ref_ids:
            continue
        d = [circular_distance(np.angle(other.centroids[c]), np.angle(reference.centroids[r]))
             for r in ref_ids]
        mapping[c] = ref_ids[int(np.argmin(d))]
    return mapping


@dataclass
class Segmentation:
    labels: np.ndarray  # (height, width) ints, BACKGROUND where inactive
    k: int
    clusters: PhaseClusters | None = None


def segment_visible(layer: ComplexLayerState, k: int, seed: int = 0,
                    shape: tuple[int, int] | None = None,
                    off_threshold: float = OFF_THRESHOLD, max_iters: int = 100) -> Segmentation:
    """Label every pixel with a phase cluster; inactive pixels get ``BACKGROUND``.

    ``k`` counts the background, so active pixels are split into ``k - 1``
    clusters, fewer if there are not enough distinct activity vectors.
    Foreground labels are ``1..`` ordered by centroid phase.
    """
    if k < 2:
        raise ValueError("k must be >= 2: one background plus at least one object")
    rates = np.asarray(layer.rates).reshape(-1)
    z = np.asarray(layer.z).reshape(-1)
    if shape is None:
        side = int(round(np.sqrt(rates.size)))
        shape = (side, rates.size // side)
    labels = np.full(rates.size, BACKGROUND, dtype=np.int64)
    active = rates >= off_threshold
    clusters = None
    n_fg = min(k - 1, len(np.unique(_as_points(z[active]), axis=0)))
    if n_fg >= 1:
        clusters = kmeans_complex(z[active], n_fg, seed, max_iters)
        order = np.argsort(np.angle(clusters.centroids), kind="stable")
        rank = np.empty(n_fg, dtype=np.int64)
        rank[order] = np.arange(1, n_fg + 1)
        labels[active] = rank[clusters.assignments]
    return Segmentation(labels.reshape(shape), k, clusters)


@dataclass
class PhaseHistogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def phase_histogram(layer: ComplexLayerState, bins: int = 16,
                    off_threshold: float = OFF_THRESHOLD) -> PhaseHistogram:
    """Histogram over [-pi, pi) of the phases of active units."""
    rates = np.asarray(layer.rates).reshape(-1)
    phases = np.asarray(layer.phases).reshape(-1)[rates >= off_threshold]
    edges = np.linspace(-np.pi, np.pi, bins + 1)
    idx = np.clip(np.floor((phases + np.pi) / TWO_PI * bins).astype(int), 0, bins - 1)
    return PhaseHistogram(edges, np.bincount(idx, minlength=bins))


def histogram_peaks(hist: PhaseHistogram) -> np.ndarray:
    """Bin indices of circular local maxima above the uniform expectation.

    A plateau counts once: a peak bin is strictly higher than its left
    neighbour and at least as high as its right neighbour.  A histogram with a
    single occupied bin has that bin as its only peak.
    """
    c = hist.counts
    if c.sum() == 0:
        return np.zeros(0, dtype=int)
    expected = c.sum() / len(c)
    left, right = np.roll(c, 1), np.roll(c, -1)
    is_peak = (c > expected) & (c > left) & (c >= right)
    return np.flatnonzero(is_peak)


def histogram_peak_masks(layer: ComplexLayerState, bins: int = 16, peak_window: float | None = None,
                         off_threshold: float = OFF_THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """Masks of active units within ``peak_window`` radians of each histogram peak.

    Masks may overlap.  Returns ``(masks, peak_phases)``; the default window
    is one bin width.
    """
    if bins < 8:
        raise ValueError("need at least 8 bins")
    hist = phase_histogram(layer, bins, off_threshold)
    peaks = hist.centers[histogram_peaks(hist)]
    if peak_window is None:
        peak_window = TWO_PI / bins
    rates = np.asarray(layer.rates).reshape(-1)
    phases = np.asarray(layer.phases).reshape(-1)
    active = rates >= off_threshold
    masks = np.stack([active & (circular_distance(phases, p) <= peak_window) for p in peaks]) \
        if len(peaks) else np.zeros((0, rates.size), dtype=bool)
    return masks, peaks


def decode_cluster(model: DbmModel, mask: np.ndarray, top_rates: np.ndarray) -> np.ndarray:
    """Project a masked top-layer state down to the visible layer.

    Units outside ``mask`` are set to zero; each step down computes
    ``logistic(2 * W.T h + b_v)`` of the layer below.
    """
    h = np.where(np.asarray(mask, bool), np.asarray(top_rates, dtype=np.float64), 0.0)
    for layer in reversed(model.layers):
        h = logistic(2.0 * (h @ layer.W.astype(np.float64)) + layer.b_v)
    return h


def decode_clusters(model: DbmModel, top: ComplexLayerState, k: int, seed: int = 0,
                    off_threshold: float = OFF_THRESHOLD) -> tuple[np.ndarray, PhaseClusters, int]:
    """Cluster the top layer and decode every cluster; returns ``(images, clusters, background)``."""
    clusters = kmeans_complex(top, k, seed)
    masks, bg = masks_from_clusters(clusters, top, off_threshold)
    images = np.stack([decode_cluster(model, m, top.rates) for m in masks])
    return images, clusters, bg


@dataclass
class CoherenceMetrics:
    resultant: np.ndarray       # per object, NaN if no usable pixels
    mean_phase: np.ndarray
    n_pixels: np.ndarray
    separation: np.ndarray      # (objects, objects) circular distances between mean phases
    n_peaks: int


def coherence_metrics(layer: ComplexLayerState, truth: GroundTruth, bins: int = 16,
                      off_threshold: float = OFF_THRESHOLD) -> CoherenceMetrics:
    """Within-object phase coherence of the visible layer.

    Only active pixels owned by exactly one object take part.
    """
    rates = np.asarray(layer.rates).reshape(-1)
    phases = np.asarray(layer.phases).reshape(-1)
    masks = truth.single_membership().reshape(truth.object_count, -1)
    if masks.shape[1] != rates.size:
        raise ValueError("ground truth does not match the layer size")
    masks = masks & (rates >= off_threshold)
    n = masks.sum(axis=1)
    R = np.full(len(masks), np.nan)
    mean = np.full(len(masks), np.nan)
    for o, m in enumerate(masks):
        if n[o]:
            s = np.exp(1j * phases[m]).mean()
            R[o] = abs(s)
            mean[o] = np.angle(s)
    sep = circular_distance(mean[:, None], mean[None, :]) if len(mean) else np.zeros((0, 0))
    n_peaks = len(histogram_peaks(phase_histogram(layer, bins, off_threshold)))
    return CoherenceMetrics(R, mean, n, np.asarray(sep), n_peaks)
