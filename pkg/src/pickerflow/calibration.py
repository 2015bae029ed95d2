"""Unsupervised threshold calibration from attribute distributions.

For each of the four motion attributes we estimate a Gaussian kernel density
whose bandwidth comes from the diffusion-equation fixed point (solved on the
cosine transform of the binned data), cluster the samples with deterministic
1-D k-means scored by the silhouette coefficient, and place the decision
threshold at the midpoint of the two k=2 cluster centers.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft

from .descriptors import ATTRIBUTES
from .errors import CalibrationError

__all__ = [
    "KdeModel",
    "ClusterModel",
    "AttributeCalibration",
    "CalibrationModel",
    "PICKING_POLARITY",
    "KDE_GRID_SIZE",
    "fit_kde",
    "kmeans_silhouette",
    "derive_thresholds",
    "calibrate_attributes",
    "silverman_bandwidth",
    "save_calibration",
    "load_calibration",
]

KDE_GRID_SIZE = 4096
KMEANS_SEED = 42
KMEANS_RESTARTS = 20
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1.0e-6
_MODE_FLOOR = 0.01  # local maxima below this fraction of the peak are ignored
_FIXED_POINT_ITERS = 50

# Which side of the threshold votes for the picking class, fixed by the
# cluster geometry of the two activities: picking shows a small magnitude
# range, a small correlation-sensitivity mean, and a tight orientation band
# away from the fold ends, while unloading sweeps span nearly [0, 180).
PICKING_POLARITY = {
    "mag_range": "below",
    "cs_mean": "below",
    "ori_max": "below",
    "ori_min": "above",
}


@dataclass(frozen=True)
class KdeModel:
    """Gaussian KDE of one attribute on a uniform grid."""

    attribute_name: str
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    modes: tuple[float, ...]


@dataclass(frozen=True)
class ClusterModel:
    """1-D k-means result with its mean silhouette coefficient."""

    attribute_name: str
    k: int
    centers: tuple[float, ...]
    silhouette: float
    assignments: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    degenerate: bool = False


@dataclass(frozen=True)
class AttributeCalibration:
    """Distilled calibration of one attribute: what classification needs plus diagnostics."""

    name: str
    centers: tuple[float, float]
    silhouettes: dict[int, float]
    bandwidth: float
    modes: tuple[float, ...]
    threshold: float
    polarity: str


@dataclass(frozen=True)
class CalibrationModel:
    """Per-attribute thresholds and polarities; complete iff all four attributes are present."""

    attributes: dict[str, AttributeCalibration]

    def __post_init__(self) -> None:
        missing = [a for a in ATTRIBUTES if a not in self.attributes]
        if missing:
            raise CalibrationError(f"calibration incomplete, missing attributes: {missing}")

    def threshold(self, attribute: str) -> float:
        return self.attributes[attribute].threshold

    def polarity(self, attribute: str) -> str:
        return self.attributes[attribute].polarity


def silverman_bandwidth(samples: np.ndarray) -> float:
    """Rule-of-thumb Gaussian bandwidth, used as solver fallback and sanity envelope."""
    samples = np.asarray(samples, dtype=np.float64)
    std = float(samples.std())
    q75, q25 = np.percentile(samples, [75.0, 25.0])
    iqr = float(q75 - q25)
    spread = min(std, iqr / 1.34) if iqr > 0.0 else std
    return 0.9 * spread * len(samples) ** (-0.2)


def _fixed_point_map(t: float, n: int, k_sq: np.ndarray, a_sq: np.ndarray) -> float:
    """One application of the diffusion-time map whose fixed point gives t*."""
    ell = 7
    with np.errstate(all="ignore"):
        f = 2.0 * np.pi ** (2 * ell) * float(np.sum(k_sq ** ell * a_sq * np.exp(-k_sq * np.pi ** 2 * t)))
        for s in range(ell - 1, 1, -1):
            if not np.isfinite(f) or f <= 0.0:
                raise FloatingPointError("diffusion map produced a non-positive functional")
            k0 = float(np.prod(np.arange(1.0, 2.0 * s, 2.0))) / np.sqrt(2.0 * np.pi)
            const = (1.0 + 0.5 ** (s + 0.5)) / 3.0
            time = (2.0 * const * k0 / (n * f)) ** (2.0 / (3.0 + 2.0 * s))
            f = 2.0 * np.pi ** (2 * s) * float(np.sum(k_sq ** s * a_sq * np.exp(-k_sq * np.pi ** 2 * time)))
        if not np.isfinite(f) or f <= 0.0:
            raise FloatingPointError("diffusion map produced a non-positive functional")
        result = (2.0 * n * np.sqrt(np.pi) * f) ** (-0.4)
    if not np.isfinite(result):
        raise FloatingPointError("diffusion map diverged")
    return result


def _diffusion_time(counts: np.ndarray, n: int, t_init: float) -> float:
    """Solve t = map(t) by capped fixed-point iteration with a bracketing fallback."""
    a = sp_fft.dct(counts / counts.sum(), type=2)
    k_sq = np.arange(1, len(counts), dtype=np.float64) ** 2
    a_sq = (a[1:] / 2.0) ** 2

    t = t_init
    try:
        for _ in range(_FIXED_POINT_ITERS):
            t_next = _fixed_point_map(t, n, k_sq, a_sq)
            if not np.isfinite(t_next) or t_next <= 0.0:
                raise FloatingPointError("iteration left the feasible region")
            if abs(t_next - t) < 1.0e-12 * max(t_next, 1.0e-12):
                return t_next
            t = t_next
    except FloatingPointError:
        pass

    def gap(t: float) -> float:
        return t - _fixed_point_map(t, n, k_sq, a_sq)

    from scipy.optimize import brentq

    lo = 1.0e-14
    for hi in (0.01, 0.05, 0.2, 1.0):
        try:
            if np.sign(gap(lo)) != np.sign(gap(hi)):
                root = float(brentq(gap, lo, hi, maxiter=200))
                if np.isfinite(root) and root > 0.0:
                    return root
        except (ValueError, FloatingPointError, RuntimeError):
            continue
    raise FloatingPointError("diffusion fixed point did not converge")


def fit_kde(samples, attribute_name: str = "attribute") -> KdeModel:
    """Gaussian KDE with diffusion-selected bandwidth on a 4096-point grid.

    The grid spans [min - 3*std, max + 3*std].  Density comes from smoothing
    the binned sample mass in the cosine-transform domain (reflective
    boundaries), so its grid integral is conserved by construction.  Falls
    back to the Silverman bandwidth with a warning if the fixed-point solve
    fails.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 10:
        raise CalibrationError(f"{attribute_name}: need at least 10 samples, got {samples.size}")
    if not np.all(np.isfinite(samples)):
        raise CalibrationError(f"{attribute_name}: non-finite samples")
    std = float(samples.std())
    if std == 0.0:
        raise CalibrationError(f"{attribute_name}: zero variance, cannot estimate a density")

    lo = float(samples.min()) - 3.0 * std
    hi = float(samples.max()) + 3.0 * std
    span = hi - lo
    counts, _ = np.histogram(samples, bins=KDE_GRID_SIZE, range=(lo, hi))
    counts = counts.astype(np.float64)

    t_init = (silverman_bandwidth(samples) / span) ** 2
    try:
        t_star = _diffusion_time(counts, samples.size, t_init)
        bandwidth = float(np.sqrt(t_star)) * span
    except FloatingPointError:
        warnings.warn(
            f"{attribute_name}: diffusion bandwidth solver failed; using Silverman's rule",
            RuntimeWarning,
        )
        bandwidth = silverman_bandwidth(samples)
        t_star = (bandwidth / span) ** 2

    # heat-equation smoothing of the binned mass: multiply DCT coefficient k
    # by exp(-(k*pi)^2 t/2), then transform back and divide by the bin width
    a = sp_fft.dct(counts / counts.sum(), type=2)
    k = np.arange(KDE_GRID_SIZE, dtype=np.float64)
    smoothed = sp_fft.idct(a * np.exp(-0.5 * (k * np.pi) ** 2 * t_star), type=2)
    density = np.maximum(smoothed, 0.0) * (KDE_GRID_SIZE / span)
    grid = lo + (np.arange(KDE_GRID_SIZE, dtype=np.float64) + 0.5) * (span / KDE_GRID_SIZE)

    peak = float(density.max())
    interior = (density[1:-1] > density[:-2]) & (density[1:-1] > density[2:])
    interior &= density[1:-1] >= _MODE_FLOOR * peak
    modes = tuple(float(g) for g in grid[1:-1][interior])
    return KdeModel(
        attribute_name=attribute_name,
        grid=grid,
        density=density,
        bandwidth=bandwidth,
        modes=modes,
    )


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty(k, dtype=np.float64)
    centers[0] = x[rng.integers(len(x))]
    d2 = (x - centers[0]) ** 2
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = x[rng.integers(len(x))]
        else:
            centers[j] = x[rng.choice(len(x), p=d2 / total)]
        d2 = np.minimum(d2, (x - centers[j]) ** 2)
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    for _ in range(KMEANS_MAX_ITER):
        labels = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        new_centers = centers.copy()
        for j in range(len(centers)):
            members = x[labels == j]
            if members.size:
                new_centers[j] = members.mean()
            else:
                # deterministic empty-cluster fix: steal the point farthest
                # from its current center
                far = int(np.argmax(np.abs(x - centers[labels])))
                new_centers[j] = x[far]
        shift = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        if shift < KMEANS_TOL:
            break
    labels = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
    inertia = float(np.sum((x - centers[labels]) ** 2))
    return centers, labels, inertia


def _silhouette(x: np.ndarray, labels: np.ndarray, k: int) -> tuple[float, bool]:
    """Mean silhouette over samples; singleton clusters contribute 0 and flag degeneracy.

    Uses sorted prefix sums per cluster, so distance sums are exact without a
    quadratic pairwise matrix.
    """
    n = len(x)
    sums = []
    for j in range(k):
        vals = np.sort(x[labels == j])
        sums.append((vals, np.concatenate(([0.0], np.cumsum(vals)))))

    def dist_sum(queries: np.ndarray, j: int) -> np.ndarray:
        vals, prefix = sums[j]
        idx = np.searchsorted(vals, queries, side="right")
        below = queries * idx - prefix[idx]
        above = (prefix[-1] - prefix[idx]) - queries * (len(vals) - idx)
        return below + above

    scores = np.zeros(n, dtype=np.float64)
    degenerate = False
    cluster_sizes = np.bincount(labels, minlength=k)
    if np.any(cluster_sizes <= 1):
        degenerate = True
    for j in range(k):
        members = labels == j
        m = int(cluster_sizes[j])
        if m == 0:
            degenerate = True
            continue
        q = x[members]
        if m == 1:
            scores[members] = 0.0
            continue
        a = dist_sum(q, j) / (m - 1)
        b = np.full(q.shape, np.inf)
        for other in range(k):
            if other == j or cluster_sizes[other] == 0:
                continue
            b = np.minimum(b, dist_sum(q, other) / cluster_sizes[other])
        denom = np.maximum(a, b)
        s = np.where(denom > 0.0, (b - a) / np.where(denom > 0.0, denom, 1.0), 0.0)
        scores[members] = s
    return float(scores.mean()), degenerate


def kmeans_silhouette(samples, k: int, attribute_name: str = "attribute") -> ClusterModel:
    """Deterministic 1-D k-means (k-means++ restarts, best inertia) plus silhouette."""
    if not 2 <= k <= 4:
        raise ValueError(f"k must be in 2..4, got {k}")
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < k:
        raise CalibrationError(f"{attribute_name}: {x.size} samples cannot form {k} clusters")
    if not np.all(np.isfinite(x)):
        raise CalibrationError(f"{attribute_name}: non-finite samples")
    distinct = np.unique(x)
    if distinct.size < k:
        raise CalibrationError(
            f"{attribute_name}: only {distinct.size} distinct values, cannot form {k} clusters"
        )

    rng = np.random.default_rng(KMEANS_SEED)
    best = None
    for _ in range(KMEANS_RESTARTS):
        centers, labels, inertia = _lloyd(x, _kmeans_pp_init(x, k, rng))
        if best is None or inertia < best[2]:
            best = (centers, labels, inertia)
    centers, labels, _ = best

    order = np.argsort(centers)
    centers = centers[order]
    remap = np.empty(k, dtype=np.intp)
    remap[order] = np.arange(k)
    labels = remap[labels]

    score, degenerate = _silhouette(x, labels, k)
    if distinct.size == k:
        degenerate = True
    return ClusterModel(
        attribute_name=attribute_name,
        k=k,
        centers=tuple(float(c) for c in centers),
        silhouette=score,
        assignments=labels,
        degenerate=degenerate,
    )


def derive_thresholds(
    cluster_models: dict[str, ClusterModel],
    kde_models: dict[str, KdeModel] | None = None,
    silhouettes: dict[str, dict[int, float]] | None = None,
) -> CalibrationModel:
    """Thresholds at the midpoints of the k=2 cluster centers, with fixed polarity.

    ``kde_models`` and ``silhouettes`` only enrich the stored diagnostics.
    """
    attributes = {}
    for name in ATTRIBUTES:
        if name not in cluster_models:
            raise CalibrationError(f"missing cluster model for attribute {name}")
        model = cluster_models[name]
        if model.k != 2 or len(model.centers) != 2:
            raise CalibrationError(f"{name}: threshold derivation requires k=2, got k={model.k}")
        low, high = model.centers
        kde = kde_models.get(name) if kde_models else None
        attributes[name] = AttributeCalibration(
            name=name,
            centers=(low, high),
            silhouettes=dict(silhouettes[name]) if silhouettes and name in silhouettes else {2: model.silhouette},
            bandwidth=kde.bandwidth if kde else 0.0,
            modes=kde.modes if kde else (),
            threshold=0.5 * (low + high),
            polarity=PICKING_POLARITY[name],
        )
    return CalibrationModel(attributes=attributes)


def calibrate_attributes(samples_by_attribute: dict[str, np.ndarray]) -> CalibrationModel:
    """Full calibration: KDE, k-means for k=2..4, silhouettes, and thresholds."""
    kdes: dict[str, KdeModel] = {}
    clusters2: dict[str, ClusterModel] = {}
    silhouettes: dict[str, dict[int, float]] = {}
    for name in ATTRIBUTES:
        if name not in samples_by_attribute:
            raise CalibrationError(f"no samples provided for attribute {name}")
        values = np.asarray(samples_by_attribute[name], dtype=np.float64)
        kdes[name] = fit_kde(values, name)
        scores: dict[int, float] = {}
        for k in (2, 3, 4):
            model = kmeans_silhouette(values, k, name)
            scores[k] = model.silhouette
            if k == 2:
                clusters2[name] = model
        silhouettes[name] = scores
    return derive_thresholds(clusters2, kdes, silhouettes)


def save_calibration(model: CalibrationModel, path: str | Path) -> None:
    payload = {
        name: {
            "centers": list(cal.centers),
            "silhouettes": {str(k): v for k, v in sorted(cal.silhouettes.items())},
            "bandwidth": cal.bandwidth,
            "modes": list(cal.modes),
            "threshold": cal.threshold,
            "polarity": cal.polarity,
        }
        for name, cal in sorted(model.attributes.items())
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_calibration(path: str | Path) -> CalibrationModel:
    with open(path) as fh:
        payload = json.load(fh)
    attributes = {}
    for name, entry in payload.items():
        centers = entry["centers"]
        attributes[name] = AttributeCalibration(
            name=name,
            centers=(float(centers[0]), float(centers[1])),
            silhouettes={int(k): float(v) for k, v in entry["silhouettes"].items()},
            bandwidth=float(entry["bandwidth"]),
            modes=tuple(float(m) for m in entry["modes"]),
            threshold=float(entry["threshold"]),
            polarity=str(entry["polarity"]),
        )
    return CalibrationModel(attributes=attributes)
