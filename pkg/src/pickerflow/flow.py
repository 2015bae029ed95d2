"""Dense optical flow from local polynomial expansion with a coarse-to-fine pyramid.

Each frame is approximated around every pixel by a quadratic polynomial
``f(u) ~ u^T A u + b^T u + c`` fitted by Gaussian-weighted least squares over a
square window.  For a pair of frames the displacement field follows from how
the linear coefficients shift between the two expansions; the estimate is
refined iteratively over an image pyramid so that displacements of several
pixels remain trackable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError

__all__ = [
    "GrayFrame",
    "FlowField",
    "PyramidConfig",
    "PolyExpansion",
    "DEFAULT_PYRAMID",
    "polynomial_expansion",
    "estimate_flow",
    "estimate_flow_sequence",
    "to_polar",
    "rgb_to_gray",
    "write_flow_cache",
    "read_flow_cache",
]

_FLOW_MAGIC = b"HFLW"
_FLOW_CLIP = 1.0e3  # finiteness guard for degenerate, texture-free regions


@dataclass(frozen=True)
class GrayFrame:
    """One grayscale frame; row-major intensities in [0, 1]."""

    data: np.ndarray
    frame_index: int = 0

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DataError(f"frame {self.frame_index}: expected a non-empty 2-D grid, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError(f"frame {self.frame_index}: non-finite intensities")
        if float(data.min()) < 0.0 or float(data.max()) > 1.0:
            raise DataError(f"frame {self.frame_index}: intensities outside [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement (pixels/frame) mapping the earlier frame onto the later one."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self) -> None:
        dx = np.asarray(self.dx, dtype=np.float32)
        dy = np.asarray(self.dy, dtype=np.float32)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise DataError(f"flow components must share a 2-D shape, got {dx.shape} vs {dy.shape}")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise DataError("non-finite flow components")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]


@dataclass(frozen=True)
class PyramidConfig:
    """Pyramid and window parameters for the flow estimator."""

    levels: int = 3
    scale: float = 0.5
    window_radius: int = 7
    iterations: int = 3
    poly_sigma: float = 1.5

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not 0.0 < self.scale < 1.0:
            raise ValueError("scale must lie in (0, 1)")
        if self.window_radius < 2:
            raise ValueError("window_radius must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.poly_sigma <= 0.0:
            raise ValueError("poly_sigma must be positive")

    @property
    def window_size(self) -> int:
        return 2 * self.window_radius + 1


DEFAULT_PYRAMID = PyramidConfig()


@dataclass(frozen=True)
class PolyExpansion:
    """Per-pixel quadratic fit f(u) ~ u^T A u + b^T u + c with A = [[a_xx, a_xy], [a_xy, a_yy]]."""

    a_xx: np.ndarray
    a_xy: np.ndarray
    a_yy: np.ndarray
    b_x: np.ndarray
    b_y: np.ndarray
    c: np.ndarray


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Convert an (H, W, 3) array to grayscale with fixed luma weights."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"expected an (H, W, 3) array, got shape {rgb.shape}")
    return (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]).astype(np.float32)


def _window_kernels(cfg: PyramidConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, np.ndarray]:
    t = np.arange(-cfg.window_radius, cfg.window_radius + 1, dtype=np.float64)
    g = np.exp(-(t * t) / (2.0 * cfg.poly_sigma * cfg.poly_sigma))
    g /= g.sum()
    s2 = float(np.sum(g * t * t))
    s4 = float(np.sum(g * t ** 4))
    # Gram matrix of the coupled {1, u_x^2, u_y^2} basis block under the
    # separable window weights; the remaining basis functions are orthogonal.
    gram = np.array([[1.0, s2, s2], [s2, s4, s2 * s2], [s2, s2 * s2, s4]])
    inv = np.linalg.inv(gram)
    return g, t * g, t * t * g, s2, inv


def polynomial_expansion(frame: GrayFrame, cfg: PyramidConfig = DEFAULT_PYRAMID) -> PolyExpansion:
    """Fit the local quadratic model at every pixel of ``frame``.

    Border pixels (closer than the window radius to an edge) are fitted against
    replicated edge samples and are not reliable.
    """
    if frame.width < cfg.window_size or frame.height < cfg.window_size:
        raise DataError(
            f"frame {frame.frame_index} ({frame.width}x{frame.height}) smaller than "
            f"the {cfg.window_size}x{cfg.window_size} expansion window"
        )
    return _expand(frame.data.astype(np.float64), cfg)


def _expand(data: np.ndarray, cfg: PyramidConfig) -> PolyExpansion:
    k0, k1, k2, s2, inv = _window_kernels(cfg)

    def corr(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
        return ndimage.correlate1d(arr, kernel, axis=axis, mode="nearest")

    v0 = corr(data, k0, 0)
    v1 = corr(data, k1, 0)
    v2 = corr(data, k2, 0)

    s00 = corr(v0, k0, 1)
    s10 = corr(v0, k1, 1)
    s20 = corr(v0, k2, 1)
    s01 = corr(v1, k0, 1)
    s11 = corr(v1, k1, 1)
    s02 = corr(v2, k0, 1)

    alpha, beta = inv[0, 0], inv[0, 1]
    gamma, delta = inv[1, 1], inv[1, 2]
    c = alpha * s00 + beta * (s20 + s02)
    a_xx = beta * s00 + gamma * s20 + delta * s02
    a_yy = beta * s00 + delta * s20 + gamma * s02
    b_x = s10 / s2
    b_y = s01 / s2
    # the fitted coefficient multiplies the (u_x * u_y) basis function; the
    # off-diagonal entry of the symmetric A carries half of it
    a_xy = s11 / (2.0 * s2 * s2)
    return PolyExpansion(a_xx=a_xx, a_xy=a_xy, a_yy=a_yy, b_x=b_x, b_y=b_y, c=c)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = img.shape
    y = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    x = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def _level_shapes(height: int, width: int, cfg: PyramidConfig) -> list[tuple[int, int]]:
    shapes = [(height, width)]
    for k in range(1, cfg.levels):
        h = int(round(height * cfg.scale ** k))
        w = int(round(width * cfg.scale ** k))
        if min(h, w) < cfg.window_size:
            break
        shapes.append((h, w))
    return shapes


def _build_pyramid(data: np.ndarray, shapes: list[tuple[int, int]], cfg: PyramidConfig) -> list[np.ndarray]:
    sigma = 0.5 * (1.0 / cfg.scale - 1.0)
    levels = [data.astype(np.float64)]
    for h, w in shapes[1:]:
        smoothed = ndimage.gaussian_filter(levels[-1], sigma, mode="nearest")
        levels.append(_resize_bilinear(smoothed, h, w))
    return levels


def _expand_pyramid(frame: GrayFrame, cfg: PyramidConfig) -> list[PolyExpansion]:
    if frame.width < cfg.window_size or frame.height < cfg.window_size:
        raise DataError(
            f"frame {frame.frame_index} ({frame.width}x{frame.height}) smaller than "
            f"the {cfg.window_size}x{cfg.window_size} expansion window"
        )
    shapes = _level_shapes(frame.height, frame.width, cfg)
    return [_expand(level, cfg) for level in _build_pyramid(frame.data.astype(np.float64), shapes, cfg)]


def _update_flow(
    exp_a: PolyExpansion,
    exp_b: PolyExpansion,
    flow_x: np.ndarray,
    flow_y: np.ndarray,
    cfg: PyramidConfig,
) -> tuple[np.ndarray, np.ndarray]:
    h, w = flow_x.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sy = np.clip(yy + flow_y, 0.0, h - 1.0)
    sx = np.clip(xx + flow_x, 0.0, w - 1.0)
    coords = [sy, sx]

    def warp(plane: np.ndarray) -> np.ndarray:
        return ndimage.map_coordinates(plane, coords, order=1, mode="nearest")

    a_xx = 0.5 * (exp_a.a_xx + warp(exp_b.a_xx))
    a_xy = 0.5 * (exp_a.a_xy + warp(exp_b.a_xy))
    a_yy = 0.5 * (exp_a.a_yy + warp(exp_b.a_yy))
    db_x = -0.5 * (warp(exp_b.b_x) - exp_a.b_x) + a_xx * flow_x + a_xy * flow_y
    db_y = -0.5 * (warp(exp_b.b_y) - exp_a.b_y) + a_xy * flow_x + a_yy * flow_y

    g11 = a_xx * a_xx + a_xy * a_xy
    g12 = a_xy * (a_xx + a_yy)
    g22 = a_yy * a_yy + a_xy * a_xy
    h1 = a_xx * db_x + a_xy * db_y
    h2 = a_xy * db_x + a_yy * db_y

    size = cfg.window_size
    g11 = ndimage.uniform_filter(g11, size, mode="nearest")
    g12 = ndimage.uniform_filter(g12, size, mode="nearest")
    g22 = ndimage.uniform_filter(g22, size, mode="nearest")
    h1 = ndimage.uniform_filter(h1, size, mode="nearest")
    h2 = ndimage.uniform_filter(h2, size, mode="nearest")

    det = g11 * g22 - g12 * g12 + 1.0e-12
    new_x = (g22 * h1 - g12 * h2) / det
    new_y = (g11 * h2 - g12 * h1) / det
    np.clip(new_x, -_FLOW_CLIP, _FLOW_CLIP, out=new_x)
    np.clip(new_y, -_FLOW_CLIP, _FLOW_CLIP, out=new_y)
    return new_x, new_y


def _flow_from_expansions(
    pyr_a: list[PolyExpansion],
    pyr_b: list[PolyExpansion],
    cfg: PyramidConfig,
) -> FlowField:
    flow_x = flow_y = None
    for level in range(len(pyr_a) - 1, -1, -1):
        exp_a, exp_b = pyr_a[level], pyr_b[level]
        h, w = exp_a.c.shape
        if flow_x is None:
            flow_x = np.zeros((h, w), dtype=np.float64)
            flow_y = np.zeros((h, w), dtype=np.float64)
        else:
            prev_h, prev_w = flow_x.shape
            flow_x = _resize_bilinear(flow_x, h, w) * (w / prev_w)
            flow_y = _resize_bilinear(flow_y, h, w) * (h / prev_h)
        for _ in range(cfg.iterations):
            flow_x, flow_y = _update_flow(exp_a, exp_b, flow_x, flow_y, cfg)
    return FlowField(dx=flow_x.astype(np.float32), dy=flow_y.astype(np.float32))


def estimate_flow(prev: GrayFrame, new: GrayFrame, cfg: PyramidConfig = DEFAULT_PYRAMID) -> FlowField:
    """Estimate the dense displacement field carrying ``prev`` onto ``new``."""
    if (prev.height, prev.width) != (new.height, new.width):
        raise DataError(
            f"frame dimension mismatch: {prev.width}x{prev.height} vs {new.width}x{new.height}"
        )
    return _flow_from_expansions(_expand_pyramid(prev, cfg), _expand_pyramid(new, cfg), cfg)


def estimate_flow_sequence(frames, cfg: PyramidConfig = DEFAULT_PYRAMID):
    """Yield the flow field for every consecutive frame pair of ``frames``.

    Reuses each frame's pyramid expansion for the pair on either side of it,
    which roughly halves the cost on long sequences.  Results are identical to
    calling :func:`estimate_flow` pair by pair.
    """
    prev_frame = None
    prev_pyr = None
    for frame in frames:
        pyr = _expand_pyramid(frame, cfg)
        if prev_pyr is not None:
            if (prev_frame.height, prev_frame.width) != (frame.height, frame.width):
                raise DataError(
                    f"frame dimension mismatch at frame {frame.frame_index}: "
                    f"{prev_frame.width}x{prev_frame.height} vs {frame.width}x{frame.height}"
                )
            yield _flow_from_expansions(prev_pyr, pyr, cfg)
        prev_frame = frame
        prev_pyr = pyr


def to_polar(field: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude (pixels/frame) and undirected orientation (degrees in [0, 180)).

    Opposite displacement directions are folded together; a zero vector has
    orientation 0 by convention.
    """
    dx = field.dx.astype(np.float64)
    dy = field.dy.astype(np.float64)
    magnitude = np.hypot(dx, dy)
    orientation = np.degrees(np.arctan2(dy, dx)) % 180.0
    orientation[magnitude == 0.0] = 0.0
    # folding can still land exactly on 180.0 through rounding
    orientation[orientation >= 180.0] = 0.0
    return magnitude, orientation


def write_flow_cache(path: str | Path, field: FlowField) -> None:
    """Write a flow field as little-endian binary: magic, u32 sizes, (dx, dy) float32 pairs."""
    interleaved = np.empty((field.height, field.width, 2), dtype="<f4")
    interleaved[..., 0] = field.dx
    interleaved[..., 1] = field.dy
    with open(path, "wb") as fh:
        fh.write(_FLOW_MAGIC)
        fh.write(struct.pack("<II", field.width, field.height))
        fh.write(interleaved.tobytes())


def read_flow_cache(path: str | Path) -> FlowField:
    """Read a flow field written by :func:`write_flow_cache`; bit-exact round-trip."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _FLOW_MAGIC:
        raise DataError(f"{path}: not a flow cache file")
    width, height = struct.unpack("<II", blob[4:12])
    expected = 12 + width * height * 8
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {width}x{height}, got {len(blob)}")
    interleaved = np.frombuffer(blob[12:], dtype="<f4").reshape(height, width, 2)
    return FlowField(dx=interleaved[..., 0].copy(), dy=interleaved[..., 1].copy())
