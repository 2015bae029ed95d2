"""Per-frame motion descriptors over the masked moving-object region.

The flow field restricted to one picker's foreground mask yields a set of
(magnitude, orientation) samples per frame.  From those we compute spatial
statistics, the per-frame correlation-sensitivity term coupling summed
magnitude and summed orientation, and the four-attribute parameter vector
consumed by the classifier.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .flow import FlowField, to_polar

__all__ = [
    "ATTRIBUTES",
    "MorMask",
    "StatBlock",
    "FrameDescriptor",
    "ParameterVector",
    "mask_flow",
    "frame_descriptor",
    "parameter_vector",
    "cs_total",
    "write_descriptor_csv",
    "DESCRIPTOR_CSV_HEADER",
]

ATTRIBUTES = ("mag_range", "cs_mean", "ori_max", "ori_min")

DESCRIPTOR_CSV_HEADER = (
    "frame_index,picker_id,S_f,mag_min,mag_max,mag_mean,mag_std,mag_range,mag_rms,"
    "ori_min,ori_max,ori_mean,ori_std,ori_range,ori_rms,mag_sum,ori_sum,cs_term"
)


@dataclass(frozen=True)
class MorMask:
    """Binary foreground region of one picker in one frame."""

    bits: np.ndarray
    picker_id: str
    frame_index: int

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise DataError(
                f"mask (frame {self.frame_index}, picker {self.picker_id}): "
                f"expected a non-empty 2-D grid, got shape {bits.shape}"
            )
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def foreground_count(self) -> int:
        return int(self.bits.sum())

    @property
    def is_empty(self) -> bool:
        return not bool(self.bits.any())


@dataclass(frozen=True)
class StatBlock:
    """mean / std / range / min / max / rms of one sample set (population convention)."""

    mean: float = 0.0
    std: float = 0.0
    range: float = 0.0
    min: float = 0.0
    max: float = 0.0
    rms: float = 0.0


@dataclass(frozen=True)
class FrameDescriptor:
    """Statistical attributes of the masked flow samples of one (frame, picker)."""

    frame_index: int
    picker_id: str
    sample_count: int
    mag_stats: StatBlock
    ori_stats: StatBlock
    mag_sum: float
    ori_sum: float
    cs_term: float

    @property
    def is_empty(self) -> bool:
        return self.sample_count == 0


@dataclass(frozen=True)
class ParameterVector:
    """Four-attribute vector feeding the frame classifier.

    ``stale`` marks vectors propagated across detector dropouts (empty masks).
    """

    mag_range: float
    cs_mean: float
    ori_max: float
    ori_min: float
    stale: bool = False

    def value(self, attribute: str) -> float:
        if attribute not in ATTRIBUTES:
            raise ValueError(f"unknown attribute {attribute!r}")
        return getattr(self, attribute)


def mask_flow(flow_field: FlowField, mask: MorMask, grid_step: int = 1) -> np.ndarray:
    """Polar flow samples at mask-true pixels, row-major order.

    Returns an (S, 2) float64 array of (magnitude, orientation) pairs.  With
    ``grid_step`` > 1 the mask is evaluated on a subsampled pixel grid.
    """
    if (flow_field.height, flow_field.width) != (mask.height, mask.width):
        raise DataError(
            f"mask (frame {mask.frame_index}, picker {mask.picker_id}) is "
            f"{mask.width}x{mask.height} but the flow field is {flow_field.width}x{flow_field.height}"
        )
    if grid_step < 1:
        raise ValueError("grid_step must be >= 1")
    magnitude, orientation = to_polar(flow_field)
    bits = mask.bits
    if grid_step > 1:
        magnitude = magnitude[::grid_step, ::grid_step]
        orientation = orientation[::grid_step, ::grid_step]
        bits = bits[::grid_step, ::grid_step]
    return np.column_stack((magnitude[bits], orientation[bits]))


def _stats(values: np.ndarray) -> StatBlock:
    lo = float(values.min())
    hi = float(values.max())
    return StatBlock(
        mean=float(values.mean()),
        std=float(values.std()),
        range=hi - lo,
        min=lo,
        max=hi,
        rms=float(np.sqrt(np.mean(values * values))),
    )


def frame_descriptor(samples: np.ndarray | Sequence, frame_index: int, picker_id: str) -> FrameDescriptor:
    """Build the per-frame descriptor from (magnitude, orientation) samples.

    An empty sample set yields an all-zero descriptor flagged empty rather
    than an error, so detector dropouts do not break the pipeline.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        return FrameDescriptor(
            frame_index=frame_index,
            picker_id=picker_id,
            sample_count=0,
            mag_stats=StatBlock(),
            ori_stats=StatBlock(),
            mag_sum=0.0,
            ori_sum=0.0,
            cs_term=0.0,
        )
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise DataError(f"expected (S, 2) polar samples, got shape {samples.shape}")
    mags = samples[:, 0]
    oris = samples[:, 1]
    count = samples.shape[0]
    mag_sum = float(mags.sum())
    ori_sum = float(oris.sum())
    return FrameDescriptor(
        frame_index=frame_index,
        picker_id=picker_id,
        sample_count=count,
        mag_stats=_stats(mags),
        ori_stats=_stats(oris),
        mag_sum=mag_sum,
        ori_sum=ori_sum,
        cs_term=mag_sum * ori_sum / (2.0 * count),
    )


def parameter_vector(history: Sequence[FrameDescriptor]) -> ParameterVector:
    """Parameter vector from the newest descriptor plus a trailing window.

    Spatial attributes come from the newest frame; the correlation-sensitivity
    attribute is averaged over the whole window, which the caller limits to
    the rolling-window length.
    """
    if not history:
        raise DataError("parameter_vector requires a non-empty descriptor history")
    picker = history[0].picker_id
    for prev, cur in zip(history, history[1:]):
        if cur.picker_id != picker:
            raise DataError(f"descriptor history mixes pickers {picker!r} and {cur.picker_id!r}")
        if cur.frame_index != prev.frame_index + 1:
            raise DataError(
                f"descriptor history not consecutive: frame {prev.frame_index} followed by {cur.frame_index}"
            )
    newest = history[-1]
    cs_mean = float(np.mean([d.cs_term for d in history]))
    return ParameterVector(
        mag_range=newest.mag_stats.range,
        cs_mean=cs_mean,
        ori_max=newest.ori_stats.max,
        ori_min=newest.ori_stats.min,
    )


def cs_total(descriptors: Iterable[FrameDescriptor]) -> float:
    """Correlation sensitivity accumulated over a set of frames."""
    return float(np.sum([d.cs_term for d in descriptors]))


def write_descriptor_csv(descriptors: Iterable[FrameDescriptor], path: str | Path) -> None:
    """Dump descriptors, one row per (frame, picker)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DESCRIPTOR_CSV_HEADER.split(","))
        for d in descriptors:
            writer.writerow(
                [
                    d.frame_index,
                    d.picker_id,
                    d.sample_count,
                    repr(d.mag_stats.min),
                    repr(d.mag_stats.max),
                    repr(d.mag_stats.mean),
                    repr(d.mag_stats.std),
                    repr(d.mag_stats.range),
                    repr(d.mag_stats.rms),
                    repr(d.ori_stats.min),
                    repr(d.ori_stats.max),
                    repr(d.ori_stats.mean),
                    repr(d.ori_stats.std),
                    repr(d.ori_stats.range),
                    repr(d.ori_stats.rms),
                    repr(d.mag_sum),
                    repr(d.ori_sum),
                    repr(d.cs_term),
                ]
            )
