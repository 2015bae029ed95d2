"""Two-level activity classification and the end-to-end pipeline.

Frame level: each attribute of the parameter vector votes picking / not
picking against its calibrated threshold and the majority wins, with ties
resolved by label persistence and then by the not-picking default.  Batch
frame level: the most frequent frame label in a trailing window, mapped to
the two scheduler signals.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .calibration import CalibrationModel
from .descriptors import (
    ATTRIBUTES,
    FrameDescriptor,
    MorMask,
    ParameterVector,
    frame_descriptor,
    mask_flow,
    parameter_vector,
)
from .errors import DataError
from .flow import DEFAULT_PYRAMID, FlowField, GrayFrame, PyramidConfig, estimate_flow_sequence

__all__ = [
    "PICKING",
    "NOT_PICKING",
    "WAIT_TO_FINISH",
    "CALL_A_ROBOT",
    "FL_TO_BFL",
    "FlLabel",
    "BflLabel",
    "ActivityTimeline",
    "PipelineConfig",
    "attribute_votes",
    "classify_frame",
    "rolling_mode",
    "describe_dataset",
    "classify_series",
    "run_pipeline",
    "write_timeline_csv",
    "plot_series",
    "write_plot_csv",
]

PICKING = "P"
NOT_PICKING = "NP"
WAIT_TO_FINISH = "WaitToFinish"
CALL_A_ROBOT = "CallARobot"
FL_TO_BFL = {PICKING: WAIT_TO_FINISH, NOT_PICKING: CALL_A_ROBOT}


@dataclass(frozen=True)
class FlLabel:
    """Frame-level decision with the per-attribute votes behind it."""

    frame_index: int
    picker_id: str
    label: str
    votes: dict[str, bool]


@dataclass(frozen=True)
class BflLabel:
    """Batch-frame-level decision and the frame labels it was voted from."""

    frame_index: int
    picker_id: str
    label: str
    window: tuple[str, ...]


@dataclass
class ActivityTimeline:
    """Per-picker label sequences plus the scheduler signals."""

    picker_id: str
    fl: list[FlLabel] = field(default_factory=list)
    bfl: list[BflLabel] = field(default_factory=list)
    signals: list[tuple[int, str]] = field(default_factory=list)


@dataclass(frozen=True)
class PipelineConfig:
    """End-to-end settings: flow parameters, rolling window, optional grid subsampling."""

    flow: PyramidConfig = DEFAULT_PYRAMID
    window: int = 5
    grid_step: int = 1

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.grid_step < 1:
            raise ValueError("grid_step must be >= 1")


def attribute_votes(vector: ParameterVector, calibration: CalibrationModel) -> dict[str, bool]:
    """True means the attribute votes for the picking class."""
    votes = {}
    for name in ATTRIBUTES:
        threshold = calibration.threshold(name)
        value = vector.value(name)
        if calibration.polarity(name) == "below":
            votes[name] = value < threshold
        else:
            votes[name] = value > threshold
    return votes


def classify_frame(
    vector: ParameterVector,
    calibration: CalibrationModel,
    prev: FlLabel | None = None,
    attributes: Sequence[str] = ATTRIBUTES,
    frame_index: int = 0,
    picker_id: str = "",
) -> FlLabel:
    """Majority vote of the listed attributes; ties keep the previous label, else NP.

    All four votes are always recorded; ``attributes`` only restricts which of
    them count toward the label, which is how algorithm variants are run.
    """
    if not attributes:
        raise ValueError("attribute subset must be non-empty")
    unknown = [a for a in attributes if a not in ATTRIBUTES]
    if unknown:
        raise ValueError(f"unknown attributes in subset: {unknown}")
    votes = attribute_votes(vector, calibration)
    picking = sum(votes[a] for a in attributes)
    not_picking = len(attributes) - picking
    if picking > not_picking:
        label = PICKING
    elif not_picking > picking:
        label = NOT_PICKING
    else:
        label = prev.label if prev is not None else NOT_PICKING
    return FlLabel(frame_index=frame_index, picker_id=picker_id, label=label, votes=votes)


def rolling_mode(fl_history: Sequence[FlLabel], window: int = 5) -> BflLabel:
    """Most frequent frame label over the trailing window; ties go to the newest frame."""
    if not fl_history:
        raise DataError("rolling_mode requires at least one frame label")
    tail = list(fl_history[-window:])
    counts = Counter(item.label for item in tail)
    p = counts.get(PICKING, 0)
    np_ = counts.get(NOT_PICKING, 0)
    if p > np_:
        winner = PICKING
    elif np_ > p:
        winner = NOT_PICKING
    else:
        winner = tail[-1].label
    newest = tail[-1]
    return BflLabel(
        frame_index=newest.frame_index,
        picker_id=newest.picker_id,
        label=FL_TO_BFL[winner],
        window=tuple(item.label for item in tail),
    )


def describe_dataset(
    frames: Sequence[GrayFrame],
    masks: Mapping[tuple[int, str], MorMask],
    picker_ids: Sequence[str],
    cfg: PipelineConfig = PipelineConfig(),
    flow_fields: Sequence[FlowField] | None = None,
) -> dict[str, list[tuple[FrameDescriptor, ParameterVector]]]:
    """Flow -> masked samples -> descriptors -> parameter vectors, per picker.

    The descriptor of frame f measures the motion between frames f and f+1 on
    frame f's mask, so frames 0..N-2 are described.  An empty or missing mask
    propagates the previous parameter vector flagged stale and resets the
    trailing descriptor window, since the window must stay frame-consecutive.
    ``flow_fields`` short-circuits flow estimation (e.g. from a cache).
    """
    result: dict[str, list[tuple[FrameDescriptor, ParameterVector]]] = {p: [] for p in picker_ids}
    histories: dict[str, list[FrameDescriptor]] = {p: [] for p in picker_ids}
    previous: dict[str, ParameterVector | None] = {p: None for p in picker_ids}

    if flow_fields is not None:
        if len(flow_fields) != max(len(frames) - 1, 0):
            raise DataError(
                f"expected {max(len(frames) - 1, 0)} cached flow fields for "
                f"{len(frames)} frames, got {len(flow_fields)}"
            )
        flows: Iterable[FlowField] = flow_fields
    else:
        flows = estimate_flow_sequence(frames, cfg.flow)

    for index, flow_field in enumerate(flows):
        for picker in picker_ids:
            mask = masks.get((index, picker))
            if mask is not None and (mask.height, mask.width) != (flow_field.height, flow_field.width):
                raise DataError(
                    f"mask (frame {index}, picker {picker}) is {mask.width}x{mask.height} "
                    f"but frames are {flow_field.width}x{flow_field.height}"
                )
            if mask is None or mask.is_empty:
                descriptor = frame_descriptor([], index, picker)
                carried = previous[picker]
                if carried is None:
                    vector = parameter_vector([descriptor])
                vector_fields = carried if carried is not None else vector
                vector = ParameterVector(
                    mag_range=vector_fields.mag_range,
                    cs_mean=vector_fields.cs_mean,
                    ori_max=vector_fields.ori_max,
                    ori_min=vector_fields.ori_min,
                    stale=True,
                )
                histories[picker] = []
            else:
                samples = mask_flow(flow_field, mask, cfg.grid_step)
                descriptor = frame_descriptor(samples, index, picker)
                history = histories[picker]
                history.append(descriptor)
                if len(history) > cfg.window:
                    del history[0]
                vector = parameter_vector(history)
            previous[picker] = vector
            result[picker].append((descriptor, vector))
    return result


def classify_series(
    vectors: Sequence[ParameterVector],
    calibration: CalibrationModel,
    picker_id: str,
    attributes: Sequence[str] = ATTRIBUTES,
    frame_indices: Sequence[int] | None = None,
) -> list[FlLabel]:
    """Classify a vector sequence, threading label persistence through ties."""
    labels: list[FlLabel] = []
    prev: FlLabel | None = None
    for i, vector in enumerate(vectors):
        frame_index = frame_indices[i] if frame_indices is not None else i
        label = classify_frame(
            vector,
            calibration,
            prev=prev,
            attributes=attributes,
            frame_index=frame_index,
            picker_id=picker_id,
        )
        labels.append(label)
        prev = label
    return labels


def _timeline_from_fl(picker_id: str, fl: list[FlLabel], window: int) -> ActivityTimeline:
    timeline = ActivityTimeline(picker_id=picker_id)
    timeline.fl = fl
    for end in range(1, len(fl) + 1):
        bfl = rolling_mode(fl[:end], window)
        timeline.bfl.append(bfl)
        if not timeline.signals or timeline.signals[-1][1] != bfl.label:
            timeline.signals.append((bfl.frame_index, bfl.label))
    return timeline


def run_pipeline(
    frames: Sequence[GrayFrame],
    masks: Mapping[tuple[int, str], MorMask],
    calibration: CalibrationModel,
    cfg: PipelineConfig = PipelineConfig(),
    picker_ids: Sequence[str] | None = None,
    flow_fields: Sequence[FlowField] | None = None,
) -> dict[str, ActivityTimeline]:
    """Full chain from frames and masks to per-picker timelines with signals."""
    if picker_ids is None:
        picker_ids = sorted({picker for _, picker in masks})
    described = describe_dataset(frames, masks, picker_ids, cfg, flow_fields=flow_fields)
    timelines: dict[str, ActivityTimeline] = {}
    for picker in picker_ids:
        vectors = [vector for _, vector in described[picker]]
        indices = [descriptor.frame_index for descriptor, _ in described[picker]]
        fl = classify_series(vectors, calibration, picker, frame_indices=indices)
        timelines[picker] = _timeline_from_fl(picker, fl, cfg.window)
    return timelines


def write_timeline_csv(timelines: Mapping[str, ActivityTimeline], path: str | Path) -> None:
    """One row per (frame, picker); the signal column is empty except on transitions."""
    rows = []
    for picker in sorted(timelines):
        timeline = timelines[picker]
        transition_frames = dict(timeline.signals)
        for fl, bfl in zip(timeline.fl, timeline.bfl):
            signal = transition_frames.get(fl.frame_index, "")
            rows.append((fl.frame_index, picker, fl.label, bfl.label, signal))
    rows.sort(key=lambda row: (row[0], row[1]))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "picker_id", "fl_label", "bfl_label", "signal"])
        writer.writerows(rows)


def plot_series(timeline: ActivityTimeline) -> list[tuple[int, int, int]]:
    """(frame, fl value, bfl value) step series with picking / wait-to-finish as 1."""
    series = []
    for fl, bfl in zip(timeline.fl, timeline.bfl):
        series.append(
            (
                fl.frame_index,
                1 if fl.label == PICKING else 0,
                1 if bfl.label == WAIT_TO_FINISH else 0,
            )
        )
    return series


def write_plot_csv(timelines: Mapping[str, ActivityTimeline], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["picker_id", "frame_index", "fl_value", "bfl_value"])
        for picker in sorted(timelines):
            for frame, fl_value, bfl_value in plot_series(timelines[picker]):
                writer.writerow([picker, frame, fl_value, bfl_value])
