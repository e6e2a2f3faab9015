"""Optical-flow computation/ingestion, motion magnification, and the
landmark-to-token front half of local AU feature extraction.

Everything here is pure; per-sample calls are safe to run in parallel.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import cv2
import numpy as np
import torch

from .core import AUTaskSpec, FlowField, MicroAUError, TokenGrid


class SizeMismatchError(MicroAUError):
    pass


class EstimatorFailureError(MicroAUError):
    pass


class NonPositiveFactorError(MicroAUError):
    pass


class OutOfBoundsError(MicroAUError):
    pass


# Farneback settings tuned for small, textured displacements (the
# micro-expression regime: a few pixels between onset and apex).
_FARNEBACK_PARAMS = dict(
    pyr_scale=0.5, levels=3, winsize=15, iterations=3, poly_n=5, poly_sigma=1.2, flags=0
)


def _to_gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim == 3:
        return cv2.cvtColor(frame, cv2.COLOR_BGR2GRAY)
    return frame


def _farneback(onset: np.ndarray, apex: np.ndarray) -> np.ndarray:
    return cv2.calcOpticalFlowFarneback(onset, apex, None, **_FARNEBACK_PARAMS)


ESTIMATORS: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "farneback": _farneback,
}


def compute_flow(
    onset: np.ndarray,
    apex: np.ndarray,
    method: Union[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = "farneback",
) -> FlowField:
    """Dense onset->apex flow at the frame resolution.

    `method` is either a registered estimator name or any callable taking two
    grayscale frames and returning an (h, w, 2) motion field. Precomputed flow
    files bypass this entirely (see read_flow).
    """
    onset = np.asarray(onset)
    apex = np.asarray(apex)
    if onset.shape[:2] != apex.shape[:2]:
        raise SizeMismatchError(f"onset {onset.shape[:2]} vs apex {apex.shape[:2]}")
    if callable(method):
        estimator = method
    else:
        estimator = ESTIMATORS.get(method)
        if estimator is None:
            raise EstimatorFailureError(f"unknown flow estimator {method!r}; have {sorted(ESTIMATORS)}")
    if onset.shape == apex.shape and np.array_equal(onset, apex):
        # identical frames carry no motion; numerical estimators are not
        # exactly zero there, so short-circuit for consistency
        return FlowField(np.zeros((onset.shape[0], onset.shape[1], 2), dtype=np.float32))
    try:
        flow = estimator(_to_gray(onset), _to_gray(apex))
    except MicroAUError:
        raise
    except Exception as exc:
        raise EstimatorFailureError(f"flow estimator failed: {exc}") from exc
    return FlowField(np.asarray(flow, dtype=np.float32))


def magnify_flow(flow: FlowField, factor: float) -> FlowField:
    """Scale every motion vector; linear stand-in for learned magnification."""
    if not factor > 0:
        raise NonPositiveFactorError(f"magnification factor must be > 0, got {factor}")
    return FlowField(flow.data * np.float32(factor))


def resize_flow(flow: FlowField, size: int) -> FlowField:
    """Spatially resample the field to size x size (vector values untouched)."""
    if flow.h0 == size and flow.w0 == size:
        return flow
    resized = cv2.resize(flow.data, (size, size), interpolation=cv2.INTER_LINEAR)
    return FlowField(resized)


def render_flow_image(flow: FlowField) -> np.ndarray:
    """Render the 2-channel field as an (h, w, 3) float image in [0, 1].

    Channels are (dx, dy, magnitude), each min-max normalized per sample; a
    constant channel maps to zeros. This is the bridge from flow to encoders
    expecting 3-channel images and is the single place to swap conventions.
    """
    dx = flow.data[..., 0]
    dy = flow.data[..., 1]
    mag = np.sqrt(dx * dx + dy * dy)
    channels = []
    for ch in (dx, dy, mag):
        lo, hi = float(ch.min()), float(ch.max())
        if hi > lo:
            channels.append((ch - lo) / (hi - lo))
        else:
            channels.append(np.zeros_like(ch))
    return np.stack(channels, axis=-1).astype(np.float32)


def write_flow(path: str, flow: FlowField) -> None:
    """Persist as a Middlebury .flo file (magic + w/h header + float32 dx,dy grid)."""
    if not cv2.writeOpticalFlow(str(path), flow.data):
        raise MicroAUError(f"could not write flow file {path}")


def read_flow(path: str) -> FlowField:
    flow = cv2.readOpticalFlow(str(path))
    if flow is None:
        raise MicroAUError(f"could not read flow file {path}")
    return FlowField(flow)


# ---------------------------------------------------------------------------
# Landmark -> token mapping
# ---------------------------------------------------------------------------


def map_landmark_to_token(
    landmark: Sequence[float], image_size: tuple[int, int], grid_size: tuple[int, int]
) -> tuple[int, int]:
    """Grid cell of an (x, y) pixel landmark: floor-scaled and clamped.

    row = floor(y * h / h0), col = floor(x * w / w0), clamped into the grid so
    boundary landmarks (x = w0 - 1) stay valid. x indexes columns, y rows.
    """
    x, y = float(landmark[0]), float(landmark[1])
    h0, w0 = image_size
    h, w = grid_size
    if not (0 <= x < w0 and 0 <= y < h0):
        raise OutOfBoundsError(f"landmark ({x}, {y}) outside {w0}x{h0} image")
    row = min(int(np.floor(y * h / h0)), h - 1)
    col = min(int(np.floor(x * w / w0)), w - 1)
    return row, col


def au_token_indices(
    spec: AUTaskSpec, landmarks: np.ndarray, image_size: tuple[int, int], grid_size: tuple[int, int]
) -> list[np.ndarray]:
    """Per AU, the flattened grid indices (row * w + col) of its landmarks, in
    spec order. Duplicate cells are kept: two landmarks may share a cell."""
    h, w = grid_size
    out = []
    for indices in spec.landmark_indices:
        cells = np.empty(len(indices), dtype=np.int64)
        for j, lm_index in enumerate(indices):
            row, col = map_landmark_to_token(landmarks[lm_index], image_size, grid_size)
            cells[j] = row * w + col
        out.append(cells)
    return out


class AUTokenGroups:
    """Per-AU ordered lists of patch tokens gathered at landmark cells."""

    def __init__(self, groups: list[torch.Tensor]):
        self.groups = groups

    def __len__(self) -> int:
        return len(self.groups)

    def __getitem__(self, n: int) -> torch.Tensor:
        return self.groups[n]


def gather_au_tokens(
    grid: TokenGrid,
    spec: AUTaskSpec,
    landmarks: np.ndarray,
    image_size: tuple[int, int],
) -> AUTokenGroups:
    """Collect each AU's patch tokens at its landmarks' grid cells, spec order."""
    flat = grid.tokens.reshape(grid.h * grid.w, grid.d)
    indices = au_token_indices(spec, landmarks, image_size, (grid.h, grid.w))
    groups = [flat[torch.from_numpy(cells)] for cells in indices]
    return AUTokenGroups(groups)


def prepare_flow(
    sample_flow: FlowField, magnification: float, input_size: int
) -> tuple[FlowField, torch.Tensor]:
    """Magnify, resize, render: the fixed preprocessing chain in front of the
    visual encoder. Returns the resized field and a (3, S, S) image tensor."""
    flow = magnify_flow(sample_flow, magnification)
    flow = resize_flow(flow, input_size)
    image = render_flow_image(flow)
    tensor = torch.from_numpy(image).permute(2, 0, 1).contiguous()
    return flow, tensor
