"""Lift per-frame 2D instance masks into labeled 3D point clouds."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, CameraPose, DepthFrame, DEFAULT_MAX_DEPTH, unproject_frame
from .cloud import LabeledCloud
from .errors import MalformedInputError


@dataclass(frozen=True)
class MaskImage:
    """Frame-local instance masks as a label image plus per-mask confidence.

    ``labels[v, u]`` holds the frame-local mask ID of the pixel (0 = none).
    Every nonzero label appearing in the image must have a confidence entry;
    confidence keys without pixels are allowed (fully occluded masks).
    """

    width: int
    height: int
    labels: np.ndarray
    confidences: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise MalformedInputError(f"mask size must be positive, got {self.width}x{self.height}")
        lab = np.ascontiguousarray(self.labels)
        if lab.size != self.width * self.height:
            raise MalformedInputError(
                f"mask array has {lab.size} values, expected {self.width * self.height}"
            )
        lab = lab.reshape(self.height, self.width).astype(np.int64)
        if lab.size and lab.min() < 0:
            raise MalformedInputError("mask labels must be nonnegative")
        present = set(np.unique(lab).tolist()) - {0}
        conf = {int(k): float(v) for k, v in self.confidences.items()}
        if any(k <= 0 for k in conf):
            raise MalformedInputError("mask IDs must be positive")
        missing = present - set(conf)
        if missing:
            raise MalformedInputError(f"mask IDs without confidence: {sorted(missing)}")
        lab.flags.writeable = False
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "confidences", conf)

    def mask_ids(self) -> list[int]:
        return sorted(self.confidences)


@dataclass(frozen=True)
class RawMaskSet:
    """Possibly-overlapping binary masks with scores, before flattening."""

    width: int
    height: int
    masks: np.ndarray  # (K, H, W) bool
    scores: np.ndarray  # (K,) float

    def __post_init__(self):
        m = np.ascontiguousarray(self.masks).astype(bool)
        s = np.ascontiguousarray(self.scores, dtype=np.float64).reshape(-1)
        if m.ndim != 3 or m.shape[1:] != (self.height, self.width):
            raise MalformedInputError(
                f"masks must be (K, {self.height}, {self.width}), got {m.shape}"
            )
        if s.shape[0] != m.shape[0]:
            raise MalformedInputError(f"{m.shape[0]} masks but {s.shape[0]} scores")
        object.__setattr__(self, "masks", m)
        object.__setattr__(self, "scores", s)


def resolve_overlaps(raw: RawMaskSet) -> MaskImage:
    """Flatten overlapping binary masks into a single label image.

    Masks get frame-local IDs 1..K in input order.  Where masks overlap the
    higher-scoring one wins; on equal scores the smaller ID wins.
    """
    best = np.full((raw.height, raw.width), -np.inf)
    out = np.zeros((raw.height, raw.width), dtype=np.int64)
    for k in range(raw.masks.shape[0]):
        m = raw.masks[k]
        take = m & (raw.scores[k] > best)
        out[take] = k + 1
        best[take] = raw.scores[k]
    conf = {k + 1: float(raw.scores[k]) for k in range(raw.masks.shape[0])}
    return MaskImage(raw.width, raw.height, out, conf)


class IdAllocator:
    """Hands out disjoint contiguous blocks of global mask IDs, starting at 1.

    Thread-safe; ID 0 is never issued (it stays reserved for "unlabeled").
    """

    def __init__(self, start: int = 1):
        if start < 1:
            raise MalformedInputError(f"allocator must start at >= 1, got {start}")
        self._next = start
        self._lock = threading.Lock()

    def reserve(self, count: int) -> int:
        """Reserve ``count`` consecutive IDs and return the first one."""
        if count < 0:
            raise MalformedInputError(f"cannot reserve {count} IDs")
        with self._lock:
            base = self._next
            self._next += count
            return base

    @property
    def next_id(self) -> int:
        return self._next


def remap_local_labels(
    local_labels: np.ndarray, mask_ids: list[int], base: int
) -> np.ndarray:
    """Map frame-local mask IDs to the global block [base, base+len).

    ``mask_ids`` must be sorted; rank within it decides the offset, so the
    mapping depends only on the ID set, not on pixel contents.  Label 0 is
    kept as 0.
    """
    out = np.zeros_like(local_labels, dtype=np.int64)
    for rank, mid in enumerate(mask_ids):
        out[local_labels == mid] = base + rank
    return out


def lift_frame(
    mask: MaskImage,
    frame: DepthFrame,
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
    allocator: IdAllocator,
    stride: int = 1,
    max_depth: float = DEFAULT_MAX_DEPTH,
) -> LabeledCloud:
    """Unproject one frame and label its points with global mask IDs.

    Reserves one contiguous ID block sized by the frame's mask count (even
    for masks that end up with no valid-depth pixels), so clouds lifted from
    different frames never share nonzero labels.
    """
    if (mask.width, mask.height) != (frame.width, frame.height):
        raise MalformedInputError(
            f"mask is {mask.width}x{mask.height} but depth is {frame.width}x{frame.height}"
        )
    pixels, points = unproject_frame(frame, intrinsics, pose, stride, max_depth)
    local = mask.labels[pixels[:, 1], pixels[:, 0]]
    ids = mask.mask_ids()
    base = allocator.reserve(len(ids))
    return LabeledCloud(points, remap_local_labels(local, ids, base))
