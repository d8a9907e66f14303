"""Labeled point cloud container used at every stage boundary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MalformedInputError


@dataclass(frozen=True)
class LabeledCloud:
    """Points with one instance label per point.

    Coordinates are float32 (matching on-disk storage, so stage boundaries
    round-trip bit-exactly) and labels are int64.  Label 0 means unlabeled.
    Both arrays are made read-only; a cloud never changes after construction.
    """

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise MalformedInputError(f"points must be (N, 3), got {pts.shape}")
        lab = np.ascontiguousarray(self.labels, dtype=np.int64)
        if lab.shape != (pts.shape[0],):
            raise MalformedInputError(
                f"labels must be ({pts.shape[0]},), got {lab.shape}"
            )
        if lab.size and lab.min() < 0:
            raise MalformedInputError("labels must be nonnegative")
        pts.flags.writeable = False
        lab.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "LabeledCloud":
        return cls(np.empty((0, 3), dtype=np.float32), np.empty(0, dtype=np.int64))

    def label_ids(self) -> np.ndarray:
        """Sorted nonzero label values present in the cloud."""
        ids = np.unique(self.labels)
        return ids[ids > 0]


def concat_clouds(a: LabeledCloud, b: LabeledCloud) -> LabeledCloud:
    return LabeledCloud(
        np.concatenate([a.points, b.points], axis=0),
        np.concatenate([a.labels, b.labels]),
    )
