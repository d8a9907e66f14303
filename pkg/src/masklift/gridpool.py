"""Voxel-grid pooling: one representative point per occupied voxel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import LabeledCloud
from .errors import ConfigError, MalformedInputError

# Cell indices are packed into one int64 (21 bits per axis) so voxel keys can
# be sorted and searched as scalars.  Packing with a common offset preserves
# lexicographic (ix, iy, iz) order.
_AXIS_BITS = 21
_MAX_CELL = (1 << (_AXIS_BITS - 1)) - 2


@dataclass(frozen=True)
class PoolConfig:
    voxel_size: float = 0.05

    def __post_init__(self):
        if not (self.voxel_size > 0 and np.isfinite(self.voxel_size)):
            raise ConfigError(f"voxel size must be positive and finite, got {self.voxel_size}")


def voxel_cells(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel index per point: floor(coordinate / voxel_size).

    The lattice is anchored at the world origin, so the same point always
    falls in the same voxel no matter which cloud it arrives in.
    """
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def pack_cells(cells: np.ndarray) -> np.ndarray:
    """Pack (N, 3) integer cells into sortable int64 keys."""
    if cells.size and np.abs(cells).max() > _MAX_CELL:
        raise MalformedInputError(
            f"cell index exceeds +-{_MAX_CELL}; coordinates are out of the supported range"
        )
    offset = np.int64(1 << (_AXIS_BITS - 1))
    shift = np.int64(1 << _AXIS_BITS)
    return ((cells[:, 0] + offset) * shift + (cells[:, 1] + offset)) * shift + (
        cells[:, 2] + offset
    )


def majority_nonzero(keys: np.ndarray, labels: np.ndarray, n_groups: int) -> np.ndarray:
    """Majority label per group, preferring nonzero labels.

    ``keys`` are group indices in [0, n_groups).  Within a group the winner
    is the most frequent nonzero label (ties to the smaller label); 0 wins
    only when every member is 0.
    """
    order = np.lexsort((labels, keys))
    ks, ls = keys[order], labels[order]
    if ks.size == 0:
        return np.zeros(n_groups, dtype=np.int64)
    run_start = np.ones(ks.size, dtype=bool)
    run_start[1:] = (ks[1:] != ks[:-1]) | (ls[1:] != ls[:-1])
    starts = np.flatnonzero(run_start)
    run_key = ks[starts]
    run_label = ls[starts]
    run_count = np.diff(np.append(starts, ks.size))
    # Rank runs: nonzero labels beat 0, then higher count, then smaller label.
    sel = np.lexsort((run_label, -run_count, (run_label == 0).astype(np.int8), run_key))
    rk, rl = run_key[sel], run_label[sel]
    first = np.ones(rk.size, dtype=bool)
    first[1:] = rk[1:] != rk[:-1]
    out = np.zeros(n_groups, dtype=np.int64)
    out[rk[first]] = rl[first]
    return out


def grid_pool(cloud: LabeledCloud, config: PoolConfig) -> LabeledCloud:
    """Pool a cloud to one point per occupied voxel.

    The representative point is the centroid of the voxel's members and its
    label is the majority nonzero label (see :func:`majority_nonzero`).
    Output points are sorted by voxel index, which makes pooling
    deterministic and idempotent.
    """
    if len(cloud) == 0:
        return cloud
    cells = voxel_cells(cloud.points, config.voxel_size)
    keys = pack_cells(cells)
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    counts = np.bincount(inverse, minlength=uniq.size).astype(np.float64)
    sums = np.zeros((uniq.size, 3), dtype=np.float64)
    np.add.at(sums, inverse, cloud.points.astype(np.float64))
    centroids = (sums / counts[:, None]).astype(np.float32)
    # Rounding the centroid to float32 can push it across its own voxel
    # boundary by an ulp; walk such coordinates back so pooling is idempotent.
    target = cells[first]
    for _ in range(4):
        diff = voxel_cells(centroids, config.voxel_size) - target
        if not diff.any():
            break
        toward = np.where(diff < 0, np.float32(np.inf), np.float32(-np.inf))
        centroids = np.where(diff != 0, np.nextafter(centroids, toward), centroids)
    labels = majority_nonzero(inverse, cloud.labels, uniq.size)
    return LabeledCloud(centroids, labels)
