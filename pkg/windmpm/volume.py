"""
Interior densification of a surface point cloud: voxelize the points into a shell, flood the exterior from the
grid boundary and sample one jittered point in every enclosed voxel.
"""

from dataclasses import dataclass
import logging
import numpy as np
from scipy import ndimage
from typing import Optional, Sequence, Tuple

from windmpm.errors import ValidationError

EMPTY = 0
SHELL = 1
INTERIOR = 2
# voxels a caller marks as occluded in every view; fill_interior treats them as interior
UNSEEN = 3

DEFAULT_JITTER = 0.25

_FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


@dataclass
class OccupancyGrid:
    state: np.ndarray
    bounds_min: np.ndarray
    bounds_max: np.ndarray

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=np.uint8)
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)

    @property
    def resolution(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.state.shape)

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bounds_max - self.bounds_min) / np.asarray(self.resolution)

    def count(self, state: int) -> int:
        return int(np.count_nonzero(self.state == state))

    def centers(self, state: int) -> np.ndarray:
        idx = np.argwhere(self.state == state)
        return self.bounds_min + (idx + 0.5) * self.voxel_size

    def copy(self) -> 'OccupancyGrid':
        return OccupancyGrid(self.state.copy(), self.bounds_min.copy(), self.bounds_max.copy())


def _check_resolution(resolution) -> Tuple[int, int, int]:
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    if np.any(res < 2):
        raise ValidationError(f'Occupancy resolution must be at least 2 per axis, got {tuple(res)}')
    return tuple(int(n) for n in res)


def fit_bounds(points: np.ndarray, resolution) -> Tuple[np.ndarray, np.ndarray]:
    """
    Bounding box of ``points`` widened by one voxel on every side, so the boundary layer stays empty.
    """
    res = np.asarray(_check_resolution(resolution), dtype=np.float64)
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    extent = hi - lo
    extent = np.where(extent > 0, extent, max(float(extent.max()), 1.0))
    if np.any(res < 3):
        raise ValidationError(f'Fitting bounds needs a resolution of at least 3 per axis, got {tuple(res)}')
    pad = extent / (res - 2.0)
    return lo - pad, lo + extent + pad


def shell_voxelize(points: np.ndarray, resolution, bounds: Sequence) -> OccupancyGrid:
    """
    Mark every voxel containing at least one point as shell.

    :param points: (N, 3) positions
    :param resolution: voxels per axis (int or 3 ints), >= 2
    :param bounds: (min, max) corners of the voxelized box
    :return: grid with SHELL and EMPTY voxels
    """
    res = _check_resolution(resolution)
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if not np.all(hi > lo):
        raise ValidationError(f'Occupancy bounds must satisfy max > min, got {lo} and {hi}')
    grid = OccupancyGrid(np.zeros(res, dtype=np.uint8), lo, hi)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return grid

    idx = np.floor((points - lo) / grid.voxel_size).astype(np.int64)
    # points exactly on the max face belong to the last voxel
    on_max = np.isclose(points, hi)
    idx = np.where(on_max, np.asarray(res) - 1, idx)
    inside = np.all((idx >= 0) & (idx < np.asarray(res)), axis=1)
    if not np.all(inside):
        logging.debug(f'shell_voxelize: {int(np.count_nonzero(~inside))} points outside the bounds ignored')
    idx = idx[inside]
    grid.state[idx[:, 0], idx[:, 1], idx[:, 2]] = SHELL
    return grid


def fill_interior(grid: OccupancyGrid) -> OccupancyGrid:
    """
    Flood the empty voxels from the grid boundary (6-connectivity); empty components the flood never reaches
    become interior.  A shell with a hole therefore encloses nothing.
    """
    out = grid.copy()
    out.state[out.state == UNSEEN] = INTERIOR
    empty = out.state == EMPTY
    labels, n = ndimage.label(empty, structure=_FACE_CONNECTIVITY)
    if n == 0:
        return out

    faces = np.concatenate([
        labels[0].ravel(), labels[-1].ravel(), labels[:, 0].ravel(), labels[:, -1].ravel(),
        labels[:, :, 0].ravel(), labels[:, :, -1].ravel(),
    ])
    exterior = np.zeros(n + 1, dtype=bool)
    exterior[np.unique(faces)] = True
    enclosed = empty & ~exterior[labels]
    out.state[enclosed] = INTERIOR
    logging.debug(f'fill_interior: {n} empty components, {int(np.count_nonzero(enclosed))} voxels enclosed')
    return out


def interior_count(grid: OccupancyGrid) -> int:
    return grid.count(INTERIOR)


def sample_interior(grid: OccupancyGrid, jitter: float = DEFAULT_JITTER, seed: Optional[int] = 0) -> np.ndarray:
    """
    One point per interior voxel at the voxel center plus a uniform offset of at most ``jitter`` voxel sizes per
    axis.

    :param grid: filled grid
    :param jitter: fraction of the voxel size in [0, 0.5)
    :param seed: random seed
    :return: (K, 3) points in voxel order
    """
    if not 0.0 <= jitter < 0.5:
        raise ValidationError(f'jitter must lie in [0, 0.5), got {jitter}')
    centers = grid.centers(INTERIOR)
    if jitter == 0.0 or len(centers) == 0:
        return centers
    rng = np.random.default_rng(seed)
    return centers + rng.uniform(-jitter, jitter, size=centers.shape) * grid.voxel_size


def densify(points: np.ndarray, resolution, bounds: Optional[Sequence] = None, jitter: float = DEFAULT_JITTER,
            seed: Optional[int] = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Surface points plus sampled interior points.

    :param points: (N, 3) surface points
    :param resolution: voxels per axis
    :param bounds: (min, max) box, default the point bounds widened by one voxel
    :param jitter: interior sample jitter
    :param seed: random seed
    :return: ((N + K, 3) points, (N + K,) is_internal flags)
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return points, np.zeros(0, dtype=bool)
    if bounds is None:
        bounds = fit_bounds(points, resolution)
    grid = fill_interior(shell_voxelize(points, resolution, bounds))
    inner = sample_interior(grid, jitter, seed)
    if len(inner) == 0:
        logging.warning(f'densify: no enclosed voxels among {grid.count(SHELL)} shell voxels; the shell may be open '
                        f'or too sparse for resolution {grid.resolution}')
    flags = np.concatenate([np.zeros(len(points), dtype=bool), np.ones(len(inner), dtype=bool)])
    return np.concatenate([points, inner]), flags
