"""
Readers and writers for the binary snapshot formats and the CSV point / observation files.

All binary formats are little-endian and start with a 4 byte magic followed by a u32 version:

* ``DWPT`` particle snapshots: u64 count, then one packed record per particle (see :data:`PARTICLE_DTYPE`)
* ``DWGF`` grid field dumps: 3 x u32 dims, u32 channel count, channel name table (u32 length + utf-8 bytes per
  name), then node-major float64 data with the channels interleaved per node
* ``DWFF`` force fields: u32 timestep count, 3 x u32 dims, then per timestep node-major (fx, fy, fz) float64
"""

import numpy as np
import os
from typing import Dict, Sequence, Tuple

from windmpm.errors import FormatError

FORMAT_VERSION = 1
MAGIC_PARTICLES = b'DWPT'
MAGIC_GRID = b'DWGF'
MAGIC_FORCE = b'DWFF'

FLAG_MARKER = 1
FLAG_INTERNAL = 2

PARTICLE_DTYPE = np.dtype([
    ('x', '<f8', (3,)),
    ('v', '<f8', (3,)),
    ('mass', '<f8'),
    ('volume0', '<f8'),
    ('C', '<f8', (9,)),
    ('F', '<f8', (9,)),
    ('material_id', '<u4'),
    ('flags', '<u4'),
])
_PARTICLE_HEADER = np.dtype([('magic', 'S4'), ('version', '<u4'), ('count', '<u8')])
_GRID_HEADER = np.dtype([('magic', 'S4'), ('version', '<u4'), ('dims', '<u4', (3,)), ('nchan', '<u4')])
_FORCE_HEADER = np.dtype([('magic', 'S4'), ('version', '<u4'), ('steps', '<u4'), ('dims', '<u4', (3,))])

GRID_CHANNELS = ('rho', 'ux', 'uy', 'uz', 'Sxx', 'Syy', 'Szz', 'Sxy', 'Sxz', 'Syz', 'solid')


def _read_bytes(path: str) -> bytes:
    if not os.path.exists(path):
        raise FormatError(f'File does not exist: {path}')
    with open(path, 'rb') as fd:
        return fd.read()


def _write_bytes(path: str, chunks: Sequence[bytes]) -> None:
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, 'wb') as fd:
        for chunk in chunks:
            fd.write(chunk)


def _check_header(header, magic: bytes, path: str) -> None:
    if header['magic'] != magic:
        raise FormatError(f'Bad magic {header["magic"]!r} (expected {magic!r}) in {path}')
    if int(header['version']) != FORMAT_VERSION:
        raise FormatError(f'Unsupported version {int(header["version"])} in {path}')


def write_particles(path: str, records: np.ndarray) -> None:
    """
    Write a DWPT particle snapshot.

    :param path: output file
    :param records: structured array with dtype :data:`PARTICLE_DTYPE`
    """
    records = np.ascontiguousarray(records, dtype=PARTICLE_DTYPE)
    header = np.zeros((), dtype=_PARTICLE_HEADER)
    header['magic'] = MAGIC_PARTICLES
    header['version'] = FORMAT_VERSION
    header['count'] = len(records)
    _write_bytes(path, [header.tobytes(), records.tobytes()])


def read_particles(path: str) -> np.ndarray:
    """
    Read a DWPT particle snapshot into a structured array with dtype :data:`PARTICLE_DTYPE`.

    :param path: input file
    :return: particle records
    """
    raw = _read_bytes(path)
    if len(raw) < _PARTICLE_HEADER.itemsize:
        raise FormatError(f'Truncated particle header in {path}')
    header = np.frombuffer(raw, dtype=_PARTICLE_HEADER, count=1)[0]
    _check_header(header, MAGIC_PARTICLES, path)
    count = int(header['count'])
    expected = _PARTICLE_HEADER.itemsize + count * PARTICLE_DTYPE.itemsize
    if len(raw) != expected:
        raise FormatError(f'Payload size {len(raw)} does not match {count} particles ({expected} bytes) in {path}')
    return np.frombuffer(raw, dtype=PARTICLE_DTYPE, count=count, offset=_PARTICLE_HEADER.itemsize).copy()


def write_grid_field(path: str, channels: Dict[str, np.ndarray]) -> None:
    """
    Write a DWGF grid dump.  Every channel is a (nx, ny, nz) array; channel order is the dict order.

    :param path: output file
    :param channels: ordered mapping of channel name to per-node values
    """
    if not channels:
        raise FormatError(f'No channels given for grid dump {path}')
    names = list(channels.keys())
    dims = np.shape(channels[names[0]])
    if len(dims) != 3:
        raise FormatError(f'Grid channels must be 3-dimensional, got shape {dims} for {path}')
    for name in names:
        if np.shape(channels[name]) != dims:
            raise FormatError(f'Channel {name} has shape {np.shape(channels[name])}, expected {dims} for {path}')

    header = np.zeros((), dtype=_GRID_HEADER)
    header['magic'] = MAGIC_GRID
    header['version'] = FORMAT_VERSION
    header['dims'] = dims
    header['nchan'] = len(names)

    chunks = [header.tobytes()]
    for name in names:
        encoded = name.encode('utf-8')
        chunks.append(np.array([len(encoded)], dtype='<u4').tobytes())
        chunks.append(encoded)
    data = np.stack([np.asarray(channels[name], dtype='<f8') for name in names], axis=-1)
    chunks.append(np.ascontiguousarray(data).tobytes())
    _write_bytes(path, chunks)


def read_grid_field(path: str) -> Dict[str, np.ndarray]:
    """
    Read a DWGF grid dump.

    :param path: input file
    :return: mapping of channel name to (nx, ny, nz) float64 arrays, in file order
    """
    raw = _read_bytes(path)
    if len(raw) < _GRID_HEADER.itemsize:
        raise FormatError(f'Truncated grid header in {path}')
    header = np.frombuffer(raw, dtype=_GRID_HEADER, count=1)[0]
    _check_header(header, MAGIC_GRID, path)
    dims = tuple(int(d) for d in header['dims'])
    nchan = int(header['nchan'])

    offset = _GRID_HEADER.itemsize
    names = []
    for _ in range(nchan):
        if offset + 4 > len(raw):
            raise FormatError(f'Truncated channel name table in {path}')
        nlen = int(np.frombuffer(raw, dtype='<u4', count=1, offset=offset)[0])
        offset += 4
        names.append(raw[offset:offset + nlen].decode('utf-8'))
        offset += nlen

    nvals = int(np.prod(dims)) * nchan
    if len(raw) - offset != nvals * 8:
        raise FormatError(f'Payload size {len(raw) - offset} does not match dims {dims} x {nchan} channels in {path}')
    data = np.frombuffer(raw, dtype='<f8', count=nvals, offset=offset).reshape(dims + (nchan,))
    return {name: data[..., c].copy() for c, name in enumerate(names)}


def write_force_field(path: str, forces: np.ndarray) -> None:
    """
    Write a DWFF force field.

    :param path: output file
    :param forces: array of shape (T, nx, ny, nz, 3) in newtons
    """
    forces = np.asarray(forces, dtype='<f8')
    if forces.ndim != 5 or forces.shape[-1] != 3:
        raise FormatError(f'Force field must have shape (T, nx, ny, nz, 3), got {forces.shape} for {path}')
    header = np.zeros((), dtype=_FORCE_HEADER)
    header['magic'] = MAGIC_FORCE
    header['version'] = FORMAT_VERSION
    header['steps'] = forces.shape[0]
    header['dims'] = forces.shape[1:4]
    _write_bytes(path, [header.tobytes(), np.ascontiguousarray(forces).tobytes()])


def read_force_field(path: str) -> np.ndarray:
    """
    Read a DWFF force field.

    :param path: input file
    :return: array of shape (T, nx, ny, nz, 3)
    """
    raw = _read_bytes(path)
    if len(raw) < _FORCE_HEADER.itemsize:
        raise FormatError(f'Truncated force field header in {path}')
    header = np.frombuffer(raw, dtype=_FORCE_HEADER, count=1)[0]
    _check_header(header, MAGIC_FORCE, path)
    steps = int(header['steps'])
    dims = tuple(int(d) for d in header['dims'])
    nvals = steps * int(np.prod(dims)) * 3
    if len(raw) - _FORCE_HEADER.itemsize != nvals * 8:
        raise FormatError(f'Payload size does not match {steps} timesteps of dims {dims} in {path}')
    data = np.frombuffer(raw, dtype='<f8', count=nvals, offset=_FORCE_HEADER.itemsize)
    return data.reshape((steps,) + dims + (3,)).copy()


def read_points_csv(path: str) -> np.ndarray:
    """
    Read an ``x,y,z`` point list.  A non-numeric first line is treated as a header.

    :param path: csv file
    :return: (N, 3) float array
    """
    if not os.path.exists(path):
        raise FormatError(f'File does not exist: {path}')
    with open(path, encoding='utf-8') as fd:
        first = fd.readline()
    skip = 0
    try:
        [float(c) for c in first.strip().split(',') if c]
    except ValueError:
        skip = 1
    try:
        points = np.loadtxt(path, delimiter=',', skiprows=skip, ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise FormatError(f'Could not parse points ({e}) in {path}')
    if points.size == 0:
        return np.zeros((0, 3))
    if points.shape[1] != 3:
        raise FormatError(f'Expected 3 columns (x,y,z), got {points.shape[1]} in {path}')
    return points


def write_points_csv(path: str, points: np.ndarray) -> None:
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    np.savetxt(path, np.asarray(points, dtype=np.float64).reshape(-1, 3), delimiter=',', header='x,y,z',
               comments='', fmt='%.17g')


def read_observations_csv(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read a marker observation file with header ``frame,particle,x,y,z``.  Every frame must list the same particles
    in the same order.

    :param path: csv file
    :return: (marker_ids (M,), positions (T+1, M, 3))
    """
    if not os.path.exists(path):
        raise FormatError(f'Observation file does not exist: {path}')
    with open(path, encoding='utf-8') as fd:
        header = fd.readline().strip().replace(' ', '')
    if header != 'frame,particle,x,y,z':
        raise FormatError(f'Expected header "frame,particle,x,y,z", got {header!r} in {path}')
    try:
        table = np.loadtxt(path, delimiter=',', skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise FormatError(f'Could not parse observations ({e}) in {path}')
    if table.size == 0:
        raise FormatError(f'No observations in {path}')

    frames = table[:, 0].astype(np.int64)
    particles = table[:, 1].astype(np.int64)
    frame_ids = np.unique(frames)
    if not np.array_equal(frame_ids, np.arange(len(frame_ids))):
        raise FormatError(f'Frames must be numbered 0..T without gaps, got {frame_ids.tolist()} in {path}')

    marker_ids = particles[frames == 0]
    positions = []
    for t in frame_ids:
        sel = frames == t
        if not np.array_equal(particles[sel], marker_ids):
            raise FormatError(f'Frame {t} does not list the same markers in the same order as frame 0 in {path}')
        positions.append(table[sel, 2:5])
    return marker_ids, np.stack(positions)


def write_observations_csv(path: str, marker_ids: np.ndarray, positions: np.ndarray) -> None:
    """
    :param path: output csv file
    :param marker_ids: (M,) particle indices
    :param positions: (T+1, M, 3) marker positions per frame
    """
    positions = np.asarray(positions, dtype=np.float64)
    nframes, nmarkers = positions.shape[:2]
    frames = np.repeat(np.arange(nframes), nmarkers)
    particles = np.tile(np.asarray(marker_ids, dtype=np.int64), nframes)
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fd:
        fd.write('frame,particle,x,y,z\n')
        for t, p, xyz in zip(frames, particles, positions.reshape(-1, 3)):
            fd.write(f'{int(t)},{int(p)},{float(xyz[0])!r},{float(xyz[1])!r},{float(xyz[2])!r}\n')
