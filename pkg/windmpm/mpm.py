"""
MLS-MPM solid simulator with quadratic B-spline kernels and a compressible Neo-Hookean material.

One substep is the composition :func:`p2g` -> :func:`grid_update` -> :func:`g2p` -> :func:`update_deformation`,
available as :func:`mpm_step`.  Grid nodes coincide with the LBM lattice: node (i, j, k) sits at
``domain_min + (i, j, k) * dx``.  Every particle's 3x3x3 kernel stencil must lie inside the grid.

Scatter uses ``np.bincount`` which accumulates in particle order, so repeated runs are bitwise identical.  A
threaded chunked scatter is available through :func:`configure_scatter`.

Example::

    scene = validate_scene(load_scene('scene.json'))
    state = ParticleSet.from_points(points, material_id=0, density=1000.0, scene=scene)
    for _ in range(scene.substeps):
        state = mpm_step(state, force, scene)
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
import logging
import numpy as np
from typing import List, Optional, Tuple, Union

from windmpm.errors import InversionError, SimulationError, ValidationError
from windmpm.scene import Material, Scene
from windmpm.utilities.format_utilities import FLAG_INTERNAL, FLAG_MARKER, PARTICLE_DTYPE, read_particles, \
    write_particles

MASS_EPSILON = 1e-10
DET_EPSILON = 1e-8
BOUNDARY_NODES = 3
# see configure_scatter
_SCATTER = {'workers': 1, 'deterministic': True}

# offsets of the 27 stencil nodes, x-major
_OFFSETS = np.stack(np.meshgrid(np.arange(3), np.arange(3), np.arange(3), indexing='ij'), axis=-1).reshape(27, 3)


@dataclass
class ParticleSet:
    x: np.ndarray
    v: np.ndarray
    mass: np.ndarray
    volume0: np.ndarray
    C: np.ndarray
    F: np.ndarray
    material_id: np.ndarray
    is_marker: np.ndarray
    is_internal: np.ndarray

    def __post_init__(self):
        n = len(self.x)
        for name, shape in (('x', (n, 3)), ('v', (n, 3)), ('mass', (n,)), ('volume0', (n,)), ('C', (n, 3, 3)),
                            ('F', (n, 3, 3)), ('material_id', (n,)), ('is_marker', (n,)), ('is_internal', (n,))):
            if np.shape(getattr(self, name)) != shape:
                raise ValidationError(f'ParticleSet.{name} has shape {np.shape(getattr(self, name))}, expected {shape}')

    def __len__(self):
        return len(self.x)

    @classmethod
    def from_points(cls, points: np.ndarray, material_id: int = 0, density: float = 1000.0,
                    particle_volume: Optional[float] = None, scene: Optional[Scene] = None,
                    velocity: Optional[np.ndarray] = None, markers: Optional[np.ndarray] = None,
                    internal: Optional[np.ndarray] = None) -> 'ParticleSet':
        """
        Build a particle set at rest (C = 0, F = I) from a point cloud.

        :param points: (N, 3) positions in meters
        :param material_id: material id shared by every particle
        :param density: rest density in kg/m^3, mass = density * particle_volume
        :param particle_volume: rest volume per particle, default (dx/2)^3 from ``scene``
        :param scene: scene supplying dx for the default volume
        :param velocity: optional initial velocity, (3,) or (N, 3)
        :param markers: boolean mask or index list of marker particles (default: all)
        :param internal: boolean mask of densified interior points
        :return: new particle set
        """
        x = np.array(points, dtype=np.float64).reshape(-1, 3)
        n = len(x)
        if particle_volume is None:
            if scene is None:
                raise ValidationError('particle_volume or scene is required to size particles')
            particle_volume = (0.5 * scene.dx) ** 3
        v = np.zeros((n, 3))
        if velocity is not None:
            v[:] = velocity
        is_marker = np.ones(n, dtype=bool)
        if markers is not None:
            markers = np.asarray(markers)
            if markers.dtype == bool:
                is_marker = markers.copy()
            else:
                is_marker = np.zeros(n, dtype=bool)
                is_marker[markers] = True
        is_internal = np.zeros(n, dtype=bool) if internal is None else np.asarray(internal, dtype=bool).copy()
        return cls(
            x=x, v=v, mass=np.full(n, density * particle_volume), volume0=np.full(n, float(particle_volume)),
            C=np.zeros((n, 3, 3)), F=np.tile(np.eye(3), (n, 1, 1)),
            material_id=np.full(n, material_id, dtype=np.int64), is_marker=is_marker, is_internal=is_internal,
        )

    def copy(self) -> 'ParticleSet':
        return ParticleSet(
            x=self.x.copy(), v=self.v.copy(), mass=self.mass.copy(), volume0=self.volume0.copy(), C=self.C.copy(),
            F=self.F.copy(), material_id=self.material_id.copy(), is_marker=self.is_marker.copy(),
            is_internal=self.is_internal.copy(),
        )

    def marker_indices(self) -> np.ndarray:
        return np.nonzero(self.is_marker)[0]

    def centroid(self) -> np.ndarray:
        return np.average(self.x, axis=0, weights=self.mass)

    def momentum(self) -> np.ndarray:
        return (self.mass[:, None] * self.v).sum(axis=0)

    def kinetic_energy(self) -> float:
        return float(0.5 * np.sum(self.mass * np.einsum('pi,pi->p', self.v, self.v)))

    def elastic_energy(self, scene: Scene) -> float:
        mu, lam = scene.lame_arrays(self.material_id)
        return float(np.sum(self.volume0 * neo_hookean_energy(self.F, mu, lam)))

    def gravity_potential(self, scene: Scene) -> float:
        return float(-np.sum(self.mass * (self.x @ np.asarray(scene.gravity))))

    def check_materials(self, scene: Scene) -> None:
        known = {m.id for m in scene.materials}
        unknown = sorted(set(np.unique(self.material_id).tolist()).difference(known))
        if unknown:
            raise ValidationError(f'Particles reference unknown material ids {unknown}; scene defines {sorted(known)}')

    def to_records(self) -> np.ndarray:
        rec = np.zeros(len(self), dtype=PARTICLE_DTYPE)
        rec['x'] = self.x
        rec['v'] = self.v
        rec['mass'] = self.mass
        rec['volume0'] = self.volume0
        rec['C'] = self.C.reshape(-1, 9)
        rec['F'] = self.F.reshape(-1, 9)
        rec['material_id'] = self.material_id
        rec['flags'] = self.is_marker * FLAG_MARKER + self.is_internal * FLAG_INTERNAL
        return rec

    @classmethod
    def from_records(cls, rec: np.ndarray) -> 'ParticleSet':
        flags = rec['flags'].astype(np.int64)
        return cls(
            x=rec['x'].astype(np.float64), v=rec['v'].astype(np.float64), mass=rec['mass'].astype(np.float64),
            volume0=rec['volume0'].astype(np.float64), C=rec['C'].reshape(-1, 3, 3).astype(np.float64),
            F=rec['F'].reshape(-1, 3, 3).astype(np.float64), material_id=rec['material_id'].astype(np.int64),
            is_marker=(flags & FLAG_MARKER) > 0, is_internal=(flags & FLAG_INTERNAL) > 0,
        )

    def save(self, path: str) -> None:
        write_particles(path, self.to_records())

    @classmethod
    def load(cls, path: str) -> 'ParticleSet':
        return cls.from_records(read_particles(path))


@dataclass
class MpmGrid:
    m: np.ndarray
    mom: np.ndarray
    v: np.ndarray
    f_ext: np.ndarray
    # velocity after forces and gravity, before the wall mask
    v_hat: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, shape: Tuple[int, int, int]) -> 'MpmGrid':
        return cls(m=np.zeros(shape), mom=np.zeros(shape + (3,)), v=np.zeros(shape + (3,)),
                   f_ext=np.zeros(shape + (3,)))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.m.shape

    def loaded(self) -> np.ndarray:
        return self.m > MASS_EPSILON


@dataclass
class Stencil:
    """
    Kernel data of every particle against its 27 neighbour nodes.

    * node: (N, 27) flat node indices
    * w: (N, 27) weights
    * dw: (N, 27, 3) weight gradients with respect to the particle position
    * d: (N, 27, 3) offsets x_i - x_p
    """
    node: np.ndarray
    w: np.ndarray
    dw: np.ndarray
    d: np.ndarray
    nnodes: int = 0


def compute_stencil(x: np.ndarray, scene: Scene) -> Stencil:
    """
    Quadratic B-spline weights of every particle.

    :param x: (N, 3) particle positions
    :param scene: validated scene
    :return: stencil
    """
    res = np.asarray(scene.shape)
    xi = (x - np.asarray(scene.domain_min)) * scene.inv_dx
    base = np.floor(xi - 0.5).astype(np.int64)
    bad = np.any((base < 0) | (base + 2 > res - 1), axis=1) | ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        idx = np.nonzero(bad)[0]
        raise SimulationError(f'{len(idx)} particles left the domain (kernel support outside the grid), '
                              f'first {idx[:10].tolist()} at {x[idx[:3]].tolist()}')
    fx = xi - base

    # per axis (N, 3 nodes, 3 axes)
    n0 = 0.5 * (1.5 - fx) ** 2
    n1 = 0.75 - (fx - 1.0) ** 2
    n2 = 0.5 * (fx - 0.5) ** 2
    dn0 = -(1.5 - fx)
    dn1 = -2.0 * (fx - 1.0)
    dn2 = fx - 0.5
    nw = np.stack([n0, n1, n2], axis=1)
    dnw = np.stack([dn0, dn1, dn2], axis=1) * scene.inv_dx

    ox, oy, oz = _OFFSETS[:, 0], _OFFSETS[:, 1], _OFFSETS[:, 2]
    wx, wy, wz = nw[:, ox, 0], nw[:, oy, 1], nw[:, oz, 2]
    w = wx * wy * wz
    dw = np.stack([dnw[:, ox, 0] * wy * wz, wx * dnw[:, oy, 1] * wz, wx * wy * dnw[:, oz, 2]], axis=-1)

    nodes = base[:, None, :] + _OFFSETS[None, :, :]
    node = np.ravel_multi_index((nodes[..., 0], nodes[..., 1], nodes[..., 2]), scene.shape)
    d = (_OFFSETS[None, :, :] - fx[:, None, :]) * scene.dx
    return Stencil(node=node, w=w, dw=dw, d=d, nnodes=int(np.prod(scene.shape)))


def configure_scatter(workers: int = 1, deterministic: bool = True) -> None:
    """
    Process-wide schedule of :func:`scatter`.  With ``workers > 1`` and ``deterministic=False`` the particles are
    split into ``workers`` contiguous chunks that are scattered on a thread pool, and the partial grids are summed in
    chunk order: results are reproducible for a fixed worker count only.  Deterministic mode keeps the single
    particle-ordered pass whatever the worker count.

    :param workers: thread count, at least 1
    :param deterministic: force the single ordered pass
    """
    if workers < 1:
        raise ValidationError(f'Scatter needs at least one worker, got {workers}')
    _SCATTER['workers'] = int(workers)
    _SCATTER['deterministic'] = bool(deterministic)


def _bincount(flat: np.ndarray, vals: np.ndarray, nnodes: int) -> np.ndarray:
    if vals.ndim == 1:
        return np.bincount(flat, weights=vals, minlength=nnodes)
    return np.stack([np.bincount(flat, weights=vals[:, k], minlength=nnodes) for k in range(vals.shape[1])], axis=-1)


def scatter(stencil: Stencil, values: np.ndarray) -> np.ndarray:
    """
    Sum per (particle, node) contributions onto the grid.

    :param stencil: particle stencil
    :param values: (N, 27) or (N, 27, k) contributions
    :return: (nnodes,) or (nnodes, k) node sums
    """
    flat = stencil.node.ravel()
    vals = values.ravel() if values.ndim == 2 else values.reshape(len(flat), -1)
    workers = _SCATTER['workers']
    n = len(stencil.node)
    if _SCATTER['deterministic'] or workers == 1 or n < 2 * workers:
        return _bincount(flat, vals, stencil.nnodes)

    # particle-major layout: chunk k owns rows bounds[k]:bounds[k + 1]
    bounds = np.linspace(0, n, workers + 1).astype(np.int64) * _OFFSETS.shape[0]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda ab: _bincount(flat[ab[0]:ab[1]], vals[ab[0]:ab[1]], stencil.nnodes),
                              zip(bounds[:-1], bounds[1:])))
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total


def gather(stencil: Stencil, node_values: np.ndarray) -> np.ndarray:
    """
    Node values seen by every (particle, node) pair: (nnodes, ...) -> (N, 27, ...).
    """
    return node_values[stencil.node]


def neo_hookean_energy(F: np.ndarray, mu: Union[float, np.ndarray], lam: Union[float, np.ndarray]) -> np.ndarray:
    """
    Energy density psi = mu/2 (tr(F^T F) - 3) - mu ln J + lam/2 (ln J)^2.

    :param F: (3, 3) or (N, 3, 3) deformation gradients
    :param mu: first Lamé parameter (scalar or per particle)
    :param lam: second Lamé parameter (scalar or per particle)
    :return: energy density per F
    """
    J = _checked_det(F)
    log_j = np.log(J)
    return 0.5 * mu * (np.einsum('...ij,...ij->...', F, F) - 3.0) - mu * log_j + 0.5 * lam * log_j ** 2


def neo_hookean_stress(F: np.ndarray, material: Union[Material, float, np.ndarray],
                       lam: Union[float, np.ndarray, None] = None) -> np.ndarray:
    """
    First Piola-Kirchhoff stress P = mu (F - F^-T) + lam ln(J) F^-T.

    :param F: (3, 3) or (N, 3, 3) deformation gradients with det F > DET_EPSILON
    :param material: a validated :class:`Material`, or mu directly (scalar or per particle) with ``lam`` given
    :param lam: second Lamé parameter when ``material`` is mu
    :return: P with the shape of F
    """
    mu, lam = _lame(material, lam)
    F = np.asarray(F, dtype=np.float64)
    log_j = np.log(_checked_det(F))
    F_inv_t = np.swapaxes(np.linalg.inv(F), -1, -2)
    mu = np.asarray(mu)[..., None, None]
    lam = np.asarray(lam)[..., None, None]
    return mu * (F - F_inv_t) + lam * log_j[..., None, None] * F_inv_t


def neo_hookean_stress_vjp(F: np.ndarray, G: np.ndarray, material: Union[Material, float, np.ndarray],
                           lam: Union[float, np.ndarray, None] = None) -> np.ndarray:
    """
    Contract the stress derivative with an upstream gradient: returns sum_kl G_kl dP_kl/dF.

    :param F: (N, 3, 3) deformation gradients
    :param G: (N, 3, 3) gradient of a scalar with respect to P
    :param material: :class:`Material` or mu
    :param lam: second Lamé parameter when ``material`` is mu
    :return: (N, 3, 3) gradient with respect to F
    """
    mu, lam = _lame(material, lam)
    log_j = np.log(_checked_det(F))
    F_inv_t = np.swapaxes(np.linalg.inv(F), -1, -2)
    mu = np.asarray(mu)[..., None, None]
    lam = np.asarray(lam)[..., None, None]
    g_dot = np.einsum('...ij,...ij->...', G, F_inv_t)[..., None, None]
    return (mu * G + (mu - lam * log_j[..., None, None]) * (F_inv_t @ np.swapaxes(G, -1, -2) @ F_inv_t)
            + lam * g_dot * F_inv_t)


def _lame(material, lam):
    if isinstance(material, Material):
        if material.mu is None:
            raise ValidationError(f'Material {material.name!r} has no Lamé parameters; validate the scene first')
        return material.mu, material.lam
    if lam is None:
        raise ValidationError('lam is required when mu is given directly')
    return material, lam


def _checked_det(F: np.ndarray) -> np.ndarray:
    J = np.linalg.det(F)
    bad = ~(J > DET_EPSILON)
    if np.any(bad):
        idx = np.nonzero(np.atleast_1d(bad))[0]
        raise InversionError(f'{len(idx)} particles have det(F) <= {DET_EPSILON} (inverted or degenerate), '
                             f'first {idx[:10].tolist()}', particles=idx.tolist())
    return J


@lru_cache(maxsize=16)
def _boundary_mask(shape: Tuple[int, int, int], wall_bc: Tuple[str, ...]) -> np.ndarray:
    mask = np.ones(shape + (3,))
    for axis in range(3):
        for side, tag in (('lo', wall_bc[2 * axis]), ('hi', wall_bc[2 * axis + 1])):
            sl = [slice(None)] * 3
            sl[axis] = slice(0, BOUNDARY_NODES) if side == 'lo' else slice(shape[axis] - BOUNDARY_NODES, None)
            if tag == 'sticky':
                mask[tuple(sl)] = 0.0
            elif tag == 'slip':
                mask[tuple(sl) + (axis,)] = 0.0
    mask.setflags(write=False)
    return mask


def boundary_mask(scene: Scene) -> np.ndarray:
    """
    Per node, per component multiplier applied to grid velocities by the walls: sticky bands zero every component,
    slip bands zero the wall-normal component, open and periodic faces leave velocities untouched.

    :param scene: validated scene
    :return: read-only (nx, ny, nz, 3) array of 0/1
    """
    return _boundary_mask(scene.shape, tuple(scene.wall_bc))


def p2g(particles: ParticleSet, scene: Scene, dt: Optional[float] = None,
        stencil: Optional[Stencil] = None, P: Optional[np.ndarray] = None,
        affine: Optional[np.ndarray] = None) -> MpmGrid:
    """
    Transfer mass and momentum to the grid, including the affine (APIC) term and the MLS stress impulse.

    :param particles: current state
    :param scene: validated scene
    :param dt: substep length (default scene.dt_substep)
    :param stencil: precomputed stencil of ``particles.x``
    :param P: precomputed first Piola-Kirchhoff stresses
    :param affine: precomputed affine matrices from :func:`affine_matrix`
    :return: grid with m and mom populated
    """
    dt = scene.dt_substep if dt is None else dt
    if stencil is None:
        stencil = compute_stencil(particles.x, scene)
    if P is None:
        mu, lam = scene.lame_arrays(particles.material_id)
        P = neo_hookean_stress(particles.F, mu, lam)

    A = affine_matrix(particles, P, scene, dt) if affine is None else affine
    wm = stencil.w * particles.mass[:, None]
    # m v + A d per (particle, node)
    contrib = particles.mass[:, None, None] * particles.v[:, None, :] + np.einsum('pij,pnj->pni', A, stencil.d)

    shape = scene.shape
    grid = MpmGrid.zeros(shape)
    grid.m = scatter(stencil, wm).reshape(shape)
    grid.mom = scatter(stencil, stencil.w[..., None] * contrib).reshape(shape + (3,))
    return grid


def affine_matrix(particles: ParticleSet, P: np.ndarray, scene: Scene, dt: float) -> np.ndarray:
    k = 4.0 * scene.inv_dx ** 2
    stress = -dt * k * particles.volume0[:, None, None] * (P @ np.swapaxes(particles.F, -1, -2))
    return particles.mass[:, None, None] * particles.C + stress


def grid_update(grid: MpmGrid, force_field: Optional[np.ndarray], scene: Scene,
                dt: Optional[float] = None) -> MpmGrid:
    """
    Momentum to velocity, plus wind force and gravity, then the wall mask.  Nodes with m <= MASS_EPSILON get zero
    velocity and receive no force.

    :param grid: output of :func:`p2g`
    :param force_field: (nx, ny, nz, 3) wind force (N in 'nodal' mode, m/s^2 in 'acceleration' mode), or None
    :param scene: validated scene
    :param dt: substep length (default scene.dt_substep)
    :return: the same grid with v, v_hat and f_ext set
    """
    dt = scene.dt_substep if dt is None else dt
    shape = scene.shape
    if force_field is None:
        force = np.zeros(shape + (3,))
    else:
        force = np.asarray(force_field, dtype=np.float64)
        if force.shape != shape + (3,):
            raise ValidationError(f'Force field has shape {force.shape}, expected {shape + (3,)}')

    loaded = grid.loaded()
    m_safe = np.where(loaded, grid.m, 1.0)[..., None]
    if scene.fluid.force_mode == 'acceleration':
        v_hat = grid.mom / m_safe + dt * (force + np.asarray(scene.gravity))
    else:
        v_hat = (grid.mom + dt * force) / m_safe + dt * np.asarray(scene.gravity)
    v_hat = np.where(loaded[..., None], v_hat, 0.0)

    mask = boundary_mask(scene)
    v = v_hat * mask
    if logging.getLogger().isEnabledFor(logging.DEBUG):
        clamped = int(np.count_nonzero(np.any((v != v_hat), axis=-1)))
        if clamped:
            logging.debug(f'wall boundary clamped {clamped} grid nodes')

    grid.f_ext = np.where(loaded[..., None], force, 0.0)
    grid.v_hat = v_hat
    grid.v = v
    return grid


def g2p(grid: MpmGrid, particles: ParticleSet, scene: Scene, dt: Optional[float] = None,
        stencil: Optional[Stencil] = None) -> ParticleSet:
    """
    Gather velocities and affine matrices back to the particles and advect them.  F is left for
    :func:`update_deformation`.

    :param grid: grid with velocities
    :param particles: state the grid was built from
    :param scene: validated scene
    :param dt: substep length
    :param stencil: stencil of ``particles.x``
    :return: new particle set
    """
    dt = scene.dt_substep if dt is None else dt
    if stencil is None:
        stencil = compute_stencil(particles.x, scene)
    vi = gather(stencil, grid.v.reshape(-1, 3))
    v = np.einsum('pn,pni->pi', stencil.w, vi)
    C = 4.0 * scene.inv_dx ** 2 * np.einsum('pn,pni,pnj->pij', stencil.w, vi, stencil.d)

    out = particles.copy()
    out.v = v
    out.C = C
    out.x = particles.x + dt * v
    return out


def update_deformation(particles: ParticleSet, dt: float) -> ParticleSet:
    """
    F <- (I + dt C) F.  Raises :class:`InversionError` if any det(F) drops to DET_EPSILON or below.
    """
    particles.F = (np.eye(3) + dt * particles.C) @ particles.F
    _checked_det(particles.F)
    return particles


@dataclass
class SubstepRecord:
    """
    Intermediates of one substep kept for the reverse pass.
    """
    state: ParticleSet
    stencil: Stencil
    P: np.ndarray
    grid: MpmGrid
    affine: np.ndarray = field(repr=False, default=None)
    mu: np.ndarray = field(repr=False, default=None)
    lam: np.ndarray = field(repr=False, default=None)


def substep(state: ParticleSet, force_field: Optional[np.ndarray], scene: Scene, dt: float,
            mu: np.ndarray, lam: np.ndarray) -> Tuple[ParticleSet, SubstepRecord]:
    stencil = compute_stencil(state.x, scene)
    P = neo_hookean_stress(state.F, mu, lam)
    A = affine_matrix(state, P, scene, dt)
    grid = p2g(state, scene, dt, stencil=stencil, P=P, affine=A)
    grid = grid_update(grid, force_field, scene, dt)
    out = g2p(grid, state, scene, dt, stencil=stencil)
    update_deformation(out, dt)
    return out, SubstepRecord(state=state, stencil=stencil, P=P, grid=grid, affine=A, mu=mu, lam=lam)


def mpm_step(state: ParticleSet, force_field: Optional[np.ndarray], scene: Scene,
             dt: Optional[float] = None) -> ParticleSet:
    """
    Advance the particles by one substep under a fixed wind force field.

    :param state: current particle state (not modified)
    :param force_field: (nx, ny, nz, 3) wind force or None
    :param scene: validated scene
    :param dt: substep length (default scene.dt_substep)
    :return: new particle state
    """
    dt = scene.dt_substep if dt is None else dt
    mu, lam = scene.lame_arrays(state.material_id)
    out, _ = substep(state, force_field, scene, dt, mu, lam)
    return out


def simulate_frames(state: ParticleSet, forces: Optional[np.ndarray], scene: Scene, frames: int) -> List[ParticleSet]:
    """
    Run ``frames`` observation intervals of ``scene.substeps`` substeps each; the force of interval t is held
    constant over its substeps.

    :param state: initial state
    :param forces: (T, nx, ny, nz, 3) per-frame forces with T >= frames, or None for no wind
    :param scene: validated scene
    :param frames: number of frames to simulate
    :return: list of frames + 1 states, starting with ``state``
    """
    if forces is not None and len(forces) < frames:
        raise ValidationError(f'{len(forces)} force fields given for {frames} frames')
    mu, lam = scene.lame_arrays(state.material_id)
    trajectory = [state]
    for t in range(frames):
        force = None if forces is None else forces[t]
        for _ in range(scene.substeps):
            state, _ = substep(state, force, scene, scene.dt_substep, mu, lam)
        trajectory.append(state)
    return trajectory
