"""
Exchange between the two solvers on their shared grid: particle positions become the LBM solid mask, LBM velocities
become aerodynamic drag forces on the MPM grid and the guide directions of the physics loss.
"""

from dataclasses import dataclass, field
import logging
import numpy as np
from scipy import ndimage
import time
from typing import Callable, Dict, List, Optional, Union

from windmpm.errors import ValidationError
from windmpm.lbm import LbmField, lbm_step, physical_velocity
from windmpm.mpm import MASS_EPSILON, ParticleSet, compute_stencil, scatter, substep
from windmpm.scene import FluidParams, Scene

SPEED_EPSILON = 1e-8

_DILATION = np.ones((3, 3, 3), dtype=bool)


@dataclass
class GuideField:
    """
    Unit wind directions per node.  Null directions (calm air) are NaN in ``d`` and False in ``valid``.
    """
    d: np.ndarray
    speed: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.d), axis=-1)

    @property
    def shape(self):
        return self.speed.shape

    @classmethod
    def uniform(cls, shape, direction, speed: float = 1.0) -> 'GuideField':
        direction = np.asarray(direction, dtype=np.float64)
        norm = np.linalg.norm(direction)
        if not norm > 0:
            raise ValidationError(f'Guide direction must be non-zero, got {direction}')
        d = np.broadcast_to(direction / norm, tuple(shape) + (3,)).copy()
        return cls(d=d, speed=np.full(tuple(shape), float(speed)))

    @classmethod
    def from_vectors(cls, vectors: np.ndarray) -> 'GuideField':
        """
        Normalise a (nx, ny, nz, 3) vector field; nodes with norm below SPEED_EPSILON become null.
        """
        speed = np.linalg.norm(vectors, axis=-1)
        ok = speed >= SPEED_EPSILON
        d = np.full(vectors.shape, np.nan)
        d[ok] = vectors[ok] / speed[ok][:, None]
        return cls(d=d, speed=speed)

    def to_channels(self) -> Dict[str, np.ndarray]:
        valid = self.valid
        return {
            'dx': np.where(valid, self.d[..., 0], 0.0), 'dy': np.where(valid, self.d[..., 1], 0.0),
            'dz': np.where(valid, self.d[..., 2], 0.0), 'speed': self.speed, 'valid': valid.astype(np.float64),
        }


def voxelize(particles: Union[ParticleSet, np.ndarray], scene: Scene) -> np.ndarray:
    """
    Solid mask: node w is occupied iff some particle has 0 <= x_p - x_w < dx on every axis.

    :param particles: particle set or (N, 3) positions
    :param scene: validated scene
    :return: (nx, ny, nz) boolean mask
    """
    x = particles.x if isinstance(particles, ParticleSet) else np.asarray(particles, dtype=np.float64).reshape(-1, 3)
    mask = np.zeros(scene.shape, dtype=bool)
    if len(x) == 0:
        return mask
    idx = np.floor((x - np.asarray(scene.domain_min)) * scene.inv_dx).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(scene.shape)), axis=1)
    if not np.all(inside):
        logging.debug(f'voxelize: {int(np.count_nonzero(~inside))} particles outside the grid ignored')
    idx = idx[inside]
    mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return mask


def drag_region(mask: np.ndarray) -> np.ndarray:
    """
    Nodes that receive drag: the solid mask grown by one node (26-neighbourhood).
    """
    if not np.any(mask):
        return np.zeros_like(mask, dtype=bool)
    return ndimage.binary_dilation(mask, structure=_DILATION)


def wind_velocity_si(fld: LbmField, scene: Scene, force: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Physical wind velocity in m/s as (nx, ny, nz, 3).
    """
    u = physical_velocity(fld, force)
    return np.moveaxis(scene.physical_velocity(u), 0, -1)


def drag_force(u_w: np.ndarray, fluid: FluidParams, mask: np.ndarray, scene: Scene) -> np.ndarray:
    """
    Aerodynamic drag F = 1/2 rho_w C_D A |v|^2 v/|v| on the nodes of :func:`drag_region`.

    :param u_w: (nx, ny, nz, 3) wind velocity in m/s
    :param fluid: fluid parameters (rho_w, c_d, drag_area)
    :param mask: solid mask from :func:`voxelize`
    :param scene: validated scene (reference area defaults to dx^2)
    :return: (nx, ny, nz, 3) nodal force in N
    """
    u_w = np.asarray(u_w, dtype=np.float64)
    if u_w.shape != scene.shape + (3,):
        raise ValidationError(f'Wind velocity has shape {u_w.shape}, expected {scene.shape + (3,)}')
    area = scene.dx ** 2 if fluid.drag_area is None else fluid.drag_area
    speed = np.linalg.norm(u_w, axis=-1)
    active = drag_region(mask) & (speed >= SPEED_EPSILON)
    force = np.zeros_like(u_w)
    force[active] = 0.5 * fluid.rho_w * fluid.c_d * area * speed[active][:, None] * u_w[active]
    return force


def guide_from_field(fld: LbmField, scene: Scene, force: Optional[np.ndarray] = None) -> GuideField:
    """
    Guide directions d = u_w/|u_w| from the LBM velocity, null where |u_w| < SPEED_EPSILON (m/s).
    """
    return GuideField.from_vectors(wind_velocity_si(fld, scene, force))


def nodal_mass(state: ParticleSet, scene: Scene) -> np.ndarray:
    stencil = compute_stencil(state.x, scene)
    return scatter(stencil, stencil.w * state.mass[:, None]).reshape(scene.shape)


def force_for_mode(force: np.ndarray, state: ParticleSet, scene: Scene) -> np.ndarray:
    """
    Express a nodal force in newtons the way the scene's force mode expects it: unchanged for 'nodal', divided by
    the nodal mass for 'acceleration'.
    """
    if scene.fluid.force_mode != 'acceleration':
        return force
    m = nodal_mass(state, scene)
    loaded = m > MASS_EPSILON
    return np.where(loaded[..., None], force / np.where(loaded, m, 1.0)[..., None], 0.0)


@dataclass
class ForwardResult:
    frames: List[ParticleSet]
    applied_forces: np.ndarray
    fields: List[LbmField] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=lambda: {'lbm': 0.0, 'coupling': 0.0, 'mpm': 0.0})
    lbm_steps: int = 0
    mpm_steps: int = 0


def simulate_coupled(state: ParticleSet, scene: Scene, frames: int, forces: Optional[np.ndarray] = None,
                     wind: bool = True, keep_fields: bool = False,
                     on_frame: Optional[Callable[[int, ParticleSet, LbmField], None]] = None) -> ForwardResult:
    """
    Forward simulation of the object in the wind.  Every substep voxelizes the particles, advances the LBM once
    with that solid mask, turns the wind into drag on the mask surface and advances MPM once under drag plus any
    prescribed force.

    :param state: initial particle state
    :param scene: validated scene
    :param frames: number of observation frames
    :param forces: optional prescribed (T, nx, ny, nz, 3) force fields added on top of the drag, one per frame
    :param wind: run the LBM and apply drag (False: prescribed forces only)
    :param keep_fields: keep a copy of the wind field at every frame
    :param on_frame: callback(frame, state, field) after every frame
    :return: per-frame states, the frame-averaged applied force and stage timings
    """
    if forces is not None and len(forces) < frames:
        raise ValidationError(f'{len(forces)} force fields given for {frames} frames')
    state.check_materials(scene)
    mu, lam = scene.lame_arrays(state.material_id)
    fld = LbmField.from_scene(scene) if wind else None
    result = ForwardResult(frames=[state], applied_forces=np.zeros((frames,) + scene.shape + (3,)))
    if keep_fields and fld is not None:
        result.fields.append(fld.copy())

    for t in range(frames):
        for _ in range(scene.substeps):
            total = np.zeros(scene.shape + (3,)) if forces is None else np.array(forces[t], dtype=np.float64)
            if wind:
                t0 = time.perf_counter()
                mask = voxelize(state, scene)
                t1 = time.perf_counter()
                lbm_step(fld, None, mask, scene)
                t2 = time.perf_counter()
                drag = drag_force(wind_velocity_si(fld, scene), scene.fluid, mask, scene)
                total = total + force_for_mode(drag, state, scene)
                t3 = time.perf_counter()
                result.timings['coupling'] += (t1 - t0) + (t3 - t2)
                result.timings['lbm'] += t2 - t1
                result.lbm_steps += 1
            t4 = time.perf_counter()
            state, _ = substep(state, total, scene, scene.dt_substep, mu, lam)
            result.timings['mpm'] += time.perf_counter() - t4
            result.mpm_steps += 1
            result.applied_forces[t] += total / scene.substeps
        result.frames.append(state)
        if keep_fields and fld is not None:
            result.fields.append(fld.copy())
        if on_frame is not None:
            on_frame(t + 1, state, fld)

    return result
