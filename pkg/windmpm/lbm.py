"""
Wind solver.  A moment-encoded lattice Boltzmann scheme on D3Q27 stores only (rho, u, S) per node and rebuilds the
post-collision distributions from a third-order Hermite expansion every step; :func:`bgk_step` is a classical
single-relaxation-time solver with Guo forcing kept as a cross-check.

Everything here is in lattice units (dx = dt = 1).  Arrays are component-first: ``u`` is (3, nx, ny, nz), ``S`` is
(6, nx, ny, nz) with components ordered xx, yy, zz, xy, xz, yz and distributions are (27, nx, ny, nz).

``S`` is stored shifted, rho S = sum_i (c_i c_i - cs2 I) f_i, so a fluid at rest has S = 0 and the equilibrium
value is u u.  :func:`raw_second_moment` adds cs2 I back.

The stored ``u`` is the post-collision velocity, which includes half of the current step's force impulse;
:func:`physical_velocity` removes it.

Example::

    field = LbmField.from_scene(scene)
    for _ in range(100):
        field = lbm_step(field, force, solid, scene)
"""

from dataclasses import dataclass, field as dc_field, replace
import itertools
import logging
import numpy as np
from typing import Optional, Tuple

from windmpm.errors import InstabilityError, ValidationError
from windmpm.scene import CS2, FACES, MACH_MAX, MACH_WARN, Scene

SYM_INDEX = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
SYM_NAMES = ('xx', 'yy', 'zz', 'xy', 'xz', 'yz')
# third-order Hermite components carried by D3Q27, with their multiplicity in the full tensor sum
THIRD_ORDER = (((0, 0, 1), 3), ((0, 1, 1), 3), ((0, 0, 2), 3), ((0, 2, 2), 3), ((1, 1, 2), 3), ((1, 2, 2), 3),
               ((0, 1, 2), 6))


@dataclass(frozen=True)
class LatticeSpec:
    q: int
    c: np.ndarray
    w: np.ndarray
    opp: np.ndarray
    cs2: float = CS2

    @property
    def h2(self) -> np.ndarray:
        """
        (q, 6) second-order Hermite polynomials c_a c_b - cs2 delta_ab.
        """
        return np.stack([self.c[:, a] * self.c[:, b] - self.cs2 * (a == b) for a, b in SYM_INDEX], axis=1)

    @property
    def h3(self) -> np.ndarray:
        """
        (q, 7) third-order Hermite polynomials in :data:`THIRD_ORDER` order.
        """
        cols = []
        for (a, b, g), _ in THIRD_ORDER:
            c = self.c
            cols.append(c[:, a] * c[:, b] * c[:, g]
                        - self.cs2 * (c[:, a] * (b == g) + c[:, b] * (a == g) + c[:, g] * (a == b)))
        return np.stack(cols, axis=1)

    def mirror(self, axis: int) -> np.ndarray:
        """
        Index of the velocity with its ``axis`` component negated, for every direction.
        """
        flipped = self.c.copy()
        flipped[:, axis] *= -1
        return np.array([int(np.nonzero(np.all(self.c == v, axis=1))[0][0]) for v in flipped])


def d3q27() -> LatticeSpec:
    c = np.array(sorted(itertools.product((-1, 0, 1), repeat=3), key=lambda v: (sum(map(abs, v)), v)),
                 dtype=np.int64)
    weights = {0: 8.0 / 27.0, 1: 2.0 / 27.0, 2: 1.0 / 54.0, 3: 1.0 / 216.0}
    w = np.array([weights[int(np.abs(ci).sum())] for ci in c])
    opp = np.array([int(np.nonzero(np.all(c == -ci, axis=1))[0][0]) for ci in c])
    return LatticeSpec(q=27, c=c, w=w, opp=opp)


D3Q27 = d3q27()
_H2 = D3Q27.h2
_H3 = D3Q27.h3
# H2 : rho S counts off-diagonal entries twice
_H2_SUM = _H2 * np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
_H3_SUM = _H3 * np.array([m for _, m in THIRD_ORDER], dtype=np.float64)


@dataclass(frozen=True)
class Boundary:
    walls: Tuple[str, ...] = ('periodic',) * 6
    inlet_face: Optional[str] = None
    inlet_velocity: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def from_scene(cls, scene: Scene) -> 'Boundary':
        fluid = scene.fluid
        inlet_face = None
        u_in = (0.0, 0.0, 0.0)
        if fluid.inlet_speed > 0:
            axis = int(np.argmax(np.abs(fluid.inlet_dir)))
            face = FACES[2 * axis] if fluid.inlet_dir[axis] > 0 else FACES[2 * axis + 1]
            if scene.wall(face) == 'open':
                inlet_face = face
                u_in = tuple(float(c) for c in scene.lattice_velocity(fluid.inlet_speed * np.asarray(fluid.inlet_dir)))
            else:
                logging.warning(f'inlet face {face} is tagged {scene.wall(face)!r}, not open; no inlet imposed')
        return cls(walls=tuple(scene.wall_bc), inlet_face=inlet_face, inlet_velocity=u_in)


@dataclass
class LbmField:
    rho: np.ndarray
    u: np.ndarray
    S: np.ndarray
    solid: np.ndarray
    tau: float
    boundary: Boundary = dc_field(default_factory=Boundary)
    lattice: LatticeSpec = D3Q27
    # post-collision distributions, kept between steps by the BGK solver only
    f: Optional[np.ndarray] = None

    @classmethod
    def create(cls, shape: Tuple[int, int, int], tau: float, boundary: Optional[Boundary] = None) -> 'LbmField':
        """
        Fluid at rest with unit density.

        :param shape: nodes per axis
        :param tau: relaxation time, must exceed 0.5
        :param boundary: face treatment (default fully periodic)
        :return: new field
        """
        if not tau > 0.5:
            raise ValidationError(f'LBM relaxation time must exceed 0.5, got tau={tau}')
        shape = tuple(int(n) for n in shape)
        return cls(rho=np.ones(shape), u=np.zeros((3,) + shape), S=np.zeros((6,) + shape),
                   solid=np.zeros(shape, dtype=bool), tau=float(tau), boundary=boundary or Boundary())

    @classmethod
    def from_scene(cls, scene: Scene) -> 'LbmField':
        """
        Field on the scene grid with its wall tags and inlet, initialised to uniform flow at the inlet velocity.
        """
        boundary = Boundary.from_scene(scene)
        fld = cls.create(scene.shape, scene.fluid.tau, boundary)
        return init_equilibrium(fld, 1.0, boundary.inlet_velocity)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.rho.shape

    def copy(self) -> 'LbmField':
        return replace(self, rho=self.rho.copy(), u=self.u.copy(), S=self.S.copy(), solid=self.solid.copy(),
                       f=None if self.f is None else self.f.copy())

    def velocity_nodes(self) -> np.ndarray:
        """
        Stored velocity as (nx, ny, nz, 3).
        """
        return np.moveaxis(self.u, 0, -1)

    def to_channels(self) -> dict:
        channels = {'rho': self.rho, 'ux': self.u[0], 'uy': self.u[1], 'uz': self.u[2]}
        for k, name in enumerate(SYM_NAMES):
            channels['S' + name] = self.S[k]
        channels['solid'] = self.solid.astype(np.float64)
        return channels


def init_equilibrium(fld: LbmField, rho0: float, u0) -> LbmField:
    """
    Set a uniform equilibrium state: rho = rho0, u = u0, S = u0 u0.

    :param fld: field to initialise (modified in place and returned)
    :param rho0: lattice density, > 0
    :param u0: lattice velocity 3-vector, |u0| <= 0.3
    :return: the field
    """
    u0 = np.asarray(u0, dtype=np.float64)
    if not rho0 > 0:
        raise ValidationError(f'Initial lattice density must be positive, got {rho0}')
    speed = float(np.linalg.norm(u0))
    if speed > MACH_MAX:
        raise ValidationError(f'Initial lattice speed {speed:.3g} exceeds the low-Mach limit {MACH_MAX}')
    if speed > MACH_WARN:
        logging.warning(f'Initial lattice speed {speed:.3g} is above {MACH_WARN}; compressibility errors grow')
    fld.rho[...] = rho0
    fld.u[...] = u0[:, None, None, None]
    for k, (a, b) in enumerate(SYM_INDEX):
        fld.S[k] = u0[a] * u0[b]
    fld.u[:, fld.solid] = 0.0
    fld.S[:, fld.solid] = 0.0
    fld.f = None
    return fld


def _third_order_coefficients(u: np.ndarray, S: np.ndarray) -> np.ndarray:
    # a_abg / rho = u_a S_bg + u_b S_ag + u_g S_ab - 2 u_a u_b u_g
    def s(a, b):
        return S[SYM_INDEX.index((min(a, b), max(a, b)))]

    return np.stack([u[a] * s(b, g) + u[b] * s(a, g) + u[g] * s(a, b) - 2.0 * u[a] * u[b] * u[g]
                     for (a, b, g), _ in THIRD_ORDER])


def reconstruct_distributions(fld: LbmField) -> np.ndarray:
    """
    Post-collision distributions from the stored moments:

        f_i = w_i rho [1 + c_i.u / cs2 + H2_i : S / (2 cs2^2) + sum H3_i a3 / (6 cs2^3)]

    :param fld: field with rho, u, S populated
    :return: (27, nx, ny, nz) distributions
    """
    lat = fld.lattice
    cs2 = lat.cs2
    cu = np.einsum('qa,a...->q...', lat.c.astype(np.float64), fld.u) / cs2
    second = np.einsum('qk,k...->q...', _H2_SUM, fld.S) / (2.0 * cs2 ** 2)
    third = np.einsum('qk,k...->q...', _H3_SUM, _third_order_coefficients(fld.u, fld.S)) / (6.0 * cs2 ** 3)
    return lat.w[:, None, None, None] * fld.rho[None] * (1.0 + cu + second + third)


def equilibrium_distributions(rho: np.ndarray, u: np.ndarray, lattice: LatticeSpec = D3Q27) -> np.ndarray:
    """
    Second-order polynomial equilibrium used by the BGK solver.
    """
    cu = np.einsum('qa,a...->q...', lattice.c.astype(np.float64), u)
    uu = np.einsum('a...,a...->...', u, u)
    return lattice.w[:, None, None, None] * rho[None] * (1.0 + cu / lattice.cs2 + 0.5 * cu ** 2 / lattice.cs2 ** 2
                                                         - 0.5 * uu[None] / lattice.cs2)


def compute_moments(f: np.ndarray, force: Optional[np.ndarray] = None,
                    lattice: LatticeSpec = D3Q27) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    rho = sum f, rho u = sum c f + F/2, rho S = sum (c c - cs2 I) f.

    :param f: (27, nx, ny, nz) distributions
    :param force: (3, nx, ny, nz) lattice force density or None
    :param lattice: lattice
    :return: (rho, u, S)
    """
    rho = f.sum(axis=0)
    mom = np.einsum('qa,q...->a...', lattice.c.astype(np.float64), f)
    if force is not None:
        mom = mom + 0.5 * force
    with np.errstate(divide='ignore', invalid='ignore'):
        u = mom / rho[None]
        S = np.einsum('qk,q...->k...', lattice.h2, f) / rho[None]
    return rho, u, S


def stream(f: np.ndarray, solid: Optional[np.ndarray] = None, boundary: Optional[Boundary] = None,
           rho: Optional[np.ndarray] = None, lattice: LatticeSpec = D3Q27) -> np.ndarray:
    """
    Pull streaming f'_i(x) = f_i(x - c_i).  Links whose source is a solid node or a sticky face are replaced by
    half-way bounce-back f'_i(x) = f_opp(i)(x); the inlet face adds the moving-wall term 2 w_i rho c_i.u_in / cs2;
    slip faces reflect specularly, f'_i(x) = f_m(i)(x - t_i) with m(i) the mirrored direction and t_i the tangential
    part of c_i; open faces copy the streamed value of the adjacent interior node; periodic faces wrap.

    :param f: (27, nx, ny, nz) post-collision distributions
    :param solid: (nx, ny, nz) solid flags or None
    :param boundary: face treatment (default fully periodic)
    :param rho: node densities used by the inlet term (default sum of f)
    :param lattice: lattice
    :return: streamed distributions
    """
    boundary = boundary or Boundary()
    c = lattice.c
    out = np.empty_like(f)
    for i in range(lattice.q):
        out[i] = np.roll(f[i], shift=tuple(int(s) for s in c[i]), axis=(0, 1, 2))

    if solid is not None and np.any(solid):
        for i in range(1, lattice.q):
            src_solid = np.roll(solid, shift=tuple(int(s) for s in c[i]), axis=(0, 1, 2))
            out[i] = np.where(src_solid, f[lattice.opp[i]], out[i])

    open_faces = []
    for face, tag in zip(FACES, boundary.walls):
        if tag == 'periodic':
            continue
        axis = FACES.index(face) // 2
        lo = face.endswith('-')
        plane = [slice(None)] * 3
        plane[axis] = 0 if lo else -1
        plane = tuple(plane)
        incoming = np.nonzero(c[:, axis] == (1 if lo else -1))[0]
        if tag == 'slip':
            mirror = lattice.mirror(axis)
            for i in incoming:
                tangential = tuple(0 if a == axis else int(c[i][a]) for a in range(3))
                out[i][plane] = np.roll(f[mirror[i]], shift=tangential, axis=(0, 1, 2))[plane]
            continue
        if tag == 'open' and face != boundary.inlet_face:
            open_faces.append((axis, lo, plane, incoming))
            continue
        for i in incoming:
            out[i][plane] = f[lattice.opp[i]][plane]
        if face == boundary.inlet_face:
            rho_face = (f.sum(axis=0) if rho is None else rho)[plane]
            u_in = np.asarray(boundary.inlet_velocity)
            for i in incoming:
                out[i][plane] += 2.0 * lattice.w[i] * rho_face * float(c[i] @ u_in) / lattice.cs2

    for axis, lo, plane, incoming in open_faces:
        inner = [slice(None)] * 3
        inner[axis] = 1 if lo else -2
        inner = tuple(inner)
        for i in incoming:
            out[i][plane] = out[i][inner]

    return out


def moment_update(rho_s: np.ndarray, u_s: np.ndarray, S_s: np.ndarray, force: Optional[np.ndarray],
                  tau: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Collision in moment space.  Takes the post-streaming raw moments (rho*, u*, S*) and returns the post-collision
    moments at t+1:

        u_a  = u*_a + F_a / (2 rho*)
        S_ab = (1 - 1/tau) S*_ab + u*_a u*_b / tau + (2 tau - 1) / (2 tau rho*) (F_a u*_b + F_b u*_a)     (a != b)
        S_aa = (tau - 1)/(3 tau) (2 S*_aa - S*_bb - S*_gg) + (2 u*_a^2 - u*_b^2 - u*_g^2) / (3 tau) + |u*|^2 / 3
               + F_a u*_a / rho* + (tau - 1)/(3 tau rho*) (2 F_a u*_a - F_b u*_b - F_g u*_g)

    :param rho_s: (nx, ny, nz) density
    :param u_s: (3, ...) velocity including the half-force correction
    :param S_s: (6, ...) shifted second moment
    :param force: (3, ...) lattice force density or None
    :param tau: relaxation time
    :return: (rho, u, S)
    """
    if force is None:
        force = np.zeros_like(u_s)
    inv_tau = 1.0 / tau
    u2 = np.einsum('a...,a...->...', u_s, u_s)
    fu = force * u_s

    u = u_s + force / (2.0 * rho_s[None])
    S = np.empty_like(S_s)
    for k, (a, b) in enumerate(SYM_INDEX):
        if a == b:
            o1, o2 = [g for g in range(3) if g != a]
            S[k] = ((tau - 1.0) / (3.0 * tau) * (2.0 * S_s[a] - S_s[o1] - S_s[o2])
                    + inv_tau / 3.0 * (2.0 * u_s[a] ** 2 - u_s[o1] ** 2 - u_s[o2] ** 2)
                    + u2 / 3.0
                    + fu[a] / rho_s
                    + (tau - 1.0) / (3.0 * tau * rho_s) * (2.0 * fu[a] - fu[o1] - fu[o2]))
        else:
            S[k] = ((1.0 - inv_tau) * S_s[k] + inv_tau * u_s[a] * u_s[b]
                    + (2.0 * tau - 1.0) / (2.0 * tau * rho_s) * (force[a] * u_s[b] + force[b] * u_s[a]))
    return rho_s.copy(), u, S


def _apply_solid(fld: LbmField, solid_mask: Optional[np.ndarray]) -> None:
    if solid_mask is None:
        return
    solid_mask = np.asarray(solid_mask, dtype=bool)
    if solid_mask.shape != fld.shape:
        raise ValidationError(f'Solid mask has shape {solid_mask.shape}, expected {fld.shape}')
    uncovered = fld.solid & ~solid_mask
    fld.solid = solid_mask.copy()
    if np.any(uncovered):
        fluid = ~fld.solid & ~uncovered
        rho_mean = float(fld.rho[fluid].mean()) if np.any(fluid) else 1.0
        fld.rho[uncovered] = rho_mean
        fld.u[:, uncovered] = 0.0
        fld.S[:, uncovered] = 0.0
        if fld.f is not None:
            fld.f[:, uncovered] = D3Q27.w[:, None] * rho_mean
    fld.u[:, fld.solid] = 0.0
    fld.S[:, fld.solid] = 0.0


def _check_finite(fld: LbmField) -> None:
    fluid = ~fld.solid
    bad = fluid & ~(np.isfinite(fld.rho) & np.all(np.isfinite(fld.u), axis=0) & np.all(np.isfinite(fld.S), axis=0)
                    & (fld.rho > 0))
    if np.any(bad):
        nodes = [tuple(int(i) for i in n) for n in np.argwhere(bad)]
        raise InstabilityError(f'LBM became unstable at {len(nodes)} nodes, first {nodes[:10]} '
                               f'(tau={fld.tau:.4g}); lower the inlet speed or refine the grid', nodes=nodes)


def _check_force(fld: LbmField, force: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if force is None:
        return None
    force = np.asarray(force, dtype=np.float64)
    if force.shape == (3,):
        return np.broadcast_to(force[:, None, None, None], (3,) + fld.shape)
    if force.shape != (3,) + fld.shape:
        raise ValidationError(f'LBM force has shape {force.shape}, expected (3,) or {(3,) + fld.shape}')
    return force


def lbm_step(fld: LbmField, force: Optional[np.ndarray] = None, solid_mask: Optional[np.ndarray] = None,
             scene: Optional[Scene] = None) -> LbmField:
    """
    One moment-encoded step: reconstruct -> stream -> raw moments -> moment update.  Solid nodes hold u = 0.

    :param fld: current field (modified in place and returned)
    :param force: lattice force density, (3,) or (3, nx, ny, nz)
    :param solid_mask: (nx, ny, nz) occupied nodes for this step, None keeps the previous mask
    :param scene: unused by the kernel, accepted so callers can pass the step context uniformly
    :return: the field at t+1
    """
    force = _check_force(fld, force)
    _apply_solid(fld, solid_mask)
    f = reconstruct_distributions(fld)
    f = stream(f, fld.solid, fld.boundary, fld.rho, fld.lattice)
    rho_s, u_s, S_s = compute_moments(f, force, fld.lattice)
    rho, u, S = moment_update(rho_s, u_s, S_s, force, fld.tau)
    solid = fld.solid
    fld.rho = np.where(solid, fld.rho, rho)
    fld.u = np.where(solid[None], 0.0, u)
    fld.S = np.where(solid[None], 0.0, S)
    _check_finite(fld)
    return fld


def bgk_step(fld: LbmField, force: Optional[np.ndarray] = None, solid_mask: Optional[np.ndarray] = None,
             scene: Optional[Scene] = None) -> LbmField:
    """
    One single-relaxation-time step with Guo forcing on persistent distributions.  The stored moments follow the
    same convention as :func:`lbm_step`, so the two solvers can be compared node by node.

    :param fld: current field (modified in place and returned)
    :param force: lattice force density, (3,) or (3, nx, ny, nz)
    :param solid_mask: occupied nodes, None keeps the previous mask
    :param scene: accepted for signature parity with :func:`lbm_step`
    :return: the field at t+1
    """
    force = _check_force(fld, force)
    _apply_solid(fld, solid_mask)
    lat = fld.lattice
    if fld.f is None:
        fld.f = reconstruct_distributions(fld)

    f = stream(fld.f, fld.solid, fld.boundary, fld.rho, lat)
    rho, u, _ = compute_moments(f, force, lat)
    feq = equilibrium_distributions(rho, u, lat)
    f_post = f - (f - feq) / fld.tau
    if force is not None:
        cf = lat.c.astype(np.float64)
        cu = np.einsum('qa,a...->q...', cf, u)
        # (c - u)/cs2 + (c.u) c / cs2^2, contracted with F
        term = (np.einsum('qa,a...->q...', cf, force) - np.einsum('a...,a...->...', u, force)[None]) / lat.cs2 \
            + cu * np.einsum('qa,a...->q...', cf, force) / lat.cs2 ** 2
        f_post = f_post + (1.0 - 0.5 / fld.tau) * lat.w[:, None, None, None] * term

    solid = fld.solid
    f_post[:, solid] = lat.w[:, None] * np.where(np.isfinite(fld.rho[solid]), fld.rho[solid], 1.0)[None]
    rho_p, u_p, S_p = compute_moments(f_post, None, lat)
    fld.f = f_post
    fld.rho = np.where(solid, fld.rho, rho_p)
    fld.u = np.where(solid[None], 0.0, u_p)
    fld.S = np.where(solid[None], 0.0, S_p)
    _check_finite(fld)
    return fld


def physical_velocity(fld: LbmField, force: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Fluid velocity u - F/(2 rho), removing the half force impulse carried by the stored velocity.

    :param fld: field after a step driven by ``force``
    :param force: the force of that step (None for unforced flow)
    :return: (3, nx, ny, nz) lattice velocity
    """
    force = _check_force(fld, force)
    if force is None:
        return fld.u.copy()
    return np.where(fld.solid[None], 0.0, fld.u - force / (2.0 * fld.rho[None]))


def raw_second_moment(fld: LbmField) -> np.ndarray:
    """
    Unshifted second moment sum c c f / rho as (6, nx, ny, nz); 1/3 on the diagonal at rest.
    """
    out = fld.S.copy()
    out[:3] += fld.lattice.cs2
    return out


def deviatoric_stress(fld: LbmField, tau: Optional[float] = None) -> np.ndarray:
    """
    Viscous stress estimate -(1 - 1/(2 tau)) rho (S - u u) in lattice units, as (6, nx, ny, nz).
    """
    tau = fld.tau if tau is None else tau
    uu = np.stack([fld.u[a] * fld.u[b] for a, b in SYM_INDEX])
    return -(1.0 - 0.5 / tau) * fld.rho[None] * (fld.S - uu)


def momentum_exchange(f_post: np.ndarray, solid: np.ndarray, lattice: LatticeSpec = D3Q27) -> np.ndarray:
    """
    Momentum handed to the solid by half-way bounce-back during one streaming step:
    sum over fluid nodes x and links with x + c_i solid of 2 f_i(x) c_i.

    :param f_post: (27, nx, ny, nz) post-collision distributions
    :param solid: (nx, ny, nz) solid flags
    :param lattice: lattice
    :return: 3-vector in lattice units
    """
    total = np.zeros(3)
    fluid = ~solid
    for i in range(1, lattice.q):
        # solid at x + c_i, seen from x
        dst_solid = np.roll(solid, shift=tuple(int(-s) for s in lattice.c[i]), axis=(0, 1, 2))
        links = fluid & dst_solid
        total += 2.0 * f_post[i][links].sum() * lattice.c[i]
    return total


def total_mass(fld: LbmField) -> float:
    return float(fld.rho[~fld.solid].sum())


def kinetic_energy(fld: LbmField, force: Optional[np.ndarray] = None) -> float:
    u = physical_velocity(fld, force)
    return float(0.5 * np.sum(fld.rho * np.einsum('a...,a...->...', u, u) * ~fld.solid))


def taylor_green_field(shape: Tuple[int, int, int], tau: float, u0: float, rho0: float = 1.0) -> LbmField:
    """
    Periodic Taylor-Green vortex in the x-y plane, invariant along z:

        ux =  U sin(kx x) cos(ky y),  uy = -U cos(kx x) sin(ky y),
        rho = rho0 - rho0 U^2 / (4 cs2) (cos 2 kx x + cos 2 ky y)

    Its kinetic energy decays as exp(-2 nu (kx^2 + ky^2) t).

    :param shape: lattice size (z extent may be 1)
    :param tau: relaxation time
    :param u0: peak lattice velocity
    :param rho0: mean density
    :return: field initialised at equilibrium
    """
    fld = LbmField.create(shape, tau)
    nx, ny, _ = fld.shape
    kx, ky = 2.0 * np.pi / nx, 2.0 * np.pi / ny
    x, y = np.meshgrid(np.arange(nx), np.arange(ny), indexing='ij')
    ux = u0 * np.sin(kx * x) * np.cos(ky * y)
    uy = -u0 * np.cos(kx * x) * np.sin(ky * y)
    rho = rho0 - rho0 * u0 ** 2 / (4.0 * CS2) * (np.cos(2.0 * kx * x) + np.cos(2.0 * ky * y))
    fld.rho[...] = rho[..., None]
    fld.u[0] = ux[..., None]
    fld.u[1] = uy[..., None]
    for k, (a, b) in enumerate(SYM_INDEX):
        fld.S[k] = fld.u[a] * fld.u[b]
    return fld


def viscosity(tau: float) -> float:
    return CS2 * (tau - 0.5)
