"""
Scene configuration shared by every solver: domain geometry, the (single) grid used by both MPM and LBM, time
stepping, fluid and material parameters and wall boundary conditions.

A scene is read from a JSON document (``"schema": 1``) and must be passed through :func:`validate_scene` before
use, which fills in the derived quantities (``dx``, ``tau``, Lamé parameters).  Validated scenes are frozen and can
be shared freely between simulations.

Example::

    scene = validate_scene(load_scene('scenes/cloth.json'))
    print(scene.dx, scene.fluid.tau)
"""

from dataclasses import dataclass, field, replace
import json
import logging
import math
import numpy as np
import os
from typing import Dict, Optional, Sequence, Tuple

from windmpm.errors import MaterialError, ValidationError

SCHEMA_VERSION = 1
CS2 = 1.0 / 3.0
TAU_MIN = 0.51
TAU_WARN = 0.55
MACH_WARN = 0.1
MACH_MAX = 0.3
CFL_LIMIT = 0.5

FACES = ('x-', 'x+', 'y-', 'y+', 'z-', 'z+')
WALL_TAGS = ('sticky', 'slip', 'open', 'periodic')
FORCE_MODES = ('nodal', 'acceleration')

_TOP_KEYS = {'schema', 'domain', 'grid', 'time', 'fluid', 'materials', 'walls'}
_DOMAIN_KEYS = {'min', 'max', 'gravity'}
_GRID_KEYS = {'res'}
_TIME_KEYS = {'frame_dt', 'substeps'}
_FLUID_KEYS = {'rho_w', 'nu', 'c_d', 'inlet_dir', 'inlet_speed', 'force_mode', 'drag_area'}
_MATERIAL_KEYS = {'id', 'name', 'E', 'nu_p', 'density'}


@dataclass(frozen=True)
class FluidParams:
    rho_w: float = 1.2
    nu: float = 1.0e-3
    c_d: float = 1.0
    inlet_dir: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    inlet_speed: float = 0.0
    # 'nodal': F_w is a nodal force in newtons; 'acceleration': F_w is a force per unit mass
    force_mode: str = 'nodal'
    # reference area for the drag closure, None -> dx**2
    drag_area: Optional[float] = None
    tau: Optional[float] = None


@dataclass(frozen=True)
class Material:
    id: int
    name: str
    E: float
    nu_p: float
    density: float
    mu: Optional[float] = None
    lam: Optional[float] = None


@dataclass(frozen=True)
class Scene:
    domain_min: Tuple[float, float, float]
    domain_max: Tuple[float, float, float]
    grid_res: Tuple[int, int, int]
    frame_dt: float
    substeps: int = 1
    gravity: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    fluid: FluidParams = field(default_factory=FluidParams)
    materials: Tuple[Material, ...] = ()
    wall_bc: Tuple[str, ...] = ('sticky',) * 6
    dx: Optional[float] = None

    @property
    def dt_substep(self) -> float:
        return self.frame_dt / self.substeps

    @property
    def dt_lbm(self) -> float:
        # one LBM step per MPM substep
        return self.frame_dt / self.substeps

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.grid_res)

    @property
    def inv_dx(self) -> float:
        return 1.0 / self.dx

    @property
    def drag_area(self) -> float:
        if self.fluid.drag_area is None:
            return self.dx * self.dx
        return self.fluid.drag_area

    def wall(self, face: str) -> str:
        return self.wall_bc[FACES.index(face)]

    def material(self, material_id: int) -> Material:
        for mat in self.materials:
            if mat.id == material_id:
                return mat
        raise ValidationError(f'Unknown material id {material_id}; scene defines {[m.id for m in self.materials]}')

    def lame_arrays(self, material_ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Per-particle Lamé parameters looked up from the material table.

        :param material_ids: integer array of material ids
        :return: (mu, lam) arrays of the same length
        """
        mu = np.zeros(len(material_ids))
        lam = np.zeros(len(material_ids))
        for mid in np.unique(material_ids):
            mat = self.material(int(mid))
            sel = material_ids == mid
            mu[sel] = mat.mu
            lam[sel] = mat.lam
        return mu, lam

    def node_positions(self) -> np.ndarray:
        """
        World positions of all grid nodes, shape (nx, ny, nz, 3).  Node (i, j, k) sits at domain_min + (i, j, k)*dx.
        """
        axes = [self.domain_min[a] + self.dx * np.arange(self.grid_res[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)

    def lattice_velocity(self, u_si):
        return np.asarray(u_si) * self.dt_lbm / self.dx

    def physical_velocity(self, u_lattice):
        return np.asarray(u_lattice) * self.dx / self.dt_lbm


def lame_from_young(E: float, nu_p: float) -> Tuple[float, float]:
    """
    Convert Young's modulus and Poisson's ratio to the Lamé parameters.

    :param E: Young's modulus in Pa, must be positive
    :param nu_p: Poisson's ratio, must lie in (0, 0.5)
    :return: (mu, lambda) in Pa
    """
    if not (E > 0):
        raise MaterialError(f"Young's modulus must be positive, got E={E}")
    if not (0.0 < nu_p < 0.5):
        raise MaterialError(f"Poisson's ratio must lie in (0, 0.5), got nu_p={nu_p}")
    mu = E / (2.0 * (1.0 + nu_p))
    lam = E * nu_p / ((1.0 + nu_p) * (1.0 - 2.0 * nu_p))
    return mu, lam


def lattice_tau(nu: float, dt_lbm: float, dx: float) -> float:
    nu_lattice = nu * dt_lbm / (dx * dx)
    return nu_lattice / CS2 + 0.5


def validate_scene(scene: Scene) -> Scene:
    """
    Check every scene invariant and return a canonical copy with derived fields populated.  All violations are
    collected and reported together in a single :class:`ValidationError`.

    :param scene: scene as parsed from configuration
    :return: validated scene with ``dx``, ``fluid.tau`` and per-material ``mu``/``lam`` set
    """
    problems = []

    dmin = _vec3(scene.domain_min, 'domain.min', problems)
    dmax = _vec3(scene.domain_max, 'domain.max', problems)
    gravity = _vec3(scene.gravity, 'domain.gravity', problems)

    res = tuple(scene.grid_res) if scene.grid_res is not None else ()
    if len(res) != 3 or not all(isinstance(n, (int, np.integer)) and n > 0 for n in res):
        problems.append(f'grid.res must be 3 positive integers, got {scene.grid_res}')
        res = None
    else:
        res = tuple(int(n) for n in res)

    dx = None
    if dmin is not None and dmax is not None:
        if not all(hi > lo for lo, hi in zip(dmin, dmax)):
            problems.append(f'domain.max {dmax} must exceed domain.min {dmin} componentwise')
        elif res is not None:
            spacings = [(dmax[a] - dmin[a]) / res[a] for a in range(3)]
            dx = spacings[0]
            if any(abs(s - dx) > 1e-9 * dx for s in spacings):
                problems.append(f'cells must be cubic: per-axis spacing {spacings}')

    if not isinstance(scene.substeps, (int, np.integer)) or scene.substeps < 1:
        problems.append(f'time.substeps must be an integer >= 1, got {scene.substeps}')
    if not (_finite(scene.frame_dt) and scene.frame_dt > 0):
        problems.append(f'time.frame_dt must be positive, got {scene.frame_dt}')

    walls = tuple(scene.wall_bc) if scene.wall_bc is not None else ()
    if len(walls) != 6:
        problems.append(f'walls must name all six faces {FACES}, got {walls}')
    for face, tag in zip(FACES, walls):
        if tag not in WALL_TAGS:
            problems.append(f'walls.{face} must be one of {WALL_TAGS}, got {tag!r}')
    for axis in range(3):
        lo, hi = walls[2 * axis:2 * axis + 2] if len(walls) == 6 else ('', '')
        if (lo == 'periodic') != (hi == 'periodic'):
            problems.append(f'walls.{FACES[2 * axis]} and walls.{FACES[2 * axis + 1]} must both be periodic or neither')

    fluid = scene.fluid
    inlet_dir = _vec3(fluid.inlet_dir, 'fluid.inlet_dir', problems)
    if not (_finite(fluid.rho_w) and fluid.rho_w > 0):
        problems.append(f'fluid.rho_w must be positive, got {fluid.rho_w}')
    if not (_finite(fluid.nu) and fluid.nu > 0):
        problems.append(f'fluid.nu must be positive, got {fluid.nu}')
    if not (_finite(fluid.c_d) and fluid.c_d >= 0):
        problems.append(f'fluid.c_d must be non-negative, got {fluid.c_d}')
    if inlet_dir is not None and abs(math.sqrt(sum(c * c for c in inlet_dir)) - 1.0) > 1e-9:
        problems.append(f'fluid.inlet_dir must be a unit vector, got {inlet_dir}')
    if not (_finite(fluid.inlet_speed) and fluid.inlet_speed >= 0):
        problems.append(f'fluid.inlet_speed must be non-negative, got {fluid.inlet_speed}')
    if fluid.force_mode not in FORCE_MODES:
        problems.append(f'fluid.force_mode must be one of {FORCE_MODES}, got {fluid.force_mode!r}')
    if fluid.drag_area is not None and not (_finite(fluid.drag_area) and fluid.drag_area > 0):
        problems.append(f'fluid.drag_area must be positive or null, got {fluid.drag_area}')

    tau = None
    if dx is not None and not problems:
        dt_lbm = scene.frame_dt / scene.substeps
        tau = lattice_tau(fluid.nu, dt_lbm, dx)
        if tau < TAU_MIN:
            problems.append(f'lattice relaxation time tau={tau:.6g} violates the stability bound tau >= {TAU_MIN} '
                            f'(raise fluid.nu or lower the substep count)')
        elif tau < TAU_WARN:
            logging.warning(f'tau={tau:.4g} is close to the stability floor, expect noisy wind fields')
        u_lat = fluid.inlet_speed * dt_lbm / dx
        if u_lat > MACH_MAX:
            problems.append(f'inlet speed is {u_lat:.3g} in lattice units, above the {MACH_MAX} low-Mach limit')
        elif u_lat > MACH_WARN:
            logging.warning(f'inlet speed is {u_lat:.3g} in lattice units (> {MACH_WARN}), compressibility errors grow')

    materials = []
    seen_ids = set()
    for mat in scene.materials:
        if mat.id in seen_ids:
            problems.append(f'material id {mat.id} is defined twice')
        seen_ids.add(mat.id)
        if not (_finite(mat.density) and mat.density > 0):
            problems.append(f'material {mat.name!r} density must be positive, got {mat.density}')
        try:
            mu, lam = lame_from_young(mat.E, mat.nu_p)
        except MaterialError as e:
            problems.append(f'material {mat.name!r}: {e}')
            continue
        materials.append(replace(mat, mu=mu, lam=lam))

    if problems:
        raise ValidationError('Invalid scene:\n  ' + '\n  '.join(problems), problems)

    validated = replace(
        scene,
        domain_min=dmin, domain_max=dmax, grid_res=res, gravity=gravity, wall_bc=walls,
        fluid=replace(fluid, inlet_dir=inlet_dir, tau=tau),
        materials=tuple(materials), dx=dx,
    )
    _check_cfl(validated)
    return validated


def _check_cfl(scene: Scene) -> None:
    speeds = [scene.fluid.inlet_speed]
    for mat in scene.materials:
        speeds.append(math.sqrt((mat.lam + 2.0 * mat.mu) / mat.density))
    vmax = max(speeds)
    if vmax * scene.dt_substep > CFL_LIMIT * scene.dx:
        logging.warning(f'CFL: expected speed {vmax:.3g} m/s moves {vmax * scene.dt_substep / scene.dx:.3g} cells per '
                        f'substep (> {CFL_LIMIT}); raise time.substeps')


def _finite(x) -> bool:
    try:
        return math.isfinite(x)
    except TypeError:
        return False


def _vec3(v, name: str, problems: list) -> Optional[Tuple[float, float, float]]:
    try:
        vec = tuple(float(c) for c in v)
    except (TypeError, ValueError):
        problems.append(f'{name} must be a 3-vector, got {v!r}')
        return None
    if len(vec) != 3 or not all(math.isfinite(c) for c in vec):
        problems.append(f'{name} must be a finite 3-vector, got {v!r}')
        return None
    return vec


def scene_to_dict(scene: Scene) -> dict:
    """
    Serialize the configured (not derived) scene fields to the schema-1 document layout.
    """
    fluid = scene.fluid
    return {
        'schema': SCHEMA_VERSION,
        'domain': {'min': list(scene.domain_min), 'max': list(scene.domain_max), 'gravity': list(scene.gravity)},
        'grid': {'res': [int(n) for n in scene.grid_res]},
        'time': {'frame_dt': scene.frame_dt, 'substeps': int(scene.substeps)},
        'fluid': {
            'rho_w': fluid.rho_w, 'nu': fluid.nu, 'c_d': fluid.c_d, 'inlet_dir': list(fluid.inlet_dir),
            'inlet_speed': fluid.inlet_speed, 'force_mode': fluid.force_mode, 'drag_area': fluid.drag_area,
        },
        'materials': [
            {'id': int(m.id), 'name': m.name, 'E': m.E, 'nu_p': m.nu_p, 'density': m.density}
            for m in scene.materials
        ],
        'walls': {face: tag for face, tag in zip(FACES, scene.wall_bc)},
    }


def scene_from_dict(doc: dict, source: str = '<dict>') -> Scene:
    """
    Parse a schema-1 scene document.  Unknown keys are rejected at every level.  The result is NOT validated.

    :param doc: parsed JSON document
    :param source: name used in error messages
    :return: unvalidated :class:`Scene`
    """
    if not isinstance(doc, dict):
        raise ValidationError(f'Scene document must be a JSON object in {source}')
    _reject_unknown(doc, _TOP_KEYS, 'top level', source)
    if doc.get('schema') != SCHEMA_VERSION:
        raise ValidationError(f'Unsupported scene schema {doc.get("schema")!r} in {source} (expected {SCHEMA_VERSION})')
    for key in _TOP_KEYS:
        if key not in doc:
            raise ValidationError(f'Missing top-level key {key!r} in {source}')

    domain = doc['domain']
    _reject_unknown(domain, _DOMAIN_KEYS, 'domain', source)
    grid = doc['grid']
    _reject_unknown(grid, _GRID_KEYS, 'grid', source)
    time = doc['time']
    _reject_unknown(time, _TIME_KEYS, 'time', source)
    fluid_doc = doc['fluid']
    _reject_unknown(fluid_doc, _FLUID_KEYS, 'fluid', source)
    walls = doc['walls']
    _reject_unknown(walls, set(FACES), 'walls', source)

    defaults = FluidParams()
    fluid = FluidParams(
        rho_w=fluid_doc.get('rho_w', defaults.rho_w),
        nu=fluid_doc.get('nu', defaults.nu),
        c_d=fluid_doc.get('c_d', defaults.c_d),
        inlet_dir=tuple(fluid_doc.get('inlet_dir', defaults.inlet_dir)),
        inlet_speed=fluid_doc.get('inlet_speed', defaults.inlet_speed),
        force_mode=fluid_doc.get('force_mode', defaults.force_mode),
        drag_area=fluid_doc.get('drag_area', defaults.drag_area),
    )

    materials = []
    for mdoc in doc['materials']:
        _reject_unknown(mdoc, _MATERIAL_KEYS, 'materials[]', source)
        try:
            materials.append(Material(id=int(mdoc['id']), name=str(mdoc['name']), E=mdoc['E'],
                                      nu_p=mdoc['nu_p'], density=mdoc['density']))
        except KeyError as e:
            raise ValidationError(f'Material entry missing key {e} in {source}')

    try:
        return Scene(
            domain_min=tuple(domain['min']),
            domain_max=tuple(domain['max']),
            gravity=tuple(domain.get('gravity', (0.0, 0.0, 0.0))),
            grid_res=tuple(grid['res']),
            frame_dt=time['frame_dt'],
            substeps=time.get('substeps', 1),
            fluid=fluid,
            materials=tuple(materials),
            wall_bc=tuple(walls.get(face, 'sticky') for face in FACES),
        )
    except KeyError as e:
        raise ValidationError(f'Scene document missing key {e} in {source}')


def _reject_unknown(section, allowed: set, where: str, source: str) -> None:
    if not isinstance(section, dict):
        raise ValidationError(f'Section {where} must be a JSON object in {source}')
    unknown = set(section.keys()).difference(allowed)
    if unknown:
        raise ValidationError(f'Unknown keys {sorted(unknown)} in {where} of {source}')


def load_scene(path: str) -> Scene:
    """
    Read and parse a scene JSON file.  Call :func:`validate_scene` on the result.

    :param path: path to a UTF-8 JSON scene document
    :return: unvalidated scene
    """
    if not os.path.exists(path):
        raise ValidationError(f'Scene file does not exist: {path}')
    with open(path, encoding='utf-8') as fd:
        try:
            doc = json.load(fd)
        except json.JSONDecodeError as e:
            raise ValidationError(f'Scene file is not valid JSON ({e}) in {path}')
    return scene_from_dict(doc, source=path)


def save_scene(scene: Scene, path: str) -> None:
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fd:
        json.dump(scene_to_dict(scene), fd, indent=2)


def default_walls(**overrides: str) -> Tuple[str, ...]:
    """
    Wall tags for all six faces, 'sticky' unless overridden, e.g. ``default_walls(x_minus='open')``.
    """
    tags: Dict[str, str] = {face: 'sticky' for face in FACES}
    for key, tag in overrides.items():
        tags[key.replace('_minus', '-').replace('_plus', '+')] = tag
    return tuple(tags[face] for face in FACES)


def uniform_walls(tag: str) -> Tuple[str, ...]:
    return (tag,) * 6


def make_scene(extent: Sequence[float] = (1.0, 1.0, 1.0), res: int = 16, frame_dt: float = 1.0 / 24.0,
               substeps: int = 10, **kwargs) -> Scene:
    """
    Convenience constructor for a validated scene with a cubic grid anchored at the origin.  Extra keyword
    arguments are passed to :class:`Scene`.

    :param extent: domain size per axis (must be multiples of a common spacing)
    :param res: nodes along x; the other axes get res*extent[a]/extent[0]
    :param frame_dt: observation frame interval in seconds
    :param substeps: simulation substeps per frame
    :return: validated scene
    """
    dx = extent[0] / res
    grid_res = tuple(int(round(e / dx)) for e in extent)
    scene = Scene(domain_min=(0.0, 0.0, 0.0), domain_max=tuple(float(e) for e in extent), grid_res=grid_res,
                  frame_dt=frame_dt, substeps=substeps, **kwargs)
    return validate_scene(scene)
