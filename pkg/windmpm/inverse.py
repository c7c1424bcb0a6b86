"""
Wind force reconstruction from observed marker motion.

Frames are solved one after another.  For every observation interval the unknown nodal force field starts at zero
and is optimized against

    L = L_obs + lambda_phys * L_phys

where L_obs is the mean squared marker position error after simulating the interval and L_phys penalises the
component of each nodal force perpendicular to the local wind direction from the LBM solver.  The state reached
under the recovered force is the starting point of the next interval.

Example::

    obs = ObservationSequence.from_csv('markers.csv')
    report = reconstruct_sequence(state0, obs, scene, ReconOptions(lambda_phys=0.1))
    report.forces.save('recovered.dwff')
"""

from dataclasses import asdict, dataclass, field
import json
import logging
import math
import numpy as np
from typing import Dict, List, Optional, Sequence, Tuple, Union

from windmpm.adjoint import backward, forward_record, marker_loss_gradient
from windmpm.coupling import GuideField, guide_from_field, voxelize
from windmpm.errors import OptimizationError, ValidationError, WindMpmError
from windmpm.lbm import LbmField, lbm_step
from windmpm.mpm import ParticleSet, simulate_frames
from windmpm.scene import Scene
from windmpm.utilities.format_utilities import read_force_field, read_observations_csv, write_force_field, \
    write_observations_csv

FORCE_EPSILON = 1e-12
ARMIJO_C = 1e-4
OPTIMIZERS = ('gd', 'adam')


@dataclass
class ReconOptions:
    lambda_phys: float = 0.1
    max_iters: int = 200
    rel_tol: float = 1e-8
    grad_tol: float = 1e-14
    # total loss below which a frame counts as solved
    loss_floor: float = 1e-24
    optimizer: str = 'gd'
    # length of the first gradient step in N (adam: learning rate)
    learning_rate: float = 1.0
    max_backtracks: int = 40
    normalized_phys: bool = False
    obs_tolerance: float = 1e-6
    use_lbm_guide: bool = True

    def __post_init__(self):
        problems = []
        if self.lambda_phys < 0:
            problems.append(f'lambda_phys must be >= 0, got {self.lambda_phys}')
        if self.max_iters < 0:
            problems.append(f'max_iters must be >= 0, got {self.max_iters}')
        if self.optimizer not in OPTIMIZERS:
            problems.append(f'optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}')
        if not self.learning_rate > 0:
            problems.append(f'learning_rate must be positive, got {self.learning_rate}')
        if problems:
            raise ValidationError('Invalid reconstruction options: ' + '; '.join(problems), problems)


@dataclass
class ObservationSequence:
    marker_ids: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.marker_ids = np.asarray(self.marker_ids, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[1:] != (len(self.marker_ids), 3):
            raise ValidationError(f'Observations have shape {self.positions.shape}, expected '
                                  f'(frames, {len(self.marker_ids)}, 3)')

    @property
    def frames(self) -> int:
        """
        Number of observation intervals T (positions hold T + 1 frames).
        """
        return len(self.positions) - 1

    @classmethod
    def from_trajectory(cls, trajectory: Sequence[ParticleSet],
                        marker_ids: Optional[np.ndarray] = None) -> 'ObservationSequence':
        if marker_ids is None:
            marker_ids = trajectory[0].marker_indices()
        marker_ids = np.asarray(marker_ids, dtype=np.int64)
        return cls(marker_ids=marker_ids, positions=np.stack([s.x[marker_ids] for s in trajectory]))

    @classmethod
    def from_csv(cls, path: str) -> 'ObservationSequence':
        marker_ids, positions = read_observations_csv(path)
        return cls(marker_ids=marker_ids, positions=positions)

    def to_csv(self, path: str) -> None:
        write_observations_csv(path, self.marker_ids, self.positions)

    def check_initial(self, state: ParticleSet, tolerance: float) -> None:
        if np.any(self.marker_ids < 0) or np.any(self.marker_ids >= len(state)):
            raise ValidationError(f'Observation marker ids out of range for {len(state)} particles')
        err = float(np.max(np.abs(state.x[self.marker_ids] - self.positions[0]))) if len(self.marker_ids) else 0.0
        if err > tolerance:
            raise ValidationError(f'Frame 0 of the observations differs from the initial state by {err:.3g} m '
                                  f'(tolerance {tolerance:.3g})')


@dataclass
class ForceField:
    forces: np.ndarray

    def __post_init__(self):
        self.forces = np.asarray(self.forces, dtype=np.float64)
        if self.forces.ndim != 5 or self.forces.shape[-1] != 3:
            raise ValidationError(f'Force field must have shape (T, nx, ny, nz, 3), got {self.forces.shape}')

    @classmethod
    def zeros(cls, steps: int, shape: Tuple[int, int, int]) -> 'ForceField':
        return cls(np.zeros((steps,) + tuple(shape) + (3,)))

    @property
    def steps(self) -> int:
        return self.forces.shape[0]

    @property
    def grid_shape(self) -> Tuple[int, int, int]:
        return tuple(self.forces.shape[1:4])

    def __getitem__(self, t: int) -> np.ndarray:
        return self.forces[t]

    def __len__(self):
        return self.steps

    def check(self, scene: Scene) -> None:
        if self.grid_shape != scene.shape:
            raise ValidationError(f'Force field grid {self.grid_shape} does not match scene grid {scene.shape}')
        if not np.all(np.isfinite(self.forces)):
            raise ValidationError('Force field contains non-finite values')

    def save(self, path: str) -> None:
        write_force_field(path, self.forces)

    @classmethod
    def load(cls, path: str) -> 'ForceField':
        return cls(read_force_field(path))


@dataclass
class FrameResult:
    frame: int
    obs_loss: float
    phys_loss: float
    total_loss: float
    iterations: int
    marker_rmse: float
    converged: bool


@dataclass
class ReconReport:
    frames: List[FrameResult] = field(default_factory=list)
    traces: List[List[Dict[str, float]]] = field(default_factory=list)
    forces: Optional[ForceField] = None
    options: Optional[ReconOptions] = None

    def to_dict(self) -> dict:
        return {
            'frames': [asdict(f) for f in self.frames],
            'traces': self.traces,
            'options': None if self.options is None else asdict(self.options),
            'grid': None if self.forces is None else list(self.forces.grid_shape),
        }

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, 'w', encoding='utf-8') as fd:
                fd.write(text)
        return text

    @classmethod
    def from_json(cls, text: str, forces: Optional[ForceField] = None) -> 'ReconReport':
        doc = json.loads(text)
        options = ReconOptions(**doc['options']) if doc.get('options') else None
        return cls(frames=[FrameResult(**f) for f in doc['frames']], traces=doc.get('traces', []), forces=forces,
                   options=options)


def observation_loss(sim_markers: np.ndarray, obs_markers: np.ndarray) -> float:
    """
    Mean over markers of the squared position error, in m^2.

    :param sim_markers: (M, 3) simulated marker positions
    :param obs_markers: (M, 3) observed positions, same order
    :return: loss
    """
    sim_markers = np.asarray(sim_markers, dtype=np.float64)
    obs_markers = np.asarray(obs_markers, dtype=np.float64)
    if sim_markers.shape != obs_markers.shape:
        raise ValidationError(f'Marker count mismatch: simulated {sim_markers.shape} vs observed {obs_markers.shape}')
    if len(sim_markers) == 0:
        return 0.0
    r = sim_markers - obs_markers
    return float(np.sum(r * r) / len(sim_markers))


def phys_loss(F_recon: np.ndarray, guide: GuideField, normalized: bool = False) -> float:
    """
    Squared component of every nodal force perpendicular to its guide direction, summed over nodes with a
    guide.  With ``normalized`` the force direction is used instead, giving sum (1 - (f_hat . d)^2).
    """
    return phys_loss_and_gradient(F_recon, guide, normalized)[0]


def phys_loss_and_gradient(F_recon: np.ndarray, guide: GuideField,
                           normalized: bool = False) -> Tuple[float, np.ndarray]:
    F_recon = np.asarray(F_recon, dtype=np.float64)
    if F_recon.shape != guide.d.shape:
        raise ValidationError(f'Force field shape {F_recon.shape} does not match guide shape {guide.d.shape}')
    valid = guide.valid
    d = np.where(valid[..., None], guide.d, 0.0)
    grad = np.zeros_like(F_recon)
    if not normalized:
        r = F_recon - np.sum(F_recon * d, axis=-1, keepdims=True) * d
        r = np.where(valid[..., None], r, 0.0)
        return float(np.sum(r * r)), 2.0 * r

    norm = np.linalg.norm(F_recon, axis=-1)
    active = valid & (norm > FORCE_EPSILON)
    f_hat = np.where(active[..., None], F_recon / np.where(active, norm, 1.0)[..., None], 0.0)
    s = np.sum(f_hat * d, axis=-1)
    loss = float(np.sum(np.where(active, 1.0 - s * s, 0.0)))
    ds = (d - s[..., None] * f_hat) / np.where(active, norm, 1.0)[..., None]
    grad = np.where(active[..., None], -2.0 * s[..., None] * ds, 0.0)
    return loss, grad


@dataclass
class _Evaluation:
    force: np.ndarray
    state: ParticleSet
    obs: float
    phys: float
    total: float
    grad: Optional[np.ndarray] = None


def _evaluate(state_t: ParticleSet, force: np.ndarray, obs_next: np.ndarray, marker_ids: np.ndarray,
              guide: Optional[GuideField], scene: Scene, opts: ReconOptions, with_grad: bool) -> _Evaluation:
    final, tape = forward_record(state_t, force, scene)
    obs, gx = marker_loss_gradient(final, marker_ids, obs_next)
    phys, g_phys = 0.0, None
    if guide is not None and opts.lambda_phys > 0:
        phys, g_phys = phys_loss_and_gradient(force, guide, opts.normalized_phys)
    total = obs + opts.lambda_phys * phys
    ev = _Evaluation(force=force, state=final, obs=obs, phys=phys, total=total)
    if with_grad:
        ev.grad = backward(tape, gx)
        if g_phys is not None:
            ev.grad = ev.grad + opts.lambda_phys * g_phys
    return ev


def _check_finite(ev: _Evaluation, trace: list, frame: int) -> None:
    if not math.isfinite(ev.total) or (ev.grad is not None and not np.all(np.isfinite(ev.grad))):
        raise OptimizationError(f'Non-finite loss or gradient at frame {frame} after {len(trace)} iterations',
                                partial=trace)


def reconstruct_step(state_t: ParticleSet, obs_next: np.ndarray, guide: Optional[GuideField], scene: Scene,
                     opts: Optional[ReconOptions] = None, marker_ids: Optional[np.ndarray] = None,
                     frame: int = 0) -> Tuple[np.ndarray, ParticleSet, List[Dict[str, float]]]:
    """
    Recover the force field of one observation interval, starting from zero.

    :param state_t: state at the start of the interval
    :param obs_next: (M, 3) observed marker positions at the end of the interval
    :param guide: wind directions for the physics loss (None disables it)
    :param scene: validated scene
    :param opts: optimizer options
    :param marker_ids: (M,) marker particle indices (default: particles flagged as markers)
    :param frame: frame index used in trace records and messages
    :return: (force (nx, ny, nz, 3), state at the end of the interval, per-iteration trace)
    """
    opts = opts or ReconOptions()
    marker_ids = state_t.marker_indices() if marker_ids is None else np.asarray(marker_ids, dtype=np.int64)
    trace: List[Dict[str, float]] = []

    cur = _evaluate(state_t, np.zeros(scene.shape + (3,)), obs_next, marker_ids, guide, scene, opts,
                    with_grad=opts.max_iters > 0)
    _check_finite(cur, trace, frame)
    trace.append({'frame': frame, 'iter': 0, 'obs': cur.obs, 'phys': cur.phys, 'total': cur.total,
                  'step_size': 0.0})
    if opts.max_iters == 0:
        return cur.force, cur.state, trace

    if opts.optimizer == 'adam':
        best = _adam(cur, state_t, obs_next, marker_ids, guide, scene, opts, trace, frame)
    else:
        best = _gradient_descent(cur, state_t, obs_next, marker_ids, guide, scene, opts, trace, frame)
    return best.force, best.state, trace


def _gradient_descent(cur: _Evaluation, state_t, obs_next, marker_ids, guide, scene, opts, trace, frame):
    prev_force, prev_grad = None, None
    for it in range(1, opts.max_iters + 1):
        gnorm2 = float(np.sum(cur.grad * cur.grad))
        if math.sqrt(gnorm2) <= opts.grad_tol or cur.total <= opts.loss_floor:
            break

        if prev_force is None:
            alpha = opts.learning_rate / math.sqrt(gnorm2)
        else:
            s = cur.force - prev_force
            y = cur.grad - prev_grad
            sy = float(np.sum(s * y))
            alpha = float(np.sum(s * s)) / sy if sy > 0 else 2.0 * trace[-1]['step_size']

        trial = None
        for _ in range(opts.max_backtracks):
            trial = _evaluate(state_t, cur.force - alpha * cur.grad, obs_next, marker_ids, guide, scene, opts,
                              with_grad=False)
            if math.isfinite(trial.total) and trial.total <= cur.total - ARMIJO_C * alpha * gnorm2:
                break
            trial = None
            alpha *= 0.5
        if trial is None:
            logging.warning(f'frame {frame}: line search exhausted after {opts.max_backtracks} halvings '
                            f'at iteration {it} (loss {cur.total:.3e})')
            break

        trial = _evaluate(state_t, trial.force, obs_next, marker_ids, guide, scene, opts, with_grad=True)
        _check_finite(trial, trace, frame)
        trace.append({'frame': frame, 'iter': it, 'obs': trial.obs, 'phys': trial.phys, 'total': trial.total,
                      'step_size': alpha})
        stalled = cur.total - trial.total < opts.rel_tol * cur.total
        prev_force, prev_grad = cur.force, cur.grad
        cur = trial
        if stalled:
            break
    return cur


def _adam(cur: _Evaluation, state_t, obs_next, marker_ids, guide, scene, opts, trace, frame,
          beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-30):
    best = cur
    m = np.zeros_like(cur.force)
    v = np.zeros_like(cur.force)
    for it in range(1, opts.max_iters + 1):
        if best.total <= opts.loss_floor:
            break
        g = cur.grad
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** it)
        v_hat = v / (1.0 - beta2 ** it)
        step = opts.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        nxt = _evaluate(state_t, cur.force - step, obs_next, marker_ids, guide, scene, opts, with_grad=True)
        _check_finite(nxt, trace, frame)
        trace.append({'frame': frame, 'iter': it, 'obs': nxt.obs, 'phys': nxt.phys, 'total': nxt.total,
                      'step_size': float(np.max(np.abs(step)))})
        cur = nxt
        if nxt.total < best.total:
            if best.total - nxt.total < opts.rel_tol * best.total:
                best = nxt
                break
            best = nxt
    return best


def _advance_wind(fld: LbmField, state: ParticleSet, scene: Scene) -> None:
    mask = voxelize(state, scene)
    for _ in range(scene.substeps):
        lbm_step(fld, None, mask, scene)


def reconstruct_sequence(state_0: ParticleSet, observations: ObservationSequence, scene: Scene,
                         opts: Optional[ReconOptions] = None,
                         guides: Optional[Union[GuideField, Sequence[GuideField]]] = None) -> ReconReport:
    """
    Solve every observation interval in order, each starting from the state reached under the previous
    interval's recovered force.

    :param state_0: initial state, its markers must match frame 0 of ``observations``
    :param observations: observed marker trajectory
    :param scene: validated scene
    :param opts: optimizer options
    :param guides: fixed guide field(s) instead of the LBM guide, one per interval or one for all
    :return: report with the recovered force field; on failure the exception carries the partial report in
        ``partial``
    """
    opts = opts or ReconOptions()
    state_0.check_materials(scene)
    observations.check_initial(state_0, opts.obs_tolerance)
    T = observations.frames
    report = ReconReport(forces=ForceField.zeros(T, scene.shape), options=opts)

    fld = None
    if guides is None and opts.use_lbm_guide and opts.lambda_phys > 0:
        fld = LbmField.from_scene(scene)

    state = state_0
    try:
        for t in range(T):
            if guides is not None:
                guide = guides if isinstance(guides, GuideField) else guides[t]
            elif fld is not None:
                _advance_wind(fld, state, scene)
                guide = guide_from_field(fld, scene)
            else:
                guide = None

            obs_next = observations.positions[t + 1]
            force, state, trace = reconstruct_step(state, obs_next, guide, scene, opts,
                                                   marker_ids=observations.marker_ids, frame=t)
            last = trace[-1]
            rmse = math.sqrt(observation_loss(state.x[observations.marker_ids], obs_next))
            report.forces.forces[t] = force
            report.traces.append(trace)
            report.frames.append(FrameResult(
                frame=t, obs_loss=last['obs'], phys_loss=last['phys'], total_loss=last['total'],
                iterations=len(trace) - 1, marker_rmse=rmse,
                converged=len(trace) - 1 < opts.max_iters or last['total'] <= opts.loss_floor,
            ))
            logging.info(f'frame {t}: loss {last["total"]:.3e} after {len(trace) - 1} iterations, '
                         f'marker rmse {rmse:.3e} m')
    except WindMpmError as e:
        e.partial = report
        raise

    return report


def retarget(force_fields: Union[ForceField, np.ndarray], new_particles: ParticleSet,
             scene: Scene) -> List[ParticleSet]:
    """
    Replay a recovered force sequence on another object: pure forward simulation, no wind solver.

    :param force_fields: per-interval forces
    :param new_particles: initial state of the new object
    :param scene: validated scene
    :return: states at every frame, starting with ``new_particles``
    """
    if not isinstance(force_fields, ForceField):
        force_fields = ForceField(force_fields)
    force_fields.check(scene)
    new_particles.check_materials(scene)
    return simulate_frames(new_particles, force_fields.forces, scene, force_fields.steps)


def _evaluated_pairs(F_gt, F_rec) -> Tuple[np.ndarray, np.ndarray]:
    F_gt = np.asarray(F_gt.forces if isinstance(F_gt, ForceField) else F_gt, dtype=np.float64)
    F_rec = np.asarray(F_rec.forces if isinstance(F_rec, ForceField) else F_rec, dtype=np.float64)
    if F_gt.shape != F_rec.shape:
        raise ValidationError(f'Force field shapes differ: {F_gt.shape} vs {F_rec.shape}')
    a = F_gt.reshape(-1, 3)
    b = F_rec.reshape(-1, 3)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    sel = (na > FORCE_EPSILON) & (nb > FORCE_EPSILON)
    if not np.any(sel):
        raise ValidationError('No node has a non-zero force in both fields; nothing to evaluate')
    return a[sel] / na[sel, None], b[sel] / nb[sel, None]


def eval_metrics(F_gt: Union[ForceField, np.ndarray], F_rec: Union[ForceField, np.ndarray]) -> Tuple[float, float]:
    """
    Direction agreement of two force fields over the (node, timestep) pairs where both are non-zero.

    :param F_gt: reference forces
    :param F_rec: recovered forces, same shape
    :return: (CosSim in [-1, 1], NMSE in [0, 4])
    """
    a, b = _evaluated_pairs(F_gt, F_rec)
    cos = float(np.mean(np.sum(a * b, axis=1)))
    nmse = float(np.mean(np.sum((a - b) ** 2, axis=1)))
    return cos, nmse


def angular_error(F_gt: Union[ForceField, np.ndarray], F_rec: Union[ForceField, np.ndarray]) -> float:
    """
    Mean angle in degrees between the two fields over the evaluated pairs.
    """
    a, b = _evaluated_pairs(F_gt, F_rec)
    return float(np.degrees(np.mean(np.arccos(np.clip(np.sum(a * b, axis=1), -1.0, 1.0)))))
