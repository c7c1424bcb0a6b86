"""
Command line interface::

    windmpm simulate    --scene scene.json --particles obj.dwpt --frames 24 --out runs/fwd
    windmpm reconstruct --scene scene.json --particles obj.dwpt --observations runs/fwd/markers.csv --out runs/inv
    windmpm retarget    --scene scene.json --particles other.dwpt --forces runs/inv/forces.dwff --out runs/ret
    windmpm eval        --gt runs/fwd/forces.dwff --rec runs/inv/forces.dwff --out runs/eval
    windmpm gradcheck   --out runs/gc
    windmpm densify     --points surface.csv --resolution 32 --out runs/dense

Every command writes ``manifest.json`` and ``run.h5`` into its output directory, even when it fails.  Exit codes:
0 ok, 2 invalid input, 3 simulation instability, 4 optimization failure, 5 gradient check failure.
"""

import argparse
from datetime import datetime
import json
import logging
import os
import platform
import sys
import time
import traceback
from typing import Dict, List, Optional, Sequence

import numpy as np

from windmpm.adjoint import gradient_check, perturbed_block
from windmpm.coupling import guide_from_field, simulate_coupled
from windmpm.errors import GradcheckError, ValidationError, WindMpmError
from windmpm.inverse import ForceField, ObservationSequence, ReconOptions, angular_error, eval_metrics, \
    reconstruct_sequence, retarget
from windmpm.mpm import ParticleSet, configure_scatter
from windmpm.runstore import ENERGY_COLUMNS, LOSS_COLUMNS, MARKER_COLUMNS, TIMING_COLUMNS, VERSION, RunArchive
from windmpm.scene import Scene, load_scene, validate_scene
from windmpm.utilities.format_utilities import read_particles, read_points_csv, write_grid_field, write_points_csv
from windmpm.volume import DEFAULT_JITTER, densify

GRADCHECK_SCENE = os.path.join(os.path.dirname(__file__), 'data', 'gradcheck_scene.json')
GRADCHECK_TOLERANCE = 1e-3
MANIFEST_NAME = 'manifest.json'
ARCHIVE_NAME = 'run.h5'


class RunContext(object):
    """
    Output directory bookkeeping for one command: stage timings, inputs/outputs and the run archive.
    """

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.out_dir = args.out
        os.makedirs(self.out_dir, exist_ok=True)
        self.archive = RunArchive(os.path.join(self.out_dir, ARCHIVE_NAME))
        if self.archive.exists():
            os.remove(self.archive.path)
        self.timings: Dict[str, float] = {}
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.results: Dict[str, object] = {}
        self.started = datetime.now().isoformat(timespec='seconds')

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def output(self, key: str, name: str) -> str:
        path = self.path(name)
        self.outputs[key] = path
        return path

    def add_time(self, stage: str, seconds: float) -> None:
        self.timings[stage] = self.timings.get(stage, 0.0) + max(float(seconds), 0.0)

    def manifest(self, exit_code: int, error: Optional[str]) -> dict:
        return {
            'command': self.command,
            'version': VERSION,
            'argv': list(self.args.argv),
            'started': self.started,
            'scene': getattr(self.args, 'scene', None),
            'inputs': self.inputs,
            'outputs': self.outputs,
            'seed': self.args.seed,
            'deterministic': self.args.deterministic,
            'threads': self.args.threads,
            'timings': self.timings,
            'results': self.results,
            'exit_code': exit_code,
            'error': error,
            'versions': {'windmpm': VERSION, 'numpy': np.__version__, 'python': platform.python_version()},
        }

    def finish(self, exit_code: int, error: Optional[str] = None) -> None:
        manifest = self.manifest(exit_code, error)
        if self.timings:
            stages = sorted(self.timings)
            try:
                self.archive.append_table('timings', {'stage': stages, 'seconds': [self.timings[s] for s in stages]},
                                          col_dtypes=TIMING_COLUMNS)
            except WindMpmError as e:
                logging.warning(f'Could not store timings in {self.archive.path}: {e}')
        self.archive.write_attrs('/', 'manifest', manifest)
        with open(self.path(MANIFEST_NAME), 'w', encoding='utf-8') as fd:
            json.dump(manifest, fd, indent=2, default=str)


def _load_scene(ctx: RunContext, path: str) -> Scene:
    scene = validate_scene(load_scene(path))
    ctx.archive.write_attrs('/', 'scene', scene)
    return scene


def _load_particles(path: str, scene: Scene) -> ParticleSet:
    if not os.path.exists(path):
        raise ValidationError(f'Particle file does not exist: {path}')
    if path.lower().endswith('.csv'):
        mat = scene.materials[0]
        return ParticleSet.from_points(read_points_csv(path), material_id=mat.id, density=mat.density, scene=scene)
    return ParticleSet.from_records(read_particles(path))


def _load_forces(path: str, scene: Scene) -> ForceField:
    if not os.path.exists(path):
        raise ValidationError(f'Force field file does not exist: {path}')
    forces = ForceField.load(path)
    forces.check(scene)
    return forces


def _store_trajectory(ctx: RunContext, frames: Sequence[ParticleSet], scene: Scene,
                      marker_ids: Optional[np.ndarray] = None) -> None:
    """
    Marker trajectory and energy trace into the archive, exported as plot-ready CSV.
    """
    if marker_ids is None:
        marker_ids = frames[0].marker_indices()
    markers = {c: [] for c in MARKER_COLUMNS}
    energy = {c: [] for c in ENERGY_COLUMNS}
    for t, state in enumerate(frames):
        markers['frame'].append(np.full(len(marker_ids), t))
        markers['particle'].append(marker_ids)
        for a, c in enumerate('xyz'):
            markers[c].append(state.x[marker_ids, a])
        energy['frame'].append(t)
        energy['kinetic'].append(state.kinetic_energy())
        energy['elastic'].append(state.elastic_energy(scene))
        energy['gravity_potential'].append(state.gravity_potential(scene))
    ctx.archive.append_table('markers', {c: np.concatenate(v) for c, v in markers.items()},
                             col_dtypes=MARKER_COLUMNS)
    ctx.archive.append_table('energy', energy, col_dtypes=ENERGY_COLUMNS)
    ctx.archive.export_csv('markers', ctx.output('markers', 'markers.csv'), cols=list(MARKER_COLUMNS))
    ctx.archive.export_csv('energy', ctx.output('energy', 'energy.csv'), cols=list(ENERGY_COLUMNS))


def _save_frames(ctx: RunContext, frames: Sequence[ParticleSet]) -> None:
    frame_dir = ctx.path('frames')
    os.makedirs(frame_dir, exist_ok=True)
    for t, state in enumerate(frames):
        state.save(os.path.join(frame_dir, f'frame_{t:04d}.dwpt'))
    ctx.outputs['frames'] = frame_dir


def cmd_simulate(ctx: RunContext) -> int:
    args = ctx.args
    if args.frames < 0:
        raise ValidationError(f'--frames must be >= 0, got {args.frames}')
    ctx.inputs.update(scene=args.scene, particles=args.particles)
    scene = _load_scene(ctx, args.scene)
    state = _load_particles(args.particles, scene)
    forces = None
    if args.forces:
        ctx.inputs['forces'] = args.forces
        forces = _load_forces(args.forces, scene)
        if forces.steps < args.frames:
            raise ValidationError(f'{args.forces} holds {forces.steps} force fields for {args.frames} frames')
        forces = forces.forces

    field_dir = ctx.path('fields')
    on_frame = None
    if args.dump_fields and not args.no_wind:
        os.makedirs(field_dir, exist_ok=True)
        ctx.outputs['fields'] = field_dir

        def on_frame(t, _state, fld):
            write_grid_field(os.path.join(field_dir, f'field_{t:04d}.dwgf'), fld.to_channels())
            write_grid_field(os.path.join(field_dir, f'guide_{t:04d}.dwgf'), guide_from_field(fld, scene).to_channels())

    t0 = time.perf_counter()
    result = simulate_coupled(state, scene, args.frames, forces=forces, wind=not args.no_wind, on_frame=on_frame)
    ctx.add_time('total', time.perf_counter() - t0)
    for stage, seconds in result.timings.items():
        ctx.add_time(stage, seconds)
    ctx.results.update(lbm_steps=result.lbm_steps, mpm_steps=result.mpm_steps)
    if result.lbm_steps:
        ctx.results['lbm_seconds_per_step'] = result.timings['lbm'] / result.lbm_steps
    if result.mpm_steps:
        ctx.results['mpm_seconds_per_step'] = result.timings['mpm'] / result.mpm_steps

    _save_frames(ctx, result.frames)
    _store_trajectory(ctx, result.frames, scene)
    if args.frames > 0:
        ForceField(result.applied_forces).save(ctx.output('forces', 'forces.dwff'))
    logging.info(f'simulated {args.frames} frames ({result.mpm_steps} substeps) into {ctx.out_dir}')
    return 0


def _recon_options(args: argparse.Namespace) -> ReconOptions:
    return ReconOptions(
        lambda_phys=args.lambda_phys, max_iters=args.max_iters, rel_tol=args.rel_tol, optimizer=args.optimizer,
        learning_rate=args.learning_rate, normalized_phys=args.normalized_phys, obs_tolerance=args.obs_tolerance,
        use_lbm_guide=not args.no_lbm_guide,
    )


def _store_report(ctx: RunContext, report) -> None:
    rows = [r for trace in report.traces for r in trace]
    if rows:
        ctx.archive.append_table('loss_trace', {c: [r[c] for r in rows] for c in LOSS_COLUMNS},
                                 col_dtypes=LOSS_COLUMNS)
        ctx.archive.export_csv('loss_trace', ctx.output('loss_trace', 'loss_trace.csv'), cols=list(LOSS_COLUMNS))
    ctx.archive.write_attrs('/', 'report', report.to_dict())
    report.to_json(ctx.output('report', 'report.json'))


def cmd_reconstruct(ctx: RunContext) -> int:
    args = ctx.args
    ctx.inputs.update(scene=args.scene, particles=args.particles, observations=args.observations)
    scene = _load_scene(ctx, args.scene)
    state = _load_particles(args.particles, scene)
    if not os.path.exists(args.observations):
        raise ValidationError(f'Observation file does not exist: {args.observations}')
    observations = ObservationSequence.from_csv(args.observations)
    opts = _recon_options(args)

    t0 = time.perf_counter()
    try:
        report = reconstruct_sequence(state, observations, scene, opts)
    except WindMpmError as e:
        partial = getattr(e, 'partial', None)
        if partial is not None and hasattr(partial, 'traces'):
            _store_report(ctx, partial)
        raise
    finally:
        ctx.add_time('optimization', time.perf_counter() - t0)

    report.forces.save(ctx.output('forces', 'forces.dwff'))
    _store_report(ctx, report)
    trajectory = retarget(report.forces, state, scene)
    _store_trajectory(ctx, trajectory, scene, observations.marker_ids)
    ctx.results.update(
        frames=observations.frames,
        final_marker_rmse=[f.marker_rmse for f in report.frames],
        iterations=[f.iterations for f in report.frames],
    )
    return 0


def cmd_retarget(ctx: RunContext) -> int:
    args = ctx.args
    ctx.inputs.update(scene=args.scene, particles=args.particles, forces=args.forces)
    scene = _load_scene(ctx, args.scene)
    state = _load_particles(args.particles, scene)
    forces = _load_forces(args.forces, scene)
    t0 = time.perf_counter()
    frames = retarget(forces, state, scene)
    ctx.add_time('mpm', time.perf_counter() - t0)
    _save_frames(ctx, frames)
    _store_trajectory(ctx, frames, scene)
    peak = max(float(np.max(np.linalg.norm(s.x - state.x, axis=1))) for s in frames) if len(state) else 0.0
    ctx.results['peak_displacement'] = peak
    return 0


def cmd_eval(ctx: RunContext) -> int:
    args = ctx.args
    ctx.inputs.update(gt=args.gt, rec=args.rec)
    for path in (args.gt, args.rec):
        if not os.path.exists(path):
            raise ValidationError(f'Force field file does not exist: {path}')
    gt = ForceField.load(args.gt)
    rec = ForceField.load(args.rec)
    t0 = time.perf_counter()
    cos, nmse = eval_metrics(gt, rec)
    angle = angular_error(gt, rec)
    ctx.add_time('eval', time.perf_counter() - t0)
    ctx.results.update(cos_sim=cos, nmse=nmse, angular_error_deg=angle)
    print(f'CosSim {cos:.6f}  NMSE {nmse:.6f}  angular error {angle:.3f} deg')
    return 0


def cmd_gradcheck(ctx: RunContext) -> int:
    args = ctx.args
    scene_path = args.scene or GRADCHECK_SCENE
    ctx.inputs['scene'] = scene_path
    scene = _load_scene(ctx, scene_path)
    if args.particles:
        ctx.inputs['particles'] = args.particles
        state = _load_particles(args.particles, scene)
    else:
        state = perturbed_block(scene, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    force = args.force_scale * rng.standard_normal(scene.shape + (3,))

    t0 = time.perf_counter()
    result = gradient_check(state, force, scene, substeps=args.substeps, max_nodes=args.max_nodes, seed=args.seed)
    ctx.add_time('gradcheck', time.perf_counter() - t0)
    ctx.results.update(max_rel_error=result.max_rel_error, nodes=len(result.nodes), tolerance=args.tolerance)
    print(f'max relative error {result.max_rel_error:.3e} over {len(result.nodes)} nodes')
    if not result.max_rel_error <= args.tolerance:
        raise GradcheckError(f'Adjoint gradient differs from finite differences by {result.max_rel_error:.3e} '
                             f'(tolerance {args.tolerance:.1e})')
    return 0


def cmd_densify(ctx: RunContext) -> int:
    args = ctx.args
    ctx.inputs['points'] = args.points
    if not os.path.exists(args.points):
        raise ValidationError(f'Point file does not exist: {args.points}')
    if args.points.lower().endswith('.csv'):
        points = read_points_csv(args.points)
    else:
        points = read_particles(args.points)['x'].astype(np.float64)
    bounds = None
    if args.bounds:
        bounds = (args.bounds[:3], args.bounds[3:])

    t0 = time.perf_counter()
    dense, internal = densify(points, args.resolution, bounds=bounds, jitter=args.jitter, seed=args.seed)
    ctx.add_time('densify', time.perf_counter() - t0)

    markers = ~internal
    state = ParticleSet.from_points(dense, material_id=args.material_id, density=args.density,
                                    particle_volume=args.particle_volume, markers=markers, internal=internal)
    state.save(ctx.output('particles', 'particles.dwpt'))
    write_points_csv(ctx.output('points', 'points.csv'), dense)
    ctx.results.update(surface_points=int(np.count_nonzero(markers)), interior_points=int(np.count_nonzero(internal)))
    logging.info(f'densify: {int(np.count_nonzero(markers))} surface + '
                 f'{int(np.count_nonzero(internal))} interior points')
    return 0


COMMANDS = {
    'simulate': cmd_simulate,
    'reconstruct': cmd_reconstruct,
    'retarget': cmd_retarget,
    'eval': cmd_eval,
    'gradcheck': cmd_gradcheck,
    'densify': cmd_densify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='windmpm', description=f'Wind-driven MPM simulation and wind force '
                                     f'reconstruction (version {VERSION})')
    parser.add_argument('--version', action='version', version=f'windmpm {VERSION}')
    parser.add_argument('--log-level', default='WARNING', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='logging level (default WARNING)')
    parser.add_argument('--seed', type=int, default=0, help='random seed (default 0)')
    parser.add_argument('--deterministic', action='store_true',
                        help='single ordered particle-to-grid reduction, bitwise identical for any --threads')
    parser.add_argument('--threads', type=int, default=1,
                        help='threads for the particle-to-grid scatter (default 1)')
    sub = parser.add_subparsers(dest='command', required=True)

    def scene_args(p, particles=True):
        p.add_argument('--scene', required=True, help='scene JSON file')
        if particles:
            p.add_argument('--particles', required=True, help='initial particles (.dwpt, or .csv points)')
        p.add_argument('--out', required=True, help='output directory')

    p = sub.add_parser('simulate', help='forward simulation of an object in the wind')
    scene_args(p)
    p.add_argument('--frames', type=int, required=True, help='number of frames to simulate')
    p.add_argument('--forces', help='prescribed force fields (.dwff) added to the drag, one per frame')
    p.add_argument('--no-wind', action='store_true', help='skip the LBM; prescribed forces only')
    p.add_argument('--dump-fields', action='store_true', help='write a .dwgf wind field dump per frame')

    p = sub.add_parser('reconstruct', help='recover wind forces from observed marker trajectories')
    scene_args(p)
    p.add_argument('--observations', required=True, help='marker CSV (frame,particle,x,y,z)')
    p.add_argument('--lambda-phys', type=float, default=ReconOptions.lambda_phys, help='physics loss weight')
    p.add_argument('--max-iters', type=int, default=ReconOptions.max_iters, help='iterations per frame')
    p.add_argument('--rel-tol', type=float, default=ReconOptions.rel_tol, help='relative improvement stop')
    p.add_argument('--optimizer', choices=['gd', 'adam'], default=ReconOptions.optimizer)
    p.add_argument('--learning-rate', type=float, default=ReconOptions.learning_rate,
                   help='first step length in N (adam: learning rate)')
    p.add_argument('--normalized-phys', action='store_true', help='use the direction-only physics loss')
    p.add_argument('--obs-tolerance', type=float, default=ReconOptions.obs_tolerance,
                   help='allowed frame-0 mismatch in m')
    p.add_argument('--no-lbm-guide', action='store_true', help='do not run the LBM for guide directions')

    p = sub.add_parser('retarget', help='replay recovered forces on another object')
    scene_args(p)
    p.add_argument('--forces', required=True, help='force fields (.dwff)')

    p = sub.add_parser('eval', help='CosSim and NMSE between two force field files')
    p.add_argument('--gt', required=True, help='reference force fields (.dwff)')
    p.add_argument('--rec', required=True, help='recovered force fields (.dwff)')
    p.add_argument('--out', required=True, help='output directory')

    p = sub.add_parser('gradcheck', help='compare adjoint and finite-difference gradients')
    p.add_argument('--scene', default=None, help='scene JSON file (default: bundled 8^3 scene)')
    p.add_argument('--particles', default=None, help='particles (default: perturbed block)')
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--substeps', type=int, default=None, help='window length (default scene substeps)')
    p.add_argument('--max-nodes', type=int, default=12, help='nodes evaluated by finite differences')
    p.add_argument('--force-scale', type=float, default=1e-3, help='magnitude of the random force in N')
    p.add_argument('--tolerance', type=float, default=GRADCHECK_TOLERANCE, help='maximum relative error')

    p = sub.add_parser('densify', help='fill the interior of a surface point cloud')
    p.add_argument('--points', required=True, help='surface points (.csv or .dwpt)')
    p.add_argument('--resolution', type=int, nargs='+', required=True, help='voxels per axis (1 or 3 values)')
    p.add_argument('--bounds', type=float, nargs=6, default=None, help='xmin ymin zmin xmax ymax zmax')
    p.add_argument('--jitter', type=float, default=DEFAULT_JITTER, help='interior jitter, fraction of a voxel')
    p.add_argument('--material-id', type=int, default=0)
    p.add_argument('--density', type=float, default=1000.0, help='rest density in kg/m^3')
    p.add_argument('--particle-volume', type=float, default=1e-6, help='rest volume per particle in m^3')
    p.add_argument('--out', required=True, help='output directory')

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=getattr(logging, args.log_level), format='%(asctime)s %(levelname)s %(message)s')
    if args.threads < 1:
        logging.error(f'--threads must be >= 1, got {args.threads}')
        return ValidationError.exit_code
    if getattr(args, 'resolution', None) is not None and len(args.resolution) not in (1, 3):
        logging.error(f'--resolution takes 1 or 3 values, got {args.resolution}')
        return ValidationError.exit_code

    configure_scatter(workers=args.threads, deterministic=args.deterministic)
    ctx = RunContext(args.command, args)
    try:
        code = COMMANDS[args.command](ctx)
        ctx.finish(code)
        return code
    except WindMpmError as e:
        logging.error(str(e))
        ctx.finish(e.exit_code, str(e))
        return e.exit_code
    except Exception as e:
        logging.error(f'{args.command} failed: {e}\n{traceback.format_exc()}')
        ctx.finish(1, str(e))
        return 1
    finally:
        configure_scatter()


if __name__ == '__main__':
    sys.exit(main())
