import numpy as np
import os
import shutil
import tempfile
import unittest

from windmpm.coupling import GuideField, nodal_mass
from windmpm.errors import OptimizationError, ValidationError
from windmpm.inverse import ForceField, ObservationSequence, ReconOptions, ReconReport, angular_error, \
    eval_metrics, observation_loss, phys_loss, phys_loss_and_gradient, reconstruct_sequence, reconstruct_step, \
    retarget
from windmpm.mpm import ParticleSet, simulate_frames
from windmpm.scene import FluidParams, Material, default_walls, make_scene, uniform_walls

FOAM = Material(id=0, name='foam', E=500.0, nu_p=0.3, density=100.0)
# nodes holding less than this share of the peak nodal mass are too weakly coupled to the markers to be scored
LOADED_FRACTION = 0.05
SPACING = 1.0 / 32.0
BLOCK_START = 4.25 / 16.0


def synthetic_scene(res=16, frame_dt=0.04, substeps=4, materials=(FOAM,), walls=None, **fluid):
    fluid = dict(dict(nu=0.05, force_mode='acceleration'), **fluid)
    return make_scene(res=res, frame_dt=frame_dt, substeps=substeps, materials=materials,
                      fluid=FluidParams(**fluid), wall_bc=uniform_walls('open') if walls is None else walls)


def block_state(scene, n=8, start=BLOCK_START, material=FOAM):
    ax = start + SPACING * np.arange(n)
    pts = np.stack(np.meshgrid(ax, ax, ax, indexing='ij'), axis=-1).reshape(-1, 3)
    return ParticleSet.from_points(pts, material_id=material.id, density=material.density,
                                   particle_volume=SPACING ** 3)


def uniform_forces(scene, frames, a):
    return np.broadcast_to(np.asarray(a, dtype=np.float64), (frames,) + scene.shape + (3,)).copy()


def smooth_forces(scene, frames, seed=None):
    x = scene.node_positions()
    two_pi = 2.0 * np.pi
    if seed is None:
        base, phase = np.array([2.0, 0.0, 0.0]), np.zeros(3)
    else:
        rng = np.random.default_rng(seed)
        base = rng.standard_normal(3)
        base *= 2.0 / np.linalg.norm(base)
        phase = two_pi * rng.random(3)
    a = np.stack([
        base[0] + 0.5 * np.sin(two_pi * x[..., 1] + phase[0]),
        base[1] + 0.5 * np.cos(two_pi * x[..., 0] + phase[1]),
        base[2] + 0.25 * np.sin(two_pi * x[..., 2] + phase[2]),
    ], axis=-1)
    return np.broadcast_to(a, (frames,) + a.shape).copy()


def loaded_masks(trajectory, scene):
    masks = []
    for state in trajectory[:-1]:
        m = nodal_mass(state, scene)
        masks.append(m >= LOADED_FRACTION * m.max())
    return np.stack(masks)[..., None]


def generate(scene, state, forces):
    trajectory = simulate_frames(state, forces, scene, len(forces))
    return trajectory, ObservationSequence.from_trajectory(trajectory)


class TestLosses(unittest.TestCase):

    def test_observation_loss(self):
        a = np.zeros((2, 3))
        b = np.array([[0.0, 0.0, 1e-3], [0.0, 0.0, 0.0]])
        self.assertAlmostEqual(observation_loss(a, b), 0.5e-6)
        self.assertEqual(observation_loss(a, a), 0.0)
        self.assertEqual(observation_loss(np.zeros((0, 3)), np.zeros((0, 3))), 0.0)
        with self.assertRaises(ValidationError):
            observation_loss(a, b[:1])

    def guide(self):
        return GuideField.uniform((1, 1, 1), (1.0, 0.0, 0.0))

    def test_phys_loss_examples(self):
        g = self.guide()
        self.assertEqual(phys_loss(np.array([[[[5.0, 0.0, 0.0]]]]), g), 0.0)
        self.assertAlmostEqual(phys_loss(np.array([[[[0.0, 1.0, 0.0]]]]), g), 1.0)
        s = np.sqrt(0.5)
        self.assertAlmostEqual(phys_loss(np.array([[[[s, s, 0.0]]]]), g), 0.5)

    def test_phys_loss_scaling_and_sign(self):
        rng = np.random.default_rng(0)
        F = rng.standard_normal((3, 3, 3, 3))
        guide = GuideField.from_vectors(rng.standard_normal((3, 3, 3, 3)))
        flipped = GuideField.from_vectors(-guide.d)
        self.assertAlmostEqual(phys_loss(3.0 * F, guide), 9.0 * phys_loss(F, guide))
        self.assertAlmostEqual(phys_loss(F, flipped), phys_loss(F, guide))

    def test_null_guide_skipped(self):
        vectors = np.zeros((2, 1, 1, 3))
        vectors[0, 0, 0] = [1.0, 0.0, 0.0]
        guide = GuideField.from_vectors(vectors)
        self.assertListEqual(list(guide.valid.ravel()), [True, False])
        F = np.zeros((2, 1, 1, 3))
        F[1, 0, 0] = [0.0, 7.0, 0.0]
        self.assertEqual(phys_loss(F, guide), 0.0)

    def test_normalized(self):
        g = self.guide()
        self.assertAlmostEqual(phys_loss(np.array([[[[0.0, 3.0, 0.0]]]]), g, normalized=True), 1.0)
        self.assertAlmostEqual(phys_loss(np.array([[[[2.0, 2.0, 0.0]]]]), g, normalized=True), 0.5)
        self.assertEqual(phys_loss(np.zeros((1, 1, 1, 3)), g, normalized=True), 0.0)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        F = rng.standard_normal((2, 2, 2, 3))
        guide = GuideField.from_vectors(rng.standard_normal((2, 2, 2, 3)))
        h = 1e-6
        for normalized in (False, True):
            _, grad = phys_loss_and_gradient(F, guide, normalized)
            fd = np.zeros_like(F)
            for idx in np.ndindex(*F.shape):
                e = np.zeros_like(F)
                e[idx] = h
                fd[idx] = (phys_loss(F + e, guide, normalized) - phys_loss(F - e, guide, normalized)) / (2 * h)
            np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)

    def test_shape_mismatch(self):
        with self.assertRaises(ValidationError):
            phys_loss(np.zeros((2, 2, 2, 3)), self.guide())


class TestMetrics(unittest.TestCase):

    def test_identical(self):
        F = np.random.default_rng(2).standard_normal((2, 3, 3, 3, 3))
        cos, nmse = eval_metrics(F, F)
        self.assertAlmostEqual(cos, 1.0)
        self.assertAlmostEqual(nmse, 0.0)
        self.assertAlmostEqual(angular_error(F, F), 0.0, places=5)

    def test_opposite(self):
        F = np.random.default_rng(3).standard_normal((1, 2, 2, 2, 3))
        cos, nmse = eval_metrics(ForceField(F), ForceField(-F))
        self.assertAlmostEqual(cos, -1.0)
        self.assertAlmostEqual(nmse, 4.0)

    def test_perpendicular_and_magnitude(self):
        a = np.zeros((1, 1, 1, 2, 3))
        b = np.zeros((1, 1, 1, 2, 3))
        a[..., 0, :] = [1.0, 0.0, 0.0]
        b[..., 0, :] = [0.0, 4.0, 0.0]
        a[..., 1, :] = [0.0, 0.0, 2.0]
        b[..., 1, :] = [0.0, 0.0, 9.0]
        cos, nmse = eval_metrics(a, b)
        self.assertAlmostEqual(cos, 0.5)
        self.assertAlmostEqual(nmse, 1.0)
        self.assertAlmostEqual(angular_error(a, b), 45.0)

    def test_zero_nodes_excluded(self):
        a = np.zeros((1, 1, 1, 2, 3))
        b = np.zeros((1, 1, 1, 2, 3))
        a[..., 0, :] = [1.0, 0.0, 0.0]
        b[..., 0, :] = [2.0, 0.0, 0.0]
        b[..., 1, :] = [0.0, 1.0, 0.0]
        self.assertEqual(eval_metrics(a, b), (1.0, 0.0))
        with self.assertRaises(ValidationError):
            eval_metrics(np.zeros_like(a), b)
        with self.assertRaises(ValidationError):
            eval_metrics(a, b[..., :1, :])


class TestOptionsAndData(unittest.TestCase):

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp(dir='./')

    def tearDown(self):
        shutil.rmtree(self.tmp_dir)

    def test_options(self):
        with self.assertRaises(ValidationError) as cm:
            ReconOptions(lambda_phys=-1.0, optimizer='lbfgs', learning_rate=0.0)
        self.assertEqual(len(cm.exception.problems), 3)

    def test_observations(self):
        scene = synthetic_scene()
        state = block_state(scene, n=2)
        obs = ObservationSequence.from_trajectory([state, state], marker_ids=[0, 3])
        self.assertEqual(obs.frames, 1)
        obs.check_initial(state, 1e-12)

        path = os.path.join(self.tmp_dir, 'obs.csv')
        obs.to_csv(path)
        back = ObservationSequence.from_csv(path)
        np.testing.assert_array_equal(back.positions, obs.positions)

        moved = state.copy()
        moved.x[3] += 1e-3
        with self.assertRaisesRegex(ValidationError, 'Frame 0'):
            obs.check_initial(moved, 1e-6)
        with self.assertRaises(ValidationError):
            ObservationSequence(marker_ids=[0, 1], positions=np.zeros((2, 3, 3)))
        with self.assertRaises(ValidationError):
            ObservationSequence(marker_ids=[0, 99], positions=np.zeros((2, 2, 3))).check_initial(state, 1.0)

    def test_force_field(self):
        scene = synthetic_scene()
        ff = ForceField.zeros(2, scene.shape)
        self.assertEqual(len(ff), 2)
        self.assertEqual(ff.grid_shape, (16, 16, 16))
        ff.check(scene)
        with self.assertRaises(ValidationError):
            ForceField.zeros(2, (8, 8, 8)).check(scene)
        ff.forces[0, 0, 0, 0, 0] = np.inf
        with self.assertRaises(ValidationError):
            ff.check(scene)
        with self.assertRaises(ValidationError):
            ForceField(np.zeros((16, 16, 16, 3)))

        path = os.path.join(self.tmp_dir, 'f.dwff')
        ForceField(uniform_forces(scene, 2, [1.0, 2.0, 3.0])).save(path)
        np.testing.assert_array_equal(ForceField.load(path)[1][4, 5, 6], [1.0, 2.0, 3.0])


class TestReconstructStep(unittest.TestCase):

    def test_zero_iterations(self):
        scene = synthetic_scene()
        state = block_state(scene, n=4)
        free = simulate_frames(state, None, scene, 1)[-1]
        force, nxt, trace = reconstruct_step(state, free.x, None, scene, ReconOptions(max_iters=0))
        np.testing.assert_array_equal(force, 0.0)
        np.testing.assert_allclose(nxt.x, free.x, rtol=0.0, atol=1e-14)
        self.assertEqual(len(trace), 1)
        self.assertLess(trace[0]['obs'], 1e-24)

    def test_single_interval(self):
        scene = synthetic_scene()
        state = block_state(scene)
        gt = uniform_forces(scene, 1, [2.0, 0.5, 0.0])
        trajectory, obs = generate(scene, state, gt)
        opts = ReconOptions(lambda_phys=0.0, max_iters=60, rel_tol=1e-12)
        force, nxt, trace = reconstruct_step(state, obs.positions[1], None, scene, opts)
        self.assertLess(trace[-1]['total'], 1e-2 * trace[0]['total'])
        totals = [r['total'] for r in trace]
        self.assertTrue(all(b <= a for a, b in zip(totals, totals[1:])))
        self.assertListEqual([r['iter'] for r in trace], list(range(len(trace))))

        mask = loaded_masks(trajectory, scene)
        cos, _ = eval_metrics(gt * mask, force[None] * mask)
        self.assertGreater(cos, 0.9)


class TestSelfConsistency(unittest.TestCase):

    def check_recovery(self, gt):
        scene = synthetic_scene()
        state = block_state(scene)
        self.assertGreaterEqual(len(state), 200)
        trajectory, obs = generate(scene, state, gt)
        opts = ReconOptions(lambda_phys=0.0, max_iters=100, rel_tol=1e-12)
        report = reconstruct_sequence(state, obs, scene, opts)

        self.assertEqual(report.forces.steps, 5)
        mask = loaded_masks(trajectory, scene)
        cos, nmse = eval_metrics(gt * mask, report.forces.forces * mask)
        self.assertGreaterEqual(cos, 0.90)
        self.assertLessEqual(nmse, 0.10)
        for frame in report.frames:
            self.assertLess(frame.marker_rmse, 1e-4, msg=f'frame {frame.frame}')
        return scene, state, obs, report

    def test_uniform(self):
        scene = synthetic_scene()
        scene, state, obs, report = self.check_recovery(uniform_forces(scene, 5, [2.0, 0.5, 0.0]))

        # replaying the recovered forces lands on the reconstructed marker positions
        replay = retarget(report.forces, state, scene)
        for t, frame in enumerate(report.frames):
            r = replay[t + 1].x[obs.marker_ids] - obs.positions[t + 1]
            self.assertAlmostEqual(float(np.sqrt(np.mean(np.sum(r * r, axis=1)))), frame.marker_rmse, places=10)

        text = report.to_json()
        back = ReconReport.from_json(text, forces=report.forces)
        self.assertEqual(back.frames, report.frames)
        self.assertEqual(back.options, report.options)
        self.assertEqual(len(back.traces), 5)

    def test_smooth(self):
        scene = synthetic_scene()
        self.check_recovery(smooth_forces(scene, 5))


class TestPhysicsLoss(unittest.TestCase):

    def test_ablation(self):
        # a guide aligned with the true force never makes the recovered directions worse
        scene = synthetic_scene()
        state = block_state(scene)
        for seed in range(5):
            gt = smooth_forces(scene, 2, seed=seed)
            trajectory, obs = generate(scene, state, gt)
            mask = loaded_masks(trajectory, scene)
            guide = GuideField.from_vectors(gt[0])
            errors = []
            for lam in (0.0, 0.1):
                opts = ReconOptions(lambda_phys=lam, max_iters=40, rel_tol=1e-12)
                report = reconstruct_sequence(state, obs, scene, opts, guides=guide)
                errors.append(angular_error(gt * mask, report.forces.forces * mask))
            self.assertLessEqual(errors[1], errors[0], msg=f'seed {seed}')

    def test_lbm_guide(self):
        scene = synthetic_scene(inlet_speed=0.3)
        state = block_state(scene, n=4)
        _, obs = generate(scene, state, uniform_forces(scene, 1, [1.0, 0.0, 0.0]))
        report = reconstruct_sequence(state, obs, scene, ReconOptions(lambda_phys=0.1, max_iters=3))
        self.assertEqual(len(report.frames), 1)
        self.assertLessEqual(report.frames[0].iterations, 3)
        self.assertGreaterEqual(report.frames[0].phys_loss, 0.0)
        self.assertLess(report.frames[0].total_loss, report.traces[0][0]['total'])


class TestResolution(unittest.TestCase):

    def recover(self, res):
        scene = synthetic_scene(res=res, frame_dt=0.04, substeps=8)
        state = block_state(scene)
        gt = uniform_forces(scene, 3, [2.0, 0.5, 0.0])
        trajectory, obs = generate(scene, state, gt)
        report = reconstruct_sequence(state, obs, scene, ReconOptions(lambda_phys=0.0, max_iters=60, rel_tol=1e-12))
        mask = loaded_masks(trajectory, scene)
        return eval_metrics(gt * mask, report.forces.forces * mask)[0]

    def test_stable_across_resolutions(self):
        cos16 = self.recover(16)
        cos32 = self.recover(32)
        self.assertGreaterEqual(cos16, 0.9)
        self.assertLess(abs(cos16 - cos32), 0.05)


class TestFailures(unittest.TestCase):

    def test_non_finite_observation(self):
        scene = synthetic_scene()
        state = block_state(scene, n=2)
        obs = ObservationSequence.from_trajectory([state, state, state])
        obs.positions[2, 0, 0] = np.nan
        with self.assertRaises(OptimizationError) as cm:
            reconstruct_sequence(state, obs, scene, ReconOptions(lambda_phys=0.0, max_iters=2))
        partial = cm.exception.partial
        self.assertIsInstance(partial, ReconReport)
        self.assertEqual(len(partial.frames), 1)

    def test_retarget_grid_mismatch(self):
        scene = synthetic_scene()
        with self.assertRaises(ValidationError):
            retarget(ForceField.zeros(1, (8, 8, 8)), block_state(scene, n=2), scene)


class TestRetarget(unittest.TestCase):

    def test_stiffer_moves_less(self):
        soft = Material(id=0, name='soft', E=200.0, nu_p=0.3, density=100.0)
        stiff = Material(id=1, name='stiff', E=5000.0, nu_p=0.3, density=100.0)
        scene = synthetic_scene(frame_dt=0.02, substeps=10, materials=(soft, stiff),
                                walls=default_walls(x_minus='open', x_plus='open', y_minus='open', y_plus='open',
                                                    z_plus='open'))
        forces = ForceField(uniform_forces(scene, 5, [2.0, 0.0, 0.0]))

        peaks = []
        for material in (soft, stiff):
            # the bottom layer's stencil reaches the sticky z- band
            state = block_state(scene, start=BLOCK_START, material=material)
            state.x[:, 2] -= BLOCK_START - 3.25 / 16.0
            frames = retarget(forces, state, scene)
            peaks.append(max(float(np.max(np.linalg.norm(s.x - state.x, axis=1))) for s in frames))
        self.assertGreater(peaks[0], peaks[1])
        self.assertGreater(peaks[1], 0.0)


if __name__ == "__main__":
    unittest.main()
