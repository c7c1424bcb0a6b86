import numpy as np
import os
import unittest
from dataclasses import replace

from windmpm.adjoint import MAX_FD_NODES, backward, finite_difference_grad, forward_record, gradient_check, \
    marker_loss_gradient, perturbed_block
from windmpm.errors import ValidationError
from windmpm.scene import FluidParams, load_scene, make_scene, uniform_walls, validate_scene

SCENE_PATH = os.path.join(os.path.dirname(__file__), '..', 'data', 'gradcheck_scene.json')
TOLERANCE = 1e-4


def bundled_scene(**kwargs):
    scene = validate_scene(load_scene(SCENE_PATH))
    if kwargs:
        scene = validate_scene(replace(scene, **kwargs))
    return scene


def random_force(scene, seed, scale=1e-3):
    return scale * np.random.default_rng(seed).standard_normal(scene.shape + (3,))


class TestGradcheck(unittest.TestCase):

    def test_block_layout(self):
        scene = bundled_scene()
        state = perturbed_block(scene, seed=0)
        self.assertEqual(len(state), 216)
        self.assertAlmostEqual(state.x.min(), 2.75 * scene.dx)
        self.assertAlmostEqual(state.x.max(), 5.25 * scene.dx)
        self.assertAlmostEqual(state.mass[0], 10.0 * (scene.dx / 2) ** 3)

    def test_nodal_force(self):
        scene = bundled_scene()
        for seed in range(10):
            state = perturbed_block(scene, seed=seed)
            result = gradient_check(state, random_force(scene, seed), scene, max_nodes=4, seed=seed)
            self.assertEqual(len(result.nodes), 4)
            self.assertLess(result.max_rel_error, TOLERANCE, msg=f'seed {seed}')

    def test_acceleration_force(self):
        scene = bundled_scene(fluid=replace(bundled_scene().fluid, force_mode='acceleration'))
        for seed in range(5):
            state = perturbed_block(scene, seed=seed)
            result = gradient_check(state, random_force(scene, seed, scale=0.5), scene, max_nodes=4, seed=seed)
            self.assertLess(result.max_rel_error, TOLERANCE, msg=f'seed {seed}')

    def test_sticky_walls(self):
        # the block's stencil reaches the wall band, so the mask path is exercised
        scene = bundled_scene(wall_bc=uniform_walls('sticky'))
        for seed in range(3):
            state = perturbed_block(scene, seed=seed)
            result = gradient_check(state, random_force(scene, seed), scene, max_nodes=6, seed=seed)
            self.assertLess(result.max_rel_error, TOLERANCE, msg=f'seed {seed}')

    def test_longer_window(self):
        scene = bundled_scene()
        state = perturbed_block(scene, seed=3)
        result = gradient_check(state, random_force(scene, 3), scene, substeps=5, max_nodes=4, seed=3)
        self.assertLess(result.max_rel_error, TOLERANCE)

    def test_random_small_scenes(self):
        scene = bundled_scene()
        rng = np.random.default_rng(2024)
        for seed in range(20):
            # 2 to 4 particles per axis at dx/2 spacing, anywhere inside the block region
            n = int(rng.integers(2, 5))
            lo = 2.5 + 0.5 * int(rng.integers(0, 7 - n))
            substeps = int(rng.integers(1, 5))
            state = perturbed_block(scene, seed=seed, lo=lo, hi=lo + 0.5 * n)
            self.assertEqual(len(state), n ** 3)
            self.assertLessEqual(len(state), 100)
            result = gradient_check(state, random_force(scene, seed), scene, substeps=substeps, max_nodes=4,
                                    seed=seed)
            self.assertLess(result.max_rel_error, TOLERANCE,
                            msg=f'seed {seed}, {n ** 3} particles, {substeps} substeps')


class TestBackward(unittest.TestCase):

    def setUp(self):
        self.scene = bundled_scene()
        self.state = perturbed_block(self.scene, seed=1)
        self.force = random_force(self.scene, 1)

    def test_unloaded_nodes_get_zero(self):
        final, tape = forward_record(self.state, self.force, self.scene)
        g = backward(tape, np.ones_like(final.x))
        self.assertTrue(np.all(g[0, 0, 0] == 0.0))
        self.assertTrue(np.all(g[7, 7, 7] == 0.0))
        self.assertGreater(np.abs(g[4, 4, 4]).max(), 0.0)

    def test_replay(self):
        final, tape = forward_record(self.state, self.force, self.scene)
        self.assertEqual(len(tape), self.scene.substeps)
        replayed = tape.replay()
        np.testing.assert_array_equal(replayed.x, final.x)
        np.testing.assert_array_equal(replayed.F, final.F)
        self.assertIs(tape.final, final)

    def test_empty_window(self):
        final, tape = forward_record(self.state, self.force, self.scene, substeps=0)
        self.assertIs(final, self.state)
        gx = np.random.default_rng(2).standard_normal(final.x.shape)
        g, gs = backward(tape, gx, return_state=True)
        np.testing.assert_array_equal(g, 0.0)
        np.testing.assert_array_equal(gs.x, gx)
        with self.assertRaises(ValidationError):
            forward_record(self.state, self.force, self.scene, substeps=-1)

    def test_linear_in_upstream_gradient(self):
        final, tape = forward_record(self.state, self.force, self.scene)
        rng = np.random.default_rng(4)
        a = rng.standard_normal(final.x.shape)
        b = rng.standard_normal(final.x.shape)
        np.testing.assert_allclose(backward(tape, a + 2.0 * b), backward(tape, a) + 2.0 * backward(tape, b),
                                   rtol=1e-10, atol=1e-14)


class TestMarkerLoss(unittest.TestCase):

    def test_value_and_gradient(self):
        scene = bundled_scene()
        state = perturbed_block(scene, seed=0)
        ids = np.array([0, 5, 5])
        observed = state.x[ids] + np.array([[0.1, 0.0, 0.0], [0.0, 0.2, 0.0], [0.0, 0.0, 0.0]])
        loss, gx = marker_loss_gradient(state, ids, observed)
        self.assertAlmostEqual(loss, (0.01 + 0.04) / 3.0)
        np.testing.assert_allclose(gx[0], [-0.2 / 3.0, 0.0, 0.0])
        # duplicated markers accumulate
        np.testing.assert_allclose(gx[5], [0.0, -0.4 / 3.0, 0.0])
        self.assertTrue(np.all(gx[1] == 0.0))
        with self.assertRaises(ValidationError):
            marker_loss_gradient(state, ids, observed[:2])


class TestFiniteDifference(unittest.TestCase):

    def test_checks(self):
        scene = bundled_scene()
        state = perturbed_block(scene, seed=0)

        def loss(s):
            return float(np.sum(s.x))

        with self.assertRaises(ValidationError):
            finite_difference_grad(state, None, scene, loss, h=0.0)

        big = make_scene(res=17, frame_dt=0.02, substeps=2, fluid=FluidParams(nu=0.05), materials=scene.materials)
        self.assertGreater(int(np.prod(big.shape)), MAX_FD_NODES)
        with self.assertRaises(ValidationError):
            finite_difference_grad(state, None, big, loss, h=1e-5)

    def test_restricted_nodes(self):
        scene = bundled_scene()
        state = perturbed_block(scene, seed=0)

        def loss(s):
            return float(np.sum(s.x[:, 0]))

        g = finite_difference_grad(state, None, scene, loss, h=1e-5, nodes=[(4, 4, 4)])
        self.assertEqual(np.count_nonzero(g[..., :]), np.count_nonzero(g[4, 4, 4]))
        # pushing along x moves the particles along x
        self.assertGreater(g[4, 4, 4, 0], 0.0)


if __name__ == "__main__":
    unittest.main()
