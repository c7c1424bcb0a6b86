import numpy as np
import unittest

from windmpm.errors import InstabilityError, ValidationError
from windmpm.lbm import D3Q27, Boundary, LbmField, bgk_step, deviatoric_stress, init_equilibrium, kinetic_energy, \
    lbm_step, moment_update, momentum_exchange, physical_velocity, raw_second_moment, reconstruct_distributions, \
    taylor_green_field, total_mass, viscosity
from windmpm.scene import FluidParams, default_walls, make_scene
from windmpm.utilities.format_utilities import GRID_CHANNELS

CHANNEL_WALLS = ('periodic', 'periodic', 'sticky', 'sticky', 'periodic', 'periodic')


class TestLattice(unittest.TestCase):

    def test_isotropy(self):
        c = D3Q27.c.astype(np.float64)
        w = D3Q27.w
        self.assertEqual(D3Q27.q, 27)
        self.assertAlmostEqual(w.sum(), 1.0, places=15)
        np.testing.assert_allclose(w @ c, 0.0, atol=1e-15)
        np.testing.assert_allclose(np.einsum('q,qa,qb->ab', w, c, c), np.eye(3) / 3.0, atol=1e-15)
        np.testing.assert_array_equal(c[D3Q27.opp], -c)
        np.testing.assert_array_equal(c[0], [0, 0, 0])

    def test_hermite_orthogonality(self):
        w = D3Q27.w
        np.testing.assert_allclose(np.einsum('q,qk,ql->kl', w, D3Q27.h2, D3Q27.h3), 0.0, atol=1e-15)
        np.testing.assert_allclose(w @ D3Q27.h2, 0.0, atol=1e-15)
        np.testing.assert_allclose(w @ D3Q27.h3, 0.0, atol=1e-15)


class TestMoments(unittest.TestCase):

    def test_reconstruction_reproduces_moments(self):
        rng = np.random.default_rng(0)
        fld = LbmField.create((4, 3, 2), tau=0.8)
        fld.rho = 1.0 + 0.01 * rng.standard_normal(fld.shape)
        fld.u = 0.05 * rng.standard_normal((3,) + fld.shape)
        fld.S = 0.01 * rng.standard_normal((6,) + fld.shape)
        f = reconstruct_distributions(fld)
        np.testing.assert_allclose(f.sum(axis=0), fld.rho, rtol=1e-14)
        mom = np.einsum('qa,q...->a...', D3Q27.c.astype(np.float64), f)
        np.testing.assert_allclose(mom, fld.rho[None] * fld.u, atol=1e-15)
        S = np.einsum('qk,q...->k...', D3Q27.h2, f) / fld.rho[None]
        np.testing.assert_allclose(S, fld.S, atol=1e-15)

    def test_moment_update_unit_tau(self):
        rng = np.random.default_rng(1)
        rho = np.ones((2, 2, 2))
        u = 0.05 * rng.standard_normal((3, 2, 2, 2))
        S = 0.01 * rng.standard_normal((6, 2, 2, 2))
        _, u1, S1 = moment_update(rho, u, S, None, 1.0)
        # relaxation to u u is complete at tau = 1
        np.testing.assert_allclose(S1[3], u[0] * u[1], atol=1e-16)
        np.testing.assert_allclose(S1[0], u[0] ** 2, atol=1e-16)
        np.testing.assert_array_equal(u1, u)

    def test_rest_state(self):
        fld = LbmField.create((3, 3, 3), tau=0.7)
        np.testing.assert_allclose(raw_second_moment(fld)[:3], 1.0 / 3.0)
        np.testing.assert_array_equal(deviatoric_stress(fld), 0.0)
        self.assertListEqual(list(fld.to_channels().keys()), list(GRID_CHANNELS))

    def test_create_checks(self):
        with self.assertRaises(ValidationError):
            LbmField.create((4, 4, 4), tau=0.5)
        fld = LbmField.create((4, 4, 4), tau=0.8)
        with self.assertRaises(ValidationError):
            lbm_step(fld, np.zeros((3, 2, 2, 2)))
        with self.assertRaises(ValidationError):
            lbm_step(fld, None, np.zeros((2, 2, 2), dtype=bool))
        with self.assertRaises(ValidationError):
            init_equilibrium(fld, 1.0, (0.4, 0.0, 0.0))
        with self.assertLogs(level='WARNING'):
            init_equilibrium(fld, 1.0, (0.15, 0.0, 0.0))


class TestFlows(unittest.TestCase):

    def test_uniform_flow_is_fixed_point(self):
        fld = init_equilibrium(LbmField.create((6, 5, 4), tau=0.7), 1.0, (0.05, 0.02, -0.01))
        for _ in range(10):
            fld = lbm_step(fld)
        np.testing.assert_allclose(fld.rho, 1.0, atol=1e-14)
        np.testing.assert_allclose(fld.velocity_nodes(), np.tile([0.05, 0.02, -0.01], fld.shape + (1,)), atol=1e-14)

    def test_periodic_mass(self):
        fld = taylor_green_field((16, 16, 1), tau=0.6, u0=0.05)
        m0 = total_mass(fld)
        for _ in range(1000):
            fld = lbm_step(fld)
        self.assertLess(abs(total_mass(fld) - m0) / m0, 1e-12)

    def test_slip_walls_keep_tangential_flow(self):
        slip = Boundary(walls=('periodic', 'periodic', 'slip', 'slip', 'periodic', 'periodic'))
        fld = init_equilibrium(LbmField.create((6, 6, 4), tau=0.7, boundary=slip), 1.0, (0.05, 0.0, 0.0))
        m0 = total_mass(fld)
        for _ in range(20):
            fld = lbm_step(fld)
        np.testing.assert_allclose(fld.u[0], 0.05, atol=1e-13)
        np.testing.assert_allclose(fld.u[1:], 0.0, atol=1e-13)
        self.assertLess(abs(total_mass(fld) - m0) / m0, 1e-12)

        # the same flow between sticky walls is slowed at the wall
        fld = init_equilibrium(LbmField.create((6, 6, 4), tau=0.7, boundary=Boundary(walls=CHANNEL_WALLS)), 1.0,
                               (0.05, 0.0, 0.0))
        for _ in range(20):
            fld = lbm_step(fld)
        self.assertLess(float(fld.u[0, :, 0].max()), 0.045)

    def test_mirror(self):
        for axis in range(3):
            m = D3Q27.mirror(axis)
            flipped = D3Q27.c.copy()
            flipped[:, axis] *= -1
            np.testing.assert_array_equal(D3Q27.c[m], flipped)
            np.testing.assert_array_equal(m[m], np.arange(27))

    def test_poiseuille(self):
        ny = 32
        tau = 0.9
        g = 2e-5
        nu = viscosity(tau)
        force = np.array([g, 0.0, 0.0])
        fld = LbmField.create((1, ny, 1), tau, Boundary(walls=CHANNEL_WALLS))
        for _ in range(6000):
            fld = lbm_step(fld, force)

        ux = physical_velocity(fld, force)[0, 0, :, 0]
        y = np.arange(ny)
        # half-way bounce-back puts the walls at y = -1/2 and y = ny - 1/2
        exact = g * (y + 0.5) * (ny - 0.5 - y) / (2.0 * nu)
        self.assertLess(np.max(np.abs(ux - exact)) / exact.max(), 0.02)
        np.testing.assert_allclose(physical_velocity(fld, force)[1:], 0.0, atol=1e-12)

    def test_taylor_green_decay(self):
        n = 32
        tau = 0.5764
        u0 = 0.05
        nu = viscosity(tau)
        k2 = 2.0 * (2.0 * np.pi / n) ** 2
        steps = 255

        fld = taylor_green_field((n, n, 1), tau=tau, u0=u0)
        e0 = kinetic_energy(fld)
        for _ in range(steps):
            fld = lbm_step(fld)
        ratio = kinetic_energy(fld) / e0
        expected = np.exp(-2.0 * nu * k2 * steps)
        self.assertLess(abs(ratio - expected) / expected, 0.05)

    def test_matches_bgk(self):
        home = taylor_green_field((16, 16, 1), tau=0.8, u0=0.03)
        bgk = home.copy()
        for _ in range(100):
            home = lbm_step(home)
            bgk = bgk_step(bgk)
        diff = np.linalg.norm(home.u - bgk.u) / np.linalg.norm(bgk.u)
        self.assertLess(diff, 0.01)

    def test_solid_nodes_at_rest(self):
        fld = init_equilibrium(LbmField.create((8, 8, 8), tau=0.8), 1.0, (0.05, 0.0, 0.0))
        solid = np.zeros(fld.shape, dtype=bool)
        solid[3:5, 3:5, 3:5] = True
        for _ in range(5):
            fld = lbm_step(fld, None, solid)
        np.testing.assert_array_equal(fld.u[:, solid], 0.0)
        self.assertTrue(np.all(np.isfinite(fld.u)))
        # flow is slowed upstream of the obstacle
        self.assertLess(fld.u[0, 2, 4, 4], 0.05)

        # uncovered nodes are refilled from the mean fluid density
        fld = lbm_step(fld, None, np.zeros(fld.shape, dtype=bool))
        self.assertTrue(np.all(fld.rho > 0.9))

    def test_momentum_exchange(self):
        solid = np.zeros((8, 8, 8), dtype=bool)
        solid[3:5, 3:5, 3:5] = True
        rest = init_equilibrium(LbmField.create((8, 8, 8), tau=0.8), 1.0, (0.0, 0.0, 0.0))
        np.testing.assert_allclose(momentum_exchange(reconstruct_distributions(rest), solid), 0.0, atol=1e-13)

        wind = init_equilibrium(LbmField.create((8, 8, 8), tau=0.8), 1.0, (0.05, 0.0, 0.0))
        push = momentum_exchange(reconstruct_distributions(wind), solid)
        self.assertGreater(push[0], 0.0)
        np.testing.assert_allclose(push[1:], 0.0, atol=1e-13)

    def test_instability(self):
        fld = LbmField.create((4, 4, 4), tau=0.8)
        fld.rho[1, 1, 1] = np.nan
        with self.assertRaises(InstabilityError) as cm:
            lbm_step(fld)
        self.assertIn((1, 1, 1), cm.exception.nodes)


class TestSceneBoundary(unittest.TestCase):

    def scene(self, **walls):
        walls = dict(dict(y_minus='periodic', y_plus='periodic', z_minus='periodic', z_plus='periodic'), **walls)
        return make_scene(res=16, frame_dt=0.02, substeps=2,
                          fluid=FluidParams(nu=0.039, inlet_speed=0.3125, inlet_dir=(1.0, 0.0, 0.0)),
                          wall_bc=default_walls(**walls))

    def test_inlet(self):
        scene = self.scene(x_minus='open', x_plus='open')
        boundary = Boundary.from_scene(scene)
        self.assertEqual(boundary.inlet_face, 'x-')
        np.testing.assert_allclose(boundary.inlet_velocity, [0.05, 0.0, 0.0])

        fld = LbmField.from_scene(scene)
        np.testing.assert_allclose(fld.u[0], 0.05)
        for _ in range(20):
            fld = lbm_step(fld)
        self.assertAlmostEqual(float(fld.u[0].mean()), 0.05, delta=0.0025)

    def test_inlet_needs_open_face(self):
        scene = self.scene()
        with self.assertLogs(level='WARNING'):
            boundary = Boundary.from_scene(scene)
        self.assertIsNone(boundary.inlet_face)


if __name__ == "__main__":
    unittest.main()
