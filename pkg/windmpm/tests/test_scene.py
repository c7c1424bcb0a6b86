import json
import numpy as np
import os
import shutil
import tempfile
import unittest
from dataclasses import replace

from windmpm.errors import MaterialError, ValidationError
from windmpm.scene import FluidParams, Material, Scene, default_walls, lame_from_young, lattice_tau, load_scene, \
    make_scene, save_scene, scene_from_dict, scene_to_dict, uniform_walls, validate_scene

FOAM = Material(id=0, name='foam', E=100.0, nu_p=0.3, density=10.0)


def base_scene(**kwargs):
    params = dict(domain_min=(0.0, 0.0, 0.0), domain_max=(1.0, 1.0, 1.0), grid_res=(8, 8, 8), frame_dt=0.02,
                  substeps=2, fluid=FluidParams(nu=0.05), materials=(FOAM,))
    params.update(kwargs)
    return Scene(**params)


class TestMaterial(unittest.TestCase):

    def test_lame(self):
        mu, lam = lame_from_young(1000.0, 0.25)
        self.assertAlmostEqual(mu, 400.0)
        self.assertAlmostEqual(lam, 400.0)

        mu, lam = lame_from_young(100.0, 0.3)
        self.assertAlmostEqual(mu, 100.0 / 2.6)
        self.assertAlmostEqual(lam, 30.0 / (1.3 * 0.4))

    def test_incompressible_rejected(self):
        with self.assertRaises(MaterialError):
            lame_from_young(100.0, 0.5)
        with self.assertRaises(MaterialError):
            lame_from_young(100.0, 0.0)
        with self.assertRaises(MaterialError):
            lame_from_young(0.0, 0.3)

    def test_material_error_is_validation_error(self):
        with self.assertRaises(ValidationError):
            lame_from_young(-1.0, 0.3)


class TestValidate(unittest.TestCase):

    def test_derived_fields(self):
        scene = validate_scene(base_scene())
        self.assertAlmostEqual(scene.dx, 0.125)
        self.assertAlmostEqual(scene.dt_substep, 0.01)
        self.assertAlmostEqual(scene.fluid.tau, 0.05 * 0.01 / 0.125 ** 2 * 3.0 + 0.5)
        self.assertAlmostEqual(scene.material(0).mu, 100.0 / 2.6)
        self.assertAlmostEqual(scene.drag_area, 0.125 ** 2)
        self.assertEqual(scene.shape, (8, 8, 8))

    def test_lattice_tau(self):
        # nu_lattice = 1/6 gives tau = 1
        self.assertAlmostEqual(lattice_tau(1.0 / 6.0, 1.0, 1.0), 1.0)

    def test_tau_bound(self):
        # tau = 0.5 exactly at nu = 0
        with self.assertRaisesRegex(ValidationError, 'tau'):
            validate_scene(base_scene(fluid=FluidParams(nu=1e-9)))

    def test_tau_warning(self):
        # tau = 0.53
        nu = 0.03 / 3.0 * 0.125 ** 2 / 0.01
        with self.assertLogs(level='WARNING'):
            validate_scene(base_scene(fluid=FluidParams(nu=nu)))

    def test_collects_all_problems(self):
        scene = base_scene(domain_max=(1.0, 2.0, 1.0), substeps=0,
                           wall_bc=('sticky', 'periodic', 'sticky', 'sticky', 'sticky', 'glue'),
                           fluid=FluidParams(nu=0.05, rho_w=-1.0, inlet_dir=(1.0, 1.0, 0.0)))
        with self.assertRaises(ValidationError) as cm:
            validate_scene(scene)
        problems = cm.exception.problems
        self.assertTrue(any('cubic' in p for p in problems))
        self.assertTrue(any('substeps' in p for p in problems))
        self.assertTrue(any('glue' in p for p in problems))
        self.assertTrue(any('periodic' in p for p in problems))
        self.assertTrue(any('rho_w' in p for p in problems))
        self.assertTrue(any('unit vector' in p for p in problems))
        self.assertEqual(cm.exception.exit_code, 2)

    def test_bad_material_reported(self):
        bad = Material(id=1, name='jelly', E=10.0, nu_p=0.5, density=1.0)
        with self.assertRaisesRegex(ValidationError, 'jelly'):
            validate_scene(base_scene(materials=(FOAM, bad)))
        with self.assertRaisesRegex(ValidationError, 'twice'):
            validate_scene(base_scene(materials=(FOAM, FOAM)))

    def test_domain_order(self):
        with self.assertRaisesRegex(ValidationError, 'exceed'):
            validate_scene(base_scene(domain_min=(0.0, 0.0, 1.0)))

    def test_mach_limit(self):
        # 40 m/s -> 40 * 0.01 / 0.125 = 3.2 lattice units
        with self.assertRaisesRegex(ValidationError, 'low-Mach'):
            validate_scene(base_scene(fluid=FluidParams(nu=0.05, inlet_speed=40.0)))

    def test_validated_is_frozen(self):
        scene = validate_scene(base_scene())
        with self.assertRaises(Exception):
            scene.substeps = 3
        self.assertEqual(validate_scene(scene), scene)

    def test_unknown_material(self):
        scene = validate_scene(base_scene())
        with self.assertRaises(ValidationError):
            scene.material(5)
        mu, lam = scene.lame_arrays(np.array([0, 0]))
        self.assertAlmostEqual(mu[1], scene.material(0).mu)

    def test_node_positions_and_units(self):
        scene = validate_scene(base_scene(domain_min=(-1.0, 0.0, 0.0), domain_max=(0.0, 1.0, 1.0)))
        nodes = scene.node_positions()
        self.assertTupleEqual(nodes.shape, (8, 8, 8, 3))
        np.testing.assert_allclose(nodes[1, 2, 3], [-0.875, 0.25, 0.375])
        self.assertAlmostEqual(float(scene.lattice_velocity(1.0)), 0.08)
        self.assertAlmostEqual(float(scene.physical_velocity(scene.lattice_velocity(2.5))), 2.5)


class TestWalls(unittest.TestCase):

    def test_default_walls(self):
        walls = default_walls(x_minus='open', z_plus='slip')
        self.assertTupleEqual(walls, ('open', 'sticky', 'sticky', 'sticky', 'sticky', 'slip'))
        self.assertTupleEqual(uniform_walls('periodic'), ('periodic',) * 6)

    def test_wall_lookup(self):
        scene = make_scene(res=8, frame_dt=0.02, substeps=2, fluid=FluidParams(nu=0.05), materials=(FOAM,),
                           wall_bc=default_walls(y_plus='open'))
        self.assertEqual(scene.wall('y+'), 'open')
        self.assertEqual(scene.wall('y-'), 'sticky')


class TestSceneFiles(unittest.TestCase):

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp(dir='./')

    def tearDown(self):
        shutil.rmtree(self.tmp_dir)

    def test_save_load(self):
        scene = make_scene(extent=(1.0, 0.5, 0.5), res=8, frame_dt=0.02, substeps=2, gravity=(0.0, 0.0, -9.81),
                           fluid=FluidParams(nu=0.05, inlet_speed=1.0, force_mode='acceleration'),
                           materials=(FOAM,), wall_bc=default_walls(x_minus='open', x_plus='open'))
        path = os.path.join(self.tmp_dir, 'scenes', 'a.json')
        save_scene(scene, path)
        back = validate_scene(load_scene(path))
        self.assertEqual(back, scene)
        self.assertTupleEqual(back.grid_res, (8, 4, 4))

    def test_bundled_scene(self):
        path = os.path.join(os.path.dirname(__file__), '..', 'data', 'gradcheck_scene.json')
        scene = validate_scene(load_scene(path))
        self.assertTupleEqual(scene.shape, (8, 8, 8))
        self.assertEqual(scene.materials[0].name, 'foam')

    def test_unknown_key(self):
        doc = scene_to_dict(validate_scene(base_scene()))
        doc['fluid']['viscosity'] = 1.0
        with self.assertRaisesRegex(ValidationError, 'viscosity'):
            scene_from_dict(doc)

        doc = scene_to_dict(validate_scene(base_scene()))
        doc['extra'] = {}
        with self.assertRaises(ValidationError):
            scene_from_dict(doc)

    def test_schema_and_missing(self):
        doc = scene_to_dict(validate_scene(base_scene()))
        doc['schema'] = 2
        with self.assertRaisesRegex(ValidationError, 'schema'):
            scene_from_dict(doc)

        doc = scene_to_dict(validate_scene(base_scene()))
        del doc['materials'][0]['E']
        with self.assertRaises(ValidationError):
            scene_from_dict(doc)

    def test_missing_walls_default_sticky(self):
        doc = scene_to_dict(validate_scene(base_scene()))
        doc['walls'] = {'x-': 'open'}
        scene = validate_scene(scene_from_dict(doc))
        self.assertTupleEqual(scene.wall_bc, ('open',) + ('sticky',) * 5)

    def test_bad_json(self):
        path = os.path.join(self.tmp_dir, 'bad.json')
        with open(path, 'w') as fd:
            fd.write('{"schema": 1,')
        with self.assertRaises(ValidationError):
            load_scene(path)
        with self.assertRaises(ValidationError):
            load_scene(os.path.join(self.tmp_dir, 'missing.json'))

    def test_json_layout(self):
        doc = scene_to_dict(validate_scene(base_scene()))
        text = json.dumps(doc)
        self.assertDictEqual(json.loads(text)['walls'], {f: 'sticky' for f in ('x-', 'x+', 'y-', 'y+', 'z-', 'z+')})
        self.assertEqual(doc['time'], {'frame_dt': 0.02, 'substeps': 2})

    def test_replace_revalidates(self):
        scene = validate_scene(base_scene())
        with self.assertRaises(ValidationError):
            validate_scene(replace(scene, frame_dt=-1.0))


if __name__ == "__main__":
    unittest.main()
