"""
See :mod:`scene <windmpm.scene>` for configuration, :mod:`coupling <windmpm.coupling>` for forward simulation and
:mod:`inverse <windmpm.inverse>` for wind force reconstruction.

"""

from windmpm.coupling import simulate_coupled
from windmpm.errors import GradcheckError, OptimizationError, SimulationError, ValidationError, WindMpmError
from windmpm.inverse import ForceField, ObservationSequence, ReconOptions, eval_metrics, reconstruct_sequence, \
    retarget
from windmpm.mpm import ParticleSet
from windmpm.runstore import VERSION, RunArchive
from windmpm.scene import load_scene, make_scene, validate_scene

__version__ = VERSION
