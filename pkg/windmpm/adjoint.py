"""
Reverse-mode gradients of an MPM window with respect to the wind force field.

The force is held constant over the substeps of one window (one observation interval).  :func:`forward_record`
runs the window through the same substep kernel as :func:`windmpm.mpm.mpm_step` and keeps every intermediate;
:func:`backward` walks the tape in reverse: deformation update, advection, G2P, wall mask, grid update, P2G with
the Neo-Hookean stress derivative.

Example::

    final, tape = forward_record(state, force, scene)
    loss, gx = marker_loss_gradient(final, marker_ids, observed)
    g_force = backward(tape, gx)
"""

from dataclasses import dataclass, field
import numpy as np
from typing import Callable, List, Optional, Sequence, Tuple

from windmpm.errors import GradcheckError, ValidationError
from windmpm.mpm import ParticleSet, SubstepRecord, boundary_mask, gather, neo_hookean_stress_vjp, \
    scatter, substep
from windmpm.scene import Scene

MAX_FD_NODES = 16 ** 3


@dataclass
class Tape:
    initial: ParticleSet
    force: np.ndarray
    scene: Scene
    dt: float
    records: List[SubstepRecord] = field(default_factory=list)
    final: Optional[ParticleSet] = None

    def __len__(self):
        return len(self.records)

    def replay(self) -> ParticleSet:
        """
        Re-run the recorded window forward from its initial state.
        """
        state = self.initial
        if self.records:
            mu, lam = self.records[0].mu, self.records[0].lam
            for _ in self.records:
                state, _ = substep(state, self.force, self.scene, self.dt, mu, lam)
        return state


@dataclass
class StateGradient:
    x: np.ndarray
    v: np.ndarray
    C: np.ndarray
    F: np.ndarray


def forward_record(state: ParticleSet, force_field: Optional[np.ndarray], scene: Scene,
                   substeps: Optional[int] = None) -> Tuple[ParticleSet, Tape]:
    """
    Simulate one window and record it.

    :param state: initial state (not modified)
    :param force_field: (nx, ny, nz, 3) force held over the window, None for zero
    :param scene: validated scene
    :param substeps: window length (default scene.substeps); 0 returns the input state and an empty tape
    :return: (final state, tape)
    """
    substeps = scene.substeps if substeps is None else int(substeps)
    if substeps < 0:
        raise ValidationError(f'substeps must be >= 0, got {substeps}')
    force = np.zeros(scene.shape + (3,)) if force_field is None else np.asarray(force_field, dtype=np.float64)
    tape = Tape(initial=state, force=force, scene=scene, dt=scene.dt_substep)
    mu, lam = scene.lame_arrays(state.material_id)
    for _ in range(substeps):
        state, record = substep(state, force, scene, tape.dt, mu, lam)
        tape.records.append(record)
    tape.final = state
    return state, tape


def backward(tape: Tape, dL_dx_final: np.ndarray, dL_dv_final: Optional[np.ndarray] = None,
             dL_dC_final: Optional[np.ndarray] = None, dL_dF_final: Optional[np.ndarray] = None,
             return_state: bool = False):
    """
    Gradient of a loss on the final window state with respect to the window's force field.

    :param tape: tape from :func:`forward_record`
    :param dL_dx_final: (N, 3) loss gradient with respect to final positions
    :param dL_dv_final: (N, 3) with respect to final velocities (optional)
    :param dL_dC_final: (N, 3, 3) with respect to final affine matrices (optional)
    :param dL_dF_final: (N, 3, 3) with respect to final deformation gradients (optional)
    :param return_state: also return the gradient with respect to the initial state
    :return: (nx, ny, nz, 3) force gradient, plus a :class:`StateGradient` when ``return_state``
    """
    scene = tape.scene
    n = len(tape.initial)
    gx = np.array(dL_dx_final, dtype=np.float64).reshape(n, 3)
    gv = np.zeros((n, 3)) if dL_dv_final is None else np.array(dL_dv_final, dtype=np.float64).reshape(n, 3)
    gC = np.zeros((n, 3, 3)) if dL_dC_final is None else np.array(dL_dC_final, dtype=np.float64).reshape(n, 3, 3)
    gF = np.zeros((n, 3, 3)) if dL_dF_final is None else np.array(dL_dF_final, dtype=np.float64).reshape(n, 3, 3)

    g_force = np.zeros(scene.shape + (3,))
    for record in reversed(tape.records):
        gx, gv, gC, gF, g_f = _substep_backward(record, tape.force, scene, tape.dt, gx, gv, gC, gF)
        g_force += g_f

    if return_state:
        return g_force, StateGradient(x=gx, v=gv, C=gC, F=gF)
    return g_force


def _substep_backward(rec: SubstepRecord, force: np.ndarray, scene: Scene, dt: float, gx_out: np.ndarray,
                      gv_out: np.ndarray, gC_out: np.ndarray, gF_out: np.ndarray):
    s = rec.state
    st = rec.stencil
    grid = rec.grid
    k = 4.0 * scene.inv_dx ** 2
    shape = scene.shape
    C_new = _new_affine(rec, scene)

    # F' = (I + dt C') F
    gC_new = gC_out + dt * gF_out @ np.swapaxes(s.F, -1, -2)
    gF = np.swapaxes(np.eye(3) + dt * C_new, -1, -2) @ gF_out

    # x' = x + dt v'
    gx = gx_out.copy()
    gv_new = gv_out + dt * gx_out

    # G2P: v' = sum w v_i, C' = k sum w v_i d^T
    vi = gather(st, grid.v.reshape(-1, 3))
    gCd = np.einsum('pab,pnb->pna', gC_new, st.d)
    g_vi_pn = st.w[..., None] * (gv_new[:, None, :] + k * gCd)
    g_v = scatter(st, g_vi_pn)
    scal = np.einsum('pna,pa->pn', vi, gv_new) + k * np.einsum('pna,pna->pn', vi, gCd)
    gx += np.einsum('pn,pna->pa', scal, st.dw)
    gx -= k * np.einsum('pn,pba,pnb->pa', st.w, gC_new, vi)

    # wall mask
    g_vhat = g_v * boundary_mask(scene).reshape(-1, 3)

    # grid update
    m = grid.m.reshape(-1)
    mom = grid.mom.reshape(-1, 3)
    loaded = grid.loaded().reshape(-1)
    m_safe = np.where(loaded, m, 1.0)
    g_vhat = np.where(loaded[:, None], g_vhat, 0.0)
    g_mom = g_vhat / m_safe[:, None]
    if scene.fluid.force_mode == 'acceleration':
        g_f = dt * g_vhat
        g_m = -np.einsum('na,na->n', g_vhat, mom) / m_safe ** 2
    else:
        f = force.reshape(-1, 3)
        g_f = dt * g_vhat / m_safe[:, None]
        g_m = -np.einsum('na,na->n', g_vhat, mom + dt * f) / m_safe ** 2

    # P2G: m_i = sum w m_p, mom_i = sum w (m v + A d)
    g_m_pn = gather(st, g_m)
    g_mom_pn = gather(st, g_mom)
    A = rec.affine
    contrib = s.mass[:, None, None] * s.v[:, None, :] + np.einsum('pij,pnj->pni', A, st.d)
    gx += np.einsum('pn,pna->pa', s.mass[:, None] * g_m_pn + np.einsum('pnb,pnb->pn', g_mom_pn, contrib), st.dw)
    gx -= np.einsum('pn,pba,pnb->pa', st.w, A, g_mom_pn)
    gv = s.mass[:, None] * np.einsum('pn,pna->pa', st.w, g_mom_pn)
    gA = np.einsum('pn,pna,pnb->pab', st.w, g_mom_pn, st.d)

    # A = m C - dt k V0 P F^T
    coef = (dt * k * s.volume0)[:, None, None]
    gC = s.mass[:, None, None] * gA
    gP = -coef * gA @ s.F
    gF = gF - coef * np.swapaxes(gA, -1, -2) @ rec.P
    gF = gF + neo_hookean_stress_vjp(s.F, gP, rec.mu, rec.lam)

    return gx, gv, gC, gF, g_f.reshape(shape + (3,))


def _new_affine(rec: SubstepRecord, scene: Scene) -> np.ndarray:
    st = rec.stencil
    vi = gather(st, rec.grid.v.reshape(-1, 3))
    return 4.0 * scene.inv_dx ** 2 * np.einsum('pn,pni,pnj->pij', st.w, vi, st.d)


def marker_loss_gradient(state: ParticleSet, marker_ids: np.ndarray,
                         observed: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean squared marker error and its gradient with respect to every particle position.

    :param state: simulated state
    :param marker_ids: (M,) particle indices
    :param observed: (M, 3) observed positions
    :return: (loss, (N, 3) gradient)
    """
    marker_ids = np.asarray(marker_ids, dtype=np.int64)
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != (len(marker_ids), 3):
        raise ValidationError(f'Observed markers have shape {observed.shape}, expected {(len(marker_ids), 3)}')
    r = state.x[marker_ids] - observed
    count = max(len(marker_ids), 1)
    loss = float(np.sum(r * r) / count)
    gx = np.zeros_like(state.x)
    np.add.at(gx, marker_ids, 2.0 * r / count)
    return loss, gx


def finite_difference_grad(state: ParticleSet, force_field: Optional[np.ndarray], scene: Scene,
                           loss: Callable[[ParticleSet], float], h: float,
                           nodes: Optional[Sequence[Tuple[int, int, int]]] = None,
                           substeps: Optional[int] = None) -> np.ndarray:
    """
    Central-difference gradient of ``loss(final_state)`` with respect to the force field.  Costs two window
    simulations per evaluated component, so the grid is limited to 16^3 nodes.

    :param state: initial state
    :param force_field: force about which to differentiate
    :param scene: validated scene
    :param loss: scalar function of the final state
    :param h: step size, > 0
    :param nodes: restrict to these node indices (default every node)
    :param substeps: window length (default scene.substeps)
    :return: (nx, ny, nz, 3) gradient, zero at nodes not evaluated
    """
    if not h > 0:
        raise ValidationError(f'Finite difference step must be positive, got h={h}')
    if int(np.prod(scene.shape)) > MAX_FD_NODES:
        raise ValidationError(f'Finite differences are limited to grids of at most {MAX_FD_NODES} nodes, '
                              f'got {scene.shape}')
    base = np.zeros(scene.shape + (3,)) if force_field is None else np.array(force_field, dtype=np.float64)
    if nodes is None:
        nodes = [tuple(i) for i in np.ndindex(*scene.shape)]

    grad = np.zeros_like(base)
    for node in nodes:
        for a in range(3):
            idx = tuple(node) + (a,)
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            l_plus = loss(forward_record(state, plus, scene, substeps)[0])
            l_minus = loss(forward_record(state, minus, scene, substeps)[0])
            grad[idx] = (l_plus - l_minus) / (2.0 * h)
    return grad


@dataclass
class GradcheckResult:
    max_rel_error: float
    adjoint: np.ndarray
    finite_difference: np.ndarray
    nodes: List[Tuple[int, int, int]]


def gradient_check(state: ParticleSet, force_field: Optional[np.ndarray], scene: Scene,
                   substeps: Optional[int] = None, h: Optional[float] = None, max_nodes: Optional[int] = None,
                   seed: int = 0) -> GradcheckResult:
    """
    Compare :func:`backward` against :func:`finite_difference_grad` for a loss mixing a quadratic position term and
    a linear velocity term with random weights.  The error is max |adjoint - fd| / max |fd| over the evaluated
    components.

    :param state: initial state
    :param force_field: force about which to differentiate
    :param scene: validated scene
    :param substeps: window length (default scene.substeps)
    :param h: finite difference step (default 1e-5 times the force scale)
    :param max_nodes: evaluate at most this many loaded nodes, chosen at random
    :param seed: seed for the loss weights and node choice
    :return: comparison result
    """
    rng = np.random.default_rng(seed)
    final, tape = forward_record(state, force_field, scene, substeps)
    target = final.x + 0.1 * scene.dx * rng.standard_normal(final.x.shape)
    b = rng.standard_normal(final.v.shape) * scene.dt_substep

    def loss(s: ParticleSet) -> float:
        r = s.x - target
        return float(0.5 * np.sum(r * r) + np.sum(b * s.v))

    g_adj = backward(tape, final.x - target, b)

    loaded = np.zeros(scene.shape, dtype=bool)
    for rec in tape.records:
        loaded |= rec.grid.loaded()
    nodes = [tuple(int(i) for i in n) for n in np.argwhere(loaded)]
    if max_nodes is not None and len(nodes) > max_nodes:
        pick = rng.choice(len(nodes), size=max_nodes, replace=False)
        nodes = [nodes[i] for i in sorted(pick)]

    if h is None:
        scale = 1.0 if force_field is None else max(1.0, float(np.max(np.abs(force_field))))
        h = 1e-5 * scale
    g_fd = finite_difference_grad(state, force_field, scene, loss, h, nodes=nodes, substeps=substeps)

    sel = tuple(np.array(nodes).T) if nodes else None
    if sel is None:
        raise GradcheckError('No loaded nodes to check')
    fd = g_fd[sel]
    adj = g_adj[sel]
    denom = float(np.max(np.abs(fd)))
    if denom == 0.0:
        err = float(np.max(np.abs(adj)))
    else:
        err = float(np.max(np.abs(adj - fd)) / denom)
    return GradcheckResult(max_rel_error=err, adjoint=g_adj, finite_difference=g_fd, nodes=nodes)


def perturbed_block(scene: Scene, seed: int = 0, lo: float = 2.5, hi: float = 5.5, material_id: Optional[int] = None,
                    speed: float = 0.1) -> ParticleSet:
    """
    Block of particles at spacing dx/2 filling [lo, hi] cells on every axis, with random velocities, small affine
    matrices and deformation gradients near identity.  Used to exercise every term of the adjoint.

    :param scene: validated scene
    :param seed: random seed
    :param lo: block start in cells from domain_min
    :param hi: block end in cells
    :param material_id: material of every particle (default the first material)
    :param speed: velocity scale in m/s
    :return: particle set
    """
    rng = np.random.default_rng(seed)
    h = 0.5 * scene.dx
    n = max(int(round((hi - lo) * scene.dx / h)), 1)
    axis = lo * scene.dx + h * (np.arange(n) + 0.5)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing='ij'), axis=-1).reshape(-1, 3) + np.asarray(scene.domain_min)
    if material_id is None:
        material_id = scene.materials[0].id
    state = ParticleSet.from_points(pts, material_id=material_id, density=scene.material(material_id).density,
                                    scene=scene)
    state.v = speed * rng.standard_normal(state.v.shape)
    state.C = 0.1 * speed * scene.inv_dx * rng.standard_normal(state.C.shape)
    state.F = state.F + 0.02 * rng.standard_normal(state.F.shape)
    return state
