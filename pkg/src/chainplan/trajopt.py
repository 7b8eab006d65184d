"""Trajectory optimization on a kinematic chain.

The problem: minimize the weighted squared traveled distance (forward
difference) plus a smoothness term (second-order central difference) over a
T x n trajectory with the first row pinned, subject to
  - a goal inequality  ||f_task(q_T) - g||^2 <= xi_goal,
  - a chain-closure equality holding an attached object's base at its world
    anchor at every timestep,
  - joint limits, per-step velocity/acceleration bounds (infinity norm),
  - summed hinge collision margins per timestep.

Solved by penalty-based sequential convex optimization: nonlinear terms are
linearized around the incumbent, hinge/absolute penalties get slack
variables, a box trust region bounds the step, and the penalty weight grows
until the exact residuals pass their tolerances. The objective is quadratic,
so its model is exact; only constraints are approximated.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .geometry import (CollisionPairSet, PosedShape, aabb_overlap,
                       build_collision_pairs, hinge, pair_distance,
                       signed_distance)
from .kinematics import chain_jacobian, forward_kinematics, forward_kinematics_batch
from .model import KinematicTree, extract_chain
from .qp import MAX_ITER, BoxConeQP
from .transforms import Transform, pose_residual, quat_multiply, quat_rotate, quat_to_matrix

CONVERGED = "converged"
CONSTRAINT_VIOLATION = "constraint_violation"
MAX_ITERATIONS = "max_iter"
SUBPROBLEM_FAILURE = "subproblem_failure"


# ---------------------------------------------------------------------------
# problem data

@dataclass
class Trajectory:
    states: np.ndarray          # (T, n)
    joint_names: list

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[0] < 2:
            raise ValueError("trajectory needs at least 2 rows of equal width")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory contains non-finite values")

    @property
    def T(self):
        return self.states.shape[0]

    @property
    def n(self):
        return self.states.shape[1]


@dataclass
class Weights:
    w_vel: np.ndarray
    w_acc: np.ndarray

    def __post_init__(self):
        self.w_vel = np.asarray(self.w_vel, dtype=float)
        self.w_acc = np.asarray(self.w_acc, dtype=float)
        if np.any(self.w_vel < 0) or np.any(self.w_acc < 0):
            raise ValueError("weights must be non-negative")


@dataclass
class GoalSpec:
    """Task goal: an end-effector pose or target joint values."""

    kind: str                    # "ee_pose" | "joint_value"
    link: str = None             # ee_pose: target frame's link
    target: Transform = None     # ee_pose: world target
    position_only: bool = False  # ee_pose: ignore orientation
    joints: list = None          # joint_value: [(joint name, value), ...]
    tol: float = 1e-4            # xi_goal, bounds the squared residual norm

    def __post_init__(self):
        if self.kind not in ("ee_pose", "joint_value"):
            raise ValueError(f"unknown goal kind '{self.kind}'")
        if self.tol <= 0:
            raise ValueError("goal tolerance must be positive")


@dataclass
class ClosureSpec:
    """Equality holding `link` at `anchor` (world) at every timestep."""

    link: str
    anchor: Transform


@dataclass
class CollisionConfig:
    pairs: CollisionPairSet
    environment: list = field(default_factory=list)
    dist_safe: float = 0.02
    xi_dist: float = 1e-4
    activation: float = 0.05     # linearize pairs within dist_safe + activation


@dataclass
class SolverParams:
    mu_init: float = 10.0
    penalty_scale: float = 10.0
    max_penalty: int = 5
    trust_init: float = 0.1
    trust_shrink: float = 0.5
    trust_expand: float = 1.5
    trust_max: float = 0.6
    accept_ratio: float = 0.2
    xtol: float = 1e-5
    ftol: float = 1e-6
    max_convex: int = 30
    tol_closure: float = 1e-4
    tol_rate: float = 1e-6
    tol_limit: float = 1e-8
    tol_goal: float = 1e-10
    qp_eps: float = 1e-6
    qp_max_iter: int = 2000

    @staticmethod
    def from_dict(d):
        base = SolverParams()
        return replace(base, **{k: v for k, v in d.items() if hasattr(base, k)})


@dataclass
class TrajectoryProblem:
    vkc: KinematicTree
    T: int
    weights: Weights
    q_start: np.ndarray
    goal: GoalSpec
    closure: ClosureSpec = None
    q_min: np.ndarray = None
    q_max: np.ndarray = None
    xi_vel: float = 0.2
    xi_acc: float = 0.1
    collision: CollisionConfig = None

    def __post_init__(self):
        self.q_start = np.asarray(self.q_start, dtype=float)
        n = self.vkc.dof
        if self.q_start.shape != (n,):
            raise ValueError(f"start configuration must have {n} values")
        if self.q_min is None:
            self.q_min = np.array([j.lo for j in self.vkc.actuated_joints])
        if self.q_max is None:
            self.q_max = np.array([j.hi for j in self.vkc.actuated_joints])
        if np.any(self.q_min > self.q_max):
            raise ValueError("inconsistent joint bounds")
        if self.T < 2:
            raise ValueError("need at least two timesteps")
        if self.xi_vel <= 0 or self.xi_acc <= 0:
            raise ValueError("rate tolerances must be positive")

    @property
    def n(self):
        return self.vkc.dof


@dataclass
class SolveReport:
    status: str
    trajectory: Trajectory
    objective: float
    residuals: dict
    iterations: int
    qp_iterations: int
    wall_time: float

    @property
    def converged(self):
        return self.status == CONVERGED


# ---------------------------------------------------------------------------
# residual operations (exact, used both by the solver and by checkers)

def objective_value(traj, weights: Weights) -> float:
    """Weighted squared path length + squared second differences."""
    Q = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if Q.shape[1] != weights.w_vel.shape[0]:
        raise ValueError("weight width does not match trajectory width")
    dq = np.diff(Q, axis=0)
    total = float(np.sum(dq * dq @ weights.w_vel))
    if Q.shape[0] >= 3:
        dd = Q[:-2] - 2.0 * Q[1:-1] + Q[2:]
        total += float(np.sum(dd * dd @ weights.w_acc))
    return total


def joint_limit_constraint(traj, q_min, q_max):
    """Hinge residuals below/above the bounds, per (t, joint)."""
    Q = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    return hinge(q_min - Q), hinge(Q - q_max)


def rate_constraint(traj, xi_vel, xi_acc):
    """Velocity/acceleration hinge residuals per interior timestep.

    Mirrors the constraint window t = 2..T-1: the step out of the pinned
    first row is unconstrained, matching the optimization contract.
    """
    Q = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    T = Q.shape[0]
    if T < 3:
        return np.zeros(0), np.zeros(0)
    dq = np.diff(Q, axis=0)[1:]                      # steps 2..T-1
    vel = hinge(np.max(np.abs(dq), axis=1) - xi_vel)
    dd = Q[:-2] - 2.0 * Q[1:-1] + Q[2:]              # centers 2..T-1
    acc = hinge(np.max(np.abs(dd), axis=1) - xi_acc)
    return vel, acc


def goal_constraint(tree, q_T, goal: GoalSpec, frames=None) -> float:
    """Eq-goal residual ||f_task(q_T) - g||^2 - xi_goal; satisfied iff <= 0."""
    f = goal_error(tree, q_T, goal, frames)
    return float(f @ f) - goal.tol


def goal_error(tree, q_T, goal: GoalSpec, frames=None) -> np.ndarray:
    if goal.kind == "joint_value":
        out = []
        for name, value in goal.joints:
            if name not in tree.joint_index:
                raise KeyError(f"goal references unknown joint '{name}'")
            out.append(q_T[tree.joint_index[name]] - value)
        return np.array(out)
    if frames is None:
        frames = forward_kinematics(tree, q_T)
    if goal.link not in frames:
        raise KeyError(f"goal references unknown link '{goal.link}'")
    r = pose_residual(frames[goal.link], goal.target)
    return r[:3] if goal.position_only else r


def chain_closure_constraint(tree, q_t, closure: ClosureSpec, frames=None) -> np.ndarray:
    """6-vector pose residual of the anchored link at one timestep."""
    if frames is None:
        frames = forward_kinematics(tree, q_t)
    if closure.link not in frames:
        raise KeyError(f"closure references unknown link '{closure.link}'")
    return pose_residual(frames[closure.link], closure.anchor)


def collision_constraint(tree, q_t, pairs: CollisionPairSet, dist_safe,
                         environment, frames=None) -> float:
    """Summed hinge margin over all eligible pairs at one configuration."""
    from .geometry import link_shapes_world
    if frames is None:
        frames = forward_kinematics(tree, q_t)
    shapes = {}

    def get(link):
        if link not in shapes:
            shapes[link] = link_shapes_world(tree, frames, link)
        return shapes[link]

    total = 0.0
    for la, lb in pairs.link_pairs:
        r = pair_distance(get(la), get(lb))
        if r is not None:
            total += max(dist_safe - r.distance, 0.0)
    for link, ei in pairs.env_pairs:
        r = pair_distance(get(link), [environment[ei]])
        if r is not None:
            total += max(dist_safe - r.distance, 0.0)
    return total


# ---------------------------------------------------------------------------
# fast FK/collision sweeps over whole trajectories

class _Sweep:
    """Batched FK state for one trajectory: world shapes and frames per t."""

    def __init__(self, tree, Q):
        self.tree = tree
        self.Q = Q
        self.T = Q.shape[0]
        self.frames = forward_kinematics_batch(tree, Q)
        self._shapes = {}

    def frame(self, link, t) -> Transform:
        q, p = self.frames[link]
        return Transform(q[t], p[t])

    def link_shapes(self, link, t):
        key = (link, t)
        if key not in self._shapes:
            rq, rp = self.frames[link]
            world = Transform(rq[t], rp[t])
            self._shapes[key] = [
                PosedShape(s, world.compose(tf), link=link, name=f"{link}[{i}]")
                for i, (s, tf) in enumerate(self.tree.links[link].collision_geoms)]
        return self._shapes[key]

    def frames_dict(self, t):
        return {link: Transform(q[t], p[t]) for link, (q, p) in self.frames.items()}


def _collision_sweep(sweep: _Sweep, cfg: CollisionConfig, t_range, margin):
    """Distances for every eligible pair with dist < dist_safe + margin.

    Returns {t: [(dist_result, link_a, link_b_or_None)]}; AABB pruning keeps
    exactness because pruned pairs cannot contribute a positive hinge.
    """
    out = {}
    near = cfg.dist_safe + margin
    for t in t_range:
        found = []
        for la, lb in cfg.pairs.link_pairs:
            sa, sb = sweep.link_shapes(la, t), sweep.link_shapes(lb, t)
            best = None
            for a in sa:
                for b in sb:
                    if not aabb_overlap(a, b, near):
                        continue
                    r = signed_distance(a, b)
                    if best is None or r.distance < best.distance:
                        best = r
            if best is not None and best.distance < near:
                found.append((best, la, lb))
        for link, ei in cfg.pairs.env_pairs:
            env = cfg.environment[ei]
            best = None
            for a in sweep.link_shapes(link, t):
                if not aabb_overlap(a, env, near):
                    continue
                r = signed_distance(a, env)
                if best is None or r.distance < best.distance:
                    best = r
            if best is not None and best.distance < near:
                found.append((best, link, None))
        out[t] = found
    return out


def exact_residuals(problem: TrajectoryProblem, Q, sweep=None) -> dict:
    """Max residual per constraint family, from the exact nonlinear functions."""
    if sweep is None:
        sweep = _Sweep(problem.vkc, Q)
    res = {}
    lo, hi = joint_limit_constraint(Q, problem.q_min, problem.q_max)
    res["limits"] = float(max(lo.max(initial=0.0), hi.max(initial=0.0)))
    vel, acc = rate_constraint(Q, problem.xi_vel, problem.xi_acc)
    res["velocity"] = float(vel.max(initial=0.0))
    res["acceleration"] = float(acc.max(initial=0.0))
    frames_T = sweep.frames_dict(Q.shape[0] - 1)
    res["goal"] = max(goal_constraint(problem.vkc, Q[-1], problem.goal, frames_T), 0.0)
    if problem.closure is not None:
        worst = 0.0
        for t in range(Q.shape[0]):
            c = chain_closure_constraint(problem.vkc, Q[t], problem.closure,
                                         sweep.frames_dict(t))
            worst = max(worst, float(np.max(np.abs(c))))
        res["closure"] = worst
    if problem.collision is not None:
        cfg = problem.collision
        per_t = _collision_sweep(sweep, cfg, range(Q.shape[0]), margin=0.0)
        worst = 0.0
        for t, items in per_t.items():
            worst = max(worst, sum(max(cfg.dist_safe - r.distance, 0.0)
                                   for r, _, _ in items))
        res["collision"] = worst
    return res


def residuals_ok(problem, res, params: SolverParams) -> bool:
    ok = (res["limits"] <= params.tol_limit
          and res["velocity"] <= params.tol_rate
          and res["acceleration"] <= params.tol_rate
          and res["goal"] <= params.tol_goal)
    if problem.closure is not None:
        ok = ok and res["closure"] <= params.tol_closure
    if problem.collision is not None:
        ok = ok and res["collision"] <= problem.collision.xi_dist
    return ok


# ---------------------------------------------------------------------------
# convexification

class _Rows:
    """One linear constraint family: values(D) = offs + A @ D."""

    __slots__ = ("A", "offs", "penalty")

    def __init__(self, rows, cols, vals, offs, nvar, penalty):
        self.A = sp.csr_matrix((vals, (rows, cols)), shape=(len(offs), nvar))
        self.offs = np.asarray(offs, dtype=float)
        self.penalty = penalty   # "hinge" or "abs"

    def values(self, d):
        return self.offs + self.A @ d

    def penalty_value(self, d):
        v = self.values(d)
        return float(np.sum(np.maximum(v, 0.0))) if self.penalty == "hinge" \
            else float(np.sum(np.abs(v)))


class ConvexModel:
    """Quadratic objective model (exact) + linearized constraint families."""

    def __init__(self, problem, Q, P_free, g_free, f0, families, lin_count):
        self.problem = problem
        self.Q = Q
        self.P = P_free
        self.g = g_free
        self.f0 = f0
        self.families = families
        self.lin_count = lin_count
        self.nvar = g_free.shape[0]
        self._qp = None

    def merit(self, d, mu):
        m = self.f0 + float(self.g @ d) + 0.5 * float(d @ (self.P @ d))
        for fam in self.families.values():
            m += mu * fam.penalty_value(d)
        return m

    # --- QP assembly: structure fixed, (mu, trust, bounds) hot-swappable ----

    def _assemble(self):
        nd = self.nvar
        slack_of = {}
        n_slack = 0
        rows_A = []
        rows_l = []
        rows_u = []

        def add_rows(mat):
            rows_A.append(mat)

        for name, fam in self.families.items():
            k = fam.A.shape[0]
            if k == 0:
                continue
            sl = sp.csr_matrix((-np.ones(k), (np.arange(k), n_slack + np.arange(k))),
                               shape=(k, 10**9))  # width fixed later
            slack_of[name] = (n_slack, k)
            n_slack += k
            if fam.penalty == "hinge":
                # offs + A d - s <= 0
                rows_A.append((fam.A, sl, None))
                rows_l.append(np.full(k, -np.inf))
                rows_u.append(-fam.offs)
            else:
                # -s <= offs + A d <= s   (two one-sided rows)
                rows_A.append((fam.A, sl, None))
                rows_l.append(np.full(k, -np.inf))
                rows_u.append(-fam.offs)
                rows_A.append((-fam.A, sl, None))
                rows_l.append(np.full(k, -np.inf))
                rows_u.append(fam.offs)
        ntot = nd + n_slack
        blocks = []
        for A_d, A_s, _ in rows_A:
            A_s = sp.csr_matrix((A_s.data, A_s.indices, A_s.indptr),
                                shape=(A_d.shape[0], n_slack))
            blocks.append(sp.hstack([A_d, A_s], format="csr"))
        # box rows: trust region/limits on d, non-negativity on slacks
        box = sp.eye(ntot, format="csr")
        A_all = sp.vstack(blocks + [box], format="csc") if blocks else sp.csc_matrix(box)
        l_all = np.concatenate(rows_l + [np.full(ntot, -np.inf)])
        u_all = np.concatenate(rows_u + [np.full(ntot, np.inf)])
        # slack boxes: s >= 0
        self._box_offset = A_all.shape[0] - ntot
        l_all[self._box_offset + nd:] = 0.0
        self._A = A_all
        self._l = l_all
        self._u = u_all
        self._n_slack = n_slack
        self._slack_of = slack_of
        self._solvers = {}
        self._warm = None

    def solve_qp(self, mu, d_lo, d_hi, params: SolverParams):
        """Solve the slack QP, normalized by 1/mu so conditioning is
        penalty-independent (the argmin is unchanged)."""
        if self._qp is None:
            self._assemble()
            self._qp = True
        nd = self.nvar
        solver = self._solvers.get(mu)
        if solver is None:
            P_qp = sp.block_diag([self.P / mu,
                                  sp.csc_matrix((self._n_slack, self._n_slack))],
                                 format="csc")
            solver = BoxConeQP(P_qp, self._A)
            self._solvers[mu] = solver
        q = np.concatenate([self.g / mu, np.ones(self._n_slack)])
        self._l[self._box_offset:self._box_offset + nd] = d_lo
        self._u[self._box_offset:self._box_offset + nd] = d_hi
        x0 = y0 = None
        if self._warm is not None:
            x0, y0 = self._warm
        res = solver.solve(q, self._l, self._u, x0=x0, y0=y0,
                           eps_abs=params.qp_eps, eps_rel=params.qp_eps,
                           max_iter=params.qp_max_iter)
        self._warm = (res.x, res.y)
        d = np.clip(res.x[:nd], d_lo, d_hi)
        return d, res


def _objective_hessian(T, n, weights: Weights):
    """Sparse Hessian of the quadratic objective over the full (T*n) vector."""
    Dv = sp.kron(sp.diags([-np.ones(T - 1), np.ones(T - 1)], [0, 1],
                          shape=(T - 1, T)), sp.eye(n), format="csr")
    H = 2.0 * (Dv.T @ sp.diags(np.tile(weights.w_vel, T - 1)) @ Dv)
    if T >= 3:
        Da = sp.kron(sp.diags([np.ones(T - 2), -2.0 * np.ones(T - 2), np.ones(T - 2)],
                              [0, 1, 2], shape=(T - 2, T)), sp.eye(n), format="csr")
        H = H + 2.0 * (Da.T @ sp.diags(np.tile(weights.w_acc, T - 2)) @ Da)
    return H.tocsc()


def convexify(problem: TrajectoryProblem, current, trust_radius=None,
              sweep=None) -> ConvexModel:
    """First-order model of all constraints around `current`; exact objective.

    Rows that cannot activate inside the trust box (offset + row l1-norm *
    radius <= 0) are dropped; with hinge penalties that is exact, not an
    approximation.
    """
    Q = current.states if isinstance(current, Trajectory) else np.asarray(current, float)
    T, n = Q.shape
    nvar = (T - 1) * n
    tau = np.inf if trust_radius is None else float(trust_radius)
    if sweep is None:
        sweep = _Sweep(problem.vkc, Q)
    H = _objective_hessian(T, n, problem.weights)
    free = np.arange(n, T * n)
    P_free = H[free][:, free]
    g_free = (H @ Q.reshape(-1))[free]
    f0 = objective_value(Q, problem.weights)

    def vidx(t, j):
        # variable index of (t, j); row 0 is pinned
        return (t - 1) * n + j

    families = {}

    # velocity hinges: |q[t+1,j] - q[t,j]| <= xi_vel for steps t=1..T-2
    rows, cols, vals, offs = [], [], [], []
    k = 0
    for t in range(1, T - 1):
        for j in range(n):
            v0 = Q[t + 1, j] - Q[t, j]
            if abs(v0) + 2.0 * tau <= problem.xi_vel:
                continue
            # two hinge rows sharing sign structure: model |v| - xi as two hinges
            rows += [k, k]
            cols += [vidx(t + 1, j), vidx(t, j)]
            vals += [1.0, -1.0]
            offs.append(v0 - problem.xi_vel)
            k += 1
            rows += [k, k]
            cols += [vidx(t + 1, j), vidx(t, j)]
            vals += [-1.0, 1.0]
            offs.append(-v0 - problem.xi_vel)
            k += 1
    families["velocity"] = _Rows(rows, cols, vals, offs, nvar, "hinge")

    # acceleration hinges at centers t=1..T-2
    rows, cols, vals, offs = [], [], [], []
    k = 0
    for t in range(1, T - 1):
        for j in range(n):
            a0 = Q[t - 1, j] - 2.0 * Q[t, j] + Q[t + 1, j]
            if abs(a0) + 4.0 * tau <= problem.xi_acc:
                continue
            trip_cols = []
            trip_vals = []
            if t - 1 >= 1:
                trip_cols.append(vidx(t - 1, j))
                trip_vals.append(1.0)
            trip_cols.append(vidx(t, j))
            trip_vals.append(-2.0)
            trip_cols.append(vidx(t + 1, j))
            trip_vals.append(1.0)
            rows += [k] * len(trip_cols)
            cols += trip_cols
            vals += trip_vals
            offs.append(a0 - problem.xi_acc)
            k += 1
            rows += [k] * len(trip_cols)
            cols += trip_cols
            vals += [-v for v in trip_vals]
            offs.append(-a0 - problem.xi_acc)
            k += 1
    families["acceleration"] = _Rows(rows, cols, vals, offs, nvar, "hinge")

    # closure equalities (abs penalty), all timesteps but the pinned first
    if problem.closure is not None:
        rows, cols, vals, offs = [], [], [], []
        k = 0
        anchor_rot = problem.closure.anchor.rot
        for t in range(1, T):
            frames_t = sweep.frames_dict(t)
            c0 = chain_closure_constraint(problem.vkc, Q[t], problem.closure, frames_t)
            J = chain_jacobian(problem.vkc, Q[t], problem.closure.link, frames=frames_t)
            R = quat_to_matrix(anchor_rot)
            J = np.vstack([J[:3], R.T @ J[3:]])
            for r6 in range(6):
                nz = np.nonzero(np.abs(J[r6]) > 1e-12)[0]
                rows += [k] * len(nz)
                cols += [vidx(t, j) for j in nz]
                vals += list(J[r6, nz])
                offs.append(c0[r6])
                k += 1
        families["closure"] = _Rows(rows, cols, vals, offs, nvar, "abs")

    # collision hinges: dist_safe - (d0 + g . delta) <= 0 per near pair
    if problem.collision is not None:
        cfg = problem.collision
        near = _collision_sweep(sweep, cfg, range(1, T), margin=cfg.activation)
        rows, cols, vals, offs = [], [], [], []
        k = 0
        for t in range(1, T):
            frames_t = None
            for r, la, lb in near[t]:
                if frames_t is None:
                    frames_t = sweep.frames_dict(t)
                from .geometry import distance_gradient
                g = distance_gradient(problem.vkc, Q[t], r, la, lb, frames=frames_t)
                nz = np.nonzero(np.abs(g) > 1e-12)[0]
                rows += [k] * len(nz)
                cols += [vidx(t, j) for j in nz]
                vals += list(-g[nz])
                offs.append(cfg.dist_safe - r.distance)
                k += 1
        families["collision"] = _Rows(rows, cols, vals, offs, nvar, "hinge")

    # goal hinge at the last row
    frames_T = sweep.frames_dict(T - 1)
    f = goal_error(problem.vkc, Q[-1], problem.goal, frames_T)
    r0 = float(f @ f) - problem.goal.tol
    if problem.goal.kind == "joint_value":
        Jf = np.zeros((len(problem.goal.joints), n))
        for i, (name, _) in enumerate(problem.goal.joints):
            Jf[i, problem.vkc.joint_index[name]] = 1.0
    else:
        J6 = chain_jacobian(problem.vkc, Q[-1], problem.goal.link, frames=frames_T)
        R = quat_to_matrix(problem.goal.target.rot)
        Jf = np.vstack([J6[:3], R.T @ J6[3:]])
        if problem.goal.position_only:
            Jf = Jf[:3]
    grad = 2.0 * (f @ Jf)
    nz = np.nonzero(np.abs(grad) > 1e-14)[0]
    families["goal"] = _Rows([0] * len(nz), [vidx(T - 1, j) for j in nz],
                             list(grad[nz]), [r0], nvar, "hinge")

    return ConvexModel(problem, Q.copy(), P_free, g_free, f0, families, lin_count=1)


# ---------------------------------------------------------------------------
# merit + solve loop

def _true_merit(problem, Q, mu, params, sweep=None):
    if sweep is None:
        sweep = _Sweep(problem.vkc, Q)
    f = objective_value(Q, problem.weights)
    lo, hi = joint_limit_constraint(Q, problem.q_min, problem.q_max)
    pen = float(np.sum(lo) + np.sum(hi))
    T = Q.shape[0]
    if T >= 3:
        dq = np.diff(Q, axis=0)[1:]
        pen += float(np.sum(hinge(np.abs(dq) - problem.xi_vel)))
        dd = Q[:-2] - 2.0 * Q[1:-1] + Q[2:]
        pen += float(np.sum(hinge(np.abs(dd) - problem.xi_acc)))
    if problem.closure is not None:
        for t in range(1, T):
            c = chain_closure_constraint(problem.vkc, Q[t], problem.closure,
                                         sweep.frames_dict(t))
            pen += float(np.sum(np.abs(c)))
    if problem.collision is not None:
        cfg = problem.collision
        per_t = _collision_sweep(sweep, cfg, range(1, T), margin=0.0)
        for items in per_t.values():
            pen += sum(max(cfg.dist_safe - r.distance, 0.0) for r, _, _ in items)
    pen += max(goal_constraint(problem.vkc, Q[-1], problem.goal,
                               sweep.frames_dict(T - 1)), 0.0)
    return f + mu * pen


def stationary_fill(q_start, T):
    return np.tile(np.asarray(q_start, dtype=float), (T, 1))


def solve(problem: TrajectoryProblem, init: Trajectory,
          params: SolverParams = None) -> SolveReport:
    """Penalty-based sequential convex optimization with a box trust region."""
    params = params or SolverParams()
    t_start = time.perf_counter()
    Q = np.asarray(init.states, dtype=float).copy()
    if Q.shape != (problem.T, problem.n):
        raise ValueError(f"init shape {Q.shape} does not match problem "
                         f"({problem.T}, {problem.n})")
    if not np.allclose(Q[0], problem.q_start, atol=1e-12):
        raise ValueError("init trajectory must start at the problem start")
    Q[0] = problem.q_start
    Q[1:] = np.clip(Q[1:], problem.q_min, problem.q_max)

    n = problem.n
    mu = params.mu_init
    tau = params.trust_init
    status = None
    lin_total = 0
    qp_total = 0
    subproblem_bad = False

    for _outer in range(params.max_penalty):
        plateau = False
        for _inner in range(params.max_convex):
            sweep = _Sweep(problem.vkc, Q)
            model = convexify(problem, Q, trust_radius=tau, sweep=sweep)
            lin_total += 1
            merit0 = _true_merit(problem, Q, mu, params, sweep=sweep)
            accepted = False
            while True:
                lo = np.maximum(np.tile(problem.q_min, problem.T - 1) - Q[1:].reshape(-1), -tau)
                hi = np.minimum(np.tile(problem.q_max, problem.T - 1) - Q[1:].reshape(-1), tau)
                hi = np.maximum(hi, lo)   # guard against inits at the bounds
                d, qp_res = model.solve_qp(mu, lo, hi, params)
                qp_total += qp_res.iterations
                if qp_res.status == MAX_ITER and qp_res.primal_residual > 1e-3:
                    subproblem_bad = True
                model_new = model.merit(d, mu)
                model_improve = merit0 - model_new
                if model_improve <= max(params.ftol, 1e-10 * abs(merit0)):
                    plateau = True
                    break
                Qc = Q.copy()
                Qc[1:] += d.reshape(problem.T - 1, n)
                true_new = _true_merit(problem, Qc, mu, params)
                ratio = (merit0 - true_new) / model_improve
                if ratio >= params.accept_ratio:
                    step = float(np.max(np.abs(d)))
                    Q = Qc
                    tau = min(tau * params.trust_expand, params.trust_max)
                    accepted = True
                    if step < params.xtol:
                        plateau = True
                    break
                tau *= params.trust_shrink
                if tau < params.xtol:
                    plateau = True
                    break
            if plateau or not accepted:
                break
        res = exact_residuals(problem, Q)
        if residuals_ok(problem, res, params):
            status = CONVERGED
            break
        mu *= params.penalty_scale
        tau = max(tau, params.trust_init)
    else:
        res = exact_residuals(problem, Q)
        status = CONVERGED if residuals_ok(problem, res, params) else None

    if status is None:
        if subproblem_bad:
            status = SUBPROBLEM_FAILURE
        elif plateau:
            status = CONSTRAINT_VIOLATION
        else:
            status = MAX_ITERATIONS
    traj = Trajectory(Q, init.joint_names)
    return SolveReport(status=status, trajectory=traj,
                       objective=objective_value(Q, problem.weights),
                       residuals=res, iterations=lin_total,
                       qp_iterations=qp_total,
                       wall_time=time.perf_counter() - t_start)
