"""Forward kinematics, Jacobians, and structural chain surgery.

The construction operations build a single serial chain out of a robot and a
manipulated object: ``invert_subtree`` re-roots the object model at the link
a gripper can hold, ``attach`` splices it onto the end-effector with a
virtual joint, and ``add_virtual_base`` prepends planar x/y/yaw joints that
model an omnidirectional base.

Joint convention: T(parent -> child) = origin * motion(q) * tip, where
``motion`` rotates about / translates along ``axis`` expressed in the joint
frame. Keeping both ``origin`` and ``tip`` makes re-rooting exact: the
inverted joint is (tip^-1, motion(-q), origin^-1), and negating the axis
instead of the value lets inverted joints keep their value convention and
limits.
"""

from __future__ import annotations

import numpy as np

from .model import (FIXED, PRISMATIC, REVOLUTE, JointSpec, KinematicTree,
                    LinkSpec, StructureError, extract_chain)
from .transforms import Transform, pose_residual, quat_multiply, quat_rotate

__all__ = [
    "forward_kinematics", "forward_kinematics_batch", "chain_jacobian",
    "invert_subtree", "attach", "add_virtual_base", "detach",
    "pose_residual", "joint_transform",
]

VBASE_JOINTS = ("base_x", "base_y", "base_yaw")
VBASE_ROOT = "world"


def joint_transform(joint: JointSpec, value: float) -> Transform:
    """Parent-link-frame to child-link-frame transform at the given value."""
    if joint.kind == FIXED:
        motion = Transform.identity()
    elif joint.kind == REVOLUTE:
        half = 0.5 * value
        s = np.sin(half)
        motion = Transform(np.concatenate(([np.cos(half)], s * joint.axis)), None)
    else:  # prismatic
        motion = Transform(None, joint.axis * value)
    return joint.origin.compose(motion).compose(joint.tip)


def forward_kinematics(tree: KinematicTree, q) -> dict:
    """World pose of every link; q ordered by the tree's canonical ordering."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != tree.dof:
        raise ValueError(f"configuration has {q.shape[0]} values, tree has {tree.dof} DOF")
    poses = {tree.root: tree.anchor.copy() if tree.anchor is not None else Transform.identity()}
    for j in tree.ordered_joints:
        v = q[tree.joint_index[j.name]] if j.actuated else 0.0
        poses[j.child] = poses[j.parent].compose(joint_transform(j, v))
    return poses


def _quat_mul_b(a, b):
    # broadcasting quaternion product, shapes (...,4)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def _quat_rot_b(q, v):
    u = q[..., 1:]
    w = q[..., :1]
    uv = np.cross(u, v)
    return v + 2.0 * w * uv + 2.0 * np.cross(u, uv)


def forward_kinematics_batch(tree: KinematicTree, Q) -> dict:
    """Vectorized FK for Q of shape (N, dof): link -> (quat (N,4), pos (N,3))."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[1] != tree.dof:
        raise ValueError(f"expected (N, {tree.dof}) configurations, got {Q.shape}")
    n = Q.shape[0]
    if tree.anchor is not None:
        root = (np.tile(tree.anchor.rot, (n, 1)), np.tile(tree.anchor.trans, (n, 1)))
    else:
        root = (np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), np.zeros((n, 3)))
    out = {tree.root: root}
    for j in tree.ordered_joints:
        pq, pp = out[j.parent]
        # parent * origin
        oq = _quat_mul_b(pq, np.broadcast_to(j.origin.rot, (n, 4)))
        op = pp + _quat_rot_b(pq, np.broadcast_to(j.origin.trans, (n, 3)))
        if j.actuated:
            v = Q[:, tree.joint_index[j.name]]
            if j.kind == REVOLUTE:
                half = 0.5 * v
                mq = np.empty((n, 4))
                mq[:, 0] = np.cos(half)
                mq[:, 1:] = np.sin(half)[:, None] * j.axis
                oq = _quat_mul_b(oq, mq)
            else:
                op = op + _quat_rot_b(oq, v[:, None] * j.axis)
        # * tip
        cq = _quat_mul_b(oq, np.broadcast_to(j.tip.rot, (n, 4)))
        cp = op + _quat_rot_b(oq, np.broadcast_to(j.tip.trans, (n, 3)))
        out[j.child] = (cq, cp)
    return out


def frame_at(batch_frames, link, t) -> Transform:
    q, p = batch_frames[link]
    return Transform(q[t], p[t])


def chain_jacobian(tree: KinematicTree, q, target_link, ref_point=None, frames=None):
    """6 x dof geometric Jacobian of a point on target_link, world frame.

    Rows 0-2: linear velocity of the reference point per unit joint rate;
    rows 3-5: angular velocity. Columns of joints off the root->target path
    are zero; fixed joints have no column at all.
    """
    if target_link not in tree.links:
        raise StructureError(f"unknown link '{target_link}'")
    if frames is None:
        frames = forward_kinematics(tree, q)
    target = frames[target_link]
    ref_world = target.apply(np.zeros(3) if ref_point is None else np.asarray(ref_point, float))
    J = np.zeros((6, tree.dof))
    for j in extract_chain(tree, tree.root, target_link).joints:
        if not j.actuated:
            continue
        col = tree.joint_index[j.name]
        pre = frames[j.parent].compose(j.origin)
        axis_w = quat_rotate(pre.rot, j.axis)
        if j.kind == REVOLUTE:
            J[:3, col] = np.cross(axis_w, ref_world - pre.trans)
            J[3:, col] = axis_w
        else:
            J[:3, col] = axis_w
    return J


def invert_subtree(tree: KinematicTree, new_root) -> KinematicTree:
    """Re-root the tree at new_root, preserving world geometry.

    Joints on the old-root -> new_root path get parent/child swapped with
    origin/tip inverted and axis negated; their values and limits keep the
    original convention. Anchor is dropped (the caller re-anchors).
    """
    if new_root not in tree.links:
        raise StructureError(f"unknown link '{new_root}'")
    path = {j.name for j in extract_chain(tree, tree.root, new_root).joints}
    joints = []
    for j in tree.joints.values():
        if j.name in path:
            joints.append(JointSpec(
                j.name, j.kind, parent=j.child, child=j.parent,
                origin=j.tip.inverse(), tip=j.origin.inverse(),
                axis=None if j.axis is None else -j.axis,
                lo=j.lo, hi=j.hi, vel=j.vel, acc=j.acc, virtual=j.virtual))
        else:
            joints.append(JointSpec(
                j.name, j.kind, j.parent, j.child, j.origin.copy(), j.tip.copy(),
                None if j.axis is None else j.axis.copy(),
                j.lo, j.hi, j.vel, j.acc, j.virtual))
    links = [LinkSpec(l.name, [(s, t.copy()) for s, t in l.collision_geoms])
             for l in tree.links.values()]
    return KinematicTree(tree.name, new_root, links, joints, anchor=None)


def add_virtual_base(robot: KinematicTree) -> KinematicTree:
    """Prepend planar x/y prismatic + yaw revolute joints above the root.

    The base link world pose becomes anchor * Trans(q_x, q_y, 0) * Rot_z(q_yaw).
    """
    for name in (VBASE_ROOT, "base_x_link", "base_y_link"):
        if name in robot.links:
            raise StructureError(f"link name '{name}' reserved for the virtual base")
    for name in VBASE_JOINTS:
        if name in robot.joints:
            raise StructureError(f"joint name '{name}' reserved for the virtual base")
    links = [LinkSpec(VBASE_ROOT), LinkSpec("base_x_link"), LinkSpec("base_y_link")]
    links += [LinkSpec(l.name, [(s, t.copy()) for s, t in l.collision_geoms])
              for l in robot.links.values()]
    joints = [
        JointSpec("base_x", PRISMATIC, VBASE_ROOT, "base_x_link",
                  axis=[1.0, 0.0, 0.0], lo=-50.0, hi=50.0, virtual=True),
        JointSpec("base_y", PRISMATIC, "base_x_link", "base_y_link",
                  axis=[0.0, 1.0, 0.0], lo=-50.0, hi=50.0, virtual=True),
        JointSpec("base_yaw", REVOLUTE, "base_y_link", robot.root,
                  axis=[0.0, 0.0, 1.0], lo=-2.0 * np.pi, hi=2.0 * np.pi, virtual=True),
    ]
    joints += [JointSpec(j.name, j.kind, j.parent, j.child, j.origin.copy(), j.tip.copy(),
                         None if j.axis is None else j.axis.copy(),
                         j.lo, j.hi, j.vel, j.acc, j.virtual)
               for j in robot.joints.values()]
    anchor = robot.anchor.copy() if robot.anchor is not None else None
    return KinematicTree(robot.name, VBASE_ROOT, links, joints, anchor=anchor)


def attach(robot: KinematicTree, object_inverted: KinematicTree, ee_link,
           grasp: Transform, joint_kind=FIXED, joint_axis=None) -> KinematicTree:
    """Splice an inverted object tree onto the end-effector.

    ``grasp`` is the pose of the object's attachable frame in the
    end-effector frame, taken from FK at the attach-time configuration.
    Object link/joint names are prefixed with the object name so the merge
    never collides; the connecting joint is virtual and named
    "<object>/attach".
    """
    if ee_link not in robot.links:
        raise StructureError(f"unknown end-effector link '{ee_link}'")
    if joint_kind not in (FIXED, REVOLUTE):
        raise StructureError(f"virtual attachment joint must be fixed or revolute, got '{joint_kind}'")
    prefix = object_inverted.name + "/"
    links = [LinkSpec(l.name, [(s, t.copy()) for s, t in l.collision_geoms])
             for l in robot.links.values()]
    joints = [JointSpec(j.name, j.kind, j.parent, j.child, j.origin.copy(), j.tip.copy(),
                        None if j.axis is None else j.axis.copy(),
                        j.lo, j.hi, j.vel, j.acc, j.virtual)
              for j in robot.joints.values()]
    robot_names = {l.name for l in links}
    for l in object_inverted.links.values():
        name = prefix + l.name
        if name in robot_names:
            raise StructureError(f"link name collision after prefixing: '{name}'")
        links.append(LinkSpec(name, [(s, t.copy()) for s, t in l.collision_geoms]))
    for j in object_inverted.joints.values():
        joints.append(JointSpec(prefix + j.name, j.kind, prefix + j.parent, prefix + j.child,
                                j.origin.copy(), j.tip.copy(),
                                None if j.axis is None else j.axis.copy(),
                                j.lo, j.hi, j.vel, j.acc, j.virtual))
    if joint_kind == REVOLUTE:
        axis = [0.0, 0.0, 1.0] if joint_axis is None else joint_axis
        vj = JointSpec(prefix + "attach", REVOLUTE, ee_link, prefix + object_inverted.root,
                       origin=grasp.copy(), axis=axis, lo=-np.pi, hi=np.pi, virtual=True)
    else:
        vj = JointSpec(prefix + "attach", FIXED, ee_link, prefix + object_inverted.root,
                       origin=grasp.copy(), virtual=True)
    joints.append(vj)
    anchor = robot.anchor.copy() if robot.anchor is not None else None
    return KinematicTree(robot.name, robot.root, links, joints, anchor=anchor)


def detach(vkc: KinematicTree, virtual_joint, q):
    """Split an attached object back off at its virtual joint.

    Returns (robot, object) where the object tree keeps its inverted
    orientation, loses its name prefix, and is anchored at the world pose it
    has at configuration q.
    """
    if virtual_joint not in vkc.joints:
        raise StructureError(f"unknown joint '{virtual_joint}'")
    vj = vkc.joints[virtual_joint]
    if not vj.virtual:
        raise StructureError(f"joint '{virtual_joint}' is not a virtual attachment joint")
    prefix = vj.child.split("/", 1)[0] + "/"
    # links in the subtree under the virtual joint
    sub_links = set()
    frontier = [vj.child]
    while frontier:
        link = frontier.pop()
        sub_links.add(link)
        for j in vkc.child_joints.get(link, []):
            frontier.append(j.child)

    def strip(name):
        return name[len(prefix):] if name.startswith(prefix) else name

    obj_links = [LinkSpec(strip(l), [(s, t.copy()) for s, t in vkc.links[l].collision_geoms])
                 for l in sub_links]
    obj_joints = [JointSpec(strip(j.name), j.kind, strip(j.parent), strip(j.child),
                            j.origin.copy(), j.tip.copy(),
                            None if j.axis is None else j.axis.copy(),
                            j.lo, j.hi, j.vel, j.acc, j.virtual)
                  for j in vkc.joints.values()
                  if j.name != virtual_joint and j.parent in sub_links]
    anchor = forward_kinematics(vkc, q)[vj.child]
    obj = KinematicTree(prefix[:-1], strip(vj.child), obj_links, obj_joints, anchor=anchor)

    rob_links = [LinkSpec(l.name, [(s, t.copy()) for s, t in l.collision_geoms])
                 for l in vkc.links.values() if l.name not in sub_links]
    rob_joints = [JointSpec(j.name, j.kind, j.parent, j.child, j.origin.copy(), j.tip.copy(),
                            None if j.axis is None else j.axis.copy(),
                            j.lo, j.hi, j.vel, j.acc, j.virtual)
                  for j in vkc.joints.values()
                  if j.name != virtual_joint and j.parent not in sub_links
                  and j.child not in sub_links]
    robot = KinematicTree(vkc.name, vkc.root, rob_links, rob_joints,
                          anchor=vkc.anchor.copy() if vkc.anchor is not None else None)
    return robot, obj
