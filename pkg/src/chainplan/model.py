"""Kinematic model description: links, joints, trees, and their text format.

The on-disk format is a small YAML schema (documented in the README):
top-level ``name``, ``root``, ``links[]``, ``joints[]`` and an optional
``anchor`` world pose. Angles are radians, lengths meters, frames
right-handed. Joints carry an ``origin`` (parent link frame -> joint frame)
and an optional ``tip`` (moved joint frame -> child link frame); the pair is
what keeps the format closed under subtree inversion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .transforms import Transform, quat_normalize

REVOLUTE = "revolute"
PRISMATIC = "prismatic"
FIXED = "fixed"
JOINT_KINDS = (REVOLUTE, PRISMATIC, FIXED)

SPHERE = "sphere"
CAPSULE = "capsule"
BOX = "box"
SHAPE_KINDS = (SPHERE, CAPSULE, BOX)


class SchemaError(ValueError):
    """Document does not conform to the model/scenario schema."""


class StructureError(ValueError):
    """Tree violates a structural invariant (cycle, orphan, duplicate...)."""


@dataclass
class Shape:
    """Convex collision primitive.

    sphere: params = (radius,)
    capsule: params = (radius, half_length), axis = local z
    box: params = (hx, hy, hz) half-extents
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise SchemaError(f"unknown shape kind '{self.kind}'")
        self.params = tuple(float(p) for p in self.params)
        n_expect = {SPHERE: 1, CAPSULE: 2, BOX: 3}[self.kind]
        if len(self.params) != n_expect:
            raise SchemaError(f"{self.kind} expects {n_expect} parameters, got {len(self.params)}")
        if any(p <= 0.0 for p in self.params):
            raise SchemaError(f"{self.kind} parameters must be strictly positive: {self.params}")


@dataclass
class LinkSpec:
    name: str
    # list of (Shape, Transform) pairs, shape pose in link frame
    collision_geoms: list = field(default_factory=list)


@dataclass
class JointSpec:
    name: str
    kind: str
    parent: str
    child: str
    origin: Transform = field(default_factory=Transform.identity)
    tip: Transform = field(default_factory=Transform.identity)
    axis: np.ndarray = None
    lo: float = 0.0
    hi: float = 0.0
    vel: float = None
    acc: float = None
    virtual: bool = False

    def __post_init__(self):
        if self.kind not in JOINT_KINDS:
            raise SchemaError(f"joint '{self.name}': unknown kind '{self.kind}'")
        if self.kind == FIXED:
            self.axis = None
            self.lo = self.hi = 0.0
        else:
            if self.axis is None:
                raise SchemaError(f"joint '{self.name}': {self.kind} joint needs an axis")
            self.axis = np.asarray(self.axis, dtype=float).reshape(3)
            n = np.linalg.norm(self.axis)
            if abs(n - 1.0) > 1e-9:
                if n < 1e-9:
                    raise SchemaError(f"joint '{self.name}': zero axis")
                self.axis = self.axis / n
            if self.lo > self.hi:
                raise SchemaError(f"joint '{self.name}': limit lo {self.lo} > hi {self.hi}")

    @property
    def actuated(self):
        return self.kind != FIXED


class KinematicTree:
    """Rooted tree of links connected by joints. Immutable after validation."""

    def __init__(self, name, root, links, joints, anchor=None):
        self.name = name
        self.root = root
        self.links = {l.name: l for l in links}
        self.joints = {j.name: j for j in joints}
        self.anchor = anchor
        if len(self.links) != len(links):
            raise StructureError(f"tree '{name}': duplicate link name")
        if len(self.joints) != len(joints):
            raise StructureError(f"tree '{name}': duplicate joint name")
        self._index()

    def _index(self):
        self.parent_joint = {}  # link name -> JointSpec whose child it is
        self.child_joints = {l: [] for l in self.links}
        for j in self.joints.values():
            if j.child in self.parent_joint:
                raise StructureError(f"link '{j.child}' has two parent joints")
            self.parent_joint[j.child] = j
            if j.parent in self.child_joints:
                self.child_joints[j.parent].append(j)
        # canonical joint ordering: depth-first from root, children in
        # declaration order; gives stable q indexing across operations
        self.ordered_joints = self._dfs_joints()
        self.actuated_joints = [j for j in self.ordered_joints if j.actuated]
        self.joint_index = {j.name: i for i, j in enumerate(self.actuated_joints)}

    def _dfs_joints(self):
        out = []
        if self.root not in self.links:
            return out
        visited = set()

        def walk(link):
            visited.add(link)
            for j in self.child_joints.get(link, []):
                if j.child in self.links and j.child not in visited:
                    out.append(j)
                    walk(j.child)

        walk(self.root)
        return out

    @property
    def dof(self):
        return len(self.actuated_joints)

    def actuated_joint_names(self):
        return [j.name for j in self.actuated_joints]

    def copy(self):
        return KinematicTree(
            self.name, self.root,
            [LinkSpec(l.name, [(s, t.copy()) for s, t in l.collision_geoms])
             for l in self.links.values()],
            [JointSpec(j.name, j.kind, j.parent, j.child, j.origin.copy(), j.tip.copy(),
                       None if j.axis is None else j.axis.copy(),
                       j.lo, j.hi, j.vel, j.acc, j.virtual)
             for j in self.joints.values()],
            None if self.anchor is None else self.anchor.copy())


def validate_tree(tree: KinematicTree):
    """Return a list of human-readable diagnostics; empty iff the tree is valid."""
    diags = []
    if tree.root not in tree.links:
        diags.append(f"root link '{tree.root}' is not a link of the tree")
        return diags
    for j in tree.joints.values():
        for end, role in ((j.parent, "parent"), (j.child, "child")):
            if end not in tree.links:
                diags.append(f"joint '{j.name}' references unknown {role} link '{end}'")
    # reachability + single-parent structure
    child_counts = {}
    for j in tree.joints.values():
        child_counts[j.child] = child_counts.get(j.child, 0) + 1
    for link, c in child_counts.items():
        if c > 1:
            diags.append(f"link '{link}' has {c} parent joints")
    if tree.root in child_counts:
        diags.append(f"root link '{tree.root}' has a parent joint")
    reached = {tree.root}
    frontier = [tree.root]
    while frontier:
        link = frontier.pop()
        for j in tree.child_joints.get(link, []):
            if j.child in tree.links and j.child not in reached:
                reached.add(j.child)
                frontier.append(j.child)
    for link in tree.links:
        if link not in reached:
            diags.append(f"link '{link}' is not reachable from the root (orphan or cycle)")
    return diags


@dataclass
class Chain:
    """Ordered joints from a base link to a tip link."""

    base: str
    tip: str
    joints: list

    @property
    def dof(self):
        return sum(1 for j in self.joints if j.actuated)


def extract_chain(tree: KinematicTree, base_link, tip_link) -> Chain:
    """Ordered joint list from base_link down to tip_link."""
    for name in (base_link, tip_link):
        if name not in tree.links:
            raise StructureError(f"unknown link '{name}'")
    path = []
    link = tip_link
    while link != base_link:
        j = tree.parent_joint.get(link)
        if j is None:
            raise StructureError(
                f"link '{tip_link}' is not a descendant of '{base_link}'")
        path.append(j)
        link = j.parent
    path.reverse()
    return Chain(base_link, tip_link, path)


# ---------------------------------------------------------------------------
# text format

def _pose_to_doc(t: Transform):
    return {"xyz": [float(v) for v in t.trans],
            "quaternion": [float(v) for v in quat_normalize(t.rot)]}


def _pose_from_doc(doc, where):
    if doc is None:
        return Transform.identity()
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: pose must be a mapping with xyz and rpy/quaternion")
    xyz = doc.get("xyz", [0.0, 0.0, 0.0])
    if not isinstance(xyz, (list, tuple)) or len(xyz) != 3:
        raise SchemaError(f"{where}: xyz must be a 3-list")
    if "quaternion" in doc:
        q = doc["quaternion"]
        if not isinstance(q, (list, tuple)) or len(q) != 4:
            raise SchemaError(f"{where}: quaternion must be a 4-list (w,x,y,z)")
        return Transform(q, xyz)
    rpy = doc.get("rpy", [0.0, 0.0, 0.0])
    if not isinstance(rpy, (list, tuple)) or len(rpy) != 3:
        raise SchemaError(f"{where}: rpy must be a 3-list")
    return Transform.from_xyz_rpy(xyz, rpy)


_SHAPE_PARAM_KEYS = {
    SPHERE: ("radius",),
    CAPSULE: ("radius", "half_length"),
    BOX: ("half_extents",),
}


def _shape_from_doc(doc, where):
    kind = doc.get("kind")
    if kind not in SHAPE_KINDS:
        raise SchemaError(f"{where}: unknown or missing shape kind '{kind}'")
    try:
        if kind == SPHERE:
            shape = Shape(SPHERE, (doc["radius"],))
        elif kind == CAPSULE:
            shape = Shape(CAPSULE, (doc["radius"], doc["half_length"]))
        else:
            he = doc["half_extents"]
            if not isinstance(he, (list, tuple)) or len(he) != 3:
                raise SchemaError(f"{where}: half_extents must be a 3-list")
            shape = Shape(BOX, tuple(he))
    except KeyError as e:
        raise SchemaError(f"{where}: missing shape field {e}") from None
    return shape, _pose_from_doc(doc.get("origin"), where)


def _shape_to_doc(shape: Shape, origin: Transform):
    doc = {"kind": shape.kind}
    if shape.kind == SPHERE:
        doc["radius"] = shape.params[0]
    elif shape.kind == CAPSULE:
        doc["radius"], doc["half_length"] = shape.params
    else:
        doc["half_extents"] = list(shape.params)
    doc["origin"] = _pose_to_doc(origin)
    return doc


def tree_from_doc(doc) -> KinematicTree:
    if not isinstance(doc, dict):
        raise SchemaError("model document must be a mapping")
    for key in ("name", "root", "links"):
        if key not in doc:
            raise SchemaError(f"model document missing required field '{key}'")
    name = doc["name"]
    links = []
    for i, ld in enumerate(doc["links"] or []):
        if "name" not in ld:
            raise SchemaError(f"links[{i}]: missing name")
        geoms = [_shape_from_doc(g, f"link '{ld['name']}' geom[{k}]")
                 for k, g in enumerate(ld.get("geoms") or [])]
        links.append(LinkSpec(ld["name"], geoms))
    joints = []
    for i, jd in enumerate(doc.get("joints") or []):
        where = f"joints[{i}]"
        for key in ("name", "kind", "parent", "child"):
            if key not in jd:
                raise SchemaError(f"{where}: missing '{key}'")
        lim = jd.get("limits") or {}
        joints.append(JointSpec(
            name=jd["name"], kind=jd["kind"], parent=jd["parent"], child=jd["child"],
            origin=_pose_from_doc(jd.get("origin"), f"{where} origin"),
            tip=_pose_from_doc(jd.get("tip"), f"{where} tip"),
            axis=jd.get("axis"),
            lo=float(lim.get("lo", 0.0)), hi=float(lim.get("hi", 0.0)),
            vel=lim.get("vel"), acc=lim.get("acc"),
            virtual=bool(jd.get("virtual", False))))
    anchor = _pose_from_doc(doc["anchor"], "anchor") if "anchor" in doc else None
    link_names = {l.name for l in links}
    for j in joints:
        for end, role in ((j.parent, "parent"), (j.child, "child")):
            if end not in link_names:
                raise StructureError(f"joint '{j.name}' references unknown {role} link '{end}'")
    tree = KinematicTree(name, doc["root"], links, joints, anchor)
    diags = validate_tree(tree)
    if diags:
        raise StructureError("; ".join(diags))
    return tree


def tree_to_doc(tree: KinematicTree):
    doc = {"name": tree.name, "root": tree.root}
    if tree.anchor is not None:
        doc["anchor"] = _pose_to_doc(tree.anchor)
    doc["links"] = []
    for l in tree.links.values():
        ld = {"name": l.name}
        if l.collision_geoms:
            ld["geoms"] = [_shape_to_doc(s, t) for s, t in l.collision_geoms]
        doc["links"].append(ld)
    doc["joints"] = []
    for j in tree.ordered_joints:
        jd = {"name": j.name, "kind": j.kind, "parent": j.parent, "child": j.child,
              "origin": _pose_to_doc(j.origin), "tip": _pose_to_doc(j.tip)}
        if j.axis is not None:
            jd["axis"] = [float(a) for a in j.axis]
        if j.kind != FIXED:
            lim = {"lo": float(j.lo), "hi": float(j.hi)}
            if j.vel is not None:
                lim["vel"] = float(j.vel)
            if j.acc is not None:
                lim["acc"] = float(j.acc)
            jd["limits"] = lim
        if j.virtual:
            jd["virtual"] = True
        doc["joints"].append(jd)
    return doc


def parse_model(text: str) -> KinematicTree:
    """Parse the model text format into a validated tree."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise SchemaError(f"model document is not valid YAML: {e}") from None
    return tree_from_doc(doc)


def serialize_model(tree: KinematicTree) -> str:
    """Deterministic text serialization; parse(serialize(tree)) round-trips."""
    return yaml.safe_dump(tree_to_doc(tree), sort_keys=False, default_flow_style=None)


def load_model(path) -> KinematicTree:
    with open(path, "r") as f:
        return parse_model(f.read())
