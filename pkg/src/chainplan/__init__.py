"""Whole-body mobile manipulation planning on consolidated kinematic chains."""

from .model import (Chain, JointSpec, KinematicTree, LinkSpec, SchemaError,
                    Shape, StructureError, extract_chain, load_model,
                    parse_model, serialize_model, validate_tree)
from .transforms import Transform, pose_residual
from .kinematics import (add_virtual_base, attach, chain_jacobian, detach,
                         forward_kinematics, forward_kinematics_batch,
                         invert_subtree)

__version__ = "0.1.0"
