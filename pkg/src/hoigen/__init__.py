"""Desk-scale bimanual hand-object interaction synthesis.

Two VAEs compress object articulation and per-frame hand grasps; a latent diffusion
model with a selective state-space backbone generates long sequences over them.
"""
from .core import HandState, HandType, MotionSequence, ObjectState, matrix_to_rot6d, rot6d_to_matrix
from .errors import HOIError

__version__ = "0.1.0"

__all__ = ["HandState", "HandType", "MotionSequence", "ObjectState", "matrix_to_rot6d", "rot6d_to_matrix", "HOIError",
           "__version__"]
