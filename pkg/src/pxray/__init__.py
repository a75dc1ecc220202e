"""Relevance propagation for visuomotor policy networks.

Explains torque outputs of a two-branch (image + configuration) policy in
terms of its inputs, weighting each joint's torque by how far it moves the
end effector.
"""
from .attribution import (AttributionResult, attribute, attribute_dtd, attribute_gbp, attribute_rap,
                          init_output_relevance)
from .kernels import BACKEND
from .kinematics import ArmModel, ArmState, ImportanceFactors, forward_kinematics, importance_factors
from .nn import PolicyNetwork, network_forward, numeric_gradient
from .serialization import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "AttributionResult", "attribute", "attribute_dtd", "attribute_gbp", "attribute_rap",
    "init_output_relevance", "BACKEND", "ArmModel", "ArmState", "ImportanceFactors",
    "forward_kinematics", "importance_factors", "PolicyNetwork", "network_forward",
    "numeric_gradient", "load_weights", "save_weights",
]
