"""Trajectory optimization for hybrid dynamical systems with reset maps.

Multi-phase DDP/iLQR with an augmented-Lagrangian outer loop for touchdown
(switching) constraints, relaxed log-barrier handling of torque/friction
inequalities, and Newton updates of the mode timing through a time-scaled
problem formulation.  Ships with a planar quadruped bounding benchmark.
"""

from hyddp.dynamics import RobotModel

__all__ = ["RobotModel"]
__version__ = "0.1.0"
