"""Simulation workbench for closed-loop control of direct ink writing.

Subpackages cover planning geometry, the particle deposition simulator,
the data-driven flow-noise model, the control environment, controllers,
and evaluation metrics.
"""

__version__ = "0.1.0"
