"""Learned cross-track focusing for 3-D SAR tomography.

Modules: ``geometry`` (acquisition model), ``synth`` (scenes and datasets),
``lvamp`` (unfolded network), ``training``, ``baselines``, ``evaluation``,
``scene3d`` and ``cli``; ``container`` is the shared binary array format.
"""

__version__ = "0.1.0"
