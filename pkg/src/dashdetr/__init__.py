"""Desk-scale end-to-end set-prediction detector for dashcam scenes.

Submodules: ``autograd`` (tensors, reverse mode, Adam, checkpoints),
``model``, ``matching``, ``loss``, ``data``, ``evaluation``, ``train``,
``report`` and the ``cli`` entry point.
"""

__version__ = "0.1.0"
