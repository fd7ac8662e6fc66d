"""Deterministic glucose-insulin simulation with runtime safety shields.

Subpackages and modules map to the engine's main concerns: continuous
physiology (``physiology``), virtual patients (``patients``), the
decision-support environment (``environment``), reward and cost signals
(``rewards``), trajectory forecasting (``forecaster``), action shields
(``shield``), clinical metrics (``metrics``), and the benchmark harness
(``policies``/``runner``/``cli``).
"""

from .physiology import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
