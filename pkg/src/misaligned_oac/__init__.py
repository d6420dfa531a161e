"""Simulation of misaligned over-the-air computation for federated edge learning.

Submodules:

``model``          device profiles, slot geometry, coefficient matrices
``channel``        seeded noise and sample synthesis
``gaussian_chain`` information-form message passing over window variables
``estimators``     direct/whitened/sum-product ML and the aligned-sample estimator
``feel``           packetization, partitioning, local training, rounds
``experiments``    config-driven sweeps and CSV output
``plotting``       static SVG charts
"""

from .channel import SymbolBlock, observe_slot
from .errors import OACError
from .estimators import ESTIMATOR_IDS, estimate
from .model import DeviceProfile, SlotGeometry, validate_geometry

__all__ = [
    "DeviceProfile",
    "ESTIMATOR_IDS",
    "OACError",
    "SlotGeometry",
    "SymbolBlock",
    "estimate",
    "observe_slot",
    "validate_geometry",
]
__version__ = "0.1.0"
