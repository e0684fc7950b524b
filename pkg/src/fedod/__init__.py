"""fedod: desk-scale federated object detection.

Clients train a small single-shot grid detector on non-IID synthetic data;
a neutral server runs sample-weighted federated averaging across
communication rounds with an average-accuracy stopping rule; COCO-style
metrics score how well the global model generalizes to object combinations
no client ever saw.
"""

from .errors import FedodError

__all__ = ["FedodError"]
__version__ = "0.1.0"
