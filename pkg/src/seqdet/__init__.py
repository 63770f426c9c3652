"""seqdet: desk-scale spatiotemporal action detection.

A multi-scale anchor-based detector with optional convolutional-LSTM memory
in front of each detection head, plus the clip-based training pipeline
(hybrid shuffling, chunked truncated backprop, state forwarding) and an
mAP@0.5 evaluation toolkit.
"""

from .boxes import BoxLabel, Detection
from .convlstm import ConvLSTMCell, ConvLSTMStack, ConvLSTMState
from .detector import AnchorSet, Detector, DetectorConfig, GridPrediction, decode, filter_confidence
from .tensor import ConvKernel, Tensor4, conv2d, no_grad, numeric_gradient

__version__ = "0.1.0"

__all__ = [
    "BoxLabel",
    "Detection",
    "ConvLSTMCell",
    "ConvLSTMStack",
    "ConvLSTMState",
    "AnchorSet",
    "Detector",
    "DetectorConfig",
    "GridPrediction",
    "decode",
    "filter_confidence",
    "ConvKernel",
    "Tensor4",
    "conv2d",
    "no_grad",
    "numeric_gradient",
    "__version__",
]
