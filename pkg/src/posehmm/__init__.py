"""Event detection with left-right HMMs whose state output models are
trainable appearance detectors."""

__version__ = "0.1.0"
