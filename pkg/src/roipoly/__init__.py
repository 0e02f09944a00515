"""RoI-confined polygon decoding: targets, decoder, training, metrics and I/O."""

__version__ = "0.1.0"
