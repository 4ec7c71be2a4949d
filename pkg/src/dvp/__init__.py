"""Deep video prior: test-time training of a convolutional network on one
video for temporal consistency and propagation."""

__version__ = "0.1.0"
