"""Train QCFS-activated networks, convert them to integrate-and-fire SNNs and
check the conversion-error theory numerically."""

__version__ = "0.1.0"
