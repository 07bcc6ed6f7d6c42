"""Frequency-decoupled dual-branch autoencoders with evidential fusion for traffic anomaly detection."""
__version__ = "0.1.0"
