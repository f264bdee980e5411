"""Simulated enclave-based security stack for smart-grid metering."""

__version__ = "0.1.0"
