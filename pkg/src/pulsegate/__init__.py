"""ECG biometric toolkit: R-peak detection, identification, verification."""

__version__ = "0.1.0"
