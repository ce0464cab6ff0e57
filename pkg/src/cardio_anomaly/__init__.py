"""ECG anomaly detection pretraining and rare-class diagnosis."""
__version__ = "0.1.0"
