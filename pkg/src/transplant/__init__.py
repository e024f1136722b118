"""Cross-application data migration engine with anomaly-free guarantees."""

__version__ = "0.1.0"
