"""Log-quantized EEG intention recognition and a model of its photonic accelerator."""

__version__ = "0.1.0"
