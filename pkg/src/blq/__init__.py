"""Low-bit region-local quantized CNN inference with a lookup-table kernel."""

__version__ = "0.1.0"
