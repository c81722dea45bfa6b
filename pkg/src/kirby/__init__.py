"""Key in-distribution feature replacement by inpainting for OOD detection."""

__version__ = "0.1.0"
