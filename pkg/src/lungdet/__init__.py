"""Single-stage volumetric pulmonary nodule detection with anchor-based patch sampling."""

__version__ = "0.1.0"
