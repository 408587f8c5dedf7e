"""vesselforge: vesselness-guided weakly supervised 3D aneurysm detection
and segmentation toolkit.

Volume I/O and processing, Hessian vesselness priors, a dual-stream
attention-gated multi-task UNet on a minimal autodiff substrate, synthetic
vascular phantoms, training/inference pipelines, and detection metrics.
"""

__version__ = "0.1.0"


class VesselforgeError(Exception):
    """Base class for all package errors."""


class FormatError(VesselforgeError):
    """Malformed file content (headers, payload sizes, manifests)."""


class GridError(VesselforgeError):
    """Volumes on incompatible grids (dims or spacing)."""


class ShapeError(VesselforgeError):
    """Tensor/layer shape inconsistency."""


class ConfigError(VesselforgeError):
    """Invalid configuration key, type, or value."""


class CapacityError(VesselforgeError):
    """Placement/retry budget exhausted (volume too small for request)."""


class TrainingError(VesselforgeError):
    """Non-finite gradients or other unrecoverable optimizer states."""


class MetricsError(VesselforgeError):
    """Metric preconditions violated (e.g. empty mask for hd95)."""
