"""Paper surface fingerprints: simulation, PUF metrics, attacks and ledger-backed authentication."""
from .authcore import AuthSystem, DecisionPolicy, TemplateStore
from .features import Pipeline, PufResponse, QuantizerConfig, estimate_norm_map, quantize
from .optics import AcquisitionPlan, CaptureSet, EnvironmentModel, acquire
from .pufmetrics import EvaluationBatch, eer, robustness, simulate_batch, uniformity, uniqueness
from .surface import DegradationSpec, NormMap, SurfaceParams, degrade_surface, generate_surface

__version__ = "0.1.0"

__all__ = [
    "AcquisitionPlan", "AuthSystem", "CaptureSet", "DecisionPolicy", "DegradationSpec", "EnvironmentModel",
    "EvaluationBatch", "NormMap", "Pipeline", "PufResponse", "QuantizerConfig", "SurfaceParams",
    "TemplateStore", "acquire", "degrade_surface", "eer", "estimate_norm_map", "generate_surface",
    "quantize", "robustness", "simulate_batch", "uniformity", "uniqueness",
]
