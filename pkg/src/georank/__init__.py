"""Distance-aware reranking of geolocation candidates, with a synthetic benchmark."""

from .geodesy import GeoCoordinate, ThresholdSet, geodesic_km
from .losses import DistanceLabels, LossConfig, loss_first_order, loss_second_order, loss_total
from .synth import WorldSpec, generate_world

__version__ = "0.1.0"

__all__ = [
    "GeoCoordinate", "ThresholdSet", "geodesic_km",
    "DistanceLabels", "LossConfig", "loss_first_order", "loss_second_order", "loss_total",
    "WorldSpec", "generate_world",
]
