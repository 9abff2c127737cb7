"""Geographic primitives: coordinates, great-circle distance, threshold sets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0088
DEFAULT_THRESHOLDS_KM = (1.0, 25.0, 200.0, 750.0, 2500.0)


def normalize_lon(lon: float) -> float:
    """Map a longitude into (-180, 180]."""
    lon = math.fmod(lon, 360.0)
    if lon <= -180.0:
        lon += 360.0
    elif lon > 180.0:
        lon -= 360.0
    return lon + 0.0  # drop negative zero


@dataclass(frozen=True)
class GeoCoordinate:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat + 0.0)
        object.__setattr__(self, "lon", normalize_lon(lon))

    def to_dict(self) -> dict:
        return {"lat": self.lat, "lon": self.lon}


@dataclass(frozen=True)
class ThresholdSet:
    thresholds_km: tuple[float, ...] = DEFAULT_THRESHOLDS_KM

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds_km)
        if not t:
            raise ValueError("threshold set is empty")
        if any(not math.isfinite(x) or x <= 0 for x in t):
            raise ValueError(f"thresholds must be finite and positive: {t}")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds must be strictly ascending: {t}")
        object.__setattr__(self, "thresholds_km", t)

    def __len__(self):
        return len(self.thresholds_km)

    def __iter__(self):
        return iter(self.thresholds_km)

    def scaled(self, factor: float) -> "ThresholdSet":
        return ThresholdSet(tuple(x * factor for x in self.thresholds_km))


def geodesic_km(a: GeoCoordinate, b: GeoCoordinate) -> float:
    """Haversine great-circle distance on the mean-radius sphere."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dlmb = math.radians(b.lon - a.lon)
    c12 = math.cos(phi1) * math.cos(phi2)
    h = math.sin((phi2 - phi1) / 2) ** 2 + c12 * math.sin(dlmb / 2) ** 2
    if h <= 0.5:
        return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(max(0.0, h)))
    # far half: haversine to the antipode of b, which keeps full precision near d = pi R
    ha = math.sin((phi1 + phi2) / 2) ** 2 + c12 * math.cos(dlmb / 2) ** 2
    return EARTH_RADIUS_KM * (math.pi - 2.0 * math.asin(math.sqrt(min(1.0, ha))))


def geodesic_km_many(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Vectorized haversine in km; arguments broadcast."""
    phi1 = np.radians(np.asarray(lat1, dtype=np.float64))
    phi2 = np.radians(np.asarray(lat2, dtype=np.float64))
    dlmb = np.radians(np.asarray(lon2, dtype=np.float64) - np.asarray(lon1, dtype=np.float64))
    c12 = np.cos(phi1) * np.cos(phi2)
    h = np.sin((phi2 - phi1) / 2) ** 2 + c12 * np.sin(dlmb / 2) ** 2
    ha = np.sin((phi1 + phi2) / 2) ** 2 + c12 * np.cos(dlmb / 2) ** 2
    near = 2.0 * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    far = np.pi - 2.0 * np.arcsin(np.sqrt(np.clip(ha, 0.0, 1.0)))
    return EARTH_RADIUS_KM * np.where(h <= 0.5, near, far)


def within_thresholds(err_km: float, t: ThresholdSet = ThresholdSet()) -> list[bool]:
    if not err_km >= 0:
        raise ValueError(f"error distance must be non-negative, got {err_km}")
    return [err_km <= x for x in t.thresholds_km]


def destination(origin: GeoCoordinate, bearing_rad: float, dist_km: float) -> GeoCoordinate:
    """Point reached by travelling dist_km from origin along an initial bearing."""
    delta = dist_km / EARTH_RADIUS_KM
    phi1, lmb1 = math.radians(origin.lat), math.radians(origin.lon)
    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(bearing_rad)
    phi2 = math.asin(min(1.0, max(-1.0, sin_phi2)))
    lmb2 = lmb1 + math.atan2(
        math.sin(bearing_rad) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * sin_phi2,
    )
    return GeoCoordinate(math.degrees(phi2), math.degrees(lmb2))


def as_coords(points: Sequence[GeoCoordinate]) -> tuple[np.ndarray, np.ndarray]:
    lat = np.array([p.lat for p in points], dtype=np.float64)
    lon = np.array([p.lon for p in points], dtype=np.float64)
    return lat, lon
