"""Deterministic synthetic geolocalization worlds for desk-scale end-to-end runs."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geodesy import GeoCoordinate, destination
from .vector_store import CandidateRecord, QueryRecord, write_candidates, write_queries


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    n_candidates: int = 20000
    n_queries: int = 5000
    n_clusters: int = 40
    cluster_spread_km: float = 50.0
    n_regions: int = 10
    region_spread_km: float = 300.0
    feature_noise_sigma: float = 0.1
    signal_rms: float = 0.1
    dims: dict = field(default_factory=lambda: {"gps": 40, "text": 64, "img": 128})
    frequencies: tuple = tuple(float(2 ** k) for k in range(10))

    def __post_init__(self):
        for name in ("n_candidates", "n_queries", "n_clusters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_regions < 0:
            raise ValueError("n_regions must be non-negative")
        if not (self.cluster_spread_km > 0 and self.region_spread_km > 0):
            raise ValueError("cluster_spread_km and region_spread_km must be positive")
        if not self.signal_rms > 0:
            raise ValueError("signal_rms must be positive")
        if not self.feature_noise_sigma >= 0:
            raise ValueError("feature_noise_sigma must be non-negative")
        for k in ("gps", "text", "img"):
            if int(self.dims.get(k, 0)) < 1:
                raise ValueError(f"dims[{k!r}] must be a positive integer")
        if self.n_clusters > self.dims["text"]:
            raise ValueError(f"text dim {self.dims['text']} cannot one-hot {self.n_clusters} clusters")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frequencies"] = list(self.frequencies)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        if "frequencies" in d:
            d["frequencies"] = tuple(float(f) for f in d["frequencies"])
        return cls(**d)


@dataclass(eq=False)
class World:
    spec: WorldSpec
    candidates: list[CandidateRecord]
    queries: list[QueryRecord]
    centers: list[GeoCoordinate]
    query_clusters: np.ndarray
    candidate_clusters: np.ndarray


def sphere_uniform(rng: np.random.Generator, n: int) -> list[GeoCoordinate]:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    lat = np.degrees(np.arcsin(np.clip(v[:, 2], -1, 1)))
    lon = np.degrees(np.arctan2(v[:, 1], v[:, 0]))
    return [GeoCoordinate(a, b) for a, b in zip(lat, lon)]


class LocationFeatureMap:
    """Fixed random Fourier map from a coordinate to an image-embedding signal.

    Multi-frequency sinusoids of latitude and longitude are mixed by a seeded
    random matrix with orthonormal columns, so the sinusoid features (and hence
    location) are linearly recoverable from the output when there is no noise.
    The kernel is a sum over the two axes, so places sharing a latitude (or a
    longitude) look partly alike however far apart they are.
    """

    def __init__(self, dim: int, frequencies, seed: int):
        self.frequencies = np.asarray(frequencies, dtype=np.float64)
        raw = 4 * self.frequencies.size
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((max(dim, raw), min(dim, raw)))
        q, _ = np.linalg.qr(g)
        self.mix = q if dim >= raw else q.T  # (dim, raw)

    def __call__(self, lat, lon) -> np.ndarray:
        lat = np.radians(np.asarray(lat, dtype=np.float64))[:, None]
        lon = np.radians(np.asarray(lon, dtype=np.float64))[:, None]
        f = self.frequencies[None, :]
        raw = np.concatenate([np.sin(f * lat), np.cos(f * lat), np.sin(f * lon), np.cos(f * lon)], 1)
        # unit-RMS entries before noise
        return raw @ self.mix.T * np.sqrt(self.mix.shape[0] / (2.0 * self.frequencies.size))


def _scatter(rng, center: GeoCoordinate, spread_km: float) -> GeoCoordinate:
    # isotropic tangent-plane Gaussian: Rayleigh radius, uniform bearing
    e, n = rng.normal(0.0, spread_km, 2)
    return destination(center, math.atan2(e, n), math.hypot(e, n))


def generate_world(spec: WorldSpec) -> World:
    rng = np.random.default_rng(spec.seed)
    if spec.n_regions:
        # cluster centres grouped around a few region centres, so neighbouring
        # clusters are confusable at coarse scales
        regions = sphere_uniform(rng, spec.n_regions)
        centers = [_scatter(rng, regions[i % spec.n_regions], spec.region_spread_km)
                   for i in range(spec.n_clusters)]
    else:
        centers = sphere_uniform(rng, spec.n_clusters)
    fmap = LocationFeatureMap(spec.dims["img"], spec.frequencies, spec.seed + 1)
    sigma = spec.feature_noise_sigma
    text_dim = spec.dims["text"]

    def place(n):
        clusters = rng.integers(0, spec.n_clusters, n)
        pts = [_scatter(rng, centers[c], spec.cluster_spread_km) for c in clusters]
        lat = np.array([p.lat for p in pts])
        lon = np.array([p.lon for p in pts])
        img = spec.signal_rms * fmap(lat, lon) + sigma * rng.standard_normal((n, spec.dims["img"]))
        img /= np.linalg.norm(img, axis=1, keepdims=True)
        return clusters, pts, img.astype(np.float32)

    c_clusters, c_pts, c_img = place(spec.n_candidates)
    candidates = []
    for i, (cl, p) in enumerate(zip(c_clusters, c_pts)):
        text = np.zeros(text_dim, np.float32)
        text[cl] = 1.0
        candidates.append(CandidateRecord(
            id=f"c{i:06d}", gps=p,
            text={"city": f"city-{cl:03d}", "country": f"country-{cl // 4:03d}"},
            emb_text=text, emb_img=c_img[i]))
    q_clusters, q_pts, q_img = place(spec.n_queries)
    queries = [QueryRecord(f"q{i:06d}", q_img[i], p) for i, p in enumerate(q_pts)]
    return World(spec, candidates, queries, centers, q_clusters, c_clusters)


def export_world(world: World, out_dir) -> dict[str, Path]:
    """Write the world in the ingestion formats; returns the written paths."""
    if not world.candidates or not world.queries:
        raise ValueError("refusing to export an empty world")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"candidates": out / "candidates.jsonl", "queries": out / "queries.jsonl",
                 "world": out / "world.json"}
        write_candidates(paths["candidates"], world.candidates)
        write_queries(paths["queries"], world.queries)
        paths["world"].write_text(json.dumps({"schema": "georank.world/1",
                                              "spec": world.spec.to_dict()}, indent=2) + "\n")
    except OSError as e:
        raise OSError(f"exporting world to {out}: {e}") from e
    return paths
