"""Candidate database, GPS encoder, query adapters and exact cosine retrieval."""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geodesy import GeoCoordinate
from .optim import AdamW

MAGIC = b"GRNK"
_HEADER = struct.Struct("<4sII")

SEGMENTS = ("gps", "text", "img")


class FormatError(ValueError):
    """Raised when an on-disk artifact is malformed."""


def as_feature(values, dim: int | None = None, name: str = "vector") -> np.ndarray:
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {v.shape}")
    if dim is not None and v.size != dim:
        raise ValueError(f"{name} has dim {v.size}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


# --------------------------------------------------------------------------
# binary embedding sidecars


def write_embeddings(path, matrix) -> None:
    m = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    if m.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_embeddings(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, count, dim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * count * dim
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {count}x{dim}, got {len(data)}")
    m = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, dim)
    m = m.astype(np.float32)
    if not np.all(np.isfinite(m)):
        raise FormatError(f"{path}: non-finite embedding values")
    return m


# --------------------------------------------------------------------------
# records


@dataclass(eq=False)
class CandidateRecord:
    id: str
    gps: GeoCoordinate
    text: dict[str, str] = field(default_factory=dict)
    emb_text: np.ndarray | None = None
    emb_img: np.ndarray | None = None
    emb_gps: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, CandidateRecord):
            return NotImplemented
        return (self.id == other.id and self.gps == other.gps and self.text == other.text
                and _arr_eq(self.emb_text, other.emb_text)
                and _arr_eq(self.emb_img, other.emb_img)
                and _arr_eq(self.emb_gps, other.emb_gps))

    def __repr__(self):
        return f"CandidateRecord(id={self.id!r}, gps=({self.gps.lat}, {self.gps.lon}))"


@dataclass(eq=False)
class QueryRecord:
    id: str
    emb: np.ndarray
    gps: GeoCoordinate | None = None

    def __eq__(self, other):
        if not isinstance(other, QueryRecord):
            return NotImplemented
        return self.id == other.id and self.gps == other.gps and _arr_eq(self.emb, other.emb)


def _arr_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


# --------------------------------------------------------------------------
# GPS encoder


DEFAULT_FREQUENCIES = tuple(float(2 ** k) for k in range(10))


@dataclass(eq=False)
class GpsEncoder:
    """Multi-frequency sinusoidal features of (lat, lon), projected and unit-normalized.

    Raw features per frequency f are sin/cos of f*lat and f*lon (radians).  The
    projection has orthonormal rows or columns, so with ``out_dim`` equal to the
    raw width cosine similarity between encodings equals that of the raw features.
    """

    frequencies: tuple[float, ...] = DEFAULT_FREQUENCIES
    out_dim: int = 40
    seed: int = 0
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.frequencies = tuple(float(f) for f in self.frequencies)
        if not self.frequencies or any(not f > 0 for f in self.frequencies):
            raise ValueError("frequencies must be positive")
        if self.out_dim < 1:
            raise ValueError("out_dim must be positive")
        raw = self.raw_dim
        if self.weights is None:
            rng = np.random.default_rng(self.seed)
            g = rng.standard_normal((max(raw, self.out_dim), min(raw, self.out_dim)))
            q, r = np.linalg.qr(g)
            q = q * np.sign(np.diag(r))
            self.weights = q.T if self.out_dim <= raw else q
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.out_dim, raw):
            raise ValueError(f"projection shape {self.weights.shape} != {(self.out_dim, raw)}")

    @classmethod
    def identity(cls, frequencies=(1.0,)) -> "GpsEncoder":
        raw = 4 * len(frequencies)
        return cls(tuple(frequencies), raw, seed=-1, weights=np.eye(raw))

    @property
    def raw_dim(self) -> int:
        return 4 * len(self.frequencies)

    def raw_features(self, lat, lon) -> np.ndarray:
        lat = np.radians(np.atleast_1d(np.asarray(lat, dtype=np.float64)))[:, None]
        lon = np.radians(np.atleast_1d(np.asarray(lon, dtype=np.float64)))[:, None]
        f = np.asarray(self.frequencies)[None, :]
        return np.concatenate(
            [np.sin(f * lat), np.cos(f * lat), np.sin(f * lon), np.cos(f * lon)], axis=1)

    def encode_many(self, lat, lon) -> np.ndarray:
        z = self.raw_features(lat, lon) @ self.weights.T
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return z.astype(np.float32)

    def encode(self, g: GeoCoordinate) -> np.ndarray:
        return self.encode_many(g.lat, g.lon)[0]

    def to_dict(self) -> dict:
        return {"frequencies": list(self.frequencies), "out_dim": self.out_dim, "seed": self.seed}

    @classmethod
    def from_dict(cls, d) -> "GpsEncoder":
        if d.get("seed", 0) == -1:
            return cls.identity(d["frequencies"])
        return cls(tuple(d["frequencies"]), int(d["out_dim"]), int(d["seed"]))


def encode_gps(enc: GpsEncoder, g: GeoCoordinate) -> np.ndarray:
    return enc.encode(g)


def concat_candidate(rec: CandidateRecord) -> np.ndarray:
    """gps || text || img."""
    parts = [rec.emb_gps, rec.emb_text, rec.emb_img]
    for name, p in zip(SEGMENTS, parts):
        if p is None:
            raise ValueError(f"candidate {rec.id!r} has no {name} embedding")
    return np.concatenate(parts).astype(np.float32)


# --------------------------------------------------------------------------
# adapters


@dataclass(eq=False)
class AdapterPair:
    to_gps: np.ndarray  # (gps_dim, img_dim)
    to_text: np.ndarray  # (text_dim, img_dim)
    temperature: float = 0.07

    def __post_init__(self):
        self.to_gps = np.asarray(self.to_gps, dtype=np.float32)
        self.to_text = np.asarray(self.to_text, dtype=np.float32)
        if self.to_gps.ndim != 2 or self.to_text.ndim != 2:
            raise ValueError("adapter maps must be matrices")
        if self.to_gps.shape[1] != self.to_text.shape[1]:
            raise ValueError("adapters disagree on image dimension")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def random(cls, img_dim, gps_dim, text_dim, seed=0, temperature=0.07):
        rng = np.random.default_rng(seed)
        s = 1.0 / math.sqrt(img_dim)
        return cls(rng.normal(0, s, (gps_dim, img_dim)), rng.normal(0, s, (text_dim, img_dim)),
                   temperature)

    @property
    def img_dim(self) -> int:
        return self.to_gps.shape[1]

    def copy(self) -> "AdapterPair":
        return AdapterPair(self.to_gps.copy(), self.to_text.copy(), self.temperature)


def encode_query(img_emb, adapters: AdapterPair) -> np.ndarray:
    img = np.asarray(img_emb, dtype=np.float32)
    if img.ndim != 1 or img.size != adapters.img_dim:
        raise ValueError(f"query embedding dim {img.size} != adapter input dim {adapters.img_dim}")
    return np.concatenate([adapters.to_gps @ img, adapters.to_text @ img, img]).astype(np.float32)


def encode_queries(img_embs: np.ndarray, adapters: AdapterPair) -> np.ndarray:
    x = np.asarray(img_embs, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != adapters.img_dim:
        raise ValueError(f"query embeddings shape {x.shape} incompatible with adapters")
    return np.concatenate([x @ adapters.to_gps.T, x @ adapters.to_text.T, x], axis=1)


def info_nce(proj: np.ndarray, targets: np.ndarray, temperature: float):
    """In-batch InfoNCE of projected rows against the matching target rows.

    Returns ``(loss, dloss/dproj)``.  Row i of ``proj`` is positive for row i of
    ``targets`` and negative for every other row.  Both sides are L2-normalized.
    """
    a = np.asarray(proj, dtype=np.float64)
    b = np.asarray(targets, dtype=np.float64)
    n = a.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 (in-batch negatives)")
    an = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(an == 0):
        raise ValueError("zero-norm projected vector")
    u = a / an
    v = b / np.linalg.norm(b, axis=1, keepdims=True)
    logits = u @ v.T / temperature
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    loss = -np.mean(np.diag(logp))
    g_logits = np.exp(logp)
    g_logits[np.arange(n), np.arange(n)] -= 1.0
    g_logits /= n
    g_u = g_logits @ v / temperature
    g_a = (g_u - u * np.sum(g_u * u, axis=1, keepdims=True)) / an
    return float(loss), g_a


def train_adapters(pairs: Sequence[tuple[np.ndarray, CandidateRecord]], adapters: AdapterPair,
                   steps: int = 200, lr: float = 1e-2, batch_size: int = 64, seed: int = 0):
    """Fit both adapters with InfoNCE against the positives' gps and text segments.

    Returns ``(new_adapters, losses)`` where ``losses[i]`` is the mean of the two
    segment losses at step ``i`` (before that step's update).
    """
    if len(pairs) < 2 or batch_size < 2:
        raise ValueError("adapter training needs at least 2 pairs per batch")
    x = np.stack([np.asarray(q, dtype=np.float64) for q, _ in pairs])
    t_gps = np.stack([np.asarray(c.emb_gps, dtype=np.float64) for _, c in pairs])
    t_text = np.stack([np.asarray(c.emb_text, dtype=np.float64) for _, c in pairs])
    if x.shape[1] != adapters.img_dim:
        raise ValueError(f"query dim {x.shape[1]} != adapter input dim {adapters.img_dim}")
    out = adapters.copy()
    params = {"to_gps": out.to_gps, "to_text": out.to_text}
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    n = len(pairs)
    losses = []
    for _ in range(steps):
        idx = rng.choice(n, size=batch_size, replace=False) if n > batch_size else np.arange(n)
        xb = x[idx]
        l_gps, g_gps = info_nce(xb @ out.to_gps.T.astype(np.float64), t_gps[idx], out.temperature)
        l_txt, g_txt = info_nce(xb @ out.to_text.T.astype(np.float64), t_text[idx], out.temperature)
        losses.append(0.5 * (l_gps + l_txt))
        opt.step({"to_gps": 0.5 * g_gps.T @ xb, "to_text": 0.5 * g_txt.T @ xb})
    return out, losses


# --------------------------------------------------------------------------
# store and retrieval


@dataclass
class RetrievalResult:
    candidates: list[tuple[CandidateRecord, float]]
    n: int

    def __len__(self):
        return len(self.candidates)

    @property
    def ids(self) -> list[str]:
        return [c.id for c, _ in self.candidates]

    @property
    def records(self) -> list[CandidateRecord]:
        return [c for c, _ in self.candidates]


class CandidateStore:
    """Immutable candidate database with exact cosine top-N search."""

    def __init__(self, records: Iterable[CandidateRecord], dims: dict[str, int],
                 encoder: GpsEncoder | None = None):
        self.records = list(records)
        self.dims = {k: int(dims[k]) for k in SEGMENTS}
        self.encoder = encoder
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ValueError(f"duplicate candidate id {r.id!r}")
            seen.add(r.id)
            for name in SEGMENTS:
                v = getattr(r, f"emb_{name}")
                if v is None or v.shape != (self.dims[name],):
                    got = None if v is None else v.shape
                    raise ValueError(f"candidate {r.id!r}: {name} segment shape {got}, "
                                     f"expected ({self.dims[name]},)")
        self.by_id = {r.id: i for i, r in enumerate(self.records)}
        self.matrix = (np.stack([concat_candidate(r) for r in self.records])
                       if self.records else np.zeros((0, self.dim), np.float32))
        norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("candidate with zero-norm feature vector")
        self._unit = self.matrix.astype(np.float64) / norms
        # tie-break rank: position of each id in ascending id order
        order = sorted(range(len(self.records)), key=lambda i: self.records[i].id)
        self._id_rank = np.empty(len(self.records), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.records))

    def __len__(self):
        return len(self.records)

    @property
    def dim(self) -> int:
        return sum(self.dims.values())

    @property
    def offsets(self) -> dict[str, slice]:
        out, start = {}, 0
        for name in SEGMENTS:
            out[name] = slice(start, start + self.dims[name])
            start += self.dims[name]
        return out

    def get(self, cid: str) -> CandidateRecord:
        return self.records[self.by_id[cid]]

    def similarities(self, v_q) -> np.ndarray:
        q = np.asarray(v_q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query dim {q.shape} != store dim {self.dim}")
        nq = np.linalg.norm(q)
        if nq == 0 or not np.isfinite(nq):
            raise ValueError("cosine similarity undefined for zero-norm query")
        return np.clip(self._unit @ (q / nq), -1.0, 1.0)

    def _top(self, sims: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
        if idx.size > n:
            kth = np.partition(sims, idx.size - n)[idx.size - n]
            keep = sims >= kth
            sims, idx = sims[keep], idx[keep]
        order = np.lexsort((self._id_rank[idx], -sims))
        return idx[order[:n]]

    def retrieve(self, v_q, n: int, workers: int = 1) -> RetrievalResult:
        if n < 1:
            raise ValueError(f"N must be >= 1, got {n}")
        if not self.records:
            return RetrievalResult([], n)
        q = np.asarray(v_q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query dim {q.shape} != store dim {self.dim}")
        nq = np.linalg.norm(q)
        if nq == 0 or not np.isfinite(nq):
            raise ValueError("cosine similarity undefined for zero-norm query")
        q = q / nq
        m = len(self.records)
        bounds = np.linspace(0, m, max(1, workers) + 1).astype(int)

        def scan(lo_hi):
            lo, hi = lo_hi
            # row-wise dot products, so chunking does not change any similarity bit
            s = np.clip(np.einsum("ij,j->i", self._unit[lo:hi], q), -1.0, 1.0)
            idx = np.arange(lo, hi)
            top = self._top(s, idx, n)
            return top, s[top - lo]

        chunks = [(int(a), int(b)) for a, b in zip(bounds, bounds[1:]) if b > a]
        if len(chunks) == 1:
            parts = [scan(chunks[0])]
        else:
            with ThreadPoolExecutor(len(chunks)) as ex:
                parts = list(ex.map(scan, chunks))
        idx = np.concatenate([p[0] for p in parts])
        sims = np.concatenate([p[1] for p in parts])
        order = np.lexsort((self._id_rank[idx], -sims))[:n]
        return RetrievalResult([(self.records[i], float(sims[j])) for j, i in
                                zip(order, idx[order])], n)

    def retrieve_many(self, queries, n: int, block: int = 256) -> list[RetrievalResult]:
        """Top-``n`` for a batch of query vectors.

        Similarities come from one matrix product per block of queries, which is
        much faster than repeated scans.  They can differ from ``retrieve`` in
        the last floating-point bit, so orders agree except between candidates
        whose cosines coincide to ~1e-16.
        """
        if n < 1:
            raise ValueError(f"N must be >= 1, got {n}")
        qs = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if qs.shape[1] != self.dim:
            raise ValueError(f"query dim {qs.shape[1]} != store dim {self.dim}")
        norms = np.linalg.norm(qs, axis=1, keepdims=True)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            raise ValueError("cosine similarity undefined for zero-norm query")
        if not self.records:
            return [RetrievalResult([], n) for _ in qs]
        qs = qs / norms
        idx_all = np.arange(len(self.records))
        out = []
        for lo in range(0, len(qs), block):
            sims = np.clip(qs[lo:lo + block] @ self._unit.T, -1.0, 1.0)
            for s in sims:
                top = self._top(s, idx_all, n)
                out.append(RetrievalResult([(self.records[i], float(s[i])) for i in top], n))
        return out


# --------------------------------------------------------------------------
# ingestion


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
    return rows


def _require(row: dict, key: str, where: str):
    if key not in row:
        raise FormatError(f"{where}: missing field {key!r}")
    return row[key]


def sidecar_path(jsonl_path, modality: str) -> Path:
    p = Path(jsonl_path)
    return p.with_name(p.name.removesuffix(".jsonl") + f".{modality}.grnk")


def write_candidates(path, records: Sequence[CandidateRecord]) -> None:
    """Write candidate metadata plus text and img sidecars next to it."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "lat": r.gps.lat, "lon": r.gps.lon,
                                 "text": r.text}) + "\n")
    for mod in ("text", "img"):
        write_embeddings(sidecar_path(path, mod), np.stack([getattr(r, f"emb_{mod}") for r in records]))


def load_candidates(path, encoder: GpsEncoder) -> CandidateStore:
    rows = _read_jsonl(path)
    text = read_embeddings(sidecar_path(path, "text"))
    img = read_embeddings(sidecar_path(path, "img"))
    for name, m in (("text", text), ("img", img)):
        if m.shape[0] != len(rows):
            raise FormatError(f"{sidecar_path(path, name)}: {m.shape[0]} rows for {len(rows)} records")
    lat = np.array([float(_require(r, "lat", f"{path}:{i + 1}")) for i, r in enumerate(rows)])
    lon = np.array([float(_require(r, "lon", f"{path}:{i + 1}")) for i, r in enumerate(rows)])
    gps_sidecar = sidecar_path(path, "gps")
    if gps_sidecar.exists():
        gps = read_embeddings(gps_sidecar)
    else:
        gps = encoder.encode_many(lat, lon) if rows else np.zeros((0, encoder.out_dim), np.float32)
    records = []
    for i, r in enumerate(rows):
        where = f"{path}:{i + 1}"
        records.append(CandidateRecord(
            id=str(_require(r, "id", where)),
            gps=GeoCoordinate(lat[i], lon[i]),
            text={str(k): str(v) for k, v in r.get("text", {}).items()},
            emb_text=text[i], emb_img=img[i], emb_gps=gps[i]))
    dims = {"gps": gps.shape[1], "text": text.shape[1], "img": img.shape[1]}
    return CandidateStore(records, dims, encoder)


def write_queries(path, queries: Sequence[QueryRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            row = {"id": q.id}
            if q.gps is not None:
                row.update(lat=q.gps.lat, lon=q.gps.lon)
            fh.write(json.dumps(row) + "\n")
    write_embeddings(sidecar_path(path, "img"), np.stack([q.emb for q in queries]))


def load_queries(path) -> list[QueryRecord]:
    rows = _read_jsonl(path)
    emb = read_embeddings(sidecar_path(path, "img"))
    if emb.shape[0] != len(rows):
        raise FormatError(f"{sidecar_path(path, 'img')}: {emb.shape[0]} rows for {len(rows)} queries")
    out = []
    for i, r in enumerate(rows):
        where = f"{path}:{i + 1}"
        gps = GeoCoordinate(r["lat"], r["lon"]) if "lat" in r and "lon" in r else None
        out.append(QueryRecord(str(_require(r, "id", where)), emb[i], gps))
    return out
