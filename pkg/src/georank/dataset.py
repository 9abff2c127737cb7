"""Ranking triplets, prompt rendering and the JSON-lines dataset format."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geodesy import GeoCoordinate, geodesic_km
from .scorer import NegativeInfo
from .vector_store import CandidateRecord, CandidateStore, FormatError, QueryRecord, RetrievalResult

DEFAULT_N = 20
DEFAULT_K1 = 7
DEFAULT_K2 = 5


@dataclass(eq=False)
class RankingTriplet:
    query_id: str
    query_emb: np.ndarray | None
    query_gps: GeoCoordinate
    ranking: list[CandidateRecord]
    negatives: list[NegativeInfo]
    distances_km: list[float] = field(default_factory=list)

    @property
    def k1(self) -> int:
        return len(self.ranking)

    @property
    def k2(self) -> int:
        return len(self.negatives)

    def __eq__(self, other):
        if not isinstance(other, RankingTriplet):
            return NotImplemented
        same_emb = ((self.query_emb is None and other.query_emb is None) or
                    (self.query_emb is not None and other.query_emb is not None and
                     self.query_emb.tobytes() == other.query_emb.tobytes()))
        return (self.query_id == other.query_id and same_emb and self.query_gps == other.query_gps
                and self.ranking == other.ranking
                and [tuple(n) for n in self.negatives] == [tuple(n) for n in other.negatives]
                and [float(d).hex() for d in self.distances_km]
                == [float(d).hex() for d in other.distances_km])


def build_triplet(result: RetrievalResult, query: QueryRecord, k1: int = DEFAULT_K1,
                  k2: int = DEFAULT_K2) -> RankingTriplet:
    """Top-k1 of the retrieval become ranking candidates, the last k2 become negatives."""
    if k1 < 1 or k2 < 0:
        raise ValueError(f"need k1 >= 1 and k2 >= 0, got k1={k1}, k2={k2}")
    if query.gps is None:
        raise ValueError(f"query {query.id!r} has no ground-truth coordinate")
    n = len(result)
    if n < k1 + k2:
        raise ValueError(f"retrieval for {query.id!r} has {n} candidates; k1 + k2 = {k1 + k2} "
                         f"needs {k1 + k2 - n} more")
    recs = result.records
    ranking = recs[:k1]
    negatives = [NegativeInfo(c.gps, dict(c.text)) for c in recs[n - k2:]] if k2 else []
    dists = [geodesic_km(query.gps, c.gps) for c in ranking]
    return RankingTriplet(query.id, query.emb, query.gps, ranking, negatives, dists)


# --------------------------------------------------------------------------
# prompts

PLACEHOLDERS = (
    "query image", "candidate latitude", "candidate longitude",
    "candidate textual descriptions", "candidate image", "negative information",
)

RANKING_TEMPLATE = (
    "{query image} How far is this place from latitude: {candidate latitude}, "
    "longitude: {candidate longitude}, {candidate textual descriptions}, "
    "{candidate image}? Negative examples: {negative information}."
)

GENERATION_TEMPLATE = (
    "{query image} Suppose you are an expert in geolocalization. You have the ability to give "
    "two number GPS coordinates given an image. Please give me the location of the given image. "
    "Your answer should be in the following JSON format without any other information: "
    '{"latitude": float,"longitude": float}.'
)

_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(re.escape(p) for p in PLACEHOLDERS) + r")\}")


@dataclass(frozen=True)
class PromptTemplate:
    template_text: str = RANKING_TEMPLATE

    def __post_init__(self):
        found = _PLACEHOLDER_RE.findall(self.template_text)
        for p in PLACEHOLDERS:
            if found.count(p) != 1:
                raise ValueError(f"placeholder {{{p}}} must appear exactly once, "
                                 f"found {found.count(p)}")

    def render(self, values: Mapping[str, str]) -> str:
        # single pass, so substituted text is never re-scanned for placeholders
        return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], self.template_text)


def image_token(item_id: str) -> str:
    return f"<image:{item_id}>"


def fmt_coord(x: float) -> str:
    return f"{x:.6f}"


def describe(text: Mapping[str, str]) -> str:
    return ", ".join(str(v) for v in text.values())


def render_negatives(negatives: Sequence[NegativeInfo]) -> str:
    items = []
    for n in negatives:
        parts = [fmt_coord(n.gps.lat), fmt_coord(n.gps.lon)] + [str(v) for v in n.text.values()]
        items.append(", ".join(parts))
    return "; ".join(items)


def render_prompt(t: RankingTriplet, candidate_index: int,
                  tpl: PromptTemplate = PromptTemplate()) -> str:
    if not 0 <= candidate_index < len(t.ranking):
        raise IndexError(f"candidate index {candidate_index} out of range 0..{len(t.ranking) - 1}")
    c = t.ranking[candidate_index]
    return tpl.render({
        "query image": image_token(t.query_id),
        "candidate latitude": fmt_coord(c.gps.lat),
        "candidate longitude": fmt_coord(c.gps.lon),
        "candidate textual descriptions": describe(c.text),
        "candidate image": image_token(c.id),
        "negative information": render_negatives(t.negatives),
    })


def render_generation_prompt(query_id: str) -> str:
    if not query_id:
        raise ValueError("query id must be non-empty")
    return GENERATION_TEMPLATE.replace("{query image}", image_token(query_id), 1)


def write_generation_requests(query_ids: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in query_ids:
            fh.write(json.dumps({"query_id": qid, "prompt": render_generation_prompt(qid)}) + "\n")


# --------------------------------------------------------------------------
# dataset file


def triplet_to_json(t: RankingTriplet) -> dict:
    return {
        "query_id": t.query_id,
        "query_gps": t.query_gps.to_dict(),
        "ranking": [{"id": c.id, "lat": c.gps.lat, "lon": c.gps.lon, "text": c.text, "dist_km": d}
                    for c, d in zip(t.ranking, t.distances_km)],
        "negatives": [{"lat": n.gps.lat, "lon": n.gps.lon, "text": n.text} for n in t.negatives],
    }


def write_dataset(triplets: Sequence[RankingTriplet], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(triplet_to_json(t), ensure_ascii=False) + "\n")


def _field(row, key, where):
    if not isinstance(row, dict) or key not in row:
        raise FormatError(f"{where}: missing field {key!r}")
    return row[key]


def triplet_from_json(row: dict, where: str, store: CandidateStore | None = None,
                      query_embs: Mapping[str, np.ndarray] | None = None) -> RankingTriplet:
    qid = str(_field(row, "query_id", where))
    qg = _field(row, "query_gps", where)
    query_gps = GeoCoordinate(_field(qg, "lat", where), _field(qg, "lon", where))
    ranking, dists = [], []
    for item in _field(row, "ranking", where):
        cid = str(_field(item, "id", where))
        gps = GeoCoordinate(_field(item, "lat", where), _field(item, "lon", where))
        text = dict(_field(item, "text", where))
        if store is not None:
            if cid not in store.by_id:
                raise FormatError(f"{where}: candidate {cid!r} not in store")
            rec = store.get(cid)
            if rec.gps != gps:
                raise FormatError(f"{where}: candidate {cid!r} coordinates disagree with store")
        else:
            rec = CandidateRecord(cid, gps, text)
        ranking.append(rec)
        dists.append(float(_field(item, "dist_km", where)))
    negatives = [NegativeInfo(GeoCoordinate(_field(n, "lat", where), _field(n, "lon", where)),
                              dict(_field(n, "text", where)))
                 for n in _field(row, "negatives", where)]
    emb = None
    if query_embs is not None:
        if qid not in query_embs:
            raise FormatError(f"{where}: no embedding for query {qid!r}")
        emb = np.asarray(query_embs[qid], np.float32)
    return RankingTriplet(qid, emb, query_gps, ranking, negatives, dists)


def load_dataset(path, store: CandidateStore | None = None,
                 query_embs: Mapping[str, np.ndarray] | None = None) -> list[RankingTriplet]:
    """Read a dataset file; with ``store``/``query_embs`` the embedding references are resolved."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{Path(path).name}:{lineno}"
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{where}: malformed line ({e.msg})") from None
            try:
                out.append(triplet_from_json(row, where, store, query_embs))
            except (TypeError, ValueError) as e:
                if isinstance(e, FormatError):
                    raise
                raise FormatError(f"{where}: {e}") from None
    return out
