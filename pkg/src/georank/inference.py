"""Candidate pools, argmax prediction, threshold evaluation, oracle and baselines."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geodesy import GeoCoordinate, ThresholdSet, destination, geodesic_km
from .scorer import FeatureAssembler, NegativeInfo, ScorerState
from .vector_store import CandidateRecord, FormatError, RetrievalResult

RETRIEVED, GENERATED = "retrieved", "generated"

# |C_r|, |C_g| presets
POOL_PROFILES = {"im2gps3k": (12, 3), "yfcc4k": (14, 5)}


@dataclass
class CandidatePool:
    retrieved: list[CandidateRecord] = field(default_factory=list)
    generated: list[GeoCoordinate] = field(default_factory=list)

    def __len__(self):
        return len(self.retrieved) + len(self.generated)

    def members(self) -> list:
        return list(self.retrieved) + list(self.generated)

    def coords(self) -> list[GeoCoordinate]:
        return [c.gps for c in self.retrieved] + list(self.generated)

    def locate(self, pool_index: int) -> tuple[str, int]:
        nr = len(self.retrieved)
        return (RETRIEVED, pool_index) if pool_index < nr else (GENERATED, pool_index - nr)


@dataclass
class Prediction:
    chosen: GeoCoordinate
    chosen_source: str
    chosen_index: int
    scores: list[tuple[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"chosen": self.chosen.to_dict(), "source": self.chosen_source,
                "index": self.chosen_index,
                "scores": [{"ref": r, "score": s} for r, s in self.scores]}


def _ref(pool: CandidatePool, pool_index: int) -> str:
    src, i = pool.locate(pool_index)
    return pool.retrieved[i].id if src == RETRIEVED else f"generated:{i}"


def _choose(pool: CandidatePool, pool_index: int, scores=None) -> Prediction:
    src, i = pool.locate(pool_index)
    chosen = pool.retrieved[i].gps if src == RETRIEVED else pool.generated[i]
    refs = [] if scores is None else [(_ref(pool, k), float(s)) for k, s in enumerate(scores)]
    return Prediction(chosen, src, i, refs)


def choose_argmax(pool: CandidatePool, scores: Sequence[float]) -> Prediction:
    """First maximum wins: retrieved before generated, then lower index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size != len(pool) or s.size == 0:
        raise ValueError("need exactly one score per pool member")
    return _choose(pool, int(np.argmax(s)), s)


SCORE_BLOCK = 32


def score_pool(state: ScorerState, assembler: FeatureAssembler, query_emb, pool: CandidatePool,
               negatives: Sequence[NegativeInfo] = (), workers: int = 1) -> np.ndarray:
    """Scores in pool order.

    Rows are scored in fixed blocks of ``SCORE_BLOCK`` whatever the worker
    count, so parallel and sequential scoring agree bit for bit.
    """
    feats = assembler.assemble_many(query_emb, pool.members(), negatives)
    blocks = [feats[i:i + SCORE_BLOCK] for i in range(0, len(feats), SCORE_BLOCK)]
    if workers <= 1 or len(blocks) < 2:
        parts = [state.scores(b) for b in blocks]
    else:
        with ThreadPoolExecutor(min(workers, len(blocks))) as ex:
            parts = list(ex.map(state.scores, blocks))
    return np.concatenate(parts)


def predict(state: ScorerState, assembler: FeatureAssembler, query_emb, pool: CandidatePool,
            negatives: Sequence[NegativeInfo] = (), workers: int = 1) -> Prediction:
    if len(pool) == 0:
        raise ValueError("cannot predict from an empty candidate pool")
    scores = score_pool(state, assembler, query_emb, pool, negatives, workers)
    return choose_argmax(pool, scores)


def baseline_random(pool: CandidatePool, seed: int) -> Prediction:
    if len(pool) == 0:
        raise ValueError("cannot sample from an empty candidate pool")
    rng = np.random.default_rng(seed)
    return _choose(pool, int(rng.integers(len(pool))))


def baseline_top1(result: RetrievalResult) -> Prediction:
    if len(result) == 0:
        raise ValueError("empty retrieval result")
    rec, sim = result.candidates[0]
    return Prediction(rec.gps, RETRIEVED, 0, [(rec.id, sim)])


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    per_threshold_accuracy: dict[float, float]
    per_sample_error_km: list[float]
    sample_count: int
    config: dict = field(default_factory=dict)
    name: str = ""

    def accuracies(self) -> list[float]:
        return list(self.per_threshold_accuracy.values())

    def to_dict(self) -> dict:
        return {"name": self.name, "sample_count": self.sample_count,
                "accuracy": {_tkey(t): round(a, 2) for t, a in self.per_threshold_accuracy.items()},
                "accuracy_exact": {_tkey(t): a for t, a in self.per_threshold_accuracy.items()},
                "per_sample_error_km": self.per_sample_error_km, "config": self.config}

    @classmethod
    def from_dict(cls, d: dict, config=None) -> "EvalReport":
        acc = {float(k): float(v) for k, v in d["accuracy_exact"].items()}
        return cls(acc, list(d["per_sample_error_km"]), int(d["sample_count"]),
                   config if config is not None else d.get("config", {}), d.get("name", ""))


def _tkey(t: float) -> str:
    return f"{t:g}"


def report_from_errors(errors: Sequence[float], t: ThresholdSet, config=None, name="") -> EvalReport:
    if len(errors) == 0:
        raise ValueError("cannot evaluate zero samples")
    e = np.asarray(errors, dtype=np.float64)
    acc = {th: 100.0 * int(np.count_nonzero(e <= th)) / e.size for th in t}
    return EvalReport(acc, [float(x) for x in e], int(e.size), dict(config or {}), name)


def evaluate(predictions: Sequence[tuple[Prediction, GeoCoordinate]], t: ThresholdSet = ThresholdSet(),
             config=None, name="") -> EvalReport:
    errors = [geodesic_km(p.chosen, truth) for p, truth in predictions]
    return report_from_errors(errors, t, config, name)


def oracle_best_in_pool(pools: Sequence[CandidatePool], truths: Sequence[GeoCoordinate],
                        t: ThresholdSet = ThresholdSet(), config=None) -> EvalReport:
    if len(pools) != len(truths):
        raise ValueError("pools and truths are not aligned")
    errors = []
    for pool, truth in zip(pools, truths):
        if len(pool) == 0:
            raise ValueError("empty pool in oracle evaluation")
        errors.append(min(geodesic_km(c, truth) for c in pool.coords()))
    return report_from_errors(errors, t, config, "oracle")


# --------------------------------------------------------------------------
# report output


def reports_to_json(reports: Sequence[EvalReport], thresholds: ThresholdSet, config: dict) -> dict:
    return {"schema": "georank.eval/1", "thresholds_km": list(thresholds.thresholds_km),
            "config": config, "reports": [r.to_dict() for r in reports]}


def format_table(reports: Sequence[EvalReport], thresholds: ThresholdSet) -> str:
    head = ["method"] + [f"{t:g}km" for t in thresholds]
    rows = [[r.name] + [f"{r.per_threshold_accuracy[t]:.2f}" for t in thresholds] for r in reports]
    widths = [max(len(x[i]) for x in [head] + rows) for i in range(len(head))]
    fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                for i, (c, w) in enumerate(zip(row, widths)))
    lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# generated candidates


def stub_generated(truth: GeoCoordinate, n: int, noise_km: float, seed: int,
                   growth: float = 1.0) -> list[GeoCoordinate]:
    """Stand-in generator: ground truth displaced by tangent-plane Gaussians.

    Guess ``i`` has noise scale ``noise_km * growth**i``, so with ``growth > 1``
    the guesses range from sharp to vague.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        e, nn = rng.normal(0.0, noise_km * growth ** i, 2)
        out.append(destination(truth, math.atan2(e, nn), math.hypot(e, nn)))
    return out


def write_generated(path, generated: dict[str, list[GeoCoordinate]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, pts in generated.items():
            for p in pts:
                fh.write(json.dumps({"query_id": qid, "lat": p.lat, "lon": p.lon}) + "\n")


def load_generated(path) -> dict[str, list[GeoCoordinate]]:
    out: dict[str, list[GeoCoordinate]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.setdefault(str(row["query_id"]), []).append(GeoCoordinate(row["lat"], row["lon"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}:{lineno}: bad generated-candidate line ({e})") from None
    return out
