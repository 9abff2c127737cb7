"""End-to-end orchestration shared by the CLI, the service and the acceptance suite."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .dataset import RankingTriplet, build_triplet
from .geodesy import GeoCoordinate, ThresholdSet, geodesic_km_many
from .inference import (
    CandidatePool, EvalReport, Prediction, baseline_random, baseline_top1, evaluate,
    oracle_best_in_pool, predict, stub_generated,
)
from .scorer import FeatureAssembler, FeatureLayout, NegativeInfo, ScorerState
from .training import LossCurve, TrainOptions, train
from .vector_store import (
    AdapterPair, CandidateStore, FormatError, GpsEncoder, QueryRecord, encode_queries, encode_query,
    load_candidates, read_embeddings, train_adapters, write_embeddings,
)

log = logging.getLogger(__name__)

STORE_MANIFEST = "store.json"


def make_encoder(cfg: RunConfig) -> GpsEncoder:
    e = cfg.encoder
    return GpsEncoder(tuple(e.frequencies), e.out_dim, e.seed)


def split_queries(queries: Sequence[QueryRecord], eval_fraction: float):
    n_eval = max(1, int(round(len(queries) * eval_fraction)))
    return list(queries[:-n_eval]), list(queries[-n_eval:])


def nearest_candidates(store: CandidateStore, coords: Sequence[GeoCoordinate], chunk=256) -> np.ndarray:
    """Index of the geodesically nearest store record for each coordinate."""
    clat = np.array([r.gps.lat for r in store.records])
    clon = np.array([r.gps.lon for r in store.records])
    out = []
    for lo in range(0, len(coords), chunk):
        part = coords[lo:lo + chunk]
        qlat = np.array([c.lat for c in part])[:, None]
        qlon = np.array([c.lon for c in part])[:, None]
        out.append(np.argmin(geodesic_km_many(qlat, qlon, clat, clon), axis=1))
    return np.concatenate(out) if out else np.zeros(0, int)


def fit_adapters(cfg: RunConfig, store: CandidateStore, queries: Sequence[QueryRecord]):
    a = cfg.adapters
    adapters = AdapterPair.random(store.dims["img"], store.dims["gps"], store.dims["text"],
                                  seed=a.seed, temperature=a.temperature)
    labelled = [q for q in queries if q.gps is not None]
    if len(labelled) < 2 or a.steps == 0:
        return adapters, []
    nearest = nearest_candidates(store, [q.gps for q in labelled])
    pairs = [(q.emb, store.records[i]) for q, i in zip(labelled, nearest)]
    return train_adapters(pairs, adapters, steps=a.steps, lr=a.lr,
                          batch_size=min(a.batch, len(pairs)), seed=a.seed)


def save_store(store_dir, candidates_path, encoder: GpsEncoder, adapters: AdapterPair,
               queries_path=None) -> None:
    d = Path(store_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_embeddings(d / "adapter_gps.grnk", adapters.to_gps)
    write_embeddings(d / "adapter_text.grnk", adapters.to_text)
    manifest = {"schema": "georank.store/1",
                "candidates": str(Path(candidates_path).resolve()),
                "queries": None if queries_path is None else str(Path(queries_path).resolve()),
                "encoder": encoder.to_dict(), "temperature": adapters.temperature}
    (d / STORE_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")


def load_store(store_dir) -> tuple[CandidateStore, AdapterPair, dict]:
    d = Path(store_dir)
    mpath = d / STORE_MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"store manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    encoder = GpsEncoder.from_dict(manifest["encoder"])
    store = load_candidates(manifest["candidates"], encoder)
    adapters = AdapterPair(read_embeddings(d / "adapter_gps.grnk"),
                           read_embeddings(d / "adapter_text.grnk"), manifest["temperature"])
    if adapters.to_gps.shape != (store.dims["gps"], store.dims["img"]) or \
            adapters.to_text.shape != (store.dims["text"], store.dims["img"]):
        raise FormatError(f"{d}: adapter shapes do not match store dimensions")
    return store, adapters, manifest


def build_dataset(cfg: RunConfig, store: CandidateStore, adapters: AdapterPair,
                  queries: Sequence[QueryRecord]) -> list[RankingTriplet]:
    r = cfg.retrieval
    qv = encode_queries(np.stack([q.emb for q in queries]), adapters)
    results = store.retrieve_many(qv, r.N)
    return [build_triplet(res, q, r.k1, cfg.effective_k2) for q, res in zip(queries, results)]


def make_assembler(cfg: RunConfig, store: CandidateStore, adapters: AdapterPair) -> FeatureAssembler:
    layout = FeatureLayout.for_dims(store.dims["gps"], store.dims["text"], store.dims["img"])
    return FeatureAssembler(store.encoder, layout, cfg.ablation, adapters)


def train_scorer(cfg: RunConfig, triplets: Sequence[RankingTriplet], assembler: FeatureAssembler,
                 prepared=None) -> tuple[ScorerState, LossCurve]:
    t = cfg.training
    interaction = assembler.layout.query if t.interaction == "aligned" else int(t.interaction)
    state = ScorerState.init(assembler.layout, tuple(t.hidden), t.activation, seed=t.seed,
                             interaction=interaction, head_scale=t.head_scale,
                             aligned_init=t.interaction == "aligned")
    opt = TrainOptions(lr=t.lr, batch=t.batch, epochs=t.epochs, weight_decay=t.weight_decay,
                       seed=t.seed, gps_only_rate=t.gps_only_rate,
                       frozen=tuple(t.frozen))
    return train(triplets, state, cfg.loss_config(), assembler, opt, prepared=prepared)


@dataclass
class Ranker:
    """Everything needed to answer a ranking request; immutable after construction."""

    cfg: RunConfig
    store: CandidateStore
    adapters: AdapterPair
    state: ScorerState
    assembler: FeatureAssembler

    def pool(self, query_emb, generated: Sequence[GeoCoordinate], n_retrieved: int):
        """Retrieve C_r plus tail negatives and attach generated candidates."""
        k2 = self.cfg.effective_k2
        q = np.asarray(query_emb, np.float32)
        if q.shape != (self.adapters.img_dim,):
            raise ValueError(f"query embedding dim {q.size} != {self.adapters.img_dim}")
        generated = [] if self.cfg.ablation.no_generated else list(generated)
        result = None
        retrieved, negatives = [], []
        if n_retrieved > 0 or k2 > 0:
            n = max(self.cfg.retrieval.N, n_retrieved + k2)
            result = self.store.retrieve(encode_query(q, self.adapters), n)
            recs = result.records
            retrieved = recs[:n_retrieved]
            if k2:
                negatives = [NegativeInfo(c.gps, dict(c.text)) for c in recs[len(recs) - k2:]]
        return CandidatePool(retrieved, generated), negatives, result

    def rank(self, query_emb, generated: Sequence[GeoCoordinate] = (),
             n_retrieved: int | None = None) -> Prediction:
        nr = self.cfg.inference.n_retrieved if n_retrieved is None else n_retrieved
        pool, negatives, _ = self.pool(query_emb, generated, nr)
        return predict(self.state, self.assembler, query_emb, pool, negatives,
                       workers=self.cfg.inference.workers)


def stub_generated_for(cfg: RunConfig, queries: Sequence[QueryRecord]) -> dict[str, list]:
    inf = cfg.inference
    return {q.id: stub_generated(q.gps, inf.n_generated, inf.generator_noise_km,
                                 seed=inf.generator_seed * 1_000_003 + i, growth=inf.generator_growth)
            for i, q in enumerate(queries) if q.gps is not None}


def synthetic_config(spec, base: RunConfig | None = None) -> RunConfig:
    """Run settings used for synthetic worlds.

    Ranking defaults (N, k1, k2, lambda, K1) stay untouched.  Training runs
    longer and faster than the real-data defaults because the toy scorer starts
    far from a useful scale, thresholds are rescaled so the 200 km level
    matches the cluster spread, and the generator stub is tuned to the world.
    """
    cfg = base or RunConfig()
    cfg = replace(cfg, training=replace(cfg.training, lr=1e-2, epochs=3),
                  inference=replace(cfg.inference, generator_noise_km=spec.cluster_spread_km / 50.0,
                                    generator_growth=4.0),
                  eval=replace(cfg.eval, threshold_scale=spec.cluster_spread_km / 200.0),
                  encoder=replace(cfg.encoder, frequencies=list(spec.frequencies),
                                  out_dim=spec.dims["gps"]))
    return cfg.validate()


def thresholds(cfg: RunConfig) -> ThresholdSet:
    return ThresholdSet(tuple(cfg.eval.thresholds_km)).scaled(cfg.eval.threshold_scale)


def evaluate_ranker(ranker: Ranker, queries: Sequence[QueryRecord],
                    generated: dict[str, list[GeoCoordinate]]) -> dict[str, EvalReport]:
    """GeoRanker, Random, Top-1 and the best-in-pool oracle over the same pools."""
    cfg = ranker.cfg
    t = thresholds(cfg)
    snapshot = cfg.to_dict()
    preds, rand, top1, pools, truths = [], [], [], [], []
    for i, q in enumerate(queries):
        if q.gps is None:
            raise ValueError(f"evaluation query {q.id!r} has no ground truth")
        gen = generated.get(q.id, [])[:cfg.inference.n_generated]
        pool, negatives, result = ranker.pool(q.emb, gen, cfg.inference.n_retrieved)
        if len(pool) == 0:
            raise ValueError(f"empty candidate pool for query {q.id!r}")
        preds.append((predict(ranker.state, ranker.assembler, q.emb, pool, negatives), q.gps))
        rand.append((baseline_random(pool, cfg.inference.random_seed * 1_000_003 + i), q.gps))
        if result is not None and len(result):
            top1.append((baseline_top1(result), q.gps))
        pools.append(pool)
        truths.append(q.gps)
    out = {"georanker": evaluate(preds, t, snapshot, "georanker"),
           "random": evaluate(rand, t, snapshot, "random")}
    if top1:
        out["top1"] = evaluate(top1, t, snapshot, "top1")
    out["oracle"] = oracle_best_in_pool(pools, truths, t, snapshot)
    return out


@dataclass
class SyntheticRun:
    """A generated world taken through ingestion, adapter fitting and dataset building."""

    spec: object
    cfg: RunConfig
    store: CandidateStore
    adapters: AdapterPair
    train_queries: list[QueryRecord]
    eval_queries: list[QueryRecord]
    triplets: list[RankingTriplet]


def prepare_synthetic(spec, cfg: RunConfig | None = None) -> SyntheticRun:
    from .synth import generate_world

    cfg = synthetic_config(spec, cfg)
    world = generate_world(spec)
    encoder = make_encoder(cfg)
    # same encoding path as ingestion from files
    gps = encoder.encode_many([c.gps.lat for c in world.candidates], [c.gps.lon for c in world.candidates])
    for rec, g in zip(world.candidates, gps):
        rec.emb_gps = g
    store = CandidateStore(world.candidates, spec.dims, encoder)
    train_q, eval_q = split_queries(world.queries, cfg.eval.eval_fraction)
    adapters, _ = fit_adapters(cfg, store, train_q)
    triplets = build_dataset(cfg, store, adapters, train_q)
    return SyntheticRun(spec, cfg, store, adapters, train_q, eval_q, triplets)


def run_synthetic(run: SyntheticRun, cfg: RunConfig | None = None) -> dict[str, EvalReport]:
    """Train a scorer on ``run`` (optionally with a modified config) and evaluate it."""
    cfg = (cfg or run.cfg).validate()
    triplets = run.triplets
    if cfg.effective_k2 != run.cfg.effective_k2 or cfg.retrieval != run.cfg.retrieval:
        triplets = build_dataset(cfg, run.store, run.adapters, run.train_queries)
    assembler = make_assembler(cfg, run.store, run.adapters)
    state, _ = train_scorer(cfg, triplets, assembler)
    ranker = Ranker(cfg, run.store, run.adapters, state, assembler)
    return evaluate_ranker(ranker, run.eval_queries, stub_generated_for(cfg, run.eval_queries))
