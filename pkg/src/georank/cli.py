"""georank command line: synth | ingest | build-dataset | train | rank | eval | report | serve.

Exit status: 0 on success, 1 on validation errors (bad flags, bad values,
missing prerequisites), 2 on IO or file-format errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import CONFIG_NAME, ConfigError, RunConfig, find_config
from .dataset import load_dataset, write_dataset, write_generation_requests
from .inference import format_table, load_generated, reports_to_json, write_generated
from .scorer import load_checkpoint, save_checkpoint
from .vector_store import FormatError, load_queries

log = logging.getLogger("georank")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    """Invalid invocation; reported with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# helpers


def _workdir(args) -> Path:
    return Path(args.workdir)


def _path(args, rel) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else _workdir(args) / p


def _config(args) -> RunConfig:
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config file not found: {args.config}")
        cfg = RunConfig.load(args.config)
    else:
        cfg = find_config(_workdir(args))
    return cfg.validate()


def _override(cfg: RunConfig, section: str, **values) -> RunConfig:
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    out = dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})
    return out.validate()


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _queries_path(args, cfg: RunConfig, manifest: dict | None = None) -> Path:
    if getattr(args, "queries", None):
        return _require(Path(args.queries), "queries file")
    if manifest and manifest.get("queries"):
        return _require(Path(manifest["queries"]), "queries file")
    return _require(_path(args, cfg.paths.world) / "queries.jsonl", "queries file")


def _load_store(args, cfg):
    from .pipeline import load_store
    mpath = _path(args, cfg.paths.store) / "store.json"
    _require(mpath, "store manifest (run ingest first)")
    return load_store(_path(args, cfg.paths.store))


def _ranker(args, cfg):
    from .pipeline import Ranker, make_assembler
    ckpt = _require(_path(args, cfg.paths.checkpoint), "scorer checkpoint (run train first)")
    store, adapters, manifest = _load_store(args, cfg)
    state, extra = load_checkpoint(ckpt)
    trained = extra.get("config")
    if trained:
        # loss and training settings come from the run that produced the checkpoint
        t = RunConfig.from_dict(trained)
        cfg = dataclasses.replace(cfg, loss=t.loss, training=t.training).validate()
    asm = make_assembler(cfg, store, adapters)
    if state.layout != asm.layout:
        raise UsageError(f"checkpoint {ckpt} layout {state.layout.sizes} does not match the store")
    return Ranker(cfg, store, adapters, state, asm), manifest


def _generated(args, cfg) -> dict:
    if getattr(args, "generated", None):
        return load_generated(_require(Path(args.generated), "generated-candidates file"))
    p = _path(args, cfg.paths.generated)
    return load_generated(p) if p.exists() else {}


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .pipeline import split_queries, stub_generated_for, synthetic_config
    from .synth import WorldSpec, export_world, generate_world

    spec = WorldSpec(seed=args.seed, **{k: v for k, v in (
        ("n_candidates", args.n_candidates), ("n_queries", args.n_queries),
        ("n_clusters", args.n_clusters)) if v is not None})
    world = generate_world(spec)
    out = Path(args.out)
    paths = export_world(world, out)
    cfg = synthetic_config(spec)
    wd = _workdir(args).resolve()

    def rel(p: Path) -> str:
        p = p.resolve()
        return str(p.relative_to(wd)) if p.is_relative_to(wd) else str(p)

    cfg = dataclasses.replace(cfg, paths=dataclasses.replace(
        cfg.paths, world=rel(out), generated=rel(out / "generated.jsonl")))
    _, ev = split_queries(world.queries, cfg.eval.eval_fraction)
    write_generated(out / "generated.jsonl", stub_generated_for(cfg, ev))
    wd.mkdir(parents=True, exist_ok=True)
    cfg.save(wd / CONFIG_NAME)
    print(f"world: {len(world.candidates)} candidates, {len(world.queries)} queries -> {out}")
    for k, p in paths.items():
        print(f"  {k}: {p}")
    print(f"config: {wd / CONFIG_NAME}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .pipeline import fit_adapters, make_encoder, save_store, split_queries
    from .vector_store import load_candidates

    cfg = _config(args)
    world = Path(args.world) if args.world else _path(args, cfg.paths.world)
    cpath = _require(world / "candidates.jsonl", "candidates file")
    store = load_candidates(cpath, make_encoder(cfg))
    if store.encoder.out_dim != store.dims["gps"]:
        raise UsageError(f"gps sidecar dim {store.dims['gps']} != encoder dim {store.encoder.out_dim}")
    qpath = world / "queries.jsonl"
    train_q = []
    if qpath.exists():
        train_q, _ = split_queries(load_queries(qpath), cfg.eval.eval_fraction)
    adapters, losses = fit_adapters(cfg, store, train_q)
    save_store(_path(args, cfg.paths.store), cpath, store.encoder, adapters,
               qpath if qpath.exists() else None)
    msg = f"ingested {len(store)} candidates into {_path(args, cfg.paths.store)}"
    if losses:
        msg += f"; adapters trained on {len(train_q)} queries, InfoNCE {losses[0]:.4f} -> {losses[-1]:.4f}"
    print(msg)
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    from .pipeline import build_dataset, split_queries

    cfg = _config(args)
    store, adapters, manifest = _load_store(args, cfg)
    queries = load_queries(_queries_path(args, cfg, manifest))
    train_q, eval_q = split_queries(queries, cfg.eval.eval_fraction)
    labelled = [q for q in train_q if q.gps is not None]
    if not labelled:
        raise UsageError("no training queries with ground truth")
    triplets = build_dataset(cfg, store, adapters, labelled)
    out = _path(args, cfg.paths.dataset)
    write_dataset(triplets, out)
    print(f"wrote {len(triplets)} triplets to {out}")
    if args.export_generation_prompts:
        write_generation_requests([q.id for q in eval_q], args.export_generation_prompts)
        print(f"wrote {len(eval_q)} generation requests to {args.export_generation_prompts}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import make_assembler, train_scorer

    cfg = _override(_config(args), "loss", lam=args.lam)
    cfg = _override(cfg, "training", lr=args.lr, epochs=args.epochs, seed=args.seed)
    dpath = _require(_path(args, cfg.paths.dataset), "dataset (run build-dataset first)")
    store, adapters, manifest = _load_store(args, cfg)
    queries = load_queries(_queries_path(args, cfg, manifest))
    triplets = load_dataset(dpath, store, {q.id: q.emb for q in queries})
    if not triplets:
        raise UsageError(f"dataset {dpath} is empty")
    asm = make_assembler(cfg, store, adapters)
    state, curve = train_scorer(cfg, triplets, asm)
    ckpt = _path(args, cfg.paths.checkpoint)
    save_checkpoint(state, ckpt, {"config": cfg.to_dict(), "steps": len(curve.loss)})
    curve.write_csv(_path(args, cfg.paths.loss_curve))
    print(f"trained {len(curve.loss)} steps, loss {curve.loss[0]:.4f} -> {curve.loss[-1]:.4f}; "
          f"checkpoint {ckpt}")
    return EXIT_OK


def _eval_queries(args, cfg, manifest):
    from .pipeline import split_queries
    queries = load_queries(_queries_path(args, cfg, manifest))
    if getattr(args, "queries", None):
        return queries
    return split_queries(queries, cfg.eval.eval_fraction)[1]


def cmd_rank(args) -> int:
    cfg = _config(args)
    if args.profile:
        cfg = cfg.with_profile(args.profile).validate()
    ranker, manifest = _ranker(args, cfg)
    queries = _eval_queries(args, cfg, manifest)
    generated = _generated(args, cfg)
    out = Path(args.out) if args.out else _path(args, cfg.paths.reports) / "predictions.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    ng = cfg.inference.n_generated
    with open(out, "w", encoding="utf-8") as fh:
        for q in queries:
            pred = ranker.rank(q.emb, generated.get(q.id, [])[:ng])
            fh.write(json.dumps({"query_id": q.id, **pred.to_dict()}) + "\n")
    print(f"wrote {len(queries)} predictions to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import evaluate_ranker, stub_generated_for, thresholds

    cfg = _config(args)
    if args.profile:
        cfg = cfg.with_profile(args.profile).validate()
    ranker, manifest = _ranker(args, cfg)
    queries = _eval_queries(args, cfg, manifest)
    if any(q.gps is None for q in queries):
        raise UsageError("evaluation queries need ground truth coordinates")
    generated = _generated(args, cfg)
    if not generated and args.stub_generated:
        generated = stub_generated_for(cfg, queries)
    reports = list(evaluate_ranker(ranker, queries, generated).values())
    out = Path(args.out) if args.out else _path(args, cfg.paths.reports) / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    t = thresholds(ranker.cfg)
    out.write_text(json.dumps(reports_to_json(reports, t, ranker.cfg.to_dict()), indent=1) + "\n")
    print(format_table(reports, t), end="")
    print(f"report: {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .geodesy import ThresholdSet
    from .inference import EvalReport
    cfg = _config(args)
    path = Path(args.report) if args.report else _path(args, cfg.paths.reports) / "eval.json"
    _require(path, "report")
    try:
        doc = json.loads(path.read_text())
        t = ThresholdSet(tuple(doc["thresholds_km"]))
        reports = [EvalReport.from_dict(r) for r in doc["reports"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: not an evaluation report ({e})") from None
    print(format_table(reports, t), end="")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app

    cfg = _config(args)
    ranker, manifest = _ranker(args, cfg)
    app = create_app(ranker, {"checkpoint": str(_path(args, cfg.paths.checkpoint)),
                              "store": str(_path(args, cfg.paths.store))})
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="georank", description="Distance-aware reranking for retrieval-based geolocalization.")
    p.add_argument("--workdir", default=".", help="directory holding georank.json and run artifacts")
    p.add_argument("--config", help="explicit config file (default: WORKDIR/georank.json, then $GEORANK_CONFIG)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic world and a matching config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--n-candidates", type=int)
    s.add_argument("--n-queries", type=int)
    s.add_argument("--n-clusters", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="load candidates, fit adapters, write the store")
    s.add_argument("world", nargs="?", help="directory with candidates.jsonl (and queries.jsonl)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("build-dataset", help="retrieve for training queries and write triplets")
    s.add_argument("--queries")
    s.add_argument("--export-generation-prompts", metavar="PATH",
                   help="also write candidate-generation prompts for the evaluation queries")
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("train", help="train the scorer on the triplet dataset")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--queries")
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("rank", cmd_rank, "write predictions for queries"),
                              ("eval", cmd_eval, "evaluate GeoRanker, baselines and the oracle")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--queries", help="queries file (default: evaluation split)")
        s.add_argument("--generated", help="generated-candidates JSON-lines file")
        s.add_argument("--profile", help="pool-size profile (im2gps3k, yfcc4k)")
        s.add_argument("--out")
        if name == "eval":
            s.add_argument("--stub-generated", action="store_true",
                           help="perturb ground truth when no generated-candidates file exists")
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="print an evaluation report as a table")
    s.add_argument("report", nargs="?")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("serve", help="serve POST /rank and GET /health")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (FormatError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
