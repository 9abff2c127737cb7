import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from georank.geodesy import GeoCoordinate
from georank.vector_store import CandidateRecord, CandidateStore, GpsEncoder

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_store(rng, m=200, dims=(8, 6, 10), encoder=None):
    """Store of random records; gps segments are random vectors when no encoder is given."""
    g, t, i = dims
    recs = []
    for k in range(m):
        lat, lon = rng.uniform(-80, 80), rng.uniform(-180, 180)
        recs.append(CandidateRecord(
            id=f"r{k:05d}", gps=GeoCoordinate(lat, lon),
            text={"city": f"city{k % 7}", "country": f"country{k % 3}"},
            emb_text=rng.standard_normal(t).astype(np.float32),
            emb_img=rng.standard_normal(i).astype(np.float32),
            emb_gps=(encoder.encode(GeoCoordinate(lat, lon)) if encoder is not None
                     else rng.standard_normal(g).astype(np.float32))))
    return CandidateStore(recs, {"gps": g, "text": t, "img": i}, encoder)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_encoder():
    return GpsEncoder(frequencies=(1.0, 2.0, 4.0, 8.0), out_dim=8, seed=3)


SMALL_WORLD = ["--n-candidates", "1500", "--n-queries", "300", "--n-clusters", "10"]


@pytest.fixture(scope="session")
def trained_workdir(tmp_path_factory):
    """A work directory taken through synth, ingest, build-dataset and train."""
    from georank.cli import main

    wd = tmp_path_factory.mktemp("run")
    for argv in (["synth", "--seed", "7", "--out", str(wd / "w")] + SMALL_WORLD,
                 ["ingest", str(wd / "w")], ["build-dataset"], ["train"]):
        assert main(["--workdir", str(wd)] + argv) == 0, argv
    return wd


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
