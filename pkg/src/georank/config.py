"""Run configuration: every knob of a pipeline run, serialized into each report."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .geodesy import DEFAULT_THRESHOLDS_KM
from .losses import LossConfig
from .scorer import Ablation

SCHEMA = "georank.config/1"
CONFIG_NAME = "georank.json"
CONFIG_ENV = "GEORANK_CONFIG"


@dataclass
class Paths:
    world: str = "world"
    store: str = "store"
    dataset: str = "dataset.jsonl"
    checkpoint: str = "scorer.grsc"
    loss_curve: str = "loss_curve.csv"
    reports: str = "reports"
    generated: str = "world/generated.jsonl"


@dataclass
class RetrievalCfg:
    N: int = 20
    k1: int = 7
    k2: int = 5


@dataclass
class LossCfg:
    lam: float = 0.7
    K1: int = 1


@dataclass
class TrainingCfg:
    lr: float = 1e-4
    batch: int = 4
    epochs: int = 1
    seed: int = 0
    weight_decay: float = 0.01
    hidden: list = field(default_factory=lambda: [256])
    activation: str = "tanh"
    # int width, or "aligned": query slot times candidate slots, started at a dot product
    interaction: int | str = "aligned"
    head_scale: float = 10.0
    gps_only_rate: float = 0.3
    frozen: list = field(default_factory=lambda: ["A", "B"])


@dataclass
class AdapterCfg:
    steps: int = 300
    lr: float = 1e-2
    batch: int = 128
    temperature: float = 0.07
    seed: int = 0


@dataclass
class EncoderCfg:
    frequencies: list = field(default_factory=lambda: [float(2 ** k) for k in range(10)])
    out_dim: int = 40
    seed: int = 0


@dataclass
class InferenceCfg:
    profile: str = "im2gps3k"
    n_retrieved: int = 12
    n_generated: int = 3
    generator_noise_km: float = 100.0
    generator_growth: float = 1.0
    generator_seed: int = 0
    random_seed: int = 0
    workers: int = 1


@dataclass
class EvalCfg:
    thresholds_km: list = field(default_factory=lambda: list(DEFAULT_THRESHOLDS_KM))
    threshold_scale: float = 1.0
    eval_fraction: float = 0.2


SECTIONS = {
    "paths": Paths, "retrieval": RetrievalCfg, "loss": LossCfg, "training": TrainingCfg,
    "adapters": AdapterCfg, "encoder": EncoderCfg, "inference": InferenceCfg, "eval": EvalCfg,
    "ablation": Ablation,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    retrieval: RetrievalCfg = field(default_factory=RetrievalCfg)
    loss: LossCfg = field(default_factory=LossCfg)
    training: TrainingCfg = field(default_factory=TrainingCfg)
    adapters: AdapterCfg = field(default_factory=AdapterCfg)
    encoder: EncoderCfg = field(default_factory=EncoderCfg)
    inference: InferenceCfg = field(default_factory=InferenceCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    ablation: Ablation = field(default_factory=Ablation)

    def validate(self) -> "RunConfig":
        r = self.retrieval
        if r.k1 < 1 or r.k2 < 0 or r.N < r.k1 + r.k2:
            raise ConfigError(f"retrieval needs k1 >= 1, k2 >= 0, N >= k1 + k2 (got {r})")
        try:
            LossConfig(k1=r.k1, lam=self.effective_lambda, top_k1=self.loss.K1)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if not 0.0 <= self.loss.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.loss.lam}")
        t = self.training
        if t.lr < 0 or t.batch < 1 or t.epochs < 1:
            raise ConfigError(f"invalid training options {t}")
        if t.interaction != "aligned" and not (isinstance(t.interaction, int) and t.interaction >= 0):
            raise ConfigError(f"training.interaction must be 'aligned' or a width >= 0, got {t.interaction!r}")
        if not 0.0 <= t.gps_only_rate <= 1.0:
            raise ConfigError("training.gps_only_rate must lie in [0, 1]")
        inf = self.inference
        if inf.n_retrieved < 0 or inf.n_generated < 0:
            raise ConfigError("pool sizes must be non-negative")
        if not 0.0 < self.eval.eval_fraction < 1.0:
            raise ConfigError("eval_fraction must lie in (0, 1)")
        return self

    @property
    def effective_lambda(self) -> float:
        return 1.0 if self.ablation.no_second_order else self.loss.lam

    @property
    def effective_k2(self) -> int:
        return 0 if self.ablation.no_negatives else self.retrieval.k2

    def loss_config(self) -> LossConfig:
        return LossConfig(k1=self.retrieval.k1, lam=self.effective_lambda, top_k1=self.loss.K1)

    def to_dict(self) -> dict:
        d = {"schema": SCHEMA}
        for name in SECTIONS:
            d[name] = dataclasses.asdict(getattr(self, name))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kwargs = {}
        for name, typ in SECTIONS.items():
            sec = d.get(name, {})
            known = {f.name for f in dataclasses.fields(typ)}
            unknown = set(sec) - known
            if unknown:
                raise ConfigError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
            kwargs[name] = typ(**sec)
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON ({e.msg})") from None
        return cls.from_dict(d)

    def with_profile(self, profile: str) -> "RunConfig":
        from .inference import POOL_PROFILES
        if profile not in POOL_PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(POOL_PROFILES)}")
        nr, ng = POOL_PROFILES[profile]
        return dataclasses.replace(self, inference=dataclasses.replace(
            self.inference, profile=profile, n_retrieved=nr, n_generated=ng))


def ablate(cfg: RunConfig, **flags) -> RunConfig:
    """Copy of ``cfg`` with ablation switches set.

    no_second_order forces lambda = 1, no_negatives sets k2 = 0, no_text/no_img
    blank those candidate segments everywhere, no_generated empties C_g.
    """
    return dataclasses.replace(cfg, ablation=dataclasses.replace(cfg.ablation, **flags))


def find_config(workdir) -> RunConfig:
    p = Path(workdir) / CONFIG_NAME
    if p.exists():
        return RunConfig.load(p)
    env = os.environ.get(CONFIG_ENV)
    if env:
        return RunConfig.load(env)
    return RunConfig()
