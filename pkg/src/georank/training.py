"""Mini-batch training of the scorer on the multi-order distance objective."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .losses import DistanceLabels, LossConfig, loss_total
from .optim import AdamW
from .scorer import FeatureAssembler, ScorerState

log = logging.getLogger(__name__)


@dataclass
class TrainOptions:
    lr: float = 1e-4
    batch: int = 4
    epochs: int = 1
    weight_decay: float = 0.01
    seed: int = 0
    # probability that a ranking candidate is shown GPS-only, as generated
    # candidates are at inference
    gps_only_rate: float = 0.0
    frozen: tuple[str, ...] = ()


@dataclass
class LossCurve:
    step: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    loss1: list[float] = field(default_factory=list)
    loss2: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.step)

    def append(self, loss, l1, l2):
        self.step.append(len(self.step))
        self.loss.append(loss)
        self.loss1.append(l1)
        self.loss2.append(l2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "loss1", "loss2"])
            for row in zip(self.step, self.loss, self.loss1, self.loss2):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


def prepare(dataset: Sequence, assembler: FeatureAssembler):
    """Stack per-triplet features into (n, k1, F) and precompute distance labels."""
    if not dataset:
        raise ValueError("training dataset is empty")
    k1 = dataset[0].k1
    if any(t.k1 != k1 for t in dataset):
        raise ValueError("all triplets must share the same k1")
    feats = np.stack([assembler.assemble_triplet(t) for t in dataset])
    labels = [DistanceLabels.from_distances(t.distances_km) for t in dataset]
    return feats, labels


def train(dataset: Sequence, state: ScorerState, cfg: LossConfig, assembler: FeatureAssembler,
          opt: TrainOptions = TrainOptions(), prepared=None):
    """Returns ``(trained_state, curve)``; the input state is left untouched."""
    feats, labels = prepared if prepared is not None else prepare(dataset, assembler)
    n, k1, _ = feats.shape
    if cfg.k1 != k1:
        raise ValueError(f"loss config k1={cfg.k1} but dataset k1={k1}")
    state = state.copy()
    optim = AdamW(state.params, lr=opt.lr, weight_decay=opt.weight_decay,
                  decay_exclude=opt.frozen)
    rng = np.random.default_rng(opt.seed)
    curve = LossCurve()
    n_batches = math.ceil(n / opt.batch)
    off = assembler.layout.offsets
    blank = np.zeros(assembler.layout.dim, bool)
    blank[off["cand_text"]] = blank[off["cand_img"]] = True
    mask_sl = off["mask"]
    for epoch in range(opt.epochs):
        order = rng.permutation(n)
        for b in range(n_batches):
            idx = order[b * opt.batch:(b + 1) * opt.batch]
            x = feats[idx].reshape(-1, feats.shape[2])
            if opt.gps_only_rate > 0:
                drop = rng.random(x.shape[0]) < opt.gps_only_rate
                if drop.any():
                    x = x.copy()
                    x[np.ix_(drop, blank)] = 0.0
                    x[drop, mask_sl] = (1.0, 0.0, 0.0)
            bsz = len(idx)
            stats = np.zeros(3)

            def grad_fn(s):
                g = np.empty_like(s)
                for r, i in enumerate(idx):
                    sl = slice(r * k1, (r + 1) * k1)
                    loss, gi, l1, l2 = loss_total(s[sl], labels[i], cfg)
                    g[sl] = gi / bsz
                    stats[:] += (loss, l1, l2)
                return g, None

            try:
                grads, _ = state.scores_and_backward(x, grad_fn)
            except (FloatingPointError, ValueError) as e:
                raise TrainingDiverged(len(curve)) from e
            stats /= bsz
            if not np.all(np.isfinite(stats)):
                raise TrainingDiverged(len(curve))
            curve.append(*map(float, stats))
            for name in opt.frozen:
                grads[name] = np.zeros_like(grads[name])
            optim.step(grads)
        log.info("epoch %d: mean loss %.4f", epoch, np.mean(curve.loss[-n_batches:]))
    return state, curve
