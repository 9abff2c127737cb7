"""Query-candidate feature assembly and the bias-free value-head scorer."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .geodesy import GeoCoordinate
from .vector_store import AdapterPair, CandidateRecord, FormatError, GpsEncoder, encode_query

LAYOUT_SEGMENTS = ("query", "cand_gps", "cand_text", "cand_img", "negatives", "mask")
ACTIVATIONS = ("tanh", "relu")


class NegativeInfo(NamedTuple):
    gps: GeoCoordinate
    text: dict


@dataclass(frozen=True)
class FeatureLayout:
    query: int
    cand_gps: int
    cand_text: int
    cand_img: int
    negatives: int
    mask: int = 3

    @classmethod
    def for_dims(cls, gps: int, text: int, img: int, aligned_query: bool = True) -> "FeatureLayout":
        """Layout for a store; an aligned query occupies gps + text + img slots."""
        q = gps + text + img if aligned_query else img
        return cls(query=q, cand_gps=gps, cand_text=text, cand_img=img, negatives=gps)

    @property
    def aligned(self) -> bool:
        return self.query == self.cand_gps + self.cand_text + self.cand_img

    @property
    def sizes(self) -> dict[str, int]:
        return {k: getattr(self, k) for k in LAYOUT_SEGMENTS}

    @property
    def dim(self) -> int:
        return sum(self.sizes.values())

    @property
    def offsets(self) -> dict[str, slice]:
        out, start = {}, 0
        for k, n in self.sizes.items():
            out[k] = slice(start, start + n)
            start += n
        return out


@dataclass(frozen=True)
class Ablation:
    no_second_order: bool = False
    no_negatives: bool = False
    no_text: bool = False
    no_img: bool = False
    no_generated: bool = False

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class FeatureAssembler:
    """Builds the numeric scorer input for one query-candidate pair.

    Segments follow ``layout``: query embedding, candidate gps encoding,
    candidate text and image embeddings, mean gps encoding of the negatives, and
    a (gps, text, img) presence mask.  Absent modalities are zero-filled.  When
    ``adapters`` is set the query slot holds the adapter-aligned query vector
    (same segment order as the candidate slots), otherwise the raw image
    embedding.
    """

    encoder: GpsEncoder
    layout: FeatureLayout
    ablation: Ablation = field(default_factory=Ablation)
    adapters: AdapterPair | None = None

    def query_vector(self, query_emb) -> np.ndarray:
        if query_emb is None:
            raise ValueError("query embedding missing")
        q = np.asarray(query_emb, np.float32)
        if self.adapters is not None:
            q = encode_query(q, self.adapters)
        if q.shape != (self.layout.query,):
            raise ValueError(f"query vector dim {q.shape} != layout {self.layout.query}")
        return q

    def _gps(self, c) -> np.ndarray:
        if isinstance(c, GeoCoordinate):
            return self.encoder.encode(c)
        if c.emb_gps is not None:
            return c.emb_gps
        return self.encoder.encode(c.gps)

    def negatives_summary(self, negatives: Sequence[NegativeInfo]) -> np.ndarray:
        if self.ablation.no_negatives or not negatives:
            return np.zeros(self.layout.negatives, np.float32)
        lat = [n.gps.lat for n in negatives]
        lon = [n.gps.lon for n in negatives]
        enc = self.encoder.encode_many(lat, lon).astype(np.float64)
        return enc.mean(axis=0).astype(np.float32)

    def assemble(self, query_emb, candidate, negatives: Sequence[NegativeInfo] = (),
                 neg_summary: np.ndarray | None = None, query_vec: np.ndarray | None = None):
        lay = self.layout
        off = lay.offsets
        x = np.zeros(lay.dim, np.float32)
        x[off["query"]] = self.query_vector(query_emb) if query_vec is None else query_vec
        x[off["cand_gps"]] = self._gps(candidate)
        mask = [1.0, 0.0, 0.0]
        if isinstance(candidate, CandidateRecord):
            if candidate.emb_text is not None and not self.ablation.no_text:
                x[off["cand_text"]] = candidate.emb_text
                mask[1] = 1.0
            if candidate.emb_img is not None and not self.ablation.no_img:
                x[off["cand_img"]] = candidate.emb_img
                mask[2] = 1.0
        if neg_summary is None:
            neg_summary = self.negatives_summary(negatives)
        if not self.ablation.no_negatives:
            x[off["negatives"]] = neg_summary
        x[off["mask"]] = mask
        return x

    def assemble_many(self, query_emb, candidates: Sequence, negatives: Sequence[NegativeInfo] = ()):
        summary = self.negatives_summary(negatives)
        qv = self.query_vector(query_emb)
        return np.stack([self.assemble(None, c, neg_summary=summary, query_vec=qv)
                         for c in candidates])

    def assemble_triplet(self, t, candidate_index: int | None = None) -> np.ndarray:
        """Features for one ranking candidate, or all of them stacked when index is None."""
        if candidate_index is None:
            return self.assemble_many(t.query_emb, t.ranking, t.negatives)
        if not 0 <= candidate_index < len(t.ranking):
            raise IndexError(f"candidate index {candidate_index} out of range 0..{len(t.ranking) - 1}")
        return self.assemble(t.query_emb, t.ranking[candidate_index], t.negatives)


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0)


def _act_grad(name, h):
    return 1.0 - h * h if name == "tanh" else (h > 0).astype(h.dtype)


@dataclass(eq=False)
class ScorerState:
    """Feed-forward backbone plus a bias-free linear value head.

    ``params`` holds ``W{i}``/``b{i}`` per hidden layer and the head ``w``.  With
    ``interaction > 0`` the backbone output also carries ``(A x_q) * (B x_c)``,
    where ``x_q`` is the query slot and ``x_c`` the candidate (gps, text, img)
    slots: a rank-``interaction`` bilinear form between query and candidate.  With no hidden layers and no interaction the
    backbone is the identity map.
    """

    layout: FeatureLayout
    hidden: tuple[int, ...] = (256,)
    activation: str = "tanh"
    params: dict[str, np.ndarray] = field(default_factory=dict)
    interaction: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.interaction = int(self.interaction)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        expected = self.param_shapes()
        if not self.params:
            raise ValueError("use ScorerState.init to create fresh parameters")
        for k, shape in expected.items():
            if k not in self.params or self.params[k].shape != shape:
                raise ValueError(f"parameter {k} missing or not of shape {shape}")

    def param_shapes(self) -> dict[str, tuple]:
        shapes, fan_in = {}, self.layout.dim
        for i, h in enumerate(self.hidden):
            shapes[f"W{i}"] = (h, fan_in)
            shapes[f"b{i}"] = (h,)
            fan_in = h
        if self.interaction:
            shapes["A"] = (self.interaction, self.layout.query)
            shapes["B"] = (self.interaction, self._cand_width)
        shapes["w"] = (fan_in + self.interaction,)
        return shapes

    @classmethod
    def init(cls, layout: FeatureLayout, hidden=(256,), activation="tanh", seed=0,
             interaction=0, head_scale=1.0, aligned_init=False) -> "ScorerState":
        """Fresh parameters.

        ``aligned_init`` starts the interaction block as the elementwise product
        of the aligned query slot and the candidate (gps, text, img) slots, with
        a head of ``head_scale`` on it and a zero head elsewhere, so the initial
        score is exactly ``head_scale`` times their dot product.
        """
        rng = np.random.default_rng(seed)
        params, fan_in = {}, layout.dim
        for i, h in enumerate(hidden):
            params[f"W{i}"] = rng.normal(0, 1 / np.sqrt(fan_in), (h, fan_in)).astype(np.float32)
            params[f"b{i}"] = np.zeros(h, np.float32)
            fan_in = h
        if interaction:
            cw = layout.cand_gps + layout.cand_text + layout.cand_img
            for k, n in (("A", layout.query), ("B", cw)):
                params[k] = rng.normal(0, 1 / np.sqrt(n), (interaction, n)).astype(np.float32)
        width = fan_in + interaction
        params["w"] = rng.normal(0, head_scale / np.sqrt(width), width).astype(np.float32)
        if aligned_init:
            if not (layout.aligned and interaction == layout.query):
                raise ValueError("aligned init needs an aligned layout and interaction == query dim")
            params["A"] = np.eye(interaction, dtype=np.float32)
            params["B"] = np.eye(interaction, dtype=np.float32)
            params["w"][:] = 0.0
            params["w"][fan_in:] = head_scale
        return cls(layout, tuple(hidden), activation, params, interaction)

    @property
    def dim(self) -> int:
        return self.params["w"].shape[0]

    @property
    def _cand_width(self) -> int:
        return self.layout.cand_gps + self.layout.cand_text + self.layout.cand_img

    def _slots(self, x):
        off = self.layout.offsets
        return x[:, off["query"]], x[:, off["cand_gps"].start:off["cand_img"].stop]

    def copy(self) -> "ScorerState":
        return ScorerState(self.layout, self.hidden, self.activation,
                           {k: v.copy() for k, v in self.params.items()}, self.interaction)

    def backbone(self, x: np.ndarray, keep: bool = False):
        h = x
        acts = [h]
        for i in range(len(self.hidden)):
            h = _act(self.activation, h @ self.params[f"W{i}"].T + self.params[f"b{i}"])
            acts.append(h)
        if self.interaction:
            xq, xc = self._slots(x)
            ax, bx = xq @ self.params["A"].T, xc @ self.params["B"].T
            acts.append((ax, bx))
            h = np.concatenate([h, ax * bx], axis=1)
        return (h, acts) if keep else h

    def scores(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(features)
        if x.shape[1] != self.layout.dim:
            raise ValueError(f"feature dim {x.shape[1]} != layout dim {self.layout.dim}")
        with np.errstate(invalid="ignore", over="ignore"):
            s = self.backbone(x) @ self.params["w"]
        if not np.all(np.isfinite(s)):
            raise FloatingPointError("scorer produced non-finite output")
        return s

    def scores_and_backward(self, features: np.ndarray, grad_fn):
        """Forward a feature batch, get dL/ds from ``grad_fn(scores)``, backpropagate.

        ``grad_fn`` returns ``(dL/ds, extra)``; this returns ``(param_grads, extra)``.
        """
        x = np.atleast_2d(features)
        h, acts = self.backbone(x, keep=True)
        w = self.params["w"]
        s = h @ w
        if not np.all(np.isfinite(s)):
            raise FloatingPointError("scorer produced non-finite output")
        g_s, extra = grad_fn(s.astype(np.float64))
        g_s = np.asarray(g_s, dtype=h.dtype)
        grads = {"w": h.T @ g_s}
        g_h = np.outer(g_s, w)
        if self.interaction:
            ax, bx = acts.pop()
            g_p = g_h[:, -self.interaction:]
            g_h = g_h[:, :-self.interaction]
            xq, xc = self._slots(x)
            grads["A"] = (g_p * bx).T @ xq
            grads["B"] = (g_p * ax).T @ xc
        for i in range(len(self.hidden) - 1, -1, -1):
            g_z = g_h * _act_grad(self.activation, acts[i + 1])
            grads[f"W{i}"] = g_z.T @ acts[i]
            grads[f"b{i}"] = g_z.sum(axis=0)
            if i:
                g_h = g_z @ self.params[f"W{i}"]
        return grads, extra


def score(state: ScorerState, features) -> float:
    return float(state.scores(np.asarray(features, dtype=np.float32))[0])


# --------------------------------------------------------------------------
# checkpoint format: "GRSC", u32 version, u32 descriptor length, descriptor
# JSON, u32 block count, then per block: u32 name length, name, u32 ndim,
# u32 shape[ndim], little-endian float32 data.

CKPT_MAGIC = b"GRSC"
CKPT_VERSION = 1


def save_checkpoint(state: ScorerState, path, extra: dict | None = None) -> None:
    desc = {"layout": state.layout.sizes, "hidden": list(state.hidden),
            "activation": state.activation, "interaction": state.interaction,
            "extra": extra or {}}
    dbytes = json.dumps(desc, sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(dbytes)), dbytes,
           struct.pack("<I", len(state.params))]
    for name in sorted(state.params):
        arr = np.ascontiguousarray(state.params[name], dtype="<f4")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> tuple[ScorerState, dict]:
    path = Path(path)
    data = path.read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a scorer checkpoint")
    version, dlen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    desc = json.loads(take(dlen))
    (nblocks,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(nblocks):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after parameter blocks")
    layout = FeatureLayout(**desc["layout"])
    state = ScorerState(layout, tuple(desc["hidden"]), desc["activation"], params,
                        desc.get("interaction", 0))
    return state, desc.get("extra", {})
