"""Synthetic span-extraction data, distribution shifts and test streams.

Every instance is a sequence of L token embeddings. Background tokens are drawn
around one mean and answer tokens around another; the first and last answer
token additionally carry a boundary marker so the start and end heads have
something to tell apart. All randomness is a pure function of
``(seed, stream id, index)``.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .model import Instance

DUMP_MAGIC = b"OILDATA1\n"


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key])))


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).copy()


@dataclass
class SourceSpec:
    d: int
    L: int
    mu_bg: np.ndarray
    mu_ans: np.ndarray
    sigma: float
    span_min: int = 1
    span_max: int = 3
    start_marker: Optional[np.ndarray] = None
    end_marker: Optional[np.ndarray] = None
    h_model: int = 32
    seed: int = 0

    def __post_init__(self):
        self.mu_bg, self.mu_ans = _vec(self.mu_bg), _vec(self.mu_ans)
        zero = np.zeros(self.d)
        self.start_marker = zero if self.start_marker is None else _vec(self.start_marker)
        self.end_marker = zero if self.end_marker is None else _vec(self.end_marker)
        for name in ("mu_bg", "mu_ans", "start_marker", "end_marker"):
            if getattr(self, name).shape != (self.d,):
                raise ValueError(f"{name} must have shape ({self.d},)")
        if not 1 <= self.span_min <= self.span_max <= self.L:
            raise ValueError(f"need 1 <= span_min <= span_max <= L, got {self.span_min}, {self.span_max}, {self.L}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = [float(x) for x in v]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SourceSpec":
        return cls(**d)

    def spec_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def default_source_spec(d: int = 16, L: int = 16, h_model: int = 32, seed: int = 0,
                        separation: float = 2.0, marker: float = 1.5, sigma: float = 0.5,
                        span_min: int = 1, span_max: int = 3) -> SourceSpec:
    """Random unit directions for the class means and boundary markers, fixed by ``seed``."""
    rng = _rng(seed, 0x5EC)

    def unit():
        v = rng.normal(size=d)
        return v / np.linalg.norm(v)

    mu_bg = np.zeros(d)
    return SourceSpec(
        d=d, L=L, mu_bg=mu_bg, mu_ans=separation * unit(), sigma=sigma,
        span_min=span_min, span_max=span_max,
        start_marker=marker * unit(), end_marker=marker * unit(),
        h_model=h_model, seed=seed,
    )


def sample_instance(spec: SourceSpec, rng: np.random.Generator) -> Instance:
    length = int(rng.integers(spec.span_min, spec.span_max + 1))
    start = int(rng.integers(0, spec.L - length + 1))
    end = start + length - 1
    noise = rng.normal(size=(spec.L, spec.d)) * spec.sigma
    tokens = noise + spec.mu_bg
    tokens[start:end + 1] = noise[start:end + 1] + spec.mu_ans
    tokens[start] += spec.start_marker
    tokens[end] += spec.end_marker
    return Instance(tokens, (start, end))


def gen_source(spec: SourceSpec, n: int, seed: Optional[int] = None, stream_id: int = 0,
               offset: int = 0) -> list[Instance]:
    seed = spec.seed if seed is None else seed
    return [sample_instance(spec, _rng(seed, stream_id, offset + i)) for i in range(n)]


# -- shifts -----------------------------------------------------------------

@dataclass
class ShiftSpec:
    """One of three shift families.

    corruption: a fixed offset of norm ``bias`` (direction drawn from ``bias_seed``)
                plus i.i.d. Gaussian token noise (``eta``), then whole-token
                dropout (``rho``).
    rotation:   a fixed orthogonal map applied to every token; ``angle`` scales
                how far it is from the identity (pi/2 per plane at most).
    domain:     instances are redrawn from ``target`` (new means, span law, ...).
    """

    kind: str = "corruption"
    eta: float = 0.0
    rho: float = 0.0
    bias: float = 0.0
    bias_seed: int = 0
    rotation_seed: int = 0
    angle: float = 0.5
    target: Optional[SourceSpec] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("corruption", "rotation", "domain"):
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.eta < 0 or self.bias < 0:
            raise ValueError("eta and bias must be non-negative")
        if self.kind == "domain" and self.target is None:
            raise ValueError("a domain shift needs a target SourceSpec")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "target"}
        d["target"] = None if self.target is None else self.target.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        d = dict(d)
        if d.get("target") is not None and not isinstance(d["target"], SourceSpec):
            d["target"] = SourceSpec.from_dict(d["target"])
        return cls(**d)

    def label(self) -> str:
        return self.name or self.kind


def rotation_matrix(d: int, seed: int, angle: float) -> np.ndarray:
    """Product of Givens rotations by ``angle`` over a random pairing of coordinates."""
    rng = _rng(seed, 0x0707)
    perm = rng.permutation(d)
    Q = np.eye(d)
    c, s = np.cos(angle), np.sin(angle)
    for i, j in zip(perm[0::2], perm[1::2]):
        G = np.eye(d)
        G[i, i] = G[j, j] = c
        G[i, j], G[j, i] = -s, s
        Q = G @ Q
    if d % 2:
        # odd leftover coordinate: rotate it together with the first pair
        i, j = perm[-1], perm[0]
        G = np.eye(d)
        G[i, i] = G[j, j] = c
        G[i, j], G[j, i] = -s, s
        Q = G @ Q
    return Q


@lru_cache(maxsize=64)
def _bias_direction(d: int, seed: int) -> np.ndarray:
    v = _rng(seed, 0xB1A5).normal(size=d)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


def bias_vector(d: int, seed: int, norm: float) -> np.ndarray:
    return norm * _bias_direction(d, seed)


@lru_cache(maxsize=64)
def _rotation_cached(d: int, seed: int, angle: float) -> np.ndarray:
    Q = rotation_matrix(d, seed, angle)
    Q.setflags(write=False)
    return Q


def apply_shift(inst: Instance, shift: ShiftSpec, rng: np.random.Generator) -> Instance:
    d = inst.tokens.shape[1]
    if shift.kind == "corruption":
        tokens = inst.tokens
        if shift.bias > 0:
            tokens = tokens + bias_vector(d, shift.bias_seed, shift.bias)
        if shift.eta > 0:
            tokens = tokens + shift.eta * rng.normal(size=tokens.shape)
        if shift.rho > 0:
            keep = rng.random(tokens.shape[0]) >= shift.rho
            tokens = tokens * keep[:, None]
        return Instance(tokens.copy(), inst.gold_span)
    if shift.kind == "rotation":
        Q = _rotation_cached(d, shift.rotation_seed, shift.angle)
        return Instance(inst.tokens @ Q.T, inst.gold_span)
    if shift.target.d != d:
        raise ValueError(f"domain target has d={shift.target.d}, instance has d={d}")
    return sample_instance(shift.target, rng)


# -- streams ----------------------------------------------------------------

@dataclass
class StreamBatch:
    t: int
    segment: int
    instances: list

    def unlabeled(self) -> list[Instance]:
        """Label-stripped view handed to the adaptation engine."""
        return [inst.without_label() for inst in self.instances]

    @property
    def gold(self) -> list[tuple[int, int]]:
        return [inst.gold_span for inst in self.instances]


@dataclass
class Schedule:
    source: SourceSpec
    segments: list = field(default_factory=list)  # [(ShiftSpec, n_steps)]

    def __post_init__(self):
        if not self.segments:
            raise ValueError("a schedule needs at least one segment")
        for _, n in self.segments:
            if n < 1:
                raise ValueError("every segment needs at least one step")

    @property
    def total_steps(self) -> int:
        return sum(n for _, n in self.segments)

    def boundaries(self) -> list[int]:
        """First step index (1-based) of every segment."""
        out, t = [], 1
        for _, n in self.segments:
            out.append(t)
            t += n
        return out

    def to_dict(self) -> dict:
        return {"source": self.source.to_dict(),
                "segments": [{"shift": s.to_dict(), "steps": n} for s, n in self.segments]}


def stream(schedule: Schedule, batch_size: int, seed: int) -> Iterator[StreamBatch]:
    t = 0
    for seg, (shift, n_steps) in enumerate(schedule.segments):
        for k in range(n_steps):
            t += 1
            batch = []
            for i in range(batch_size):
                rng = _rng(seed, 0x57AE, seg, k, i)
                inst = sample_instance(schedule.source, rng)
                batch.append(apply_shift(inst, shift, rng))
            yield StreamBatch(t, seg, batch)


# -- dataset dump -----------------------------------------------------------

def dump_dataset(path, instances: list[Instance], spec: SourceSpec, seed: int,
                 shift: Optional[ShiftSpec] = None, config: Optional[dict] = None) -> None:
    """Self-describing binary: magic line, JSON header line, then fixed-size records."""
    L, d = instances[0].tokens.shape if instances else (spec.L, spec.d)
    header = {
        "d": d, "L": L, "n": len(instances), "seed": seed,
        "spec_hash": spec.spec_hash(), "spec": spec.to_dict(),
        "shift": None if shift is None else shift.to_dict(),
        "config": config,
    }
    buf = io.BytesIO()
    buf.write(DUMP_MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for inst in instances:
        s, e = inst.gold_span if inst.gold_span is not None else (-1, -1)
        buf.write(struct.pack("<ii", s, e))
        buf.write(inst.tokens.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> tuple[dict, list[Instance]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(DUMP_MAGIC):
        raise ValueError(f"{path} is not a dataset dump")
    nl = raw.index(b"\n", len(DUMP_MAGIC))
    header = json.loads(raw[len(DUMP_MAGIC):nl])
    L, d = header["L"], header["d"]
    rec = 8 + 8 * L * d
    off = nl + 1
    out = []
    for _ in range(header["n"]):
        s, e = struct.unpack_from("<ii", raw, off)
        tokens = np.frombuffer(raw, dtype="<f8", count=L * d, offset=off + 8).reshape(L, d).astype(np.float64)
        out.append(Instance(tokens, None if s < 0 else (s, e)))
        off += rec
    return header, out
