"""Minimal differentiable sequence encoder with hand-written gradients.

Three encoders share token and position embedding tables but own disjoint
block weights: "P" (passage side of the retriever), "E" (entity side), and
"H" (joint reader).  Each encoder is token embedding + position embedding,
one single-head scaled dot-product self-attention block with a residual
connection, and one position-wise two-layer tanh feed-forward with a residual
connection.  No dropout, no layer normalization: the forward pass is a
deterministic smooth function of the parameters, so its exact reverse-mode
derivative can be verified coordinate by coordinate against central finite
differences.

All arithmetic is float64.  Checkpoints store float32 per the on-disk format.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

ROLES = ("P", "E", "H")
READOUT_NAMES = ("w_start", "w_end", "w_rerank")

CHECKPOINT_MAGIC = b"ENTQALT1"


class NonFiniteError(FloatingPointError):
    """A loss or gradient produced a NaN or infinity; message names the term."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible with the runtime config."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    max_len: int = 192
    vocab_size: int = 0
    seed: int = 0
    ff: int = 0  # feed-forward hidden width; 0 means 2*d
    n_blocks: int = 1  # attention blocks per encoder; token matching needs 2

    def __post_init__(self):
        if self.ff == 0:
            object.__setattr__(self, "ff", 2 * self.d)
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "max_len": self.max_len,
            "vocab_size": self.vocab_size,
            "seed": self.seed,
            "ff": self.ff,
            "n_blocks": self.n_blocks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def block_param_names(role: str, block: int) -> list[str]:
    return [
        f"{role}.{block}.{p}"
        for p in ("wq", "wk", "wv", "wo", "mg", "w1", "b1", "w2", "b2")
    ]


def _array_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, cfg.d),
        "pos_emb": (cfg.max_len, cfg.d),
    }
    per_block = {
        "wq": (cfg.d, cfg.d),
        "wk": (cfg.d, cfg.d),
        "wv": (cfg.d, cfg.d),
        "wo": (cfg.d, cfg.d),
        "mg": (1,),  # exact-token-match attention bias
        "w1": (cfg.ff, cfg.d),
        "b1": (cfg.ff,),
        "w2": (cfg.d, cfg.ff),
        "b2": (cfg.d,),
    }
    for r in ROLES:
        shapes[f"{r}.match_emb"] = (cfg.d,)
        for b in range(cfg.n_blocks):
            for p, shape in per_block.items():
                shapes[f"{r}.{b}.{p}"] = shape
    for name in READOUT_NAMES:
        shapes[name] = (cfg.d,)
    return shapes


class ParamSet:
    """Named dense float64 parameter arrays plus the model config."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


def init_params(config: ModelConfig) -> ParamSet:
    """Uniform(-0.05, 0.05) initialization from the config seed.

    Values are snapped to the float32 grid so a freshly initialized model
    round-trips bit-exactly through the float32 checkpoint format.
    """
    if config.vocab_size < 1:
        raise ValueError("vocab_size must be set before initializing parameters")
    rng = np.random.default_rng(config.seed)
    arrays = {}
    for name, shape in _array_shapes(config).items():
        arr = rng.uniform(-0.05, 0.05, size=shape)
        arrays[name] = arr.astype(np.float32).astype(np.float64)
    return ParamSet(config, arrays)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Encoding:
    """Contextual embedding matrix, shape (d, T); column i is position i."""

    matrix: np.ndarray

    def col(self, pos: int) -> np.ndarray:
        """1-based position lookup; position 1 is CLS."""
        return self.matrix[:, pos - 1]

    @property
    def length(self) -> int:
        return self.matrix.shape[1]


def stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + math.log(float(np.sum(np.exp(x - m))))


def _input_ids(inp) -> np.ndarray:
    ids = getattr(inp, "ids", inp)
    return np.asarray(ids, dtype=np.intp)


def _block_forward(params: ParamSet, prefix: str, x: np.ndarray, match: np.ndarray):
    """match is the (T, T) same-token indicator; its learned gain lets the
    attention focus repeated tokens (the matching primitive a pretrained
    encoder would otherwise provide)."""
    a = params.arrays
    d = params.config.d
    wq, wk, wv, wo = a[f"{prefix}.wq"], a[f"{prefix}.wk"], a[f"{prefix}.wv"], a[f"{prefix}.wo"]
    q = x @ wq.T
    k = x @ wk.T
    v = x @ wv.T
    scale = 1.0 / math.sqrt(d)
    att = stable_softmax((q @ k.T) * scale + a[f"{prefix}.mg"][0] * match, axis=1)
    c = att @ v
    u = x + c @ wo.T
    w1, b1, w2, b2 = a[f"{prefix}.w1"], a[f"{prefix}.b1"], a[f"{prefix}.w2"], a[f"{prefix}.b2"]
    g = np.tanh(u @ w1.T + b1)
    y = u + g @ w2.T + b2
    return y, (x, q, k, v, att, c, u, g, scale, match)


def _block_backward(params: ParamSet, prefix: str, cache, dy: np.ndarray, grads: dict):
    """Returns d(loss)/d(block input) and accumulates parameter grads."""
    a = params.arrays
    x, q, k, v, att, c, u, g, scale, match = cache
    w1, w2 = a[f"{prefix}.w1"], a[f"{prefix}.w2"]
    wq, wk, wv, wo = a[f"{prefix}.wq"], a[f"{prefix}.wk"], a[f"{prefix}.wv"], a[f"{prefix}.wo"]

    # y = u + g @ w2.T + b2
    grads[f"{prefix}.w2"] += dy.T @ g
    grads[f"{prefix}.b2"] += dy.sum(axis=0)
    dg = dy @ w2
    dz = dg * (1.0 - g * g)
    grads[f"{prefix}.w1"] += dz.T @ u
    grads[f"{prefix}.b1"] += dz.sum(axis=0)
    du = dy + dz @ w1

    # u = x + (att @ v) @ wo.T
    grads[f"{prefix}.wo"] += du.T @ c
    dc = du @ wo
    dx = du.copy()

    datt = dc @ v.T
    dv = att.T @ dc
    ds = att * (datt - np.sum(datt * att, axis=1, keepdims=True))
    grads[f"{prefix}.mg"][0] += float(np.sum(ds * match))
    dq = (ds @ k) * scale
    dk = (ds.T @ q) * scale

    dx += dq @ wq + dk @ wk + dv @ wv
    grads[f"{prefix}.wq"] += dq.T @ x
    grads[f"{prefix}.wk"] += dk.T @ x
    grads[f"{prefix}.wv"] += dv.T @ x
    return dx


def _forward(params: ParamSet, role: str, ids: np.ndarray):
    """Returns (y, cache) with y of shape (T, d), rows = positions."""
    a = params.arrays
    T = ids.size
    if T < 1:
        raise ValueError("cannot encode an empty input")
    if T > params.config.max_len:
        raise ValueError(
            f"input of length {T} exceeds encoder maximum {params.config.max_len}"
        )
    # Cross-segment same-token indicator: positions before/after the first
    # SEP form the two segments (passage side vs entity side), so the model
    # can read "this token also occurs in the other segment" (the lexical
    # matching primitive a pretrained encoder would otherwise provide)
    # without rewarding trivial self- or within-segment repetition.
    seg = np.cumsum(ids == 1) > 0  # inclusive of the SEP position itself
    match = (
        (ids[:, None] == ids[None, :]) & (seg[:, None] != seg[None, :])
    ).astype(np.float64)
    m_vec = (match.sum(axis=1) > 0).astype(np.float64)
    if T > 1:
        # Position 1 (CLS) aggregates: its annotation is the mean matchedness
        # of the rest of the sequence, so sequence-level readouts see the
        # lexical-overlap evidence directly.
        m_vec[0] = m_vec[1:].mean()
    x = a["tok_emb"][ids] + a["pos_emb"][:T] + np.outer(m_vec, a[f"{role}.match_emb"])
    block_caches = []
    for b in range(params.config.n_blocks):
        x, cache = _block_forward(params, f"{role}.{b}", x, match)
        block_caches.append(cache)
    return x, (ids, m_vec, block_caches)


def _backward(params: ParamSet, role: str, cache, dy: np.ndarray, grads: dict) -> None:
    """Accumulate d(loss)/d(params) into grads given dy = d(loss)/dy."""
    ids, m_vec, block_caches = cache
    T = ids.size
    dx = dy
    for b in range(params.config.n_blocks - 1, -1, -1):
        dx = _block_backward(params, f"{role}.{b}", block_caches[b], dx, grads)
    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][:T] += dx
    grads[f"{role}.match_emb"] += m_vec @ dx


def encode(params: ParamSet, role: str, inp) -> Encoding:
    """Encode a composed input (or raw id sequence) under one encoder role."""
    if role not in ROLES:
        raise ValueError(f"unknown encoder role {role!r}; expected one of {ROLES}")
    y, _ = _forward(params, role, _input_ids(inp))
    return Encoding(matrix=np.ascontiguousarray(y.T))


def encode_with_cache(params: ParamSet, role: str, inp):
    """Internal training entry point: returns (y rows (T, d), cache)."""
    return _forward(params, role, _input_ids(inp))


def encode_backward(params: ParamSet, role: str, cache, dy: np.ndarray, grads: dict) -> None:
    _backward(params, role, cache, dy, grads)


def cls_vector(params: ParamSet, role: str, inp) -> np.ndarray:
    """The CLS-column contextual embedding, as a contiguous (d,) vector."""
    y, _ = _forward(params, role, _input_ids(inp))
    return np.ascontiguousarray(y[0])


# ---------------------------------------------------------------------------
# Objectives and verification
# ---------------------------------------------------------------------------


class LossSpec(Protocol):
    """An objective evaluated on a fixed batch of data.

    loss(params) must be a deterministic smooth function of the parameter
    arrays; loss_and_grad must return its exact reverse-mode derivative for
    every array in the ParamSet (zeros for untouched arrays).
    """

    def loss(self, params: ParamSet) -> float: ...

    def loss_and_grad(self, params: ParamSet) -> tuple[float, dict[str, np.ndarray]]: ...


def loss_and_grad(params: ParamSet, spec: LossSpec) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate an objective, validating finiteness and gradient shape."""
    value, grads = spec.loss_and_grad(params)
    if not math.isfinite(value):
        raise NonFiniteError(f"loss is {value!r}")
    for name, arr in params.arrays.items():
        if name not in grads:
            grads[name] = np.zeros_like(arr)
    return value, grads


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_param: str
    worst_index: int
    n_checked: int
    n_unresolvable: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_error={self.max_rel_error:.3e} at "
            f"{self.worst_param}[{self.worst_index}] "
            f"({self.n_checked} coordinates, {self.n_unresolvable} below FD "
            f"resolution, tolerance {self.tolerance:g})"
        )


def finite_diff_check(
    params: ParamSet,
    spec: LossSpec,
    step: float = 1e-4,
    tolerance: float = 1e-3,
    sample_fraction: float = 0.01,
) -> FiniteDiffReport:
    """Compare the analytic gradient against central finite differences.

    Checks a deterministic sample of roughly sample_fraction of each array's
    coordinates, plus every coordinate of the readout vectors.  Relative error
    is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    A central difference of a float64 loss L carries rounding noise of about
    eps * |L| / step.  A coordinate counts as measurable only when that noise
    is at most a quarter of the tolerance relative to the error denominator;
    the rest are counted separately instead of polluting the maximum (a
    genuine sign/scale error always lives at a measurable coordinate).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    loss0, grads = loss_and_grad(params, spec)
    noise_bound = 2.0 * np.finfo(np.float64).eps * max(1.0, abs(loss0)) / step
    worst = (0.0, "", -1)
    n_checked = 0
    n_unresolvable = 0
    for name, arr in params.arrays.items():
        if name in READOUT_NAMES:
            idxs = np.arange(arr.size)
        else:
            n = max(1, math.ceil(sample_fraction * arr.size))
            sample_rng = np.random.default_rng(zlib.crc32(name.encode()) & 0xFFFFFFFF)
            idxs = sample_rng.choice(arr.size, size=min(n, arr.size), replace=False)
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + step
            lo_plus = spec.loss(params)
            flat[idx] = orig - step
            lo_minus = spec.loss(params)
            flat[idx] = orig
            numeric = (lo_plus - lo_minus) / (2.0 * step)
            analytic = gflat[idx]
            denom = max(1e-8, abs(analytic) + abs(numeric))
            if denom * tolerance < 4.0 * noise_bound:
                n_unresolvable += 1
                continue
            rel = abs(analytic - numeric) / denom
            n_checked += 1
            if rel > worst[0]:
                worst = (rel, name, int(idx))
    return FiniteDiffReport(
        max_rel_error=worst[0],
        worst_param=worst[1],
        worst_index=worst[2],
        n_checked=n_checked,
        n_unresolvable=n_unresolvable,
        tolerance=tolerance,
    )


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ParamSet) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(a) for k, a in params.arrays.items()},
            v={k: np.zeros_like(a) for k, a in params.arrays.items()},
        )


def optimizer_step(
    state: AdamState,
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamSet:
    """One adaptive-moment update, in place; returns the updated ParamSet."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient for {name!r} is not finite")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, arr in params.arrays.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


def lr_at(step: int, total_steps: int, base_lr: float, warmup_prop: float = 0.06) -> float:
    """Linear warmup from zero, then linear decay to zero; lr(0) == 0."""
    if total_steps <= 0:
        return 0.0
    warmup = max(1, int(round(warmup_prop * total_steps)))
    if step < warmup:
        return base_lr * step / warmup
    if step >= total_steps:
        return 0.0
    return base_lr * (total_steps - step) / (total_steps - warmup)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_save(
    path: str,
    params: ParamSet,
    state: AdamState | None = None,
    meta: dict | None = None,
) -> None:
    """Write magic, a length-prefixed UTF-8 JSON manifest of (name, shape)
    per array, then raw little-endian float32 payloads in manifest order."""
    entries: list[tuple[str, np.ndarray]] = [(n, params.arrays[n]) for n in params.names()]
    if state is not None:
        entries += [(f"opt.m.{n}", state.m[n]) for n in params.names()]
        entries += [(f"opt.v.{n}", state.v[n]) for n in params.names()]
    manifest = {
        "config": params.config.to_dict(),
        "arrays": [[name, list(arr.shape)] for name, arr in entries],
        "opt_step": state.step if state is not None else None,
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


@dataclass
class CheckpointBundle:
    params: ParamSet
    state: AdamState | None
    meta: dict


def checkpoint_load(path: str, expected_d: int | None = None) -> CheckpointBundle:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"{path}: bad magic {magic!r}; expected {CHECKPOINT_MAGIC!r}"
            )
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise CheckpointError(f"{path}: truncated manifest length")
        (mlen,) = struct.unpack("<I", raw_len)
        blob = fh.read(mlen)
        if len(blob) != mlen:
            raise CheckpointError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: malformed manifest ({exc})") from exc
        config = ModelConfig.from_dict(manifest["config"])
        if expected_d is not None and config.d != expected_d:
            raise CheckpointError(
                f"{path}: checkpoint has d={config.d}, runtime expects d={expected_d}"
            )
        arrays: dict[str, np.ndarray] = {}
        for name, shape in manifest["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise CheckpointError(f"{path}: truncated payload for array {name!r}")
            arrays[name] = (
                np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
            )
    expected = set(_array_shapes(config))
    param_arrays = {n: a for n, a in arrays.items() if not n.startswith("opt.")}
    if set(param_arrays) != expected:
        raise CheckpointError(f"{path}: parameter arrays do not match config layout")
    params = ParamSet(config, param_arrays)
    state = None
    if manifest.get("opt_step") is not None:
        state = AdamState(
            step=manifest["opt_step"],
            m={n: arrays[f"opt.m.{n}"] for n in params.names()},
            v={n: arrays[f"opt.v.{n}"] for n in params.names()},
        )
    return CheckpointBundle(params=params, state=state, meta=manifest.get("meta", {}))
