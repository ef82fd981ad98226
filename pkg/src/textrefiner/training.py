"""Deterministic training loop and the binary checkpoint format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numkit as nk
from . import objective as obj
from .cache import LocalCache, init_cache
from .dataio import EmbeddingBundle, View, split_views
from .refiner import PARAM_NAMES, RefinerParams, align, init_params, refine


class TrainConfigError(ValueError):
    pass


class NumericAbort(FloatingPointError):
    def __init__(self, step: int, term: str, max_grad: float):
        super().__init__(f"non-finite {term} loss at step {step} (max |grad| = {max_grad:.6g})")
        self.step, self.term, self.max_grad = step, term, max_grad


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 2e-3
    optimizer: str = "adam"
    seed: int = 0
    gamma: float = 0.8
    alpha: float = 0.2
    lambda1: float = 0.02
    lambda2: float = 20.0
    tau: float = 0.01
    M: int = 16
    k: int = 5
    hidden: int | None = None
    activation: str = "gelu"
    grad_clip: float = 10.0
    write_order: str = "before"
    frozen_params: tuple[str, ...] = ()

    def validate(self, n_tokens: int | None = None) -> "TrainConfig":
        problems = []
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0 (got {self.epochs})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if not self.lr > 0:
            problems.append(f"lr must be > 0 (got {self.lr})")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"optimizer must be 'adam' or 'sgd' (got {self.optimizer!r})")
        if not 0.0 <= self.gamma <= 1.0:
            problems.append(f"gamma must lie in [0, 1] (got {self.gamma})")
        if self.alpha < 0:
            problems.append(f"alpha must be >= 0 (got {self.alpha})")
        if self.lambda1 < 0 or self.lambda2 < 0:
            problems.append(f"loss weights must be >= 0 (got {self.lambda1}, {self.lambda2})")
        if not self.tau > 0:
            problems.append(f"tau must be > 0 (got {self.tau})")
        if self.M < 1:
            problems.append(f"M must be >= 1 (got {self.M})")
        if self.k < 0 or (n_tokens is not None and self.k > n_tokens):
            problems.append(f"k must lie in [0, {n_tokens if n_tokens is not None else 'N'}] (got {self.k})")
        if self.hidden is not None and self.hidden < 1:
            problems.append(f"hidden must be >= 1 (got {self.hidden})")
        if self.activation not in nk.ACTIVATIONS:
            problems.append(f"activation must be one of {sorted(nk.ACTIVATIONS)} (got {self.activation!r})")
        if self.grad_clip < 0:
            problems.append(f"grad_clip must be >= 0, 0 disables (got {self.grad_clip})")
        if self.write_order not in ("before", "after"):
            problems.append(f"write_order must be 'before' or 'after' (got {self.write_order!r})")
        unknown = set(self.frozen_params) - set(PARAM_NAMES)
        if unknown:
            problems.append(f"unknown frozen params {sorted(unknown)}")
        if problems:
            raise TrainConfigError("; ".join(problems))
        return self

    def to_json(self) -> dict:
        out = asdict(self)
        out["frozen_params"] = list(self.frozen_params)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise TrainConfigError(f"unknown config keys {sorted(unknown)}")
        data = dict(data)
        data["frozen_params"] = tuple(data.get("frozen_params", ()))
        return cls(**data)

    @property
    def trainable(self) -> set[str]:
        return set(PARAM_NAMES) - set(self.frozen_params)

    @property
    def loss(self) -> obj.LossConfig:
        return obj.LossConfig(self.tau, self.lambda1, self.lambda2, self.k)


@dataclass
class TrainState:
    config: TrainConfig
    params: RefinerParams
    cache: LocalCache
    rng: np.random.Generator
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0

    def param_count(self) -> int:
        return self.params.param_count()

    def snap_float32(self) -> "TrainState":
        """Round every stored real to float32 so checkpoints round-trip exactly."""
        self.params = self.params.with_tensors({k: _f32(v) for k, v in self.params.tensors().items()})
        self.cache.entries = _f32(self.cache.entries)
        self.moments = {k: _f32(v) for k, v in self.moments.items()}
        return self


def _f32(x) -> np.ndarray:
    return np.asarray(nk.value_of(x), dtype=np.float32).astype(np.float64)


def init_state(config: TrainConfig, d: int, n_classes: int) -> TrainState:
    config.validate()
    ss = np.random.SeedSequence(config.seed)
    cache_seed, param_seed, shuffle_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    params = init_params(d, n_classes, param_seed, config.hidden, config.alpha, config.activation)
    cache = init_cache(config.M, d, config.gamma, cache_seed)
    rng = np.random.Generator(np.random.PCG64(shuffle_seed))
    moments = {}
    if config.optimizer == "adam":
        for name in sorted(config.trainable, key=PARAM_NAMES.index):
            shape = nk.value_of(params.tensors()[name]).shape
            moments[f"m.{name}"] = np.zeros(shape)
            moments[f"v.{name}"] = np.zeros(shape)
    return TrainState(config, params, cache, rng, moments).snap_float32()


# -- forward ------------------------------------------------------------------


@dataclass
class Batch:
    globals_: np.ndarray  # B x d
    tokens: np.ndarray  # B x N x d
    attn: np.ndarray  # B x N
    labels: np.ndarray  # B


def batch_losses(
    params: RefinerParams,
    cache: LocalCache,
    e_base,
    batch: Batch,
    loss: obj.LossConfig,
    write: bool = False,
    aligned: nk.DiffValue | None = None,
) -> dict[str, nk.DiffValue]:
    """Batch-mean losses as graph nodes; optionally writes the batch into the cache first."""
    b, n, d = batch.tokens.shape
    if aligned is None:
        aligned = align(batch.tokens.reshape(b * n, d), params.mlp)
    if write:
        write_tokens(cache, aligned.value, b)
    ref = refine(e_base, params, cache)
    cls = obj.cls_loss(batch.globals_, ref.refined, batch.labels, loss.tau)
    tokset = nk.mat_mul(obj.semantic_pool(batch.attn, loss.k), aligned)
    sem = obj.sem_loss(tokset, ref.refined, np.repeat(batch.labels, loss.k + 1), loss.tau)
    reg = obj.reg_loss(ref.effective, ref.refined)
    total = obj.combine(cls, sem, reg, loss.lambda1, loss.lambda2)
    return {"cls": cls, "sem": sem, "reg": reg, "total": total}


def write_tokens(cache: LocalCache, aligned: np.ndarray, batch_size: int) -> None:
    """Write each sample's detached aligned tokens into the cache, in batch order."""
    per = aligned.shape[0] // batch_size
    for s in range(batch_size):
        cache.write(aligned[s * per : (s + 1) * per].copy())


# -- optimization -------------------------------------------------------------


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Cosine decay from the base rate to zero over the run."""
    if total_steps <= 0:
        return config.lr
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def train_step(state: TrainState, batch: Batch, e_base, total_steps: int) -> tuple[TrainState, obj.LossBreakdown]:
    cfg = state.config
    if batch.labels.shape[0] == 0:
        raise TrainConfigError("empty batch")
    trainable = cfg.trainable
    leaves = state.params.as_leaves(trainable)
    b, n, d = batch.tokens.shape
    aligned = align(batch.tokens.reshape(b * n, d), leaves.mlp)
    before = cfg.write_order == "before"
    losses = batch_losses(leaves, state.cache, e_base, batch, cfg.loss, write=before, aligned=aligned)
    for term in ("cls", "sem", "reg", "total"):
        if not np.isfinite(losses[term].value).all():
            raise NumericAbort(state.step, term, float("nan"))
    losses["total"].backward()
    grads = {k: v.grad for k, v in leaves.tensors().items() if k in trainable}
    gmax = max((float(np.abs(g).max()) for g in grads.values()), default=0.0)
    if not math.isfinite(gmax):
        raise NumericAbort(state.step, "gradient", gmax)
    if cfg.grad_clip > 0:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    lr = lr_at(cfg, state.step, total_steps)
    updated = _apply_update(state, grads, lr)
    if not before:
        write_tokens(state.cache, aligned.value, b)
    state.params = state.params.with_tensors(updated)
    state.step += 1
    bd = obj.total_loss(losses["cls"].item(), losses["sem"].item(), losses["reg"].item(), cfg.lambda1, cfg.lambda2)
    return state, bd


def _apply_update(state: TrainState, grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    cfg = state.config
    current = {k: nk.value_of(v) for k, v in state.params.tensors().items()}
    out = {}
    if cfg.optimizer == "sgd":
        for k, g in grads.items():
            out[k] = current[k] - lr * g
        return out
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = state.step + 1
    for k, g in grads.items():
        m = b1 * state.moments[f"m.{k}"] + (1 - b1) * g
        v = b2 * state.moments[f"v.{k}"] + (1 - b2) * g * g
        state.moments[f"m.{k}"], state.moments[f"v.{k}"] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        out[k] = current[k] - lr * mhat / (np.sqrt(vhat) + eps)
    return out


# -- evaluation helpers used by the loop --------------------------------------


def refined_for(state: TrainState, e_base, class_delta=None) -> np.ndarray:
    """Refined class embeddings against a frozen copy of the cache."""
    params = state.params
    if class_delta is not None:
        params = params.with_tensors({"class_delta": class_delta})
    return refine(e_base, params, state.cache.copy().freeze()).refined.value


def view_accuracy(state: TrainState, view: View, class_delta=None) -> float:
    if class_delta is None:
        class_delta = nk.value_of(state.params.class_delta)
    refined = refined_for(state, view.class_embeddings, class_delta)
    pred, _ = obj.predict(view.globals_, refined, state.config.tau)
    return 100.0 * float(np.mean(pred == view.labels))


def fit(
    config: TrainConfig,
    bundle: EmbeddingBundle,
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState, dict], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Train on the base-train view for ``config.epochs`` epochs.

    Passing a ``state`` resumes from its epoch counter. After every epoch the
    state is rounded to float32, the precision of the checkpoint format, so a
    resumed run matches the uninterrupted one bit for bit.
    """
    config.validate(bundle.n_tokens)
    train_view, _, _ = split_views(bundle)
    if state is None:
        state = init_state(config, bundle.d, bundle.n_base)
    elif state.config != config:
        raise TrainConfigError("resume state was produced with a different config")
    n = len(train_view)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    e_base = train_view.class_embeddings
    log: list[dict] = []
    while state.epoch < config.epochs:
        order = state.rng.permutation(n)
        sums = {"cls": 0.0, "sem": 0.0, "reg": 0.0, "total": 0.0}
        for g, t, a, y in train_view.batches(config.batch_size, order):
            _, bd = train_step(state, Batch(g, t, a, y), e_base, total)
            for key, val in bd.as_dict().items():
                sums[key] += val
        state.epoch += 1
        state.snap_float32()
        entry = {"epoch": state.epoch, "step": state.step}
        entry.update({f"loss_{k}": v / steps_per_epoch for k, v in sums.items()})
        entry["train_acc"] = view_accuracy(state, train_view)
        log.append(entry)
        if on_epoch is not None:
            on_epoch(state, entry)
    return state, log


# -- checkpoints --------------------------------------------------------------

MAGIC = b"TXRF0001"
_MAGIC_FAMILY = b"TXRF"


class CheckpointError(Exception):
    code = 1


class CheckpointFormatError(CheckpointError):
    code = 10


class CheckpointVersionError(CheckpointError):
    code = 11


class CheckpointShapeError(CheckpointError):
    code = 12


class CheckpointTruncatedError(CheckpointError):
    code = 13


def _blob_order(state: TrainState) -> list[tuple[str, np.ndarray]]:
    t = {k: nk.value_of(v) for k, v in state.params.tensors().items()}
    blobs = [("A", state.cache.entries)] + [(k, t[k]) for k in PARAM_NAMES]
    blobs += sorted(state.moments.items(), key=lambda kv: (kv[0][0], PARAM_NAMES.index(kv[0][2:])))
    return blobs


def checkpoint_bytes(state: TrainState) -> bytes:
    blobs = _blob_order(state)
    rs = state.rng.bit_generator.state
    header = {
        "format_version": 1,
        "config": state.config.to_json(),
        "dims": {
            "d": state.cache.dim,
            "M": state.cache.size,
            "h": nk.value_of(state.params.mlp.w1).shape[0],
            "C": nk.value_of(state.params.class_delta).shape[0],
        },
        "counters": {"epoch": state.epoch, "step": state.step},
        "rng": {
            "bit_generator": rs["bit_generator"],
            "state": str(rs["state"]["state"]),
            "inc": str(rs["state"]["inc"]),
            "has_uint32": str(rs["has_uint32"]),
            "uinteger": str(rs["uinteger"]),
        },
        "cache": {
            "gamma": state.cache.gamma,
            "frozen": state.cache.frozen,
            "write_count": [int(c) for c in state.cache.write_count],
        },
        "blobs": [{"name": k, "shape": list(v.shape)} for k, v in blobs],
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(hdr)), hdr]
    parts += [np.ascontiguousarray(v, dtype="<f4").tobytes() for _, v in blobs]
    return b"".join(parts)


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(state))
    return path


def load_checkpoint(path, expect_d: int | None = None, expect_classes: int | None = None) -> TrainState:
    raw = Path(path).read_bytes()
    return checkpoint_from_bytes(raw, expect_d, expect_classes)


def checkpoint_from_bytes(raw: bytes, expect_d: int | None = None, expect_classes: int | None = None) -> TrainState:
    if len(raw) < len(MAGIC):
        raise CheckpointTruncatedError(f"file is {len(raw)} bytes, shorter than the magic header")
    magic = raw[: len(MAGIC)]
    if magic != MAGIC:
        if magic[:4] == _MAGIC_FAMILY:
            raise CheckpointVersionError(f"unsupported checkpoint version {magic[4:].decode('ascii', 'replace')!r}")
        raise CheckpointFormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointTruncatedError("file ends inside the header length")
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointTruncatedError(f"header declares {hlen} bytes, only {len(raw) - pos} present")
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"header is not valid UTF-8 JSON: {exc}") from exc
    pos += hlen
    if header.get("format_version") != 1:
        raise CheckpointVersionError(f"unsupported header format_version {header.get('format_version')!r}")

    dims = header["dims"]
    if expect_d is not None and dims["d"] != expect_d:
        raise CheckpointShapeError(f"feature dim mismatch: expected d={expect_d}, checkpoint has d={dims['d']}")
    if expect_classes is not None and dims["C"] != expect_classes:
        raise CheckpointShapeError(
            f"class count mismatch: expected C={expect_classes}, checkpoint has C={dims['C']}"
        )

    arrays = {}
    for spec in header["blobs"]:
        shape = tuple(spec["shape"])
        nbytes = 4 * int(np.prod(shape))
        if len(raw) < pos + nbytes:
            raise CheckpointTruncatedError(f"blob {spec['name']} needs {nbytes} bytes, {len(raw) - pos} left")
        arrays[spec["name"]] = np.frombuffer(raw[pos : pos + nbytes], dtype="<f4").reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointFormatError(f"{len(raw) - pos} trailing bytes after the last blob")

    config = TrainConfig.from_json(header["config"])
    d, m, h, c = dims["d"], dims["M"], dims["h"], dims["C"]
    expected = {
        "A": (m, d), "w1": (h, d), "b1": (1, h), "ln_gain": (1, h), "ln_bias": (1, h),
        "w2": (d, h), "b2": (1, d), "w_agg": (d, 2 * d), "b_agg": (1, d), "class_delta": (c, d),
    }
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointFormatError(f"missing blob {name}")
        if arrays[name].shape != shape:
            raise CheckpointShapeError(f"blob {name}: expected shape {shape}, found {arrays[name].shape}")

    params = init_params(d, c, 0, h, config.alpha, config.activation).with_tensors(
        {k: arrays[k] for k in PARAM_NAMES}
    )
    cinfo = header["cache"]
    cache = LocalCache(arrays["A"], float(cinfo["gamma"]), np.array(cinfo["write_count"], dtype=np.int64), bool(cinfo["frozen"]))
    rng = np.random.Generator(np.random.PCG64())
    r = header["rng"]
    rng.bit_generator.state = {
        "bit_generator": r["bit_generator"],
        "state": {"state": int(r["state"]), "inc": int(r["inc"])},
        "has_uint32": int(r["has_uint32"]),
        "uinteger": int(r["uinteger"]),
    }
    moments = {k: v for k, v in arrays.items() if k.startswith(("m.", "v."))}
    return TrainState(
        config, params, cache, rng, moments, int(header["counters"]["epoch"]), int(header["counters"]["step"])
    )
