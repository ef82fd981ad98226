"""Embedding bundles: on-disk format, validation, splits and a synthetic generator.

A bundle directory holds ``manifest.json`` and five little-endian row-major
blobs: ``class_embeddings.bin`` (f32, C x d), ``labels.bin`` (u32, n),
``globals.bin`` (f32, n x d), ``tokens.bin`` (f32, n x N x d) and
``attn.bin`` (f32, n x N). Classes are ordered base first, then novel.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
SPLIT_RULE = "per_class_sorted_index_75_25"
BLOBS = {
    "class_embeddings.bin": "<f4",
    "labels.bin": "<u4",
    "globals.bin": "<f4",
    "tokens.bin": "<f4",
    "attn.bin": "<f4",
}


class BundleError(Exception):
    pass


class SynthConfigError(BundleError, ValueError):
    pass


class MissingBlobError(BundleError, FileNotFoundError):
    pass


class BlobSizeError(BundleError):
    def __init__(self, blob: str, expected: int, actual: int):
        super().__init__(f"{blob}: expected {expected} bytes, found {actual}")
        self.blob, self.expected, self.actual = blob, expected, actual


class BundleValidationError(BundleError, ValueError):
    def __init__(self, message: str, sample: int | None = None):
        super().__init__(message if sample is None else f"sample {sample}: {message}")
        self.sample = sample


class SplitError(BundleError, ValueError):
    pass


@dataclass
class EmbeddingBundle:
    class_embeddings: np.ndarray  # C x d, base classes first
    labels: np.ndarray  # n
    globals_: np.ndarray  # n x d
    tokens: np.ndarray  # n x N x d
    attn: np.ndarray  # n x N
    n_base: int
    n_novel: int
    samples_per_class: int
    seed: int = 0
    class_names: list[str] = field(default_factory=list)
    split_rule: str = SPLIT_RULE

    @property
    def d(self) -> int:
        return self.class_embeddings.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_classes(self) -> int:
        return self.n_base + self.n_novel

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "d": self.d,
            "n_tokens": self.n_tokens,
            "n_classes_base": self.n_base,
            "n_classes_novel": self.n_novel,
            "samples_per_class": self.samples_per_class,
            "seed": self.seed,
            "class_names": list(self.class_names),
            "split_rule": self.split_rule,
        }

    def validate(self) -> "EmbeddingBundle":
        n = self.labels.shape[0]
        c, d = self.class_embeddings.shape
        if c != self.n_classes:
            raise BundleValidationError(f"{c} class embeddings but {self.n_classes} classes declared")
        if self.class_names and len(self.class_names) != c:
            raise BundleValidationError(f"{len(self.class_names)} class names for {c} classes")
        if n != c * self.samples_per_class:
            raise BundleValidationError(f"{n} samples but {c} classes x {self.samples_per_class} per class")
        if self.globals_.shape != (n, d) or self.tokens.shape[0] != n or self.tokens.shape[2] != d:
            raise BundleValidationError(
                f"inconsistent shapes: globals {self.globals_.shape}, tokens {self.tokens.shape}, d={d}"
            )
        if self.attn.shape != self.tokens.shape[:2]:
            raise BundleValidationError(f"attention {self.attn.shape} does not match tokens {self.tokens.shape[:2]}")
        norms = np.linalg.norm(self.class_embeddings, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
        if bad.size:
            raise BundleValidationError(f"class embedding {bad[0]} has norm {norms[bad[0]]:.9f}, expected 1")
        for arr, name in ((self.class_embeddings, "class embeddings"), (self.globals_, "globals"), (self.tokens, "tokens"), (self.attn, "attention")):
            if not np.isfinite(arr).all():
                where = np.argwhere(~np.isfinite(arr))[0]
                raise BundleValidationError(f"non-finite value in {name} at {tuple(where)}", int(where[0]) if arr is not self.class_embeddings else None)
        for i in range(n):
            lab = int(self.labels[i])
            if not 0 <= lab < c:
                raise BundleValidationError(f"label {lab} outside [0, {c})", i)
            row = self.attn[i]
            if (row < 0).any():
                raise BundleValidationError("negative attention score", i)
            if abs(row.sum() - 1.0) > 1e-6:
                raise BundleValidationError(f"attention sums to {row.sum():.9f}, expected 1", i)
        counts = np.bincount(self.labels.astype(np.int64), minlength=c)
        if (counts != self.samples_per_class).any():
            j = int(np.flatnonzero(counts != self.samples_per_class)[0])
            raise BundleValidationError(f"class {j} has {counts[j]} samples, expected {self.samples_per_class}")
        return self


# -- splits -------------------------------------------------------------------


@dataclass
class View:
    """A subset of a bundle's samples, with labels local to its class group."""

    name: str
    indices: np.ndarray
    globals_: np.ndarray
    tokens: np.ndarray
    attn: np.ndarray
    labels: np.ndarray  # local: base view 0..C_base-1, novel view 0..C_novel-1
    class_embeddings: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]

    def batches(self, batch_size: int, order: np.ndarray | None = None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            yield self.globals_[sel], self.tokens[sel], self.attn[sel], self.labels[sel]


def split_views(bundle: EmbeddingBundle, train_fraction: float = 0.75) -> tuple[View, View, View]:
    """Deterministic base_train / base_test / novel_test views.

    Each base class contributes the first ``train_fraction`` of its samples
    (sorted by sample index) to training and the rest to testing.
    """
    labels = bundle.labels.astype(np.int64)
    train, test, novel = [], [], []
    for c in range(bundle.n_classes):
        idx = np.flatnonzero(labels == c)
        if c >= bundle.n_base:
            novel.append(idx)
            continue
        if idx.size < 2:
            raise SplitError(f"class {c} has {idx.size} samples; need at least 2 to split")
        cut = min(max(int(round(train_fraction * idx.size)), 1), idx.size - 1)
        train.append(idx[:cut])
        test.append(idx[cut:])

    def view(name, parts, offset, classes):
        ix = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        return View(
            name,
            ix,
            bundle.globals_[ix],
            bundle.tokens[ix],
            bundle.attn[ix],
            labels[ix] - offset,
            bundle.class_embeddings[classes],
        )

    base = slice(0, bundle.n_base)
    return (
        view("base_train", train, 0, base),
        view("base_test", test, 0, base),
        view("novel_test", novel, bundle.n_base, slice(bundle.n_base, bundle.n_classes)),
    )


# -- synthetic generator ------------------------------------------------------


@dataclass
class SynthSpec:
    d: int = 64
    n_tokens: int = 16
    n_base: int = 8
    n_novel: int = 8
    samples_per_class: int = 32
    pool: int = 12
    attrs_per_class: int = 3
    noise: float = 1.0
    distractors: int = 4
    core_scale: float = 0.3
    # < 1 makes text templates under-represent the attributes images show
    text_attr_weight: float = 0.1
    seed: int = 0

    def check(self) -> "SynthSpec":
        if min(self.d, self.n_tokens, self.n_base, self.n_novel, self.samples_per_class, self.pool) < 1:
            raise SynthConfigError("dimensions, class counts and pool size must all be >= 1")
        if not 1 <= self.attrs_per_class <= self.pool:
            raise SynthConfigError(
                f"attributes per class ({self.attrs_per_class}) must lie in [1, pool={self.pool}]"
            )
        if self.noise < 0 or self.core_scale < 0 or self.text_attr_weight < 0:
            raise SynthConfigError("noise, core scale and text attribute weight must be >= 0")
        if not 0 <= self.distractors < self.n_tokens:
            raise SynthConfigError(
                f"distractor tokens ({self.distractors}) must leave room for attribute tokens in {self.n_tokens}"
            )
        n_subsets = _n_choose_k(self.pool, self.attrs_per_class)
        if n_subsets < self.n_base + self.n_novel:
            raise SynthConfigError(
                f"only {n_subsets} distinct attribute subsets for {self.n_base + self.n_novel} classes"
            )
        return self


def _n_choose_k(n: int, k: int) -> int:
    from math import comb

    return comb(n, k)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _draw_subsets(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Distinct attribute subsets; novel subsets only use attributes seen in base classes."""
    all_subsets = list(itertools.combinations(range(spec.pool), spec.attrs_per_class))
    order = rng.permutation(len(all_subsets))
    base = [all_subsets[i] for i in order[: spec.n_base]]
    seen = set(itertools.chain.from_iterable(base))
    taken = set(base)
    novel = []
    for i in order[spec.n_base :]:
        s = all_subsets[i]
        if s not in taken and set(s) <= seen:
            novel.append(s)
            taken.add(s)
            if len(novel) == spec.n_novel:
                break
    if len(novel) < spec.n_novel:
        raise SynthConfigError(
            f"base classes cover too few attributes to form {spec.n_novel} unseen novel recombinations"
        )
    return base + novel


def generate(spec: SynthSpec) -> EmbeddingBundle:
    """Attribute-compositional embedding bundle, fully determined by ``spec.seed``.

    Every class combines a random core direction (length ``core_scale``) with
    the mean of a subset of shared attribute prototypes. The class text
    embedding weights that attribute mean by ``text_attr_weight`` while image
    features carry it at full strength. Image tokens are noisy copies of the class's
    prototypes padded with pure-noise distractor tokens, laid out in a
    per-class order; attribute tokens get attention weight 3, distractors
    weight 1. All values are rounded to
    float32 so a save/load round trip is exact.
    """
    spec.check()
    rng = np.random.default_rng(spec.seed)
    d, n_tok = spec.d, spec.n_tokens
    c_total = spec.n_base + spec.n_novel
    protos = _unit(rng.standard_normal((spec.pool, d)))
    subsets = _draw_subsets(spec, rng)
    cores = spec.core_scale * _unit(rng.standard_normal((c_total, d)))
    attr_means = np.stack([protos[list(s)].mean(axis=0) for s in subsets])
    class_emb = _f32(_unit(cores + spec.text_attr_weight * attr_means))

    n_attr_tok = n_tok - spec.distractors
    sigma = spec.noise / np.sqrt(d)
    n = c_total * spec.samples_per_class
    labels = np.repeat(np.arange(c_total), spec.samples_per_class).astype(np.uint32)
    # token layout is fixed per class so a noiseless class repeats exactly
    layouts = [rng.permutation(n_tok) for _ in range(c_total)]
    weights = np.concatenate([np.full(n_attr_tok, 3.0), np.ones(spec.distractors)])
    globals_ = np.empty((n, d))
    tokens = np.empty((n, n_tok, d))
    attn = np.empty((n, n_tok))
    for i, c in enumerate(labels):
        sub = subsets[c]
        slots = np.array([sub[j % len(sub)] for j in range(n_attr_tok)])
        attr_tok = protos[slots] + sigma * rng.standard_normal((n_attr_tok, d))
        distract = sigma * rng.standard_normal((spec.distractors, d))
        perm = layouts[c]
        tokens[i] = np.concatenate([attr_tok, distract])[perm]
        attn[i] = weights[perm] / weights.sum()
        globals_[i] = _unit(cores[c] + attr_tok.mean(axis=0) + sigma * rng.standard_normal(d))

    names = [f"base_{j:02d}" for j in range(spec.n_base)] + [f"novel_{j:02d}" for j in range(spec.n_novel)]
    return EmbeddingBundle(
        class_embeddings=class_emb,
        labels=labels,
        globals_=_f32(globals_),
        tokens=_f32(tokens),
        attn=_f32(attn),
        n_base=spec.n_base,
        n_novel=spec.n_novel,
        samples_per_class=spec.samples_per_class,
        seed=spec.seed,
        class_names=names,
    ).validate()


def class_attribute_subsets(spec: SynthSpec) -> list[tuple[int, ...]]:
    """Re-derive the attribute subset of every class for a spec (base first)."""
    spec.check()
    rng = np.random.default_rng(spec.seed)
    rng.standard_normal((spec.pool, spec.d))
    return _draw_subsets(spec, rng)


# -- files --------------------------------------------------------------------


def save_bundle(bundle: EmbeddingBundle, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {
        "class_embeddings.bin": bundle.class_embeddings,
        "labels.bin": bundle.labels,
        "globals.bin": bundle.globals_,
        "tokens.bin": bundle.tokens,
        "attn.bin": bundle.attn,
    }
    for name, arr in arrays.items():
        (out / name).write_bytes(np.ascontiguousarray(arr, dtype=BLOBS[name]).tobytes())
    (out / "manifest.json").write_text(json.dumps(bundle.manifest(), indent=2, sort_keys=True) + "\n")
    return out


def load_bundle(directory) -> EmbeddingBundle:
    src = Path(directory)
    mpath = src / "manifest.json"
    if not mpath.is_file():
        raise MissingBlobError(f"missing manifest.json in {src}")
    try:
        man = json.loads(mpath.read_text())
        d, n_tok = int(man["d"]), int(man["n_tokens"])
        nb, nn, spc = int(man["n_classes_base"]), int(man["n_classes_novel"]), int(man["samples_per_class"])
        version = int(man["format_version"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise BundleValidationError(f"malformed manifest: {exc}") from exc
    if version != FORMAT_VERSION:
        raise BundleValidationError(f"unsupported bundle format_version {version}")
    c = nb + nn
    n = c * spc
    shapes = {
        "class_embeddings.bin": (c, d),
        "labels.bin": (n,),
        "globals.bin": (n, d),
        "tokens.bin": (n, n_tok, d),
        "attn.bin": (n, n_tok),
    }
    arrays = {}
    for name, shape in shapes.items():
        path = src / name
        if not path.is_file():
            raise MissingBlobError(f"missing blob {name} in {src}")
        raw = path.read_bytes()
        dt = np.dtype(BLOBS[name])
        expected = int(np.prod(shape)) * dt.itemsize
        if len(raw) != expected:
            raise BlobSizeError(name, expected, len(raw))
        arr = np.frombuffer(raw, dtype=dt).reshape(shape)
        arrays[name] = arr.copy() if name == "labels.bin" else arr.astype(np.float64)
    return EmbeddingBundle(
        class_embeddings=arrays["class_embeddings.bin"],
        labels=arrays["labels.bin"],
        globals_=arrays["globals.bin"],
        tokens=arrays["tokens.bin"],
        attn=arrays["attn.bin"],
        n_base=nb,
        n_novel=nn,
        samples_per_class=spc,
        seed=int(man.get("seed", 0)),
        class_names=list(man.get("class_names", [])),
        split_rule=str(man.get("split_rule", SPLIT_RULE)),
    ).validate()
