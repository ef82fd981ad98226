"""Local attribute cache: soft-assignment momentum writes and text-side retrieval."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk


class ConfigError(ValueError):
    pass


class FrozenCacheError(RuntimeError):
    pass


class CacheShapeError(ValueError):
    """Raised when restoring a snapshot whose shape does not match the cache."""


@dataclass
class AssignmentResult:
    probs: np.ndarray  # N x M, rows sum to 1
    groups: list[np.ndarray]  # M index arrays partitioning range(N)

    @property
    def owner(self) -> np.ndarray:
        """Entry index each token was assigned to."""
        return np.argmax(self.probs, axis=1)


@dataclass
class CacheSnapshot:
    entries: np.ndarray
    write_count: np.ndarray
    frozen: bool


@dataclass
class LocalCache:
    """M x d attribute storage written by momentum-weighted soft assignment.

    ``write_count[j]`` counts the tokens that have been assigned to entry j
    over the cache's lifetime.
    """

    entries: np.ndarray
    gamma: float
    write_count: np.ndarray = field(default=None)  # type: ignore[assignment]
    frozen: bool = False

    def __post_init__(self):
        self.entries = nk.as_matrix(self.entries).copy()
        m, d = self.entries.shape
        if m < 1 or d < 1:
            raise ConfigError(f"cache needs M >= 1 and d >= 1, got {m}x{d}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"momentum gamma must lie in [0, 1], got {self.gamma}")
        if self.write_count is None:
            self.write_count = np.zeros(m, dtype=np.int64)
        else:
            self.write_count = np.asarray(self.write_count, dtype=np.int64).copy()

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def assign(self, tokens) -> AssignmentResult:
        tokens = nk.value_of(tokens)
        if tokens.shape[1] != self.dim:
            raise nk.DimensionError(f"assign: token dim {tokens.shape[1]} != cache dim {self.dim}")
        if tokens.shape[0] < 1:
            raise nk.DimensionError("assign: need at least one token")
        probs = nk.row_softmax(nk.cosine_sim(tokens, self.entries)).value
        # np.argmax returns the first maximum, which is the lowest-index tie-break
        owner = np.argmax(probs, axis=1)
        groups = [np.flatnonzero(owner == j) for j in range(self.size)]
        return AssignmentResult(probs, groups)

    def write(self, tokens, assignment: AssignmentResult | None = None) -> "LocalCache":
        """Momentum update of every entry from its assigned tokens (in place)."""
        if self.frozen:
            raise FrozenCacheError("cannot write to a frozen cache")
        tokens = nk.value_of(tokens)
        if assignment is None:
            assignment = self.assign(tokens)
        if assignment.probs.shape != (tokens.shape[0], self.size):
            raise nk.DimensionError(
                f"write: assignment {assignment.probs.shape} does not match "
                f"{tokens.shape[0]} tokens x {self.size} entries"
            )
        g = self.gamma
        if g == 1.0:
            self.write_count += np.array([len(ix) for ix in assignment.groups])
            return self
        gathered = np.zeros_like(self.entries)
        for j, ix in enumerate(assignment.groups):
            if len(ix):
                gathered[j] = assignment.probs[ix, j] @ tokens[ix]
                self.write_count[j] += len(ix)
        self.entries = g * self.entries + (1.0 - g) * gathered
        return self

    def retrieve(self, class_embeddings) -> tuple[nk.DiffValue, nk.DiffValue]:
        """Attention of each class over the entries and the retrieved context.

        The entries enter the graph as constants; gradients flow only into the
        class embeddings.
        """
        e = nk.const(class_embeddings)
        if e.shape[1] != self.dim:
            raise nk.DimensionError(f"retrieve: embedding dim {e.shape[1]} != cache dim {self.dim}")
        a = nk.const(self.entries)
        weights = nk.row_softmax(nk.cosine_sim(e, a))
        return weights, nk.mat_mul(weights, a)

    def freeze(self) -> "LocalCache":
        self.frozen = True
        return self

    def snapshot(self) -> CacheSnapshot:
        return CacheSnapshot(self.entries.copy(), self.write_count.copy(), self.frozen)

    def restore(self, snap: CacheSnapshot) -> "LocalCache":
        if snap.entries.shape != self.entries.shape:
            raise CacheShapeError(
                f"snapshot entries {snap.entries.shape} do not match cache {self.entries.shape}"
            )
        self.entries = snap.entries.copy()
        self.write_count = snap.write_count.copy()
        self.frozen = snap.frozen
        return self

    def copy(self) -> "LocalCache":
        return LocalCache(self.entries, self.gamma, self.write_count, self.frozen)


def init_cache(m: int, d: int, gamma: float, seed: int) -> LocalCache:
    """Seeded random unit-vector entries."""
    if m < 1 or d < 1:
        raise ConfigError(f"cache needs M >= 1 and d >= 1, got M={m}, d={d}")
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"momentum gamma must lie in [0, 1], got {gamma}")
    rng = np.random.default_rng(seed)
    entries = rng.standard_normal((m, d))
    entries /= np.linalg.norm(entries, axis=1, keepdims=True)
    return LocalCache(entries, float(gamma))
