"""Trainable refinement head: token alignment MLP and residual feature aggregation."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import numkit as nk
from .cache import LocalCache

# Checkpoint blob order for parameters.
PARAM_NAMES = ("w1", "b1", "ln_gain", "ln_bias", "w2", "b2", "w_agg", "b_agg", "class_delta")


@dataclass
class AlignmentMlp:
    """Maps image-space tokens into the text space: W2 . act(LN(W1 v + b1)) + b2."""

    w1: object  # h x d
    b1: object  # 1 x h
    ln_gain: object  # 1 x h
    ln_bias: object  # 1 x h
    w2: object  # d x h
    b2: object  # 1 x d
    activation: str = "gelu"

    @property
    def dims(self) -> tuple[int, int]:
        h, d = nk.value_of(self.w1).shape
        return d, h


@dataclass
class AggregationHead:
    w_agg: object  # d x 2d
    b_agg: object  # 1 x d
    alpha: float = 0.2


@dataclass
class RefinerParams:
    mlp: AlignmentMlp
    head: AggregationHead
    class_delta: object  # C x d

    def tensors(self) -> dict[str, object]:
        m, hd = self.mlp, self.head
        return {
            "w1": m.w1, "b1": m.b1, "ln_gain": m.ln_gain, "ln_bias": m.ln_bias,
            "w2": m.w2, "b2": m.b2, "w_agg": hd.w_agg, "b_agg": hd.b_agg,
            "class_delta": self.class_delta,
        }

    def with_tensors(self, t: dict[str, object]) -> "RefinerParams":
        mlp = replace(self.mlp, **{f.name: t[f.name] for f in fields(AlignmentMlp) if f.name in t})
        head = replace(self.head, **{k: t[k] for k in ("w_agg", "b_agg") if k in t})
        return RefinerParams(mlp, head, t.get("class_delta", self.class_delta))

    def as_leaves(self, trainable: set[str] | None = None) -> "RefinerParams":
        """Copy with each tensor wrapped as a DiffValue leaf for one backward pass."""
        names = set(PARAM_NAMES) if trainable is None else trainable
        return self.with_tensors(
            {k: nk.DiffValue(nk.value_of(v).copy(), requires_grad=k in names) for k, v in self.tensors().items()}
        )

    def numpy(self) -> "RefinerParams":
        return self.with_tensors({k: nk.value_of(v).copy() for k, v in self.tensors().items()})

    def param_count(self) -> int:
        return sum(nk.value_of(v).size for v in self.tensors().values())


def init_params(
    d: int,
    n_classes: int,
    seed: int,
    hidden: int | None = None,
    alpha: float = 0.2,
    activation: str = "gelu",
) -> RefinerParams:
    """Seeded initialization.

    MLP weights are normal with std 1/sqrt(fan_in); the aggregation layer is
    normal with std 0.02 and a zero bias; layer-norm gain 1, bias 0;
    class_delta starts at zero.
    """
    if activation not in nk.ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}; choose from {sorted(nk.ACTIVATIONS)}")
    h = d if hidden is None else hidden
    rng = np.random.default_rng(seed)
    mlp = AlignmentMlp(
        w1=rng.standard_normal((h, d)) / np.sqrt(d),
        b1=np.zeros((1, h)),
        ln_gain=np.ones((1, h)),
        ln_bias=np.zeros((1, h)),
        w2=rng.standard_normal((d, h)) / np.sqrt(h),
        b2=np.zeros((1, d)),
        activation=activation,
    )
    head = AggregationHead(
        w_agg=0.02 * rng.standard_normal((d, 2 * d)),
        b_agg=np.zeros((1, d)),
        alpha=float(alpha),
    )
    return RefinerParams(mlp, head, np.zeros((n_classes, d)))


def align(tokens, mlp: AlignmentMlp) -> nk.DiffValue:
    d, _ = mlp.dims
    v = nk.const(tokens)
    if v.shape[1] != d:
        raise nk.DimensionError(f"align: token dim {v.shape[1]} != MLP input dim {d}")
    hid = nk.add_row(nk.mat_mul(v, nk.transpose(mlp.w1)), mlp.b1)
    hid = nk.ACTIVATIONS[mlp.activation](nk.layer_norm_row(hid, mlp.ln_gain, mlp.ln_bias))
    return nk.add_row(nk.mat_mul(hid, nk.transpose(mlp.w2)), mlp.b2)


def aggregate(e, e_ctx, head: AggregationHead) -> nk.DiffValue:
    """Residual fusion: alpha * Linear([E, E_ctx]) + E."""
    e, e_ctx = nk.const(e), nk.const(e_ctx)
    if e.shape != e_ctx.shape:
        raise nk.DimensionError(f"aggregate: E {e.shape} and context {e_ctx.shape} differ")
    w = nk.const(head.w_agg)
    if w.shape != (e.shape[1], 2 * e.shape[1]):
        raise nk.DimensionError(f"aggregate: W_agg {w.shape} does not map 2d={2 * e.shape[1]} to d")
    lin = nk.add_row(nk.mat_mul(nk.concat_cols(e, e_ctx), nk.transpose(w)), head.b_agg)
    return nk.add(nk.scale(lin, head.alpha), e)


def effective_embeddings(e_base, class_delta) -> nk.DiffValue:
    return nk.row_l2_normalize(nk.add(e_base, class_delta))


@dataclass
class Refined:
    refined: nk.DiffValue  # C x d, fused class embeddings
    weights: nk.DiffValue  # C x M, attention over cache entries
    effective: nk.DiffValue  # C x d, normalized base + delta


def refine(e_base, params: RefinerParams, cache: LocalCache) -> Refined:
    e_eff = effective_embeddings(e_base, params.class_delta)
    weights, ctx = cache.retrieve(e_eff)
    return Refined(aggregate(e_eff, ctx, params.head), weights, e_eff)
