"""Operators that merge the three per-layer attention outputs into one.

Every fuser takes ``A_c`` (self-attention over the reply), ``A_p`` (attention
to the persona) and ``A_h`` (attention to the history), all ``L_c x d``, and
returns a single ``L_c x d`` matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

FUSION_METHODS = ("avg", "max", "min", "sw", "dw", "linear", "att")
STATIC_METHODS = ("avg", "max", "min")
WEIGHTING_METHODS = ("sw", "dw")

EPS = 1e-8


class DegenerateWeightsError(ValueError):
    """The normalizer ``w_c + w_p + w_h`` is (numerically) zero."""


def check_method(method: str) -> str:
    if method not in FUSION_METHODS:
        raise ValueError(f"unknown fusion method {method!r}; expected one of {FUSION_METHODS}")
    return method


@dataclass
class FusionParams:
    """Learnable parameters of one decoder layer's fusion module.

    ``tensors`` holds, by method:

    - sw: ``w_c``, ``w_p``, ``w_h`` of shape ``()``
    - dw: ``w_c``, ``w_p``, ``w_h`` of shape ``(d,)``
    - linear: ``weight`` of shape ``(3d, d)`` and ``bias`` of shape ``(d,)``
    - avg, max, min, att: nothing
    """

    method: str
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        check_method(self.method)

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.tensors)

    def source_weights(self) -> Optional[np.ndarray]:
        """Raw ``(w_c, w_p, w_h)``; dw vectors are averaged over dimensions."""
        if self.method not in WEIGHTING_METHODS:
            return None
        return np.array([float(np.mean(self.tensors[k].data)) for k in ("w_c", "w_p", "w_h")])


def _check_shapes(a_c: Tensor, a_p: Tensor, a_h: Tensor) -> None:
    if not (a_c.shape == a_p.shape == a_h.shape):
        raise DimensionError(
            f"fusion inputs must share a shape, got {a_c.shape}, {a_p.shape}, {a_h.shape}"
        )
    if a_c.ndim != 2:
        raise DimensionError(f"fusion inputs must be L_c x d matrices, got {a_c.shape}")


def fuse_static(kind: str, a_c: Tensor, a_p: Tensor, a_h: Tensor) -> Tensor:
    _check_shapes(a_c, a_p, a_h)
    if kind == "avg":
        return T.scale(a_c + a_p + a_h, 1.0 / 3.0)
    if kind == "max":
        return T.maximum(T.maximum(a_c, a_p), a_h)
    if kind == "min":
        return T.minimum(T.minimum(a_c, a_p), a_h)
    raise ValueError(f"fuse_static kind must be one of {STATIC_METHODS}, got {kind!r}")


def _weighted(w_c: Tensor, w_p: Tensor, w_h: Tensor, a_c: Tensor, a_p: Tensor, a_h: Tensor) -> Tensor:
    total = w_c + w_p + w_h
    bad = np.abs(np.atleast_1d(total.data)) <= EPS
    if np.any(bad):
        if total.ndim == 0:
            raise DegenerateWeightsError(f"source weights sum to {float(total.data):.3g}")
        j = int(np.flatnonzero(bad)[0])
        raise DegenerateWeightsError(
            f"dimension weights sum to {float(total.data[j]):.3g} at dimension j={j}"
        )
    return (w_c * a_c + w_p * a_p + w_h * a_h) / total


def fuse_sw(params: FusionParams, a_c: Tensor, a_p: Tensor, a_h: Tensor) -> Tensor:
    _check_shapes(a_c, a_p, a_h)
    w = params.tensors
    return _weighted(w["w_c"], w["w_p"], w["w_h"], a_c, a_p, a_h)


def fuse_dw(params: FusionParams, a_c: Tensor, a_p: Tensor, a_h: Tensor) -> Tensor:
    """Per-feature weighting: column j of the output mixes column j of each source."""
    _check_shapes(a_c, a_p, a_h)
    w = params.tensors
    d = a_c.shape[1]
    for k in ("w_c", "w_p", "w_h"):
        if w[k].shape != (d,):
            raise DimensionError(f"dw weight {k} has shape {w[k].shape}, expected ({d},)")
    return _weighted(w["w_c"], w["w_p"], w["w_h"], a_c, a_p, a_h)


def fuse_linear(params: FusionParams, a_c: Tensor, a_p: Tensor, a_h: Tensor) -> Tensor:
    _check_shapes(a_c, a_p, a_h)
    weight, bias = params.tensors["weight"], params.tensors["bias"]
    d = a_c.shape[1]
    if weight.shape != (3 * d, d):
        raise DimensionError(f"linear fusion weight has shape {weight.shape}, expected {(3 * d, d)}")
    stacked = T.concat([a_c, a_p, a_h], axis=1)
    return T.matmul(stacked, weight) + bias


def att_scores(a_c: Tensor, a_p: Tensor) -> Tensor:
    """``sign(M) * sqrt(|M|) / sqrt(d)`` with ``M = A_c A_p^T``."""
    m = T.matmul(a_c, a_p.T)
    return T.scale(T.sign(m) * T.sqrt(T.absolute(m)), 1.0 / math.sqrt(a_c.shape[1]))


def fuse_att(a_c: Tensor, a_p: Tensor, a_h: Tensor, causal: bool = False) -> Tensor:
    """Parameter-free attention fusion with ``A_h`` as the value matrix.

    With ``causal=True`` row i only mixes rows ``<= i`` of ``A_h``; the decoder
    needs this because ``A_h`` row j is computed from reply token j.
    """
    _check_shapes(a_c, a_p, a_h)
    scores = att_scores(a_c, a_p)
    mask = None
    if causal:
        n = a_c.shape[0]
        mask = np.tril(np.ones((n, n), dtype=bool))
    return T.matmul(T.softmax(scores, axis=-1, mask=mask), a_h)


def fuse(params: FusionParams, a_c: Tensor, a_p: Tensor, a_h: Tensor, causal: bool = False) -> Tensor:
    method = params.method
    if method in STATIC_METHODS:
        return fuse_static(method, a_c, a_p, a_h)
    if method == "sw":
        return fuse_sw(params, a_c, a_p, a_h)
    if method == "dw":
        return fuse_dw(params, a_c, a_p, a_h)
    if method == "linear":
        return fuse_linear(params, a_c, a_p, a_h)
    return fuse_att(a_c, a_p, a_h, causal=causal)


def init_fusion_params(
    method: str, d_model: int, rng: np.random.Generator, std: float = 0.02, layer: Optional[int] = None
) -> FusionParams:
    """Fresh fusion parameters for one layer.

    Weighting methods start at exactly 1 for every source so that the layer
    begins as the plain average; the linear map is drawn from ``N(0, std)``
    with a zero bias.
    """
    check_method(method)
    prefix = "" if layer is None else f"fusion.{layer}."
    tensors: Dict[str, Tensor] = {}
    if method == "sw":
        for k in ("w_c", "w_p", "w_h"):
            tensors[k] = Tensor(1.0, requires_grad=True, name=prefix + k)
    elif method == "dw":
        for k in ("w_c", "w_p", "w_h"):
            tensors[k] = Tensor(np.ones(d_model), requires_grad=True, name=prefix + k)
    elif method == "linear":
        tensors["weight"] = Tensor(
            rng.normal(0.0, std, size=(3 * d_model, d_model)), requires_grad=True, name=prefix + "weight"
        )
        tensors["bias"] = Tensor(np.zeros(d_model), requires_grad=True, name=prefix + "bias")
    return FusionParams(method, tensors)
