"""Single-head softmax attention as a Nadaraya-Watson kernel regressor.

A head projects the query and the data points into a d_k-dimensional key
space and softmax-averages the projected values:

    q = wq^T x,   k_i = wk^T x_i,   v_i = wv . x_i
    estimate = sum_i w_i v_i,   w_i = softmax_i(q . k_i / sqrt(d_k))

which is the Nadaraya-Watson estimator under the exponential kernel
exp(q . k / sqrt(d_k)) with bandwidth 1/sqrt(d_k): larger d_k means a
sharper kernel.  ``nw_reference`` is the unstabilised textbook form and
exists purely as the identity oracle for ``attend``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateKernel, EmptyData, ShapeMismatch
from .synthetic import Dataset
from .tensor_core import Matrix

__all__ = ["HeadConfig", "AttentionOutput", "attend", "attend_many", "nw_reference"]


@dataclass(frozen=True)
class HeadConfig:
    """Projection triple of one attention head.

    wq and wk are p x d_k; wv is a length-p vector producing scalar values
    v_i = wv . x_i.  The kernel bandwidth 1/sqrt(d_k) is derived, read-only.
    """

    wq: Matrix
    wk: Matrix
    wv: np.ndarray

    def __post_init__(self):
        wv = np.array(self.wv, dtype=np.float64, copy=True).reshape(-1)
        if not np.all(np.isfinite(wv)):
            raise ShapeMismatch("HeadConfig: wv entries must be finite")
        wv.flags.writeable = False
        object.__setattr__(self, "wv", wv)
        if self.wq.shape != self.wk.shape:
            raise ShapeMismatch(
                f"HeadConfig: wq {self.wq.shape} and wk {self.wk.shape} must agree"
            )
        if wv.shape[0] != self.wk.rows:
            raise ShapeMismatch(
                f"HeadConfig: wv length {wv.shape[0]} != p = {self.wk.rows}"
            )

    @property
    def p(self) -> int:
        return self.wk.rows

    @property
    def d_k(self) -> int:
        return self.wk.cols

    @property
    def bandwidth(self) -> float:
        """Kernel bandwidth h = 1 / sqrt(d_k)."""
        return 1.0 / np.sqrt(self.d_k)


@dataclass(frozen=True)
class AttentionOutput:
    """Estimate plus the softmax weights that produced it."""

    estimate: float
    weights: np.ndarray


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    # max-subtraction keeps exp() in range for |logits| beyond ~700
    shifted = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(shifted)
    w /= w.sum(axis=1, keepdims=True)
    return w


def attend_many(head: HeadConfig, queries: np.ndarray, data: Dataset,
                return_weights: bool = False):
    """Vectorised ``attend`` over a batch of query points.

    Returns estimates of shape (Q,), and the Q x n weight matrix when
    ``return_weights`` is set.  The single-query ``attend`` delegates here,
    so both paths produce identical floating-point results.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if data.n < 1:
        raise EmptyData("attend: dataset is empty")
    if queries.shape[1] != head.p or data.p != head.p:
        raise ShapeMismatch(
            f"attend: head expects R^{head.p}, got query dim {queries.shape[1]} "
            f"and data dim {data.p}"
        )
    q = queries @ head.wq.a                      # Q x d_k
    k = data.xs @ head.wk.a                      # n x d_k
    v = data.xs @ head.wv                        # n
    logits = (q @ k.T) / np.sqrt(head.d_k)       # Q x n
    weights = _softmax_rows(logits)
    estimates = weights @ v
    if return_weights:
        return estimates, weights
    return estimates


def attend(head: HeadConfig, query_x: np.ndarray, data: Dataset) -> AttentionOutput:
    """Softmax attention at a single query point.

    The weights are nonnegative and sum to one, so the estimate is a convex
    combination of the projected values.
    """
    query_x = np.asarray(query_x, dtype=np.float64).reshape(1, -1)
    estimates, weights = attend_many(head, query_x, data, return_weights=True)
    return AttentionOutput(estimate=float(estimates[0]), weights=weights[0])


def nw_reference(kernel_logits: np.ndarray, values: np.ndarray) -> float:
    """Unstabilised Nadaraya-Watson estimate sum K_i v_i / sum K_i.

    K_i = exp(logit_i) computed raw, so large negative logits can underflow;
    if every kernel value vanishes the estimator is undefined and
    DegenerateKernel is raised.  This is the independent oracle against
    which ``attend`` is verified.
    """
    logits = np.asarray(kernel_logits, dtype=np.float64).reshape(-1)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if logits.shape != values.shape:
        raise ShapeMismatch(
            f"nw_reference: {logits.shape[0]} logits vs {values.shape[0]} values"
        )
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(values))):
        raise ShapeMismatch("nw_reference: inputs must be finite")
    kernel = np.exp(logits)
    total = kernel.sum()
    if total == 0.0 or not np.isfinite(total):
        raise DegenerateKernel(
            f"nw_reference: kernel mass {total} is unusable (min logit {logits.min():.3g})"
        )
    return float((kernel @ values) / total)
