"""Temporal integrated gradients over integration paths, and satisfaction scores.

Attribution of input cell (i, k) toward output t is the left-Riemann sum of
dF(q_j)[t]/dq[i, k] * (q_{j+1} - q_j)[i, k] along the path points. When the
model parameters are graph nodes the resulting tensors stay on the graph, so
losses built from them can be differentiated back to the parameters.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import ndiff as nd
from . import seqmodel as sm
from .ndiff import Node


class AttributionError(RuntimeError):
    """Raised when a path point yields an unusable (non-finite) gradient."""


@dataclass
class IntegrationPath:
    """M points q_1..q_M of shape (T, d); q_1 is the baseline, q_M the input."""

    points: np.ndarray  # (M, T, d)
    provenance: str = "linear"

    def __post_init__(self):
        self.points = nd.as_array(self.points)
        if self.points.ndim != 3 or self.points.shape[0] < 2:
            raise ValueError("a path needs at least 2 points of shape (T, d)")

    @property
    def m(self):
        return self.points.shape[0]


@dataclass
class AttributionTensor:
    """values[t][i, k] attributes input cell (i, k) to output t.

    A (T, T, d) array, or a graph node of that shape while differentiating.
    """

    values: np.ndarray


@dataclass
class SatisfactionReport:
    """Per-step residuals (T, d), per-feature scores (d,) in (0, 1], and beta."""

    residuals: np.ndarray
    scores: np.ndarray
    beta: float


def linear_path(x, baseline, m: int) -> IntegrationPath:
    """Straight-line path with exact endpoints."""
    if m < 2:
        raise ValueError("linear_path needs m >= 2")
    xv = sm.series_values(x)
    bv = sm.series_values(baseline)
    if xv.shape != bv.shape:
        raise ValueError("baseline shape must match the input")
    alphas = np.linspace(0.0, 1.0, m).reshape(-1, 1, 1)
    pts = bv[None] + alphas * (xv - bv)[None]
    pts[0] = bv
    pts[-1] = xv
    return IntegrationPath(pts, "linear")


def tig(params: sm.SeqModelParams, path: IntegrationPath) -> AttributionTensor:
    """Left-Riemann line integral of output gradients along the path."""
    pts = path.points
    m, t_len, d = pts.shape
    deltas = np.diff(pts, axis=0)
    tracked = any(isinstance(nd_val, Node) for nd_val in
                  (getattr(params, name) for name in params.field_names()))
    per_t = [None] * t_len
    for j in range(m - 1):
        try:
            xj = Node(pts[j])
            outs, _ = sm.forward_ops(params, xj)
            for t in range(t_len):
                adj = nd.backward(outs[t], xj)
                contrib = nd.mul(adj, deltas[j])
                per_t[t] = contrib if per_t[t] is None else nd.add(per_t[t], contrib)
        except nd.NumericalOverflowError as exc:
            raise AttributionError(f"OOD gradient at path point {j}: {exc}") from exc
    stacked = nd.stack_rows(per_t)
    if not tracked:
        stacked = nd.value(stacked)
    return AttributionTensor(stacked)


def satisfaction(params: sm.SeqModelParams, x, baseline, attributions: AttributionTensor,
                 beta: float) -> SatisfactionReport:
    """Residuals h_{t,k} and scores H_k = mean_t 1/(1 + beta h_{t,k}).

    h_{t,k} is the absolute gap between the output's deviation from baseline
    and the cumulative attribution of feature k up to time t. H_k = 1 exactly
    when feature k explains the deviation at every step.
    """
    if beta <= 0:
        raise ValueError("satisfaction needs beta > 0")
    xv = sm.series_values(x)
    bv = sm.series_values(baseline)
    t_len, d = xv.shape
    outs_x, _ = sm.forward_ops(params, xv)
    outs_b, _ = sm.forward_ops(params, bv)
    a = attributions.values
    rows = []
    for t in range(t_len):
        a_t = nd.reshape(nd.take_rows(a, t, t + 1), (t_len, d))
        partial = nd.reduce_sum(nd.take_rows(a_t, 0, t + 1), axis=0)
        delta_t = nd.sub(outs_x[t], outs_b[t])
        rows.append(nd.absval(nd.sub(delta_t, partial)))
    residuals = nd.stack_rows(rows)
    agreement = nd.reciprocal(nd.add(1.0, nd.mul(beta, residuals)))
    scores = nd.mul(nd.reduce_sum(agreement, axis=0), 1.0 / t_len)
    if not isinstance(scores, Node):
        return SatisfactionReport(nd.value(residuals), nd.value(scores), beta)
    return SatisfactionReport(residuals, scores, beta)


def completeness_error(params: sm.SeqModelParams, x, baseline, m: int) -> np.ndarray:
    """Per-output |sum_{i,k} TIG[t][i,k] - (F(X)[t] - F(X')[t])| on the linear path."""
    path = linear_path(x, baseline, m)
    a = nd.value(tig(params, path).values)
    fx, _ = sm.forward(params, sm.series_values(x))
    fb, _ = sm.forward(params, sm.series_values(baseline))
    return np.abs(a.sum(axis=(1, 2)) - (fx - fb))


def write_attribution_csv(path, tensors, sample_ids=None):
    """Dump one row per (sample, t, i, k) with the attribution value."""
    if sample_ids is None:
        sample_ids = list(range(len(tensors)))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "t", "i", "k", "tig"])
        for sid, tensor in zip(sample_ids, tensors):
            vals = nd.value(tensor.values)
            t_len, _, d = vals.shape
            for t in range(t_len):
                for i in range(t_len):
                    for k in range(d):
                        writer.writerow([sid, t, i, k, "%.17g" % vals[t, i, k]])
