"""CLT-based construction of the interpretability DAG.

Edges are oriented u -> v when the plug-in normal probability that u's
batch-mean score exceeds v's passes the confidence threshold; interval bounds
come from the same mean/sigma statistics. Convention used throughout: edge
u -> v asserts the source is more important, i.e. E[H_u - H_v] in [eps, delta],
and d_{u,v} is the batch mean of (H_u - H_v).
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

EPS_FLOOR = 1e-3
_SQRT_PI = math.sqrt(math.pi)
_SQRT_2 = math.sqrt(2.0)


class DegenerateStatisticError(ValueError):
    """Zero estimated spread: caller must fall back to bootstrap or declare a tie."""


# ---------------------------------------------------------------------------
# standard normal CDF: positive-term series for moderate arguments, Lentz
# continued fraction for the complementary error function in the far tail


def _erf_series(w: float) -> float:
    # erf(w) = 2w e^{-w^2}/sqrt(pi) * sum_n (2w^2)^n / (1*3*...*(2n+1))
    t = 2.0 * w * w
    term, total, n = 1.0, 1.0, 0
    while term > 1e-18 * total:
        n += 1
        term *= t / (2 * n + 1)
        total += term
        if n > 500:
            break
    return 2.0 * w * math.exp(-w * w) / _SQRT_PI * total


def _erfc_cf(w: float) -> float:
    # sqrt(pi) e^{w^2} erfc(w) = 1/(w + (1/2)/(w + 1/(w + (3/2)/(w + ...))))
    tiny = 1e-300
    f = w if w != 0 else tiny
    c, d = f, 0.0
    for n in range(1, 200):
        a = n / 2.0
        d = w + a * d
        d = tiny if d == 0 else d
        c = w + a / c
        c = tiny if c == 0 else c
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-17:
            break
    return math.exp(-w * w) / (_SQRT_PI * f)


def normal_cdf(z: float) -> float:
    """Standard normal CDF, accurate to well under 1e-7 absolute."""
    z = float(z)
    if not math.isfinite(z):
        raise ValueError("normal_cdf needs a finite argument")
    w = abs(z) / _SQRT_2
    if w < 4.0:
        tail = 0.5 * (1.0 - _erf_series(w))
    elif w < 40.0:
        tail = 0.5 * _erfc_cf(w)
    else:
        tail = 0.0
    return tail if z < 0 else 1.0 - tail


def normal_quantile(p: float) -> float:
    """Inverse of normal_cdf by bisection (monotone, so this is exact enough)."""
    if not 0.0 < p < 1.0:
        raise ValueError("normal_quantile needs p in (0, 1)")
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# batch statistics


@dataclass
class ScoreBatches:
    """Per-batch per-feature means with the per-sample values retained."""

    means: np.ndarray          # (N, d)
    n: int                     # samples per batch
    samples: np.ndarray | None  # (N, n, d) or None

    @property
    def n_batches(self):
        return self.means.shape[0]

    @property
    def n_features(self):
        return self.means.shape[1]


def batch_stats(score_groups) -> ScoreBatches:
    """Group per-sample scores into batches; each group is an (n, d) array."""
    groups = [np.asarray(g, dtype=np.float64) for g in score_groups]
    if not groups:
        raise ValueError("batch_stats: no batches")
    n = groups[0].shape[0]
    for g in groups:
        if g.ndim != 2 or g.shape != groups[0].shape:
            raise ValueError("batches must share the same (n, d) shape")
        if g.shape[0] < 2:
            raise ValueError("batch_stats needs n >= 2 samples per batch")
    samples = np.stack(groups)
    means = samples.mean(axis=1)
    if means.min() < -1e-12 or means.max() > 1.0 + 1e-12:
        raise ValueError("scores must lie in [0, 1]")
    return ScoreBatches(means=means, n=n, samples=samples)


@dataclass
class EdgeStat:
    mean_diff: float
    sigma: float
    prob: float
    variance_source: str  # between-batch | within-batch


def _resolve_mode(batches: ScoreBatches, variance_mode: str) -> str:
    if variance_mode == "auto":
        return "between-batch" if batches.n_batches >= 8 else "within-batch"
    if variance_mode in ("between-batch", "within-batch"):
        return variance_mode
    raise ValueError(f"unknown variance mode {variance_mode!r}")


def edge_probability(batches: ScoreBatches, u: int, v: int,
                     variance_mode: str = "auto") -> EdgeStat:
    """Plug-in Phi((s_u - s_v)/sigma) for the chosen variance estimator.

    between-batch: empirical variance of the per-batch differences (ddof=1).
    within-batch: [Var(H_u) + Var(H_v) - 2 Cov(H_u, H_v)] / n on the pooled
    retained samples.
    """
    mode = _resolve_mode(batches, variance_mode)
    if mode == "between-batch":
        if batches.n_batches < 2:
            raise ValueError("between-batch variance needs N >= 2 batches")
        diffs = batches.means[:, u] - batches.means[:, v]
        mean_diff = float(diffs.mean())
        var = float(diffs.var(ddof=1))
    else:
        if batches.samples is None:
            raise ValueError("within-batch variance needs retained samples")
        hu = batches.samples[:, :, u].reshape(-1)
        hv = batches.samples[:, :, v].reshape(-1)
        mean_diff = float(hu.mean() - hv.mean())
        dvals = hu - hv
        var = float(dvals.var(ddof=1)) / batches.n
    sigma = math.sqrt(max(var, 0.0))
    if sigma == 0.0:
        raise DegenerateStatisticError(
            f"degenerate statistic for pair ({u}, {v}): zero estimated spread")
    prob = normal_cdf(mean_diff / sigma)
    return EdgeStat(mean_diff=mean_diff, sigma=sigma, prob=prob, variance_source=mode)


def orient_edges(batches: ScoreBatches, alpha: float,
                 variance_mode: str = "auto"):
    """Directed edges over all feature pairs at confidence alpha.

    Degenerate pairs (zero spread) are skipped as ties. The result is checked
    for acyclicity; a cycle is reported as an error (it cannot arise from
    mean differences, which telescope, but the check is never skipped).
    """
    if not 0.5 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0.5, 1)")
    d = batches.n_features
    edges = []
    for u in range(d):
        for v in range(u + 1, d):
            try:
                stat = edge_probability(batches, u, v, variance_mode)
            except DegenerateStatisticError:
                continue
            if stat.prob > alpha:
                edges.append((u, v))
            elif 1.0 - stat.prob > alpha:
                edges.append((v, u))
    order, cycle = verify_acyclic(d, edges)
    if order is None:
        raise ValueError(f"orientation produced a cycle: {cycle}")
    return edges


def verify_acyclic(n_nodes: int, edges):
    """Topological order, or an explicit cycle witness.

    Returns (order, None) when acyclic, (None, cycle) otherwise; the cycle is
    a node list whose last element repeats the first.
    """
    adj = [[] for _ in range(n_nodes)]
    indeg = [0] * n_nodes
    for u, v in edges:
        adj[u].append(v)
        indeg[v] += 1
    queue = [i for i in range(n_nodes) if indeg[i] == 0]
    order = []
    while queue:
        node = queue.pop()
        order.append(node)
        for nxt in adj[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                queue.append(nxt)
    if len(order) == n_nodes:
        return order, None
    # walk forward inside the remaining subgraph until a repeat closes a cycle
    remaining = {i for i in range(n_nodes) if indeg[i] > 0}
    start = min(remaining)
    seen_at, walk = {}, []
    node = start
    while node not in seen_at:
        seen_at[node] = len(walk)
        walk.append(node)
        node = next(n for n in adj[node] if n in remaining)
    cycle = walk[seen_at[node]:] + [node]
    return None, cycle


def transitivity_check(batches: ScoreBatches, alpha: float, edges,
                       variance_mode: str = "auto"):
    """Edges whose estimated margin fails mean_diff >= z_alpha * sigma.

    An empty list certifies the sufficient condition for transitivity of the
    thresholded orientation.
    """
    z_a = normal_quantile(alpha) if alpha > 0.5 else 0.0
    violations = []
    for u, v in edges:
        stat = edge_probability(batches, u, v, variance_mode)
        if stat.mean_diff < z_a * stat.sigma:
            violations.append((u, v, stat.mean_diff, z_a * stat.sigma))
    return violations


def bootstrap_probability(batches: ScoreBatches, u: int, v: int,
                          resamples: int, seed: int = 0) -> float:
    """Fraction of batch-level bootstrap resamples with positive mean difference."""
    if resamples < 100:
        raise ValueError("bootstrap_probability needs at least 100 resamples")
    if batches.n_batches < 2:
        raise ValueError("bootstrap_probability needs N >= 2 batches")
    diffs = batches.means[:, u] - batches.means[:, v]
    rng = np.random.default_rng(seed)
    n = diffs.size
    idx = rng.integers(0, n, size=(resamples, n))
    means = diffs[idx].mean(axis=1)
    return float(np.mean(means > 0.0))


# ---------------------------------------------------------------------------
# the DAG itself


@dataclass
class DagEdge:
    src: int
    dst: int
    eps: float
    delta: float

    def __post_init__(self):
        if not 0.0 < self.eps <= self.delta:
            raise ValueError(f"edge interval must satisfy 0 < eps <= delta, got "
                             f"[{self.eps}, {self.delta}]")


@dataclass
class InterpretabilityDag:
    """Feature nodes plus interval-carrying edges; acyclicity is verified."""

    nodes: list[str]
    edges: list[DagEdge] = field(default_factory=list)
    alpha: float | None = None
    provenance: str = "manual"

    def __post_init__(self):
        n = len(self.nodes)
        for e in self.edges:
            if not (0 <= e.src < n and 0 <= e.dst < n and e.src != e.dst):
                raise ValueError(f"edge ({e.src}, {e.dst}) references unknown feature")
        order, cycle = verify_acyclic(n, [(e.src, e.dst) for e in self.edges])
        if order is None:
            raise ValueError(f"interpretability graph has a cycle: {cycle}")


def build_dag(batches: ScoreBatches, alpha: float, interval_rule=None,
              names=None, variance_mode: str = "auto") -> InterpretabilityDag:
    """Orient edges at confidence alpha and attach interval bounds.

    Auto intervals: eps = max(1e-3, m - z_alpha sigma), delta = m + z_alpha sigma
    with m the estimated mean difference. `interval_rule` may map (u, v) to a
    user-supplied (eps, delta) pair, which passes through unchanged. Edges
    whose auto interval collapses below the eps floor are dropped with a warning.
    """
    d = batches.n_features
    if names is None:
        names = [f"x{i}" for i in range(d)]
    z_a = normal_quantile(alpha) if alpha > 0.5 else 0.0
    oriented = orient_edges(batches, alpha, variance_mode)
    edges = []
    for u, v in oriented:
        if interval_rule and (u, v) in interval_rule:
            eps, delta = interval_rule[(u, v)]
        else:
            stat = edge_probability(batches, u, v, variance_mode)
            eps = max(EPS_FLOOR, stat.mean_diff - z_a * stat.sigma)
            delta = stat.mean_diff + z_a * stat.sigma
            if delta < eps:
                warnings.warn(f"edge {u}->{v} dropped: interval [{eps:.3g}, {delta:.3g}] "
                              "collapsed below the eps floor")
                continue
        edges.append(DagEdge(u, v, float(eps), float(delta)))
    return InterpretabilityDag(nodes=list(names), edges=edges, alpha=alpha,
                               provenance=f"clt:{variance_mode}")


def edge_table(batches: ScoreBatches, alpha: float, variance_mode: str = "auto"):
    """Rows (u, v, mean_diff, sigma, prob, decision) for every unordered pair."""
    rows = []
    d = batches.n_features
    for u in range(d):
        for v in range(u + 1, d):
            try:
                stat = edge_probability(batches, u, v, variance_mode)
            except DegenerateStatisticError:
                rows.append((u, v, 0.0, 0.0, 0.5, "degenerate"))
                continue
            if stat.prob > alpha:
                decision = f"{u}->{v}"
            elif 1.0 - stat.prob > alpha:
                decision = f"{v}->{u}"
            else:
                decision = "none"
            rows.append((u, v, stat.mean_diff, stat.sigma, stat.prob, decision))
    return rows


def save_dag(path, dag: InterpretabilityDag):
    payload = {
        "nodes": dag.nodes,
        "edges": [
            {"src": dag.nodes[e.src], "dst": dag.nodes[e.dst], "eps": e.eps, "delta": e.delta}
            for e in dag.edges
        ],
        "alpha": dag.alpha,
        "provenance": dag.provenance,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_dag(path) -> InterpretabilityDag:
    with open(path) as fh:
        payload = json.load(fh)
    nodes = list(payload["nodes"])
    index = {name: i for i, name in enumerate(nodes)}
    edges = []
    for e in payload["edges"]:
        if e["src"] not in index or e["dst"] not in index:
            raise ValueError(f"edge {e['src']}->{e['dst']} references unknown feature")
        edges.append(DagEdge(index[e["src"]], index[e["dst"]], float(e["eps"]), float(e["delta"])))
    return InterpretabilityDag(nodes=nodes, edges=edges, alpha=payload.get("alpha"),
                               provenance=payload.get("provenance", "file"))
