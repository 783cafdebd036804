"""Routing oracle: a recurrent generator of anchor points forming short,
in-distribution integration paths, trained bi-objectively against a frozen
validity assessor.

The assessor here is a diagonal-Gaussian density surrogate calibrated so the
median training point scores 0.9; it is pluggable, so anything exposing
log_score / log_score_ops can stand in.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import biopt as bo
from . import ndiff as nd
from . import seqmodel as sm
from .attribution import IntegrationPath

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class OracleParams(sm.FlatParams):
    """Recurrent cell over flattened (T*d) points with a remaining-step input.

    Both the next point and the next hidden state are read from the previous
    hidden state, the target, the previous point, and the remaining count.
    """

    a_hh: np.ndarray   # (w, w) hidden recurrence
    b_xh: np.ndarray   # (w, n) hidden read of the target
    b_ph: np.ndarray   # (w, n) hidden read of the previous point
    c_kh: np.ndarray   # (w,) hidden read of the remaining count
    b_h: np.ndarray    # (w,)
    o_hp: np.ndarray   # (n, w) point read of the previous hidden state
    o_xp: np.ndarray   # (n, n) point read of the target
    o_pp: np.ndarray   # (n, n) point read of the previous point
    o_kp: np.ndarray   # (n,) point read of the remaining count
    b_p: np.ndarray    # (n,)
    t_len: int = 1
    d: int = 1

    ARRAY_FIELDS = ("a_hh", "b_xh", "b_ph", "c_kh", "b_h",
                    "o_hp", "o_xp", "o_pp", "o_kp", "b_p")

    @property
    def width(self):
        return nd.value(self.a_hh).shape[0]

    @property
    def point_dim(self):
        return self.t_len * self.d


def init_oracle(t_len: int, d: int, width: int = 16, seed: int = 0) -> OracleParams:
    """Seeded uniform init in [-0.5, 0.5]/sqrt(width), mirroring the model cell."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(width)
    n = t_len * d

    def draw(shape):
        return np.asarray(rng.uniform(-0.5, 0.5, size=shape) * scale)

    return OracleParams(
        a_hh=draw((width, width)), b_xh=draw((width, n)), b_ph=draw((width, n)),
        c_kh=draw((width,)), b_h=draw((width,)),
        o_hp=draw((n, width)), o_xp=draw((n, n)), o_pp=draw((n, n)),
        o_kp=draw((n,)), b_p=draw((n,)),
        t_len=t_len, d=d,
    )


def generate_anchors(oracle: OracleParams, baseline, x, k: int):
    """K anchor points of shape (T, d); deterministic in (params, X', X, K)."""
    if k < 1:
        raise ValueError("generate_anchors needs k >= 1")
    xv = sm.series_values(x)
    bv = sm.series_values(baseline)
    t_len, d = oracle.t_len, oracle.d
    if xv.shape != (t_len, d) or bv.shape != (t_len, d):
        raise ValueError(f"oracle expects ({t_len}, {d}) points")
    n = oracle.point_dim
    vec_x = xv.reshape(n)
    p = bv.reshape(n)
    h = np.zeros(oracle.width)
    anchors = []
    for i in range(1, k + 1):
        count = float(k - i + 1)
        p_next = nd.add(
            nd.add(nd.matvec(oracle.o_hp, h), nd.matvec(oracle.o_xp, vec_x)),
            nd.add(nd.add(nd.matvec(oracle.o_pp, p), nd.mul(oracle.o_kp, count)), oracle.b_p))
        h_next = nd.tanh(nd.add(
            nd.add(nd.matvec(oracle.a_hh, h), nd.matvec(oracle.b_xh, vec_x)),
            nd.add(nd.add(nd.matvec(oracle.b_ph, p), nd.mul(oracle.c_kh, count)), oracle.b_h)))
        p, h = p_next, h_next
        anchors.append(nd.reshape(p, (t_len, d)))
    return anchors


def expand_points(anchors, baseline, x, m: int) -> IntegrationPath:
    """M-point path: endpoints, the anchors in order, and the remaining points
    spread over segments proportionally to segment length, evenly inside each."""
    anchors = [nd.value(a) for a in anchors]
    k = len(anchors)
    if k < 1:
        raise ValueError("expand_points needs at least one anchor")
    if m < k + 2:
        raise ValueError(f"expand_points needs m >= k + 2 = {k + 2}")
    bv = sm.series_values(baseline)
    xv = sm.series_values(x)
    waypoints = [bv] + anchors + [xv]
    lengths = np.array([np.linalg.norm(waypoints[s + 1] - waypoints[s])
                        for s in range(k + 1)])
    extra = m - (k + 2)
    counts = _allocate(lengths, extra)
    pts = [bv]
    for s in range(k + 1):
        a, b = waypoints[s], waypoints[s + 1]
        for j in range(1, counts[s] + 1):
            pts.append(a + (j / (counts[s] + 1)) * (b - a))
        pts.append(b)
    return IntegrationPath(np.stack(pts), "oracle")


def _allocate(lengths: np.ndarray, extra: int) -> list[int]:
    """Largest-remainder split of `extra` slots proportional to lengths."""
    if extra == 0:
        return [0] * lengths.size
    total = lengths.sum()
    if total == 0:
        quotas = np.full(lengths.size, extra / lengths.size)
    else:
        quotas = extra * lengths / total
    counts = np.floor(quotas).astype(int)
    short = extra - counts.sum()
    order = sorted(range(lengths.size), key=lambda s: (-(quotas[s] - counts[s]), s))
    for s in order[:short]:
        counts[s] += 1
    return counts.tolist()


def path_loss(anchors, baseline, x):
    """Mean squared segment length over the K+1 segments; zero iff degenerate."""
    k = len(anchors)
    if k < 1:
        raise ValueError("path_loss needs at least one anchor")
    bv = sm.series_values(baseline)
    xv = sm.series_values(x)
    total = nd.reduce_sum(nd.square(nd.sub(bv, anchors[0])))
    total = nd.add(total, nd.reduce_sum(nd.square(nd.sub(xv, anchors[-1]))))
    for i in range(k - 1):
        total = nd.add(total, nd.reduce_sum(nd.square(nd.sub(anchors[i + 1], anchors[i]))))
    return nd.mul(total, 1.0 / (k + 1))


def validity_loss(anchors, assessor):
    """-(1/K) sum_i log score(p_i); nonnegative because scores stay <= 1."""
    if assessor is None:
        raise ValueError("validity_loss needs a fitted assessor")
    k = len(anchors)
    if k < 1:
        raise ValueError("validity_loss needs at least one anchor")
    total = 0.0
    for a in anchors:
        total = nd.add(total, assessor.log_score_ops(a))
    return nd.mul(total, -1.0 / k)


# ---------------------------------------------------------------------------
# validity assessor: diagonal Gaussian with median-0.9 calibration


@dataclass
class ValidityAssessor:
    """Per-feature location/scale plus a calibration shift and floor rho.

    score(p) = exp(clamp(mean-cell log density - median + log target)),
    clamped into [rho, 1]; the median training point scores exactly `target`.
    """

    mean: np.ndarray
    scale: np.ndarray
    median_log_density: float
    rho: float = 1e-6
    target: float = 0.9

    def __post_init__(self):
        self.mean = nd.as_array(self.mean)
        self.scale = nd.as_array(self.scale)
        if self.rho <= 0:
            raise ValueError("calibration floor rho must be positive")

    def _mean_log_density(self, p):
        z = nd.mul(nd.sub(p, self.mean), 1.0 / self.scale)
        const = float(np.mean(-np.log(self.scale) - 0.5 * LOG_2PI))
        return nd.add(nd.mean(nd.mul(-0.5, nd.square(z))), const)

    def log_score_ops(self, p):
        """Log score as a differentiable expression; value in [log rho, 0]."""
        shifted = nd.add(self._mean_log_density(p),
                         math.log(self.target) - self.median_log_density)
        lo = math.log(self.rho)
        capped = nd.sub(shifted, nd.relu(shifted))          # min(shifted, 0)
        return nd.add(lo, nd.relu(nd.sub(capped, lo)))      # max(capped, lo)

    def log_score(self, p) -> float:
        return float(nd.value(self.log_score_ops(sm.series_values(p))))

    def score(self, p) -> float:
        return math.exp(self.log_score(p))


def fit_assessor(dataset, rho: float = 1e-6, target: float = 0.9) -> ValidityAssessor:
    """Fit per-feature statistics and pin the median training score to `target`.

    Zero-variance features get their scale floored at 1e-6.
    """
    series = [sm.series_values(x) for x in dataset]
    if not series:
        raise ValueError("fit_assessor needs a nonempty dataset")
    cells = np.concatenate(series, axis=0)
    mean = cells.mean(axis=0)
    scale = np.maximum(cells.std(axis=0), 1e-6)
    probe = ValidityAssessor(mean, scale, median_log_density=0.0, rho=rho, target=target)
    dens = [float(nd.value(probe._mean_log_density(s))) for s in series]
    return ValidityAssessor(mean, scale, median_log_density=float(np.median(dens)),
                            rho=rho, target=target)


def flat_assessor(t_len: int, d: int, target: float = 0.9) -> ValidityAssessor:
    """Assessor whose score is constant (huge scales): validity gradient is zero."""
    scale = np.full(d, 1e6)
    median = float(np.mean(-np.log(scale) - 0.5 * LOG_2PI))
    return ValidityAssessor(np.zeros(d), scale, median_log_density=median, target=target)


def save_assessor(path, assessor: ValidityAssessor):
    payload = {
        "mean": assessor.mean.tolist(),
        "scale": assessor.scale.tolist(),
        "calibration": {
            "median_log_density": assessor.median_log_density,
            "target": assessor.target,
            "rho": assessor.rho,
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_assessor(path) -> ValidityAssessor:
    with open(path) as fh:
        payload = json.load(fh)
    cal = payload["calibration"]
    return ValidityAssessor(np.asarray(payload["mean"]), np.asarray(payload["scale"]),
                            median_log_density=cal["median_log_density"],
                            rho=cal["rho"], target=cal["target"])


# ---------------------------------------------------------------------------
# bi-objective oracle training


@dataclass
class OracleLossReport:
    path_term: float
    validity_term: float


def oracle_losses(oracle: OracleParams, assessor, pairs, k: int) -> OracleLossReport:
    """Mean path and validity losses over (baseline, input) pairs."""
    p_total, v_total = 0.0, 0.0
    for bv, xv in pairs:
        anchors = generate_anchors(oracle, bv, xv, k)
        p_total += float(nd.value(path_loss(anchors, bv, xv)))
        v_total += float(nd.value(validity_loss(anchors, assessor)))
    n = len(pairs)
    return OracleLossReport(path_term=p_total / n, validity_term=v_total / n)


@dataclass
class OracleStepRecord:
    step: int
    path_loss: float
    validity_loss: float
    case: str
    lam: float
    dot_g1: float
    dot_g2: float


@dataclass
class OracleTrainConfig:
    k: int = 2
    eta: float = 0.02
    batch_size: int = 8
    seed: int = 0
    eps_term: float = bo.EPS_TERM
    schedule: bo.LambdaSchedule = field(default_factory=lambda: bo.LambdaSchedule("dynamic"))


def train_oracle(oracle: OracleParams, assessor, dataset, cfg: OracleTrainConfig,
                 epochs: int, baseline=None):
    """Bi-objective descent on (path shortness, point validity); the assessor
    is frozen throughout. Returns the trained params and per-step history."""
    series = [sm.series_values(x) for x in dataset]
    if baseline is None:
        bv = sm.mean_baseline(series, oracle.t_len).values
    else:
        bv = sm.series_values(baseline)
    rng = np.random.default_rng(cfg.seed)
    history: list[OracleStepRecord] = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(series))
        for lo in range(0, len(series), cfg.batch_size):
            chunk = [series[i] for i in order[lo:lo + cfg.batch_size]]
            try:
                lifted, leaves = oracle.leaf_copy()
                p_total, v_total = 0.0, 0.0
                for xv in chunk:
                    anchors = generate_anchors(lifted, bv, xv, cfg.k)
                    p_total = nd.add(p_total, path_loss(anchors, bv, xv))
                    v_total = nd.add(v_total, validity_loss(anchors, assessor))
                p_loss = nd.mul(p_total, 1.0 / len(chunk))
                v_loss = nd.mul(v_total, 1.0 / len(chunk))
                g_path = oracle.grads_from(leaves, p_loss)
                g_valid = (oracle.grads_from(leaves, v_loss)
                           if isinstance(v_loss, nd.Node)
                           else oracle.with_flat(np.zeros(oracle.n_params)))
            except nd.NumericalOverflowError as exc:
                raise RuntimeError(f"oracle training diverged at step {step}: {exc}") from exc
            p_val, v_val = float(nd.value(p_loss)), float(nd.value(v_loss))
            if not (math.isfinite(p_val) and math.isfinite(v_val)):
                raise RuntimeError(f"oracle training diverged at step {step}")

            pair = bo.GradientPair(g_path.flatten(), g_valid.flatten())
            case = bo.classify_case(pair, cfg.eps_term)
            lam = bo.lambda_schedule(cfg.schedule, step, pair)
            if case in bo.NON_TERMINAL:
                res = bo.project(pair, lam, cfg.eps_term)
                v, dot1, dot2 = res.direction, res.dot_g1, res.dot_g2
            elif case == bo.CASE_G2_NEGLIGIBLE:
                v = pair.g1
                dot1, dot2 = float(v @ pair.g1), float(v @ pair.g2)
            elif case == bo.CASE_G1_NEGLIGIBLE:
                v = pair.g2
                dot1, dot2 = float(v @ pair.g1), float(v @ pair.g2)
            else:
                v, dot1, dot2 = None, 0.0, 0.0
            if v is not None:
                oracle = oracle.with_flat(oracle.flatten() - cfg.eta * v)
            history.append(OracleStepRecord(step, p_val, v_val, case, lam, dot1, dot2))
            step += 1
    return oracle, history


def build_oracle_path(oracle: OracleParams, baseline, x, k: int, m: int) -> IntegrationPath:
    """Anchors from the oracle expanded to an m-point integration path."""
    anchors = generate_anchors(oracle, baseline, x, k)
    return expand_points(anchors, baseline, x, m)


def write_oracle_history(path, records):
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "path_loss", "validity_loss", "case", "lambda",
                         "dot_g1", "dot_g2"])
        for r in records:
            writer.writerow([r.step, "%.17g" % r.path_loss, "%.17g" % r.validity_loss,
                             r.case, "%.17g" % r.lam, "%.17g" % r.dot_g1, "%.17g" % r.dot_g2])


def save_oracle(path, oracle: OracleParams):
    payload = {
        "version": sm.CHECKPOINT_VERSION,
        "role": "oracle",
        "h": oracle.width,
        "d": oracle.d,
        "T_free": False,
        "t_len": oracle.t_len,
        "params": sm._pack_arrays(oracle),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_oracle(path) -> OracleParams:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("role") != "oracle":
        raise ValueError(f"checkpoint {path} holds role {payload.get('role')!r}, expected an oracle")
    raw = payload["params"]
    kwargs = {name: sm._unpack_array(raw[name]) for name in OracleParams.ARRAY_FIELDS}
    return OracleParams(t_len=payload["t_len"], d=payload["d"], **kwargs)
