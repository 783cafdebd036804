"""Bi-objective engine: projection of two gradients into a common descent
direction, termination-case classification, the hinge-interval loss over DAG
edges, trade-off schedules, and the constrained training loop.

Aligned gradients are blended convexly; conflicting ones are combined through
their mutual orthogonal complements, which keeps both inner products positive.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import attribution as attr
from . import dagbuild as dgb
from . import ndiff as nd
from . import seqmodel as sm

EPS_TERM = 1e-8

CASE_ALIGNED = "aligned"
CASE_CONFLICTING = "conflicting"
CASE_MAX_CONFLICT = "max_conflict"
CASE_G1_NEGLIGIBLE = "g1_negligible"
CASE_G2_NEGLIGIBLE = "g2_negligible"
NON_TERMINAL = (CASE_ALIGNED, CASE_CONFLICTING)


@dataclass
class GradientPair:
    """Two same-length gradient vectors; dot and norms are always recomputed."""

    g1: np.ndarray
    g2: np.ndarray
    dot: float = field(init=False)
    norm1: float = field(init=False)
    norm2: float = field(init=False)

    def __post_init__(self):
        self.g1 = nd.as_array(self.g1).reshape(-1)
        self.g2 = nd.as_array(self.g2).reshape(-1)
        if self.g1.shape != self.g2.shape:
            raise ValueError("gradient vectors must have equal length")
        self.dot = float(self.g1 @ self.g2)
        self.norm1 = float(np.linalg.norm(self.g1))
        self.norm2 = float(np.linalg.norm(self.g2))


def classify_case(pair: GradientPair, eps_term: float = EPS_TERM) -> str:
    """Termination-case label; negligibility takes precedence over sign checks.

    The negligibility threshold scales with dimension as eps_term * sqrt(p).
    """
    if eps_term <= 0:
        raise ValueError("eps_term must be positive")
    thresh = eps_term * math.sqrt(pair.g1.size)
    if pair.norm1 < thresh:
        return CASE_G1_NEGLIGIBLE
    if pair.norm2 < thresh:
        return CASE_G2_NEGLIGIBLE
    if pair.dot <= -(1.0 - 1e-12) * pair.norm1 * pair.norm2:
        return CASE_MAX_CONFLICT
    return CASE_ALIGNED if pair.dot >= 0 else CASE_CONFLICTING


@dataclass
class ProjectionResult:
    direction: np.ndarray
    case: str
    dot_g1: float  # v . g1, the first descent constant
    dot_g2: float  # v . g2, the second descent constant
    lam: float
    g2_perp1: np.ndarray | None = None
    g1_perp2: np.ndarray | None = None


def project(pair: GradientPair, lam: float, eps_term: float = EPS_TERM) -> ProjectionResult:
    """Combined direction with positive inner product against both gradients.

    Aligned: v = lam g1 + (1-lam) g2. Conflicting: v = lam g2_perp1 +
    (1-lam) g1_perp2, each term the complement of one gradient orthogonal to
    the other. Terminal cases are rejected.
    """
    if not 0.0 < lam < 1.0:
        raise ValueError("lam must lie strictly inside (0, 1)")
    case = classify_case(pair, eps_term)
    if case not in NON_TERMINAL:
        raise ValueError(f"project called in terminal case {case!r}")
    if case == CASE_ALIGNED:
        v = lam * pair.g1 + (1.0 - lam) * pair.g2
        g2p1 = g1p2 = None
    else:
        g2p1 = pair.g2 - (pair.dot / pair.norm1**2) * pair.g1
        g1p2 = pair.g1 - (pair.dot / pair.norm2**2) * pair.g2
        v = lam * g2p1 + (1.0 - lam) * g1p2
    return ProjectionResult(
        direction=v, case=case,
        dot_g1=float(v @ pair.g1), dot_g2=float(v @ pair.g2),
        lam=lam, g2_perp1=g2p1, g1_perp2=g1p2,
    )


def naive_feasible_interval(pair: GradientPair):
    """Open lambda interval where the plain convex combination descends both.

    For non-conflicting pairs the whole (0, 1) works; for conflicting pairs
    the interval is nonempty but strictly smaller.
    """
    if pair.dot >= 0:
        return 0.0, 1.0
    c = pair.dot
    lo = -c / (pair.norm1**2 - c)
    hi = pair.norm2**2 / (pair.norm2**2 - c)
    return lo, hi


def recover_tradeoff(pair: GradientPair, alpha: float, beta: float):
    """Invert the projection: find (lam, eta) with eta*P(g1,g2,lam) = alpha g1 + beta g2.

    Valid for alpha, beta > 0 (a simultaneous-descent combination). Aligned
    case is closed form; the conflicting case solves the 2x2 linear system
    obtained by matching g1/g2 coefficients.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("recover_tradeoff needs alpha, beta > 0")
    if pair.dot >= 0:
        return alpha / (alpha + beta), alpha + beta
    c, a2, b2 = pair.dot, pair.norm1**2, pair.norm2**2
    # with P = eta*lam and Q = eta*(1-lam):  -c P + a2 Q = alpha a2;  b2 P - c Q = beta b2
    mat = np.array([[-c, a2], [b2, -c]])
    rhs = np.array([alpha * a2, beta * b2])
    p_val, q_val = np.linalg.solve(mat, rhs)
    eta = p_val + q_val
    return p_val / eta, eta


# ---------------------------------------------------------------------------
# hinge-interval loss over DAG edges


@dataclass
class EdgePenaltyReport:
    """Per-edge batch-mean differences and penalties; total is their mean."""

    diffs: list
    penalties: list
    total: object  # float, or a graph node while differentiating


def interp_loss(scores, dag: dgb.InterpretabilityDag) -> EdgePenaltyReport:
    """Hinge penalties on batch-mean satisfaction gaps per edge.

    `scores` is a (|B|, d) matrix of per-sample per-feature scores (array or
    graph node). Per edge u -> v: d = mean(H_u - H_v), penalty =
    max(eps - d, 0) + max(d - delta, 0); total is the mean over edges.
    """
    if not dag.edges:
        raise ValueError("interp_loss needs a DAG with at least one edge")
    vals = nd.value(scores)
    if vals.ndim != 2 or vals.shape[0] < 1:
        raise ValueError("scores must be a (batch, features) matrix")
    d_features = vals.shape[1]
    for e in dag.edges:
        if not (0 <= e.src < d_features and 0 <= e.dst < d_features):
            raise ValueError(f"edge ({e.src}, {e.dst}) references unknown feature")
    mean_scores = nd.mean(scores, axis=0)
    diffs, penalties = [], []
    total = 0.0
    for e in dag.edges:
        gap = nd.sub(nd.at(mean_scores, e.src), nd.at(mean_scores, e.dst))
        pen = nd.add(nd.relu(nd.sub(e.eps, gap)), nd.relu(nd.sub(gap, e.delta)))
        diffs.append(gap)
        penalties.append(pen)
        total = nd.add(total, pen)
    total = nd.mul(total, 1.0 / len(dag.edges))
    if not isinstance(total, nd.Node):
        diffs = [float(x) for x in diffs]
        penalties = [float(x) for x in penalties]
        total = float(total)
    return EdgePenaltyReport(diffs=diffs, penalties=penalties, total=total)


# ---------------------------------------------------------------------------
# trade-off schedules


@dataclass
class LambdaSchedule:
    kind: str = "fixed"  # fixed | linear | dynamic
    value: float = 0.5
    start: float = 0.9
    end: float = 0.1
    horizon: int = 100


def parse_lambda(spec: str) -> LambdaSchedule:
    """Parse "0.5", "linear:0.9:0.1:100", or "dynamic"."""
    spec = spec.strip()
    if spec == "dynamic":
        return LambdaSchedule(kind="dynamic")
    if spec.startswith("linear:"):
        _, a, b, s = spec.split(":")
        return LambdaSchedule(kind="linear", start=float(a), end=float(b), horizon=int(s))
    return LambdaSchedule(kind="fixed", value=float(spec))


def lambda_schedule(schedule: LambdaSchedule, step: int, pair: GradientPair | None = None) -> float:
    """Trade-off value at a step; dynamic balances the gradient magnitudes."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if schedule.kind == "fixed":
        lam = schedule.value
    elif schedule.kind == "linear":
        frac = min(step, schedule.horizon) / schedule.horizon
        lam = schedule.start + (schedule.end - schedule.start) * frac
    elif schedule.kind == "dynamic":
        if pair is None:
            raise ValueError("dynamic schedule needs the gradient pair")
        denom = pair.norm1 + pair.norm2
        lam = 0.5 if denom == 0 else pair.norm2 / denom
        lam = min(max(lam, 0.05), 0.95)
    else:
        raise ValueError(f"unknown schedule kind {schedule.kind!r}")
    if not 0.0 < lam < 1.0:
        clamped = min(max(lam, 1e-3), 1.0 - 1e-3)
        warnings.warn(f"lambda {lam} outside (0, 1); clamped to {clamped}")
        lam = clamped
    return lam


# ---------------------------------------------------------------------------
# satisfaction scoring and the training loop


@dataclass
class AttributionConfig:
    """How satisfaction scores are computed during training and evaluation."""

    m: int = 8
    beta: float = 5.0
    baseline: np.ndarray | None = None  # (T, d); zeros when omitted
    path_builder: object = None  # callable (x, baseline) -> IntegrationPath

    def baseline_for(self, x) -> np.ndarray:
        xv = sm.series_values(x)
        if self.baseline is None:
            return np.zeros_like(xv)
        base = nd.as_array(self.baseline)
        if base.shape != xv.shape:
            raise ValueError("configured baseline shape does not match the input")
        return base

    def path_for(self, x) -> attr.IntegrationPath:
        base = self.baseline_for(x)
        if self.path_builder is not None:
            return self.path_builder(sm.series_values(x), base)
        return attr.linear_path(x, base, self.m)


def sample_scores(params: sm.SeqModelParams, x, cfg: AttributionConfig):
    """Per-feature satisfaction scores (d,) for one sample; follows node-ness
    of the parameters."""
    path = cfg.path_for(x)
    tensor = attr.tig(params, path)
    rep = attr.satisfaction(params, x, cfg.baseline_for(x), tensor, cfg.beta)
    return rep.scores


def score_matrix(params: sm.SeqModelParams, xs, cfg: AttributionConfig, workers: int = 1) -> np.ndarray:
    """(N, d) satisfaction scores for plain parameters, in input order."""
    xs = list(xs)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda x: sample_scores(params, x, cfg), xs))
    else:
        rows = [sample_scores(params, x, cfg) for x in xs]
    return np.stack([nd.value(r) for r in rows])


def interp_gradient(params: sm.SeqModelParams, xs, dag: dgb.InterpretabilityDag,
                    cfg: AttributionConfig):
    """Hinge loss over the batch and its parameter gradient (through the
    attribution integrals)."""
    lifted, leaves = params.leaf_copy()
    rows = [sample_scores(lifted, x, cfg) for x in xs]
    scores = nd.stack_rows(rows)
    report = interp_loss(scores, dag)
    total = report.total
    value_out = float(nd.value(total))
    if isinstance(total, nd.Node):
        grads = params.grads_from(leaves, total)
    else:  # hinge flat on this batch: zero gradient
        grads = params.with_flat(np.zeros(params.n_params))
    return value_out, grads


def interp_value(params: sm.SeqModelParams, xs, dag: dgb.InterpretabilityDag,
                 cfg: AttributionConfig, batch_size: int | None = None) -> float:
    """Mean hinge loss over sequential batches of `batch_size` (all-in-one
    batch when omitted); zero for an edgeless DAG."""
    xs = list(xs)
    if not dag.edges:
        return 0.0
    if batch_size is None or batch_size >= len(xs):
        chunks = [xs]
    else:
        chunks = [xs[i:i + batch_size] for i in range(0, len(xs), batch_size)]
    totals = []
    for chunk in chunks:
        scores = score_matrix(params, chunk, cfg)
        totals.append(interp_loss(scores, dag).total)
    return float(np.mean(totals))


@dataclass
class StepRecord:
    step: int
    task_loss: float
    interp_loss: float
    case: str
    lam: float
    dot_g1: float
    dot_g2: float
    eta: float


@dataclass
class TrainConfig:
    eta: float = 0.05
    batch_size: int = 12
    seed: int = 0
    eps_term: float = EPS_TERM
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    checkpoint_every: int | None = None
    checkpoint_dir: object = None


def train_step(params: sm.SeqModelParams, batch, dag: dgb.InterpretabilityDag,
               cfg: AttributionConfig, lam, eta: float,
               eps_term: float = EPS_TERM, step: int = 0):
    """One projected update. `lam` may be a float or a LambdaSchedule.

    Terminal handling: a negligible gradient falls back to the other one
    alone; maximally conflicting gradients skip the update and flag the step.
    Losses in the record are measured at the incoming parameters.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    batch = list(batch)
    task, g_task = sm.task_loss(params, batch)
    if dag.edges:
        hinge, g_hinge = interp_gradient(params, [x for x, _ in batch], dag, cfg)
    else:
        hinge, g_hinge = 0.0, params.with_flat(np.zeros(params.n_params))
    if not (math.isfinite(task) and math.isfinite(hinge)):
        raise RuntimeError(f"non-finite loss at step {step}: task={task}, interp={hinge}")

    pair = GradientPair(g_task.flatten(), g_hinge.flatten())
    case = classify_case(pair, eps_term)
    lam_val = float(lam) if isinstance(lam, (int, float)) else lambda_schedule(lam, step, pair)

    if case in NON_TERMINAL:
        res = project(pair, lam_val, eps_term)
        v = res.direction
        dot1, dot2 = res.dot_g1, res.dot_g2
    elif case == CASE_G2_NEGLIGIBLE:
        v = pair.g1
        dot1, dot2 = float(v @ pair.g1), float(v @ pair.g2)
    elif case == CASE_G1_NEGLIGIBLE:
        v = pair.g2
        dot1, dot2 = float(v @ pair.g1), float(v @ pair.g2)
    else:  # max conflict: no safe direction, skip and flag
        v = None
        dot1 = dot2 = 0.0

    new_params = params if v is None else params.with_flat(params.flatten() - eta * v)
    record = StepRecord(step=step, task_loss=task, interp_loss=hinge, case=case,
                        lam=lam_val, dot_g1=dot1, dot_g2=dot2, eta=eta)
    return new_params, record


def train(params: sm.SeqModelParams, dataset, dag: dgb.InterpretabilityDag,
          schedule: LambdaSchedule, epochs: int, cfg: TrainConfig):
    """Epoch loop over shuffled minibatches; deterministic given cfg.seed.

    History holds one record per update step plus a trailing "final" row with
    the losses of the returned parameters over the unshuffled batch partition
    (so an evaluation with the same partition reproduces it exactly).
    """
    dataset = list(dataset)
    rng = np.random.default_rng(cfg.seed)
    history: list[StepRecord] = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        for lo in range(0, len(dataset), cfg.batch_size):
            batch = [dataset[i] for i in order[lo:lo + cfg.batch_size]]
            params, record = train_step(params, batch, dag, cfg.attribution,
                                        schedule, cfg.eta, cfg.eps_term, step)
            history.append(record)
            step += 1
            if cfg.checkpoint_every and cfg.checkpoint_dir and step % cfg.checkpoint_every == 0:
                sm.save_checkpoint(f"{cfg.checkpoint_dir}/step{step:06d}.json", params)
    final_task = sm.predictions_mse(params, dataset)
    final_hinge = interp_value(params, [x for x, _ in dataset], dag,
                               cfg.attribution, cfg.batch_size)
    history.append(StepRecord(step=step, task_loss=final_task, interp_loss=final_hinge,
                              case="final", lam=float("nan"), dot_g1=0.0, dot_g2=0.0,
                              eta=0.0))
    return params, history


def write_history(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "task_loss", "interp_loss", "case", "lambda",
                         "dot_g1", "dot_g2", "eta"])
        for r in records:
            writer.writerow([r.step, "%.17g" % r.task_loss, "%.17g" % r.interp_loss,
                             r.case, "%.17g" % r.lam, "%.17g" % r.dot_g1,
                             "%.17g" % r.dot_g2, "%.17g" % r.eta])
