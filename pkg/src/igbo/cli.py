"""Experiment harness: synthetic data, assessor/oracle/DAG/model pipelines,
evaluation metrics, and batch reports.

Subcommands: gen-data, fit-assessor, train-oracle, build-dag, train-baseline,
train-igbo, evaluate, noise-probe. Configs are TOML, datasets CSV, reports
JSON, histories CSV. Every subcommand is deterministic given --seed. Exit
codes: 0 success, 1 contract violation, 2 usage error. IGBO_THREADS caps
worker parallelism for per-sample scoring.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import attribution as attr
from . import biopt as bo
from . import dagbuild as dgb
from . import pathoracle as po
from . import seqmodel as sm

FLOAT_FMT = "%.17g"


class CliError(Exception):
    """Contract violation surfaced to the user (exit code 1)."""


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("IGBO_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelCfg:
    h: int = 6
    t: int = 6
    d: int = 3
    activation: str = "tanh"


@dataclass
class DataCfg:
    kind: str = "gaussian"  # gaussian | banana
    coeffs: tuple = (2.0, 1.0, 0.5)
    noise: float = 0.05
    n_train: int = 48
    n_held: int = 24
    mu: float = 0.4
    lag: int = 1


@dataclass
class DagCfg:
    alpha: float = 0.9
    edges: tuple = ()  # ((u, v, eps, delta), ...) for a hand-specified DAG
    variance_mode: str = "auto"
    batch: int = 8  # samples per batch when estimating score statistics


@dataclass
class OracleCfg:
    k: int = 2
    m: int = 8
    width: int = 16
    epochs: int = 40
    eta: float = 0.05
    lam: str = "dynamic"
    batch_size: int = 8


@dataclass
class TrainCfg:
    eta: float = 0.05
    epochs: int = 40
    lam: str = "dynamic"
    batch_size: int = 12
    m: int = 6
    beta: float = 5.0
    baseline: str = "mean"  # mean | zero


@dataclass
class NoiseProbeCfg:
    sigma2: float = 0.0025
    batch_sizes: tuple = (64, 128)
    dim: int = 10
    draws: int = 10000
    lam: float = 0.5


@dataclass
class ExperimentConfig:
    seed: int | None = None
    model: ModelCfg = field(default_factory=ModelCfg)
    data: DataCfg = field(default_factory=DataCfg)
    dag: DagCfg = field(default_factory=DagCfg)
    oracle: OracleCfg = field(default_factory=OracleCfg)
    training: TrainCfg = field(default_factory=TrainCfg)
    noise_probe: NoiseProbeCfg = field(default_factory=NoiseProbeCfg)


def _fill(cls, table: dict):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, val in table.items():
        name = key.replace("-", "_")
        if name == "lambda":
            name = "lam"
        if name not in known:
            raise CliError(f"unknown config key {key!r} for {cls.__name__}")
        if isinstance(val, list):
            val = tuple(tuple(v) if isinstance(v, list) else v for v in val)
        kwargs[name] = val
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    cfg = ExperimentConfig(seed=raw.get("seed"))
    for section, cls in (("model", ModelCfg), ("data", DataCfg), ("dag", DagCfg),
                         ("oracle", OracleCfg), ("training", TrainCfg),
                         ("noise_probe", NoiseProbeCfg)):
        if section in raw:
            setattr(cfg, section, _fill(cls, raw[section]))
    return cfg


def resolve_seed(args, cfg: ExperimentConfig) -> int:
    seed = args.seed if args.seed is not None else cfg.seed
    if seed is None:
        raise CliError("a seed is mandatory: pass --seed or set it in the config")
    return int(seed)


# ---------------------------------------------------------------------------
# synthetic data


def _gen_features(rng, kind: str, t_len: int, d: int) -> np.ndarray:
    if kind == "gaussian":
        return rng.normal(size=(t_len, d))
    if kind == "banana":
        # one linear coordinate plus curved coordinates riding the same
        # latent; straight chords between samples leave the curve
        if d < 2:
            raise CliError("banana generator needs d >= 2")
        u = rng.normal(size=t_len)
        x = np.empty((t_len, d))
        x[:, 0] = u
        for k in range(1, d):
            x[:, k] = u * u / np.sqrt(2.0) + 0.05 * rng.normal(size=t_len)
        return x
    raise CliError(f"unknown data kind {kind!r}")


def make_dataset(data_cfg: DataCfg, model_cfg: ModelCfg, n_series: int, seed: int):
    """Series with targets y_t = c.x_t + mu*tanh(c.x_{t-lag}) + noise."""
    if model_cfg.d < 2 or model_cfg.t < 2:
        raise CliError("data generation needs d >= 2 and T >= 2")
    coeffs = np.asarray(data_cfg.coeffs, dtype=float)
    if coeffs.size != model_cfg.d:
        raise CliError(f"need {model_cfg.d} coefficients, got {coeffs.size}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_series):
        x = _gen_features(rng, data_cfg.kind, model_cfg.t, model_cfg.d)
        drive = x @ coeffs
        y = drive.copy()
        if data_cfg.mu != 0.0 and data_cfg.lag > 0:
            lagged = np.zeros_like(drive)
            lagged[data_cfg.lag:] = drive[:-data_cfg.lag]
            y = y + data_cfg.mu * np.tanh(lagged)
        if data_cfg.noise > 0:
            y = y + rng.normal(scale=data_cfg.noise, size=y.shape)
        out.append((x, y))
    return out


def write_dataset(path, dataset):
    d = dataset[0][0].shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "t"] + [f"x_{k}" for k in range(d)] + ["y"])
        for sid, (x, y) in enumerate(dataset):
            for t in range(x.shape[0]):
                row = [sid, t] + [FLOAT_FMT % v for v in x[t]] + [FLOAT_FMT % y[t]]
                writer.writerow(row)


def load_dataset(path):
    if not os.path.exists(path):
        raise CliError(f"dataset file not found: {path}")
    groups: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len(header) - 3
        for row in reader:
            sid, t = int(row[0]), int(row[1])
            groups.setdefault(sid, []).append((t, [float(v) for v in row[2:2 + d]],
                                               float(row[2 + d])))
    dataset = []
    for sid in sorted(groups):
        rows = sorted(groups[sid])
        x = np.array([r[1] for r in rows])
        y = np.array([r[2] for r in rows])
        dataset.append((x, y))
    return dataset


# ---------------------------------------------------------------------------
# shared pieces


def _require(path, what):
    if path is None:
        raise CliError(f"missing required path for {what}")
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _baseline_array(kind: str, dataset, t_len: int) -> np.ndarray:
    xs = [x for x, _ in dataset]
    if kind == "zero":
        return np.zeros_like(xs[0])
    if kind == "mean":
        return sm.mean_baseline(xs, t_len).values
    raise CliError(f"unknown baseline kind {kind!r}")


def _attribution_config(cfg: ExperimentConfig, dataset, oracle: po.OracleParams | None):
    t_len = dataset[0][0].shape[0]
    baseline = _baseline_array(cfg.training.baseline, dataset, t_len)
    builder = None
    if oracle is not None:
        k, m = cfg.oracle.k, cfg.oracle.m
        builder = lambda x, b: po.build_oracle_path(oracle, b, x, k, m)
    return bo.AttributionConfig(m=cfg.training.m, beta=cfg.training.beta,
                                baseline=baseline, path_builder=builder)


def _score_batches(params, dataset, acfg, batch: int) -> dgb.ScoreBatches:
    xs = [x for x, _ in dataset]
    scores = bo.score_matrix(params, xs, acfg, workers=worker_count())
    scores = np.clip(scores, 0.0, 1.0)
    groups = [scores[i:i + batch] for i in range(0, len(xs), batch)]
    groups = [g for g in groups if g.shape[0] == batch]
    if not groups:
        raise CliError("not enough samples to form a single score batch")
    return dgb.batch_stats(groups)


def _dag_from_config(cfg: DagCfg, d: int) -> dgb.InterpretabilityDag:
    names = [f"x{i}" for i in range(d)]
    edges = [dgb.DagEdge(int(u), int(v), float(e), float(dl)) for u, v, e, dl in cfg.edges]
    return dgb.InterpretabilityDag(names, edges, alpha=cfg.alpha, provenance="manual")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    train = make_dataset(cfg.data, cfg.model, cfg.data.n_train, seed)
    held = make_dataset(cfg.data, cfg.model, cfg.data.n_held, seed + 1)
    train_path = os.path.join(out_dir, "train.csv")
    held_path = os.path.join(out_dir, "held.csv")
    write_dataset(train_path, train)
    write_dataset(held_path, held)
    print(f"wrote {train_path} ({cfg.data.n_train} series) and "
          f"{held_path} ({cfg.data.n_held} series)")
    return 0


def cmd_fit_assessor(args) -> int:
    cfg = load_config(args.config)
    resolve_seed(args, cfg)
    dataset = load_dataset(_require(args.data, "dataset"))
    assessor = po.fit_assessor([x for x, _ in dataset])
    out = args.out or "assessor.json"
    po.save_assessor(out, assessor)
    print(f"wrote {out}")
    return 0


def cmd_train_oracle(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    dataset = load_dataset(_require(args.data, "dataset"))
    assessor = po.load_assessor(_require(args.assessor, "assessor"))
    t_len, d = dataset[0][0].shape
    k = args.k if args.k is not None else cfg.oracle.k
    oracle = po.init_oracle(t_len, d, width=cfg.oracle.width, seed=seed)
    ocfg = po.OracleTrainConfig(
        k=k, eta=args.eta if args.eta is not None else cfg.oracle.eta,
        batch_size=cfg.oracle.batch_size, seed=seed,
        schedule=bo.parse_lambda(args.lam or cfg.oracle.lam))
    epochs = args.epochs if args.epochs is not None else cfg.oracle.epochs
    baseline = _baseline_array(cfg.training.baseline, dataset, t_len)
    trained, history = po.train_oracle(oracle, assessor, [x for x, _ in dataset],
                                       ocfg, epochs, baseline=baseline)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "oracle.json")
    po.save_oracle(ckpt, trained)
    po.write_oracle_history(os.path.join(out_dir, "oracle_history.csv"), history)
    last = history[-1]
    print(f"wrote {ckpt}; final path_loss={last.path_loss:.5g} "
          f"validity_loss={last.validity_loss:.5g}")
    return 0


def cmd_build_dag(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    alpha = args.alpha if args.alpha is not None else cfg.dag.alpha
    out = args.out or "dag.json"
    if cfg.dag.edges:
        d = load_dataset(args.data)[0][0].shape[1] if args.data else cfg.model.d
        dag = _dag_from_config(cfg.dag, d)
        dgb.save_dag(out, dag)
        print(f"wrote {out} (hand-specified, {len(dag.edges)} edges)")
        return 0
    dataset = load_dataset(_require(args.data, "dataset"))
    params = sm.load_checkpoint(_require(args.model, "model checkpoint"))
    oracle = po.load_oracle(args.oracle) if args.oracle else None
    acfg = _attribution_config(cfg, dataset, oracle)
    batches = _score_batches(params, dataset, acfg, cfg.dag.batch)
    dag = dgb.build_dag(batches, alpha, variance_mode=cfg.dag.variance_mode)
    dgb.save_dag(out, dag)
    stats_path = os.path.splitext(out)[0] + "_stats.csv"
    with open(stats_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "v", "mean_diff", "sigma", "prob", "decision"])
        for u, v, md, sg, pr, dec in dgb.edge_table(batches, alpha, cfg.dag.variance_mode):
            writer.writerow([u, v, FLOAT_FMT % md, FLOAT_FMT % sg, FLOAT_FMT % pr, dec])
    print(f"wrote {out} ({len(dag.edges)} edges) and {stats_path}; seed={seed}")
    return 0


def _run_training(args, constrained: bool) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    dataset = load_dataset(_require(args.data, "dataset"))
    t_len, d = dataset[0][0].shape
    if constrained:
        dag = dgb.load_dag(_require(args.dag, "DAG file"))
        if len(dag.nodes) != d:
            raise CliError(f"DAG has {len(dag.nodes)} features, dataset has {d}")
    else:
        dag = dgb.InterpretabilityDag([f"x{i}" for i in range(d)], [])
    oracle = po.load_oracle(args.oracle) if args.oracle else None
    acfg = _attribution_config(cfg, dataset, oracle)
    params = sm.init_params(cfg.model.h, d, seed, activation=cfg.model.activation)
    tcfg = bo.TrainConfig(
        eta=args.eta if args.eta is not None else cfg.training.eta,
        batch_size=cfg.training.batch_size, seed=seed, attribution=acfg)
    epochs = args.epochs if args.epochs is not None else cfg.training.epochs
    schedule = bo.parse_lambda(args.lam or cfg.training.lam)
    trained, history = bo.train(params, dataset, dag, schedule, epochs, tcfg)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    name = "igbo" if constrained else "baseline"
    ckpt = os.path.join(out_dir, f"{name}.json")
    sm.save_checkpoint(ckpt, trained)
    bo.write_history(os.path.join(out_dir, f"{name}_history.csv"), history)
    last = history[-1]
    print(f"wrote {ckpt}; final task_loss={last.task_loss:.5g} "
          f"interp_loss={last.interp_loss:.5g}")
    return 0


def cmd_train_baseline(args) -> int:
    return _run_training(args, constrained=False)


def cmd_train_igbo(args) -> int:
    return _run_training(args, constrained=True)


def attribution_consistency(params, xs, acfg, seed: int, j_copies: int = 8,
                            scale: float = 0.01) -> float:
    """Mean pairwise cosine similarity of attribution tensors across J
    perturbed copies of each input (perturbation scale 0.01 of each feature's
    standard deviation)."""
    rng = np.random.default_rng(seed)
    feats = np.concatenate(xs, axis=0)
    sigma = np.maximum(feats.std(axis=0), 1e-12) * scale
    sims = []
    for x in xs:
        tensors = []
        for _ in range(j_copies):
            xp = x + rng.normal(size=x.shape) * sigma
            flat = np.asarray(attr.tig(params, acfg.path_for(xp)).values).reshape(-1)
            tensors.append(flat)
        for i in range(j_copies):
            for j in range(i + 1, j_copies):
                a, b = tensors[i], tensors[j]
                denom = np.linalg.norm(a) * np.linalg.norm(b)
                sims.append(float(a @ b / denom) if denom > 0 else 1.0)
    return float(np.mean(sims))


def evaluate_model(cfg: ExperimentConfig, params, dataset, dag, oracle, seed: int,
                   baseline_params=None, batch_size: int | None = None) -> dict:
    acfg = _attribution_config(cfg, dataset, oracle)
    xs = [x for x, _ in dataset]
    mse = sm.predictions_mse(params, dataset)

    per_edge = []
    satisfied = 0
    if dag.edges:
        scores = bo.score_matrix(params, xs, acfg, workers=worker_count())
        mean_scores = scores.mean(axis=0)
        for e in dag.edges:
            gap = float(mean_scores[e.src] - mean_scores[e.dst])
            ok = e.eps <= gap <= e.delta
            satisfied += ok
            per_edge.append({"src": dag.nodes[e.src], "dst": dag.nodes[e.dst],
                             "eps": e.eps, "delta": e.delta, "d": gap,
                             "satisfied": bool(ok)})
    rate = satisfied / len(dag.edges) if dag.edges else 1.0
    interp = bo.interp_value(params, xs, dag, acfg, batch_size)

    rel_delta = None
    if baseline_params is not None:
        base_mse = sm.predictions_mse(baseline_params, dataset)
        rel_delta = (mse - base_mse) / base_mse if base_mse > 0 else 0.0

    consistency = attribution_consistency(params, xs, acfg, seed)
    return {
        "mse": mse,
        "dag_satisfaction_rate": rate,
        "relative_accuracy_delta": rel_delta,
        "attribution_consistency": consistency,
        "interp_loss": interp,
        "edges": per_edge,
        "paths": "oracle" if oracle is not None else "linear",
        "seed": seed,
    }


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    params = sm.load_checkpoint(_require(args.model, "model checkpoint"))
    dataset = load_dataset(_require(args.data, "dataset"))
    dag = dgb.load_dag(_require(args.dag, "DAG file")) if args.dag else \
        dgb.InterpretabilityDag([f"x{i}" for i in range(dataset[0][0].shape[1])], [])
    oracle = po.load_oracle(args.oracle) if args.oracle else None
    baseline_params = sm.load_checkpoint(_require(args.baseline, "baseline checkpoint")) \
        if args.baseline else None
    if dag.edges and len(dag.nodes) != dataset[0][0].shape[1]:
        raise CliError(f"DAG has {len(dag.nodes)} features, dataset has "
                       f"{dataset[0][0].shape[1]}")
    report = evaluate_model(cfg, params, dataset, dag, oracle, seed,
                            baseline_params=baseline_params,
                            batch_size=args.batch_size)
    out = args.out or "report.json"
    with open(out, "w") as fh:
        json.dump(report, fh, indent=1)
    print(f"wrote {out}: mse={report['mse']:.5g} "
          f"satisfaction={report['dag_satisfaction_rate']:.3f} "
          f"consistency={report['attribution_consistency']:.5f}")
    return 0


def noise_probe(probe: NoiseProbeCfg, seed: int) -> dict:
    """Monte Carlo variance of the projected direction under gradient noise of
    variance sigma2/B, at an aligned and a conflicting operating point."""
    rng = np.random.default_rng(seed)
    dim = probe.dim
    g1 = rng.normal(size=dim)
    g1 /= np.linalg.norm(g1)
    orth = rng.normal(size=dim)
    orth -= (orth @ g1) * g1
    orth /= np.linalg.norm(orth)
    points = {
        "aligned": (g1, 0.6 * g1 + 0.8 * orth),
        "conflicting": (g1, -0.5 * g1 + np.sqrt(0.75) * orth),
    }
    batch_sizes = [int(b) for b in probe.batch_sizes]
    results = {}
    for name, (a, b) in points.items():
        variances = {}
        for bsz in batch_sizes:
            std = np.sqrt(probe.sigma2 / bsz)
            vs = np.empty((probe.draws, dim))
            for i in range(probe.draws):
                pair = bo.GradientPair(a + std * rng.normal(size=dim),
                                       b + std * rng.normal(size=dim))
                vs[i] = bo.project(pair, probe.lam).direction
            variances[str(bsz)] = float(np.sum(vs.var(axis=0)))
        ratios = {}
        for bsz in batch_sizes:
            if str(2 * bsz) in variances:
                ratios[f"{bsz}->{2 * bsz}"] = variances[str(bsz)] / variances[str(2 * bsz)]
        results[name] = {"variance": variances, "ratio": ratios}
    return {"sigma2": probe.sigma2, "draws": probe.draws, "points": results, "seed": seed}


def cmd_noise_probe(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    probe = cfg.noise_probe
    if args.batches:
        probe.batch_sizes = tuple(int(b) for b in args.batches.split(","))
    report = noise_probe(probe, seed)
    out = args.out or "noise_probe.json"
    with open(out, "w") as fh:
        json.dump(report, fh, indent=1)
    ratios = [f"{k}: {v:.3f}" for p in report["points"].values()
              for k, v in p["ratio"].items()]
    print(f"wrote {out}; variance ratios {', '.join(ratios)}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="igbo",
                                     description="constrained training pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, data=False, model=False, dag=False, oracle=False,
               baseline=False, train_flags=False):
        p.add_argument("--config", default=None, help="TOML experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output file or directory")
        if data:
            p.add_argument("--data", default=None, help="dataset CSV")
        if model:
            p.add_argument("--model", default=None, help="model checkpoint JSON")
        if dag:
            p.add_argument("--dag", default=None, help="DAG JSON")
        if oracle:
            p.add_argument("--oracle", default=None, help="oracle checkpoint JSON")
        if baseline:
            p.add_argument("--baseline", default=None, help="baseline checkpoint JSON")
        if train_flags:
            p.add_argument("--epochs", type=int, default=None)
            p.add_argument("--eta", type=float, default=None)
            p.add_argument("--lambda", dest="lam", default=None,
                           help='trade-off: float, "linear:a:b:steps", or "dynamic"')

    common(sub.add_parser("gen-data", help="write synthetic train/held CSVs"))
    common(sub.add_parser("fit-assessor", help="fit the validity assessor"), data=True)

    p = sub.add_parser("train-oracle", help="train the routing oracle")
    common(p, data=True, train_flags=True)
    p.add_argument("--assessor", default=None, help="assessor JSON")
    p.add_argument("--K", dest="k", type=int, default=None)

    p = sub.add_parser("build-dag", help="construct the interpretability DAG")
    common(p, data=True, model=True, oracle=True)
    p.add_argument("--alpha", type=float, default=None)

    common(sub.add_parser("train-baseline", help="task-loss-only training"),
           data=True, oracle=True, train_flags=True)
    common(sub.add_parser("train-igbo", help="constrained bi-objective training"),
           data=True, dag=True, oracle=True, train_flags=True)

    p = sub.add_parser("evaluate", help="metrics report for a checkpoint")
    common(p, data=True, model=True, dag=True, oracle=True, baseline=True)
    p.add_argument("--batch-size", type=int, default=None,
                   help="batch partition for the reported interp loss")

    p = sub.add_parser("noise-probe", help="projection variance vs batch size")
    common(p)
    p.add_argument("--batches", default=None, help="comma-separated batch sizes")

    return parser


HANDLERS = {
    "gen-data": cmd_gen_data,
    "fit-assessor": cmd_fit_assessor,
    "train-oracle": cmd_train_oracle,
    "build-dag": cmd_build_dag,
    "train-baseline": cmd_train_baseline,
    "train-igbo": cmd_train_igbo,
    "evaluate": cmd_evaluate,
    "noise-probe": cmd_noise_probe,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except (CliError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
