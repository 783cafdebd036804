import csv
import json

import numpy as np
import pytest

from igbo import biopt as bo
from igbo import cli
from igbo import dagbuild as dgb
from igbo import seqmodel as sm


def write_config(path, text):
    path.write_text(text)
    return str(path)


def linear_checkpoint(path, coeffs):
    """A perfectly fitted memoryless linear model y_t = c . x_t."""
    coeffs = np.asarray(coeffs, dtype=float)
    d = coeffs.size
    params = sm.SeqModelParams(
        w_hh=np.zeros((1, 1)), w_xh=np.zeros((1, d)), b_h=np.zeros(1),
        u_out=np.zeros(1), w_out=coeffs, c_out=np.array(0.0),
    )
    sm.save_checkpoint(path, params)
    return params


BASE_CONFIG = """
seed = 11
[model]
h = 3
t = 3
d = 3
[data]
kind = "gaussian"
coeffs = [2.0, 1.0, 0.0]
noise = 0.0
mu = 0.0
n_train = 16
n_held = 8
[training]
eta = 0.05
epochs = 2
batch_size = 4
m = 3
beta = 5.0
baseline = "zero"
[dag]
alpha = 0.5
batch = 4
"""


def test_gen_data_deterministic(tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", BASE_CONFIG)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(["gen-data", "--config", cfg, "--out", str(out1)]) == 0
    assert cli.main(["gen-data", "--config", cfg, "--out", str(out2)]) == 0
    assert (out1 / "train.csv").read_bytes() == (out2 / "train.csv").read_bytes()
    assert (out1 / "held.csv").read_bytes() == (out2 / "held.csv").read_bytes()


def test_gen_data_passthrough_target(tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", """
seed = 3
[model]
h = 2
t = 3
d = 2
[data]
coeffs = [1.0, 0.0]
noise = 0.0
mu = 0.0
n_train = 4
n_held = 2
""")
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 0
    data = cli.load_dataset(tmp_path / "train.csv")
    for x, y in data:
        assert np.allclose(y, x[:, 0])


def test_dataset_roundtrip(tmp_path):
    cfg = cli.ExperimentConfig()
    dataset = cli.make_dataset(cfg.data, cli.ModelCfg(t=4, d=3), 5, seed=9)
    path = tmp_path / "data.csv"
    cli.write_dataset(path, dataset)
    back = cli.load_dataset(path)
    for (x1, y1), (x2, y2) in zip(dataset, back):
        assert np.array_equal(x1, x2)
        assert np.array_equal(y1, y2)


def test_seed_is_mandatory(tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", "[model]\nh = 2\n")
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_missing_checkpoint_exits_one_naming_path(tmp_path, capsys):
    code = cli.main(["evaluate", "--seed", "1", "--model", str(tmp_path / "nope.json"),
                     "--data", str(tmp_path / "also-nope.csv")])
    assert code == 1
    err = capsys.readouterr().err
    assert "nope.json" in err


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == 2


def test_build_dag_alpha_half_recovers_coefficient_ordering(tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", BASE_CONFIG)
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 0
    ckpt = tmp_path / "model.json"
    linear_checkpoint(ckpt, [2.0, 1.0, 0.0])
    out = tmp_path / "dag.json"
    code = cli.main(["build-dag", "--config", cfg, "--data", str(tmp_path / "train.csv"),
                     "--model", str(ckpt), "--alpha", "0.5", "--out", str(out)])
    assert code == 0
    dag = dgb.load_dag(out)
    got = {(e.src, e.dst) for e in dag.edges}
    assert got == {(0, 1), (0, 2), (1, 2)}
    stats = (tmp_path / "dag_stats.csv").read_text().splitlines()
    assert stats[0] == "u,v,mean_diff,sigma,prob,decision"


def test_build_dag_hand_specified(tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", BASE_CONFIG + """
edges = [[0, 1, 0.05, 0.4], [1, 2, 0.05, 0.4]]
""")
    out = tmp_path / "dag.json"
    assert cli.main(["build-dag", "--config", cfg, "--out", str(out)]) == 0
    dag = dgb.load_dag(out)
    assert [(e.src, e.dst) for e in dag.edges] == [(0, 1), (1, 2)]


def test_train_and_evaluate_pipeline(tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", BASE_CONFIG + """
edges = [[0, 1, 0.01, 0.9]]
""")
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 0
    train_csv = str(tmp_path / "train.csv")
    assert cli.main(["build-dag", "--config", cfg, "--out", str(tmp_path / "dag.json")]) == 0
    assert cli.main(["train-baseline", "--config", cfg, "--data", train_csv,
                     "--out", str(tmp_path)]) == 0
    assert cli.main(["train-igbo", "--config", cfg, "--data", train_csv,
                     "--dag", str(tmp_path / "dag.json"), "--out", str(tmp_path)]) == 0
    code = cli.main(["evaluate", "--config", cfg, "--model", str(tmp_path / "igbo.json"),
                     "--data", train_csv, "--dag", str(tmp_path / "dag.json"),
                     "--baseline", str(tmp_path / "baseline.json"),
                     "--batch-size", "4", "--out", str(tmp_path / "report.json")])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert 0.0 <= report["dag_satisfaction_rate"] <= 1.0
    assert report["relative_accuracy_delta"] is not None
    assert report["paths"] == "linear"

    # the reported hinge value reproduces the final history row exactly
    with open(tmp_path / "igbo_history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[-1]["case"] == "final"
    assert abs(float(rows[-1]["interp_loss"]) - report["interp_loss"]) <= 1e-9


def test_evaluate_self_comparison_zero_delta(tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", BASE_CONFIG)
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 0
    ckpt = tmp_path / "model.json"
    linear_checkpoint(ckpt, [2.0, 1.0, 0.0])
    code = cli.main(["evaluate", "--config", cfg, "--model", str(ckpt),
                     "--data", str(tmp_path / "train.csv"),
                     "--baseline", str(ckpt), "--out", str(tmp_path / "r.json")])
    assert code == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["relative_accuracy_delta"] == 0.0
    assert report["dag_satisfaction_rate"] == 1.0  # no DAG supplied


def test_noise_probe_ratios(tmp_path):
    out = tmp_path / "probe.json"
    code = cli.main(["noise-probe", "--seed", "5", "--batches", "32,64",
                     "--out", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    for point in report["points"].values():
        for ratio in point["ratio"].values():
            assert 1.6 <= ratio <= 2.4


def test_score_matrix_thread_count_invariant(tmp_path):
    rng = np.random.default_rng(0)
    params = sm.init_params(3, 2, 4)
    xs = [rng.normal(size=(3, 2)) for _ in range(6)]
    acfg = bo.AttributionConfig(m=3, beta=5.0)
    one = bo.score_matrix(params, xs, acfg, workers=1)
    two = bo.score_matrix(params, xs, acfg, workers=2)
    assert np.array_equal(one, two)


def test_banana_generator_shape():
    data = cli.make_dataset(cli.DataCfg(kind="banana", coeffs=(1.0, 0.5), noise=0.0),
                            cli.ModelCfg(t=5, d=2), 3, seed=2)
    for x, y in data:
        assert np.allclose(x[:, 1], x[:, 0] ** 2 / np.sqrt(2.0), atol=0.3)
