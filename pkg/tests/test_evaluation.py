import csv
import json

import numpy as np
import pytest

from podnn.data import MechanismSpec, apply_mechanism, build_dataset, ground_truth_inverse, synthetic_images
from podnn.evaluation import (ExperimentConfig, LabelProbe, OracleDiscriminator, convergence_iteration,
                              inversion_error, run_experiment, spread_diagnostic)
from podnn.images import image_grid, read_pgm, write_pgm
from podnn.metrics import MetricsRecord, read_metrics, write_metrics
from podnn.trainer import TrainConfig, Trainer, assign

SPECS = [MechanismSpec("translate", "left", 2), MechanismSpec("translate", "right", 2),
         MechanismSpec("contrast-invert")]


@pytest.fixture(scope="module")
def pair():
    return build_dataset(synthetic_images(96, size=8, seed=0), SPECS, seed=0)


def record(it, claims_by_mech, spread=None, phase="competitive", **kw):
    claims_by_mech = [list(map(int, row)) for row in claims_by_mech]
    n = len(claims_by_mech)
    return MetricsRecord(
        iteration=it, phase=phase, d_objective=kw.get("d_objective", -1.0), expert_loss=kw.get("expert_loss", 0.5),
        ortho_residual=1e-9, degenerate_count=0, claims=[sum(r) for r in claims_by_mech],
        spread=spread if spread is not None else [0.0] * n, score_std=[0.1] * n,
        claims_by_mechanism=claims_by_mech,
        score_by_mechanism=[[0.5] * len(claims_by_mech[0]) for _ in range(n)],
    )


# ----------------------------------------------------------------- oracle


def test_oracle_assignment_is_mechanism_perfect(pair):
    oracle = OracleDiscriminator(pair, 4, seed=3)
    assert sorted(oracle.designation) == sorted(set(oracle.designation)) and len(oracle.designation) == 3
    ids = np.arange(len(pair.d_q))
    labels = pair._hidden_labels
    scores = oracle(ids)
    assert set(np.unique(scores)) == {0.0, 1.0}
    for i, pts in enumerate(assign(scores)):
        for j in pts:
            assert oracle.designation[labels[j]] == i
    surplus = [e for e in range(4) if e not in oracle.designation]
    assert all(not assign(scores)[e] for e in surplus)


def test_oracle_needs_enough_experts(pair):
    with pytest.raises(ValueError):
        OracleDiscriminator(pair, 2)


def test_label_probe_fills_claims(pair):
    tr = Trainer(TrainConfig(mechanisms=SPECS, batch_size=8, seed=0), pair, probe=LabelProbe(pair))
    rec = tr.train_step(*tr._batch(0))
    cm = rec.claim_matrix()
    assert cm.shape == (3, 3) and cm.sum() == 8
    np.testing.assert_array_equal(cm.sum(axis=1), rec.claims)
    labels = pair._hidden_labels[tr.last_step.q_ids]
    for k in range(3):
        expect = tr.last_step.d_scores[:, labels == k].mean(axis=1) if (labels == k).any() else [None] * 3
        for i in range(3):
            if expect[i] is None:
                assert rec.score_by_mechanism[i][k] is None
            else:
                assert rec.score_by_mechanism[i][k] == pytest.approx(expect[i])


# --------------------------------------------------------------- measures


def test_inversion_error_exact_inverse_is_zero(rng):
    x = rng.uniform(size=(4, 1, 8, 8))
    for spec in SPECS:
        y = apply_mechanism(spec, x)
        assert inversion_error(ground_truth_inverse(spec, y), x, spec) == 0.0


def test_inversion_error_identity_on_contrast_closed_form(rng):
    p = (rng.uniform(size=(3, 1, 6, 6)) > 0.5).astype(float)
    spec = MechanismSpec("contrast-invert")
    got = inversion_error(apply_mechanism(spec, p), p, spec)
    assert got == pytest.approx(np.mean((1 - 2 * p) ** 2)) and got == 1.0
    q = rng.uniform(size=(3, 1, 6, 6))
    assert inversion_error(1 - q, q, spec) == pytest.approx(np.mean((1 - 2 * q) ** 2))


def test_inversion_error_ignores_lost_pixels(rng):
    x = rng.uniform(size=(2, 1, 6, 6))
    spec = MechanismSpec("translate", "right", 2)
    out = ground_truth_inverse(spec, apply_mechanism(spec, x))
    out[..., 4:] = 0.77  # garbage where information was lost
    assert inversion_error(out, x, spec) == 0.0
    with pytest.raises(ValueError):
        inversion_error(out[:1], x, spec)


def _stable(mapping, n_mech=3):
    m = np.zeros((len(mapping), n_mech), dtype=int)
    for e, k in enumerate(mapping):
        m[e, k] = 10
    return m


def test_convergence_iteration_examples():
    window = 20
    early = [[1, 0, 2], [2, 1, 0], [0, 2, 1], [1, 2, 0]]  # changes every 10 iterations
    log = [record(t, _stable(early[t // 10] if t < 40 else [0, 1, 2])) for t in range(70)]
    assert convergence_iteration(log, window) == 40
    hoard = np.array([[5, 5, 5], [0, 0, 0], [0, 0, 0]])
    assert convergence_iteration([record(t, hoard) for t in range(70)], window) is None
    assert convergence_iteration([record(t, _stable([0, 1, 2])) for t in range(30)], window) == 0
    assert convergence_iteration([record(t, _stable([0, 1, 2])) for t in range(19)], window) is None
    # standalone rows are ignored
    tail = [record(70 + t, hoard, phase="standalone") for t in range(5)]
    assert convergence_iteration(log + tail, window) == 40


def test_offline_convergence_matches_trainer(pair):
    oracle = OracleDiscriminator(pair, 3, seed=1)
    tr = Trainer(TrainConfig(mechanisms=SPECS, batch_size=8, window=4, max_iterations=12, seed=0), pair,
                 probe=LabelProbe(pair))
    for t in range(12):
        tr.train_step(*tr._batch(t))
        online = tr.check_convergence()
        offline = convergence_iteration(tr.records, 4)
        assert offline == (online.iteration if online.converged else None)
    tr2 = Trainer(TrainConfig(mechanisms=SPECS, batch_size=8, window=4, max_iterations=12, seed=0), pair,
                  probe=LabelProbe(pair), score_override=oracle)
    res = tr2.run(standalone=False)
    assert res.converged and convergence_iteration(tr2.records, 4) == res.iteration == 0


def test_spread_diagnostic_counts():
    recs = [
        # expert 0 holds mechanisms 0 and 1, above the median spread
        record(0, [[8, 7, 0], [1, 0, 9], [0, 1, 0]], spread=[2.0, 1.0, 0.0]),
        # expert 0 holds 0 and 1 but sits below the median
        record(1, [[8, 7, 0], [1, 0, 9], [0, 1, 0]], spread=[0.5, 1.0, 3.0]),
        # everyone holds exactly one
        record(2, [[8, 0, 0], [0, 8, 0], [0, 0, 8]], spread=[1.0, 2.0, 3.0]),
    ]
    d = spread_diagnostic(recs)
    assert d["multi_iterations"] == 2 and d["multi_above_median"] == 1 and d["multi_fraction"] == 0.5
    single = d["single_by_mechanism"]
    # mechanism 2 is held by expert 1 in iterations 0-1 and by expert 2 in iteration 2
    assert single[2] == {"iterations": 3, "above_median": 1, "fraction": 1 / 3}
    assert single[0]["iterations"] == 1 and single[0]["above_median"] == 0


# ---------------------------------------------------------------- metrics


def test_metrics_round_trip(tmp_path):
    recs = [record(0, [[1, 2], [3, 0]], spread=[0.1, 1 / 3]), record(1, [[0, 0], [4, 2]])]
    recs[0].reloc_donor, recs[0].reloc_recipient, recs[0].reloc_moved = 1, 0, 2
    recs[1].score_by_mechanism[0][1] = None
    recs[1].d_objective = None
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_metrics(p1, recs, 2, 2)
    back, e, m = read_metrics(p1)
    assert (e, m) == (2, 2)
    assert back == recs
    write_metrics(p2, back, 2, 2)
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == "#schema=podnn-metrics/1"
    assert lines[1].startswith("iteration,phase,d_objective")


def test_metrics_without_labels_and_bad_schema(tmp_path):
    rec = record(0, [[1, 2], [3, 0]])
    rec.claims_by_mechanism = rec.score_by_mechanism = None
    write_metrics(tmp_path / "m.csv", [rec], 2, 2)
    back, _, _ = read_metrics(tmp_path / "m.csv")
    assert back[0].claims_by_mechanism is None and back[0] == rec
    (tmp_path / "bad.csv").write_text("iteration\n0\n")
    with pytest.raises(ValueError):
        read_metrics(tmp_path / "bad.csv")


def test_claim_counts_sum_to_batch(pair):
    tr = Trainer(TrainConfig(mechanisms=SPECS, batch_size=8, seed=2), pair, probe=LabelProbe(pair))
    for t in range(3):
        rec = tr.train_step(*tr._batch(t))
        assert sum(rec.claims) == 8 and rec.claim_matrix().sum() == 8


# ------------------------------------------------------------------ images


def test_pgm_round_trip(tmp_path, rng):
    rows = [rng.uniform(size=(3, 1, 4, 5)) for _ in range(2)]
    grid = image_grid(rows)
    assert grid.shape == (8, 15)
    np.testing.assert_array_equal(grid[4:8, 5:10], rows[1][1, 0])
    write_pgm(tmp_path / "g.pgm", grid)
    back = read_pgm(tmp_path / "g.pgm")
    assert back.shape == (8, 15) and np.max(np.abs(back - grid)) <= 0.5 / 255 + 1e-12
    with pytest.raises(ValueError):
        image_grid([rows[0], rows[1][:2]])


# ------------------------------------------------------------- experiments

TINY = dict(seeds=[0, 1], n_images=96, image_size=8,
            mechanisms=[s.to_dict() for s in SPECS[:2]],
            trainer={"batch_size": 8, "max_iterations": 4, "window": 2},
            oracle_iterations=2, n_eval=16, timing_iterations=2, balance_seeds=[0],
            severities=[1, 2], real_severities=[1])


def test_unknown_kind_rejected(tmp_path):
    with pytest.raises(ValueError, match="unknown experiment kind"):
        run_experiment("fig-5", ExperimentConfig.from_dict(TINY), tmp_path)


def test_experiment_config_strict():
    with pytest.raises(ValueError, match="unknown experiment keys"):
        ExperimentConfig.from_dict({"sedes": [0]})
    with pytest.raises(ValueError, match="unknown trainer keys"):
        ExperimentConfig.from_dict({"trainer": {"orthogonalisation": True}})


def test_rp_sweep_rows(tmp_path):
    doc = run_experiment("rp-sweep", ExperimentConfig.from_dict(TINY), tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "rp-sweep.csv")))
    assert [float(r["rp"]) for r in rows] == [0.1, 0.3, 0.5, 0.9]
    assert len(doc["result"]["rows"]) == 4
    assert json.loads((tmp_path / "summary.json").read_text())["kind"] == "rp-sweep"


@pytest.mark.parametrize("kind,rows", [("convergence-compare", 4), ("timing", 4), ("oracle-severity", 4),
                                       ("real-severity", 4), ("relocation-balance", 2)])
def test_experiment_kinds_write_reports(tmp_path, kind, rows):
    doc = run_experiment(kind, ExperimentConfig.from_dict(TINY), tmp_path)
    table = list(csv.DictReader(open(tmp_path / f"{kind}.csv")))
    assert len(table) == rows
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["kind"] == kind and summary["result"] == json.loads(json.dumps(doc["result"]))
    if kind == "timing":
        assert set(summary["result"]["mean_step_seconds"]) == {"with", "without"}
        assert "overhead_percent" in summary["result"]
    if kind == "oracle-severity":
        assert set(summary["result"]["mean_mse"]) == {"1px", "2px"}
