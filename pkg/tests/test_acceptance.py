"""Acceptance suite: one test per gate, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete. The real-data smoke check (criterion 10) is
non-gating: it runs only when REGIONFLOW_CHICAGO_DIR points at a directory
holding trips.csv, regions.geojson, and one or more <target>.csv files.
"""

import json
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from regionflow.cli import main as cli_main
from regionflow.experiments import (
    ExperimentPlan,
    run_ablation,
    run_aug_grid,
    run_pipeline,
    run_transfer,
)
from regionflow.ingest import RegionSet, TripRecord, bin_trips, zscore, zscore_values
from regionflow.losses import BatchProjections, ProjectionPair, Temperatures, ntxent_timestep, total_loss
from regionflow.model import ModelConfig, init_model
from regionflow.probe import (
    ProbeConfig,
    evaluate,
    r2_score,
    raw_feature_matrix,
    ridge_fit,
)
from regionflow.testkit.gradcheck import gradient_check
from regionflow.testkit.oracle import OracleReport, oracle_total_loss
from regionflow.testkit.synth import gen_city
from regionflow.train import RegionEmbeddings, TrainConfig

# Desk-scale knobs for the heavier criteria. The recovery run (criterion 4)
# uses the full default configuration; the ablation and grid runs shrink the
# model and horizon to keep the suite inside a coffee break.
RECOVERY_NOISE = 0.3
RECOVERY_SEED = 23
DESK_MODEL = ModelConfig(hidden_channels=32, repr_dim=32, proj_dim=32, proj_hidden=32)
TINY_MODEL = ModelConfig(hidden_channels=8, repr_dim=8, proj_dim=8, proj_hidden=8)


def report(criterion: int, message: str) -> None:
    print(f"[criterion {criterion:2d}] PASS  {message}", flush=True)


def test_criterion_01_loss_oracle_equivalence():
    rng = np.random.default_rng(2024)
    temps = Temperatures()
    sizes = [(B, T, F) for B in (2, 4, 8) for T in (1, 8, 32) for F in (4, 16)]
    start = time.time()
    worst = 0.0
    for i in range(50):
        B, T, F = sizes[i % len(sizes)]
        def pair():
            return ProjectionPair(
                torch.tensor(rng.normal(size=(B, T, F))),
                torch.tensor(rng.normal(size=(B, T, F))),
            )
        batch = BatchProjections(inbound=pair(), outbound=pair(), joint=pair())
        produced = total_loss(batch, temps)
        reference = oracle_total_loss(batch, temps)
        produced_map = {
            "inbound": float(produced.inbound),
            "outbound": float(produced.outbound),
            "align": float(produced.align),
            "total": float(produced.total),
        }
        for key, value in reference.items():
            worst = max(worst, abs(value - produced_map[key]))
    elapsed = time.time() - start
    check = OracleReport(term_discrepancies={"worst": worst}, loss_tolerance=1e-5)
    assert check.passed(), f"worst discrepancy {worst:.2e}"
    assert elapsed < 60.0, f"oracle sweep took {elapsed:.1f}s"
    report(1, f"50 batches, max |vectorized - oracle| = {worst:.2e} in {elapsed:.1f}s")


def test_criterion_02_hand_computed_ntxent():
    z = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]], dtype=torch.float64)
    matrix, mean = ntxent_timestep(z, z.clone(), tau=1.0)
    expected = math.log(math.e + 2.0) - 1.0
    assert abs(float(matrix[0, 0]) - expected) < 1e-4
    assert abs(float(mean) - expected) < 1e-4
    report(2, f"orthonormal B=2 case = {float(mean):.6f} (ln(e+2)-1 = {expected:.6f})")


def test_criterion_03_gradient_check_full_tiny_model():
    model = init_model(replace(TINY_MODEL, dtype="float64"), seed=3)
    rng = np.random.default_rng(7)
    B, T = 4, 16
    views = {
        flow: (
            torch.tensor(rng.normal(size=(B, T, c)), dtype=torch.float64),
            torch.tensor(rng.normal(size=(B, T, c)), dtype=torch.float64),
        )
        for flow, c in (("inbound", 1), ("outbound", 1), ("joint", 2))
    }

    def loss_fn():
        projections, _ = model.forward_views(views)
        return total_loss(BatchProjections.from_views_output(projections),
                          Temperatures()).total

    start = time.time()
    check = gradient_check(loss_fn, dict(model.named_parameters()), step=1e-5)
    elapsed = time.time() - start
    assert check.max_rel_error < 1e-4, (
        f"max rel error {check.max_rel_error:.2e} at {check.worst_param}"
    )
    assert elapsed < 120.0, f"gradient check took {elapsed:.1f}s"
    report(3, f"{check.n_scalars} parameters, max rel error {check.max_rel_error:.2e} "
              f"in {elapsed:.1f}s")


@pytest.fixture(scope="module")
def recovery_city():
    return gen_city(60, horizon=336, noise_level=RECOVERY_NOISE, seed=RECOVERY_SEED)


def test_criterion_04_synthetic_recovery(recovery_city):
    start = time.time()
    dataset = zscore(recovery_city.series)
    target = recovery_city.target_table()
    probe_cfg = ProbeConfig()
    train_cfg = TrainConfig()

    report_eval, _, _ = run_pipeline(dataset, target, train_cfg, probe_cfg)
    encoder_r2 = report_eval.targets["indicator"].r2_mean

    raw = RegionEmbeddings(matrix=raw_feature_matrix(dataset),
                           region_ids=dataset.region_ids, source="raw")
    raw_r2 = evaluate(raw, target, probe_cfg).targets["indicator"].r2_mean

    elapsed = time.time() - start
    assert encoder_r2 >= 0.8, f"encoder probe {encoder_r2:.3f} < 0.8"
    assert encoder_r2 > raw_r2, (
        f"encoder probe {encoder_r2:.3f} does not exceed raw probe {raw_r2:.3f}"
    )
    assert elapsed < 600.0, f"recovery run took {elapsed:.0f}s"
    report(4, f"encoder R2 {encoder_r2:.3f} > raw R2 {raw_r2:.3f}, {elapsed:.0f}s")


def test_criterion_05_ablation_mechanics(recovery_city):
    # Full default scale: the joint encoder's alignment-driven training only
    # matures with the full step budget, and the directional claim is about
    # the properly trained model.
    dataset = zscore(recovery_city.series)
    plan = ExperimentPlan(
        kind="ablation",
        train=TrainConfig(),
        probe=ProbeConfig(),
        seeds=(0, 1, 2),
    )
    matrix = run_ablation(dataset, recovery_city.target_table(), plan)
    assert matrix.row_labels == ("outbound_only", "inbound_only", "no_align", "full")
    values = {row: matrix.cell(row, "indicator").value for row in matrix.row_labels}
    assert all(np.isfinite(v) for v in values.values())
    single_best = max(values["outbound_only"], values["inbound_only"])
    assert values["full"] >= single_best - 0.05, (
        f"full {values['full']:.3f} vs best single flow {single_best:.3f}"
    )
    report(5, "rows " + ", ".join(f"{r}={values[r]:.3f}" for r in matrix.row_labels))


def test_criterion_06_augmentation_grid():
    city = gen_city(16, horizon=168, noise_level=RECOVERY_NOISE, seed=23)
    dataset = zscore(city.series)
    plan = ExperimentPlan(
        kind="aug_grid",
        train=TrainConfig(epochs=3, model=DESK_MODEL),
        probe=ProbeConfig(runs=2, split_seeds=(0, 1)),
    )
    matrix = run_aug_grid(dataset, city.target_table(), plan)
    assert matrix.row_labels == ("scale", "jitter", "shift", "dropout")
    assert matrix.values.shape == (4, 4)
    assert np.all(np.isfinite(matrix.values)), "grid contains non-finite cells"
    assert all(cell.error is None for cell in matrix.cells.values())
    report(6, f"16/16 finite cells, mean R2 {np.nanmean(matrix.values):.3f}")


def test_criterion_07_transferability(recovery_city):
    source = zscore(recovery_city.series)
    target_city = gen_city(60, horizon=336, noise_level=RECOVERY_NOISE, seed=29,
                           name="target")
    target = zscore(target_city.series)
    train_cfg = TrainConfig()
    probe_cfg = ProbeConfig()
    r2, _, _ = run_transfer(source, target, target_city.target_table(),
                            train_cfg, probe_cfg)
    assert r2 >= 0.6, f"transfer probe R2 {r2:.3f} < 0.6"

    # Degenerate case: source == target must equal the in-city pipeline.
    tiny_train = TrainConfig(epochs=2, model=TINY_MODEL)
    tiny_probe = ProbeConfig(runs=2, split_seeds=(0, 1))
    small_city = gen_city(16, horizon=96, noise_level=0.5, seed=31)
    small = zscore(small_city.series)
    small_target = small_city.target_table()
    _, degenerate_report, _ = run_transfer(
        small, small, small_target, tiny_train, tiny_probe
    )
    direct_report, _, _ = run_pipeline(small, small_target, tiny_train, tiny_probe)
    assert degenerate_report.targets["indicator"].r2_runs == \
        direct_report.targets["indicator"].r2_runs
    report(7, f"cross-city R2 {r2:.3f} >= 0.6; source=target matches in-city runs")


def test_criterion_08_determinism_byte_identical(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "seed": 13,
        "synth": {"n_regions": 12, "horizon": 72, "noise_level": 0.5, "name": "det"},
        "train": {"epochs": 2, "model": TINY_MODEL.to_json()},
        "probe": {"runs": 2, "split_seeds": [0, 1]},
    }))
    synth_dir = tmp_path / "synth"
    assert cli_main(["synth", "--config", str(config), "--out", str(synth_dir)]) == 0
    series = synth_dir / "det_series.npz"

    outputs = {}
    for attempt in ("first", "second"):
        train_dir = tmp_path / attempt / "train"
        embed_dir = tmp_path / attempt / "embed"
        assert cli_main(["train", "--config", str(config), "--out", str(train_dir),
                         "--set", f"dataset.series={series}"]) == 0
        assert cli_main(["embed", "--config", str(config), "--series", str(series),
                         "--checkpoint", str(train_dir / "checkpoint.pt"),
                         "--out", str(embed_dir)]) == 0
        outputs[attempt] = {
            "log": (train_dir / "loss_log.jsonl").read_bytes(),
            "emb": (embed_dir / "embeddings.npz").read_bytes(),
        }
    assert outputs["first"]["log"] == outputs["second"]["log"]
    assert outputs["first"]["emb"] == outputs["second"]["emb"]
    report(8, "loss log and embeddings byte-identical across two runs")


def test_criterion_09_unit_exact_checks():
    # z-score of [1, 2, 3]
    normalized, _, _ = zscore_values(np.array([[[1.0], [2.0], [3.0]]]))
    np.testing.assert_allclose(
        normalized[0, :, 0], [-1.224745, 0.0, 1.224745], atol=1e-6
    )
    # mean predictor scores exactly zero
    y = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
    assert r2_score(y, np.full(5, y.mean())) == pytest.approx(0.0, abs=1e-12)
    # ridge against the pseudo-inverse oracle
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 8))
    target = rng.normal(size=50)
    weights, _ = ridge_fit(X, target, alpha=2.0)
    Xc = X - X.mean(axis=0)
    reference = np.linalg.pinv(Xc.T @ Xc + 2.0 * np.eye(8)) @ Xc.T @ (target - target.mean())
    assert np.abs(weights - reference).max() <= 1e-8
    # binning equals a naive counting oracle exactly
    region_ids = ("a", "b", "c")
    regions = RegionSet(region_ids=region_ids)
    trips = []
    for _ in range(500):
        origin, dest = rng.choice(region_ids, size=2)
        start = float(rng.integers(0, 24 * 3600))
        trips.append(TripRecord(str(origin), str(dest), start,
                                start + float(rng.integers(0, 7200))))
    series, _ = bin_trips(trips, regions, 0, 24 * 3600)
    naive = np.zeros((3, 24, 2), dtype=np.int64)
    index = {rid: i for i, rid in enumerate(region_ids)}
    for trip in trips:
        b = int(trip.start_time // 3600)
        if 0 <= b < 24:
            naive[index[trip.origin], b, 1] += 1
        b = int(trip.end_time // 3600)
        if 0 <= b < 24:
            naive[index[trip.destination], b, 0] += 1
    np.testing.assert_array_equal(series.counts, naive)
    report(9, "z-score, mean-predictor R2, ridge pinv oracle, binning oracle all exact")


def test_criterion_10_real_data_smoke_non_gating():
    data_dir = os.environ.get("REGIONFLOW_CHICAGO_DIR")
    if not data_dir:
        print("[criterion 10] SKIP  non-gating; set REGIONFLOW_CHICAGO_DIR to run "
              "the real-data smoke job (reference full-scale values are listed "
              "in the README, not asserted)", flush=True)
        pytest.skip("real-data smoke input not provided (non-gating)")
    data_dir = Path(data_dir)
    from regionflow.ingest import read_regions, read_trips_csv
    from regionflow.probe import read_targets_csv

    regions = read_regions(data_dir / "regions.geojson")
    trips = read_trips_csv(data_dir / "trips.csv")
    window_start = min(t.start_time for t in trips)
    window_start -= window_start % 3600
    horizon = 336 * 3600
    series, _ = bin_trips(trips, regions, window_start, window_start + horizon)
    dataset = zscore(series)
    targets = [
        read_targets_csv(path)
        for path in sorted(data_dir.glob("*.csv"))
        if path.name != "trips.csv"
    ]
    assert targets, "no target CSVs next to trips.csv"
    report_eval, _, _ = run_pipeline(dataset, targets, TrainConfig(), ProbeConfig())
    for name, result in report_eval.targets.items():
        assert np.isfinite(result.r2_mean), f"{name} produced a non-finite score"
    summary = ", ".join(f"{n}={r.r2_mean:.3f}" for n, r in report_eval.targets.items())
    report(10, f"full pipeline on real extract completed: {summary}")
