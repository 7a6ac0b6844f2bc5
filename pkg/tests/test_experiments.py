import csv
import glob
import json
import math
import os
from fractions import Fraction

import numpy as np
import pytest
import yaml

from fpp_flows.common import (
    ConfigError,
    DomainError,
    ExperimentAbortedError,
    Experiments,
    HypothesisError,
)
from fpp_flows.config import ExperimentConfig, default_height, default_replicates
from fpp_flows.distributions import INF, parse_distribution, shift
from fpp_flows.experiments import (
    EXPERIMENTS,
    EstimateSeries,
    Welford,
    check_mild,
    collect,
    continuity_experiment,
    convexity_check,
    estimate_nu,
    estimate_nu_tilde,
    event_rates,
    halfwidth,
    homogeneous,
    point_mass_check,
    positivity_check,
    prepare,
    replay,
    run,
    sample_record,
    triangle_weights,
    truncation_ladder,
)
from fpp_flows.lattice import Direction
from fpp_flows.utils.fileio import config_hash
from run_experiment import main

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")
ACCEPTANCE_CONFIGS = sorted(glob.glob(os.path.join(CONFIG_DIR, "*.yml")))
DESK_CONFIGS = sorted(glob.glob(os.path.join(CONFIG_DIR, "desk", "*.yml")))


def test_welford_matches_numpy():
    values = [0.5, 1.5, 2.0, 4.0, 4.5]
    stats = Welford()
    for v in values:
        stats.push(v)
    assert stats.n == 5
    assert math.isclose(stats.mean, np.mean(values))
    assert math.isclose(stats.var, np.var(values, ddof=1))
    assert halfwidth(0.0, 1) == math.inf


def test_series_excludes_infinite_samples():
    series = EstimateSeries("phi", "(0,1)")
    values = [Fraction(2)] * 19 + [INF]
    row = series.add(4, values, 4.0)
    assert row.n == 19
    assert row.infinite_count == 1
    assert row.mean == 0.5
    assert row.stddev == 0.0
    with pytest.raises(ExperimentAbortedError):
        series.add(8, [Fraction(1)] * 8 + [INF, INF], 1.0)


def test_check_mild():
    schedule = [4, 8, 16, 32]
    check_mild(schedule, [default_height(p) for p in schedule])
    check_mild(schedule, [2 * math.log(p) for p in schedule])
    with pytest.raises(DomainError):
        check_mild(schedule, [8, 4, 4, 4])
    with pytest.raises(DomainError):
        check_mild(schedule, [1, 4, 16, 64])


def test_default_schedule_helpers():
    assert [default_height(p) for p in (1, 4, 5, 16)] == [1, 2, 3, 4]
    assert default_replicates([4, 8, 16, 32]) == [64, 48, 32, 16]
    assert default_replicates([8]) == [64]


def test_triangle_weights():
    triangle = [Direction((1, 0)), Direction((0, 1)), Direction((1, 1))]
    weights = triangle_weights(triangle)
    assert np.allclose(weights, [math.sqrt(2) / 2, math.sqrt(2) / 2, 1.0])
    with pytest.raises(DomainError):
        triangle_weights([Direction((1, 0)), Direction((-1, 0)), Direction((1, 1))])
    with pytest.raises(DomainError):
        triangle_weights(triangle[:2])


def test_homogeneous_extension():
    assert math.isclose(homogeneous(2.0, (3, 4)), 10.0)


def test_estimate_nu_on_point_mass():
    series = estimate_nu(parse_distribution("1:1"), Direction.axis(2), [4, 8], replicates=[2, 2])
    assert series.means == [1.25, 1.125]
    assert all(row.halfwidth == 0 for row in series.rows)


def test_estimate_nu_rejects_wild_heights():
    with pytest.raises(DomainError):
        estimate_nu(parse_distribution("1:1"), Direction.axis(2), [4, 8], heights=[4, 2])
    with pytest.raises(HypothesisError):
        estimate_nu(parse_distribution("1:1/2, inf:1/2"), Direction.axis(2), [4])


def make_series(rows, label: str = "(0,1)") -> EstimateSeries:
    series = EstimateSeries("phi", label)
    for p, values in rows:
        series.add(p, [Fraction(v) for v in values], float(p))
    return series


def test_positivity_check_on_the_positive_side():
    law = parse_distribution("0:1/4, 1:3/4")
    assert positivity_check(make_series([(8, [4, 5]), (16, [7, 9])]), law, "1/2") is None
    message = positivity_check(make_series([(8, [4, 5]), (16, [0, 1])]), law, "1/2")
    assert "not above" in message
    scaled = parse_distribution("0:1/4, 4:3/4")
    assert "not above" in positivity_check(make_series([(16, [4, 4])]), scaled, "1/2")


def test_positivity_check_on_the_null_side():
    law = parse_distribution("0:3/4, 1:1/4")
    falling = make_series([(8, [2, 2]), (16, [1, 1]), (32, [1, 0])])
    assert positivity_check(falling, law, "1/2") is None
    settled = make_series([(8, [1, 0]), (16, [0, 0]), (32, [0, 0])])
    assert positivity_check(settled, law, "1/2") is None
    flat = make_series([(8, [2, 2]), (16, [4, 4])])
    assert "do not decrease" in positivity_check(flat, law, "1/2")
    slow = make_series([(8, [1, 1]), (16, [1, 1])])
    assert "not below" in positivity_check(slow, law, "1/2")


def test_point_mass_check():
    law = parse_distribution("1:1")
    axis = Direction.axis(2)
    assert point_mass_check(make_series([(4, [5, 5]), (8, [9, 9])]), law, axis) is None
    assert "is not" in point_mass_check(make_series([(4, [5, 5]), (8, [10, 10])]), law, axis)
    assert "approach" in point_mass_check(make_series([(4, [5, 5]), (8, [12, 12])]), law, axis)
    diagonal = make_series([(4, [6, 6]), (8, [11, 11])], "(1,1)")
    assert point_mass_check(diagonal, law, Direction((1, 1))) is None
    two_point = parse_distribution("1:1/2, 2:1/2")
    assert point_mass_check(make_series([(4, [5, 5])]), two_point, axis) is None


def synthetic_records(config: ExperimentConfig, values_by_p, events=None):
    return [
        sample_record(config, "phi", "(0,1)", p, r, Fraction(v), float(p), events=dict(events or {}))
        for p, values in values_by_p.items()
        for r, v in enumerate(values)
    ]


def test_estimate_nu_aggregate_checks_the_positivity_criterion():
    config = ExperimentConfig(distribution="0:3/4, 1:1/4", schedule=[8, 16], replicates=[2, 2])
    aggregate = EXPERIMENTS["estimate_nu"].aggregate
    report = aggregate(config, synthetic_records(config, {8: [2, 2], 16: [0, 0]}))
    assert report.passed
    report = aggregate(config, synthetic_records(config, {8: [2, 2], 16: [4, 4]}))
    assert not report.passed
    assert any("do not decrease" in message for message in report.failures)


def test_surgery_aggregate_requires_the_event_rate():
    config = ExperimentConfig(experiment="surgery", K="2", K0="1", schedule=[8, 16])
    held = {"event": True, "isCutset": True, "boundHolds": True, "addedBelowK0": True}
    missed = dict(held, event=False)
    records = synthetic_records(config, {8: [9] * 10}, missed)
    records += synthetic_records(config, {16: [17] * 19}, held)
    records += synthetic_records(config, {16: [17]}, missed)
    assert event_rates(records) == {8: 0, 16: Fraction(19, 20)}
    assert EXPERIMENTS["surgery"].aggregate(config, records).passed

    records += synthetic_records(config, {16: [17] * 2}, missed)
    report = EXPERIMENTS["surgery"].aggregate(config, records)
    assert not report.passed
    assert any("p=16" in message for message in report.failures)


def test_zero_regime_aggregate_requires_falling_means():
    config = ExperimentConfig(experiment="zero_regime", distribution="0:7/10, 1:3/10", K0="0")
    events = {"event": True, "isCutset": True, "boundHolds": True}
    aggregate = EXPERIMENTS["zero_regime"].aggregate
    falling = synthetic_records(config, {8: [4, 6], 16: [4, 4], 32: [2, 4]}, events)
    assert aggregate(config, falling).passed
    flat = synthetic_records(config, {8: [4, 4], 16: [8, 8], 32: [16, 16]}, events)
    report = aggregate(config, flat)
    assert not report.passed
    assert "do not decrease" in report.failures[0]



def test_truncation_ladder_is_monotone():
    report = truncation_ladder(
        parse_distribution("0:1/4, 1:1/4, 4:1/2"), ["1", "2", "4"], Direction.axis(2), 4, 4
    )
    assert report.monotone_violations == 0
    means = [row.mean for row in report.rungs] + [report.untruncated.mean]
    assert means == sorted(means)
    assert report.rungs[-1].mean == report.untruncated.mean


def test_continuity_with_constant_sequence():
    law = parse_distribution("0:1/4, 1:1/4, 2:1/2")
    report = continuity_experiment({2: law, 4: law}, law, Direction.axis(2), 4, 3)
    assert report.differences == {2: 0.0, 4: 0.0}
    assert report.coupling_violations == 0
    assert report.envelope_violations == 0


def test_continuity_with_shifted_point_mass():
    law = parse_distribution("1:1")
    shifted = {n: shift(law, Fraction(1, n)) for n in (2, 4)}
    report = continuity_experiment(shifted, law, Direction.axis(2), 4, 2)
    assert report.approximations[2].mean == 1.875
    assert report.differences == {2: 0.625, 4: 0.3125}
    assert report.differences_decrease
    assert report.coupling_violations == 0
    assert report.envelope_violations == 0
    assert report.edge_failures == 0


def test_estimate_nu_tilde_on_point_mass():
    law = parse_distribution("1:1")
    series = estimate_nu_tilde(law, law, 1, Direction.axis(2), [4], [2])
    assert series.functional == "tilde_phi"
    assert series.means == [1.25]
    with pytest.raises(HypothesisError):
        estimate_nu_tilde(parse_distribution("2:1"), law, 1, Direction.axis(2), [4], [2])


def test_convexity_check_on_point_mass():
    triangle = [Direction((1, 0)), Direction((0, 1)), Direction((1, 1))]
    report = convexity_check(parse_distribution("1:1"), triangle, 4, 2)
    assert set(report.estimates) == set(triangle)
    assert report.estimates[Direction((1, 0))].mean == 1.25
    assert report.estimates[Direction((0, 1))].mean == 1.25
    assert len(report.triangle) == 3
    assert len(report.lipschitz) == 3


def test_config_from_dict():
    config = ExperimentConfig.from_dict({"experiment": "annulus", "K": 2, "truncations": [1, 2]})
    assert config.K == "2"
    assert config.truncations == ["1", "2"]
    assert config.direction_list() == [Direction((0, 1))]
    assert config.height_for(16) == 4
    assert config.replicates_for(32) == 16


@pytest.mark.parametrize(
    "data",
    [
        {"colour": "red"},
        {"experiment": "nothing"},
        {"distribution": 1},
        {"schedule": [8, 4]},
        {"L": 3},
        {"dimension": 3, "directions": [[0, 1]]},
        {"replicates": [1, 2, 2, 2]},
    ],
)
def test_config_rejects(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_prepare_checks_hypotheses():
    with pytest.raises(HypothesisError):
        prepare(ExperimentConfig(distribution="1:1/2, inf:1/2"))
    with pytest.raises(ConfigError):
        prepare(ExperimentConfig(experiment="surgery", K="1", K0="1"))
    with pytest.raises(ConfigError):
        prepare(ExperimentConfig(experiment="zero_regime", directions=[[1, 1]]))
    with pytest.raises(ConfigError):
        prepare(ExperimentConfig(experiment="convexity", directions=[[1, 0], [0, 1]]))
    with pytest.raises(HypothesisError):
        prepare(
            ExperimentConfig(
                experiment="nu_tilde", distribution="1:1/2, 2:1/2", distribution_F="1:1"
            )
        )


def read_csv(path: str):
    with open(path, "r") as f:
        return list(csv.DictReader(f))


def test_run_estimate_nu_writes_artifacts(tmp_path):
    config = ExperimentConfig(distribution="1:1", schedule=[4, 8], replicates=[2, 2])
    assert run(config, str(tmp_path)) == 0

    with open(tmp_path / "manifest.json", "r") as f:
        manifest = json.load(f)
    assert manifest["config_hash"] == config_hash(config.to_dict())
    assert manifest["seeds"] == [0, 1]
    assert "networkx" in manifest["versions"]

    rows = read_csv(str(tmp_path / "series.csv"))
    assert [int(row["p"]) for row in rows] == [4, 8]
    assert float(rows[0]["mean"]) == 1.25
    assert rows[0]["infiniteCount"] == "0"

    with open(tmp_path / "samples.jsonl", "r") as f:
        samples = [json.loads(line) for line in f]
    assert len(samples) == 4
    assert {s["value"] for s in samples if s["p"] == 8} == {"9"}


def test_replay_reproduces_a_sample():
    config = ExperimentConfig(
        distribution="0:1/4, 1:1/4, 2:1/2", schedule=[4, 8], replicates=[3, 3], seed=10
    )
    records = collect(config)
    again = replay(config, 8, 12)
    assert again == [r for r in records if r["p"] == 8 and r["seed"] == 12]
    with pytest.raises(ConfigError):
        replay(config, 8, 20)


def test_run_domination_on_closed_field(tmp_path):
    config = ExperimentConfig(
        experiment="domination", distribution="1:1", K="1", schedule=[1], replicates=[5]
    )
    assert run(config, str(tmp_path)) == 0
    rows = read_csv(str(tmp_path / "domination.csv"))
    assert rows[0]["freqY"] == rows[0]["freqX"] == "1.0"


def test_run_annulus(tmp_path):
    config = ExperimentConfig(
        experiment="annulus", distribution="1:1", schedule=[8], heights=[8], replicates=[2]
    )
    assert run(config, str(tmp_path)) == 0
    with open(tmp_path / "samples.jsonl", "r") as f:
        samples = [json.loads(line) for line in f]
    assert all(s["events"]["holds"] for s in samples)
    assert samples[0]["value"] == "9"


def test_cli_runs_a_config(tmp_path):
    path = tmp_path / "estimate.yml"
    with open(path, "w") as f:
        yaml.safe_dump({"distribution": "1:1", "schedule": [4], "replicates": [2]}, f)
    out = tmp_path / "runs"
    assert main(["estimate_nu", "--config", str(path), "--out", str(out), "--seed", "3"]) == 0
    assert os.path.exists(out / "estimate_nu" / "series.csv")
    with open(out / "estimate_nu" / "manifest.json", "r") as f:
        assert json.load(f)["config"]["seed"] == 3


def test_cli_exit_codes(tmp_path):
    path = tmp_path / "bad.yml"
    with open(path, "w") as f:
        yaml.safe_dump({"distribution": "1:1/2, inf:1/2"}, f)
    assert main(["estimate_nu", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert main(["replay", "--out", str(tmp_path)]) == 2
    assert main(["estimate_nu", "--config", str(tmp_path / "missing.yml")]) == 2


def test_cli_reports_an_exhausted_cluster_budget(tmp_path, caplog):
    path = tmp_path / "tiny_budget.yml"
    with open(path, "w") as f:
        yaml.safe_dump(
            {
                "distribution": "1:3/5, 2:2/5",
                "distribution_F": "1:3/5, 2:2/5",
                "K0": "1",
                "schedule": [8, 16],
                "replicates": [2, 2],
                "budget": 1,
            },
            f,
        )
    assert main(["nu_tilde", "--config", str(path), "--out", str(tmp_path)]) == 1
    assert "cluster budget" in caplog.text


@pytest.mark.slow
def test_workers_do_not_change_results():
    config = ExperimentConfig(
        distribution="0:1/4, 1:1/4, 2:1/2", schedule=[4, 8], replicates=[4, 4]
    )
    assert collect(config) == collect(config.replace(workers=2))


@pytest.mark.parametrize("name", Experiments.list())
def test_shipped_configs_load(name: str):
    path = os.path.join(CONFIG_DIR, f"{name}.yml")
    config = ExperimentConfig.load(path)
    assert config.experiment == name
    prepare(config)


@pytest.mark.parametrize(
    "path", ACCEPTANCE_CONFIGS + DESK_CONFIGS, ids=lambda p: os.path.relpath(p, CONFIG_DIR)
)
def test_every_config_file_prepares(path: str):
    prepare(ExperimentConfig.load(path))


@pytest.mark.slow
@pytest.mark.parametrize("path", ACCEPTANCE_CONFIGS, ids=os.path.basename)
def test_acceptance_config_passes(path: str, tmp_path):
    assert run(ExperimentConfig.load(path), str(tmp_path)) == 0


@pytest.mark.slow
def test_truncation_chain_over_two_hundred_seeds():
    law = parse_distribution("0:1/4, 1:1/4, 4:1/4, 16:1/4")
    report = truncation_ladder(law, ["1", "2", "4", "8"], Direction.axis(2), 8, 200)
    assert report.monotone_violations == 0


@pytest.mark.slow
def test_continuity_under_shrinking_shifts():
    law = parse_distribution("0:1/2, 1:1/2")
    shifted = {n: shift(law, Fraction(1, n)) for n in (2, 4, 8, 16)}
    report = continuity_experiment(shifted, law, Direction.axis(2), 8, 32)
    assert report.coupling_violations == 0
    assert report.envelope_violations == 0
    assert report.edge_failures == 0
    assert report.differences_decrease


@pytest.mark.slow
@pytest.mark.parametrize("name", ["subadditivity", "surgery", "zero_regime"])
def test_rerun_from_manifest_is_byte_identical(name: str, tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    desk = os.path.join(CONFIG_DIR, "desk", f"{name}.yml")
    code = main([name, "--config", desk, "--out", str(first)])
    manifest = first / name / "manifest.json"
    assert main([name, "--config", str(manifest), "--out", str(second)]) == code

    files = sorted(os.listdir(first / name))
    assert sorted(os.listdir(second / name)) == files
    for f in files:
        assert (first / name / f).read_bytes() == (second / name / f).read_bytes()
