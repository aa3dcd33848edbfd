import io

import numpy as np
import pytest

from kneepoint.dataset import (
    GLOBAL_KEY,
    Normalizer,
    SyntheticConfig,
    TimeSeriesInstance,
    apply_normalizer,
    condition_key,
    fit_normalizer,
    format_cmapss,
    format_csv,
    format_truth_csv,
    generate_synthetic,
    parse_cmapss,
    parse_csv,
    parse_truth_csv,
)
from kneepoint.errors import DataError


def _cmapss_row(unit, cycle, settings, sensors):
    return " ".join([str(unit), str(cycle)] + [repr(v) for v in settings + sensors])


def _simple_instance(unit=1, rows=6, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return TimeSeriesInstance(
        unit_id=unit,
        sensors=rng.normal(size=(rows, d)),
        op_settings=np.zeros((rows, 3)),
    )


# --- turbofan format ---------------------------------------------------------


def test_parse_cmapss_two_rows_one_unit():
    settings = [0.1, 0.2, 100.0]
    sensors = [float(i) for i in range(21)]
    text = "\n".join(
        [_cmapss_row(1, 1, settings, sensors), _cmapss_row(1, 2, settings, sensors)]
    )
    instances = parse_cmapss(io.StringIO(text))
    assert len(instances) == 1
    assert instances[0].cycles == 2
    assert instances[0].sensors.shape == (2, 21)
    assert instances[0].op_settings.shape == (2, 3)


def test_parse_cmapss_empty_input():
    assert parse_cmapss(io.StringIO("")) == []


def test_parse_cmapss_wrong_column_count_names_line():
    good = _cmapss_row(1, 1, [0.0] * 3, [0.0] * 21)
    bad = " ".join(["1", "2"] + ["0.0"] * 23)  # 25 columns
    with pytest.raises(DataError, match="line 2"):
        parse_cmapss(io.StringIO(good + "\n" + bad))


def test_parse_cmapss_noncontiguous_cycles_names_unit():
    rows = [
        _cmapss_row(3, 1, [0.0] * 3, [0.0] * 21),
        _cmapss_row(3, 3, [0.0] * 3, [0.0] * 21),
    ]
    with pytest.raises(DataError, match="unit 3"):
        parse_cmapss(io.StringIO("\n".join(rows)))


def test_cmapss_round_trip():
    rng = np.random.default_rng(4)
    instances = [
        TimeSeriesInstance(
            unit_id=u,
            sensors=rng.normal(size=(5 + u, 21)),
            op_settings=rng.normal(size=(5 + u, 3)),
        )
        for u in (1, 2)
    ]
    text = format_cmapss(instances)
    back = parse_cmapss(io.StringIO(text))
    assert len(back) == 2
    for a, b in zip(instances, back):
        assert a.unit_id == b.unit_id
        assert np.array_equal(a.sensors, b.sensors)
        assert np.array_equal(a.op_settings, b.op_settings)


# --- generic csv --------------------------------------------------------------


def test_csv_round_trip_with_settings():
    rng = np.random.default_rng(8)
    instances = [
        TimeSeriesInstance(
            unit_id=u,
            sensors=rng.normal(size=(4, 2)),
            op_settings=rng.normal(size=(4, 3)),
        )
        for u in (1, 5)
    ]
    text = format_csv(instances)
    assert text.splitlines()[0] == "unit,cycle,setting1,setting2,setting3,s1,s2"
    back = parse_csv(io.StringIO(text))
    for a, b in zip(instances, back):
        assert a.unit_id == b.unit_id
        assert np.array_equal(a.sensors, b.sensors)
        assert np.array_equal(a.op_settings, b.op_settings)


def test_csv_requires_unit_cycle_header():
    with pytest.raises(DataError, match="header"):
        parse_csv(io.StringIO("id,time,f1\n1,1,0.5\n"))


def test_csv_empty_stream_is_empty_list():
    assert parse_csv(io.StringIO("")) == []


# --- normalizer ---------------------------------------------------------------


def test_fit_normalizer_masks_constant_feature():
    sensors = np.column_stack([np.full(8, 5.0), np.arange(8.0)])
    inst = TimeSeriesInstance(unit_id=1, sensors=sensors, op_settings=np.zeros((8, 1)))
    norm = fit_normalizer([inst], healthy_fraction=1.0, mode="global")
    assert norm.feature_mask == (1,)
    out = apply_normalizer(norm, inst)
    assert out.shape == (8, 1)


def test_fit_normalizer_population_std_hand_value():
    sensors = np.array([[1.0], [3.0], [9.0], [9.0]])
    inst = TimeSeriesInstance(unit_id=1, sensors=sensors, op_settings=np.zeros((4, 1)))
    norm = fit_normalizer([inst], healthy_fraction=0.5, mode="global")
    mean, std = norm.groups[GLOBAL_KEY]
    assert mean[0] == pytest.approx(2.0)  # first half only: {1, 3}
    assert std[0] == pytest.approx(1.0)  # ddof=0


def test_fit_normalizer_all_masked_is_error():
    inst = TimeSeriesInstance(
        unit_id=1, sensors=np.full((6, 2), 3.3), op_settings=np.zeros((6, 1))
    )
    with pytest.raises(DataError, match="masked"):
        fit_normalizer([inst], healthy_fraction=1.0, mode="global")


def test_fit_normalizer_rejects_short_healthy_prefix():
    inst = _simple_instance(rows=3)
    with pytest.raises(ValueError, match="healthy_fraction"):
        fit_normalizer([inst], healthy_fraction=0.5, mode="global")


def test_apply_normalizer_hand_value():
    sensors = np.array([[5.0, 7.0]] * 3 + [[7.0, 7.0]] * 3)
    inst = TimeSeriesInstance(unit_id=1, sensors=sensors, op_settings=np.zeros((6, 1)))
    norm = Normalizer(
        mode="global",
        feature_mask=(0,),
        groups={GLOBAL_KEY: (np.array([5.0]), np.array([2.0]))},
    )
    out = apply_normalizer(norm, inst)
    assert out.shape == (6, 1)
    assert out[3, 0] == pytest.approx(1.0)  # (7 - 5) / 2


def test_normalizer_idempotent_on_fit_data():
    rng = np.random.default_rng(3)
    instances = [
        TimeSeriesInstance(
            unit_id=u, sensors=rng.normal(5.0, 3.0, size=(30, 4)),
            op_settings=np.zeros((30, 1)),
        )
        for u in (1, 2, 3)
    ]
    norm = fit_normalizer(instances, healthy_fraction=1.0, mode="global")
    stacked = np.concatenate([apply_normalizer(norm, inst) for inst in instances])
    assert np.abs(stacked.mean(axis=0)).max() < 1e-9
    assert np.abs(stacked.std(axis=0) - 1.0).max() < 1e-9


def test_per_condition_six_groups_and_unseen_condition():
    rng = np.random.default_rng(5)
    conditions = [
        (0.0, 0.0, 100.0), (10.0, 0.25, 100.0), (20.0, 0.7, 100.0),
        (25.0, 0.62, 60.0), (35.0, 0.84, 60.0), (42.0, 0.84, 40.0),
    ]
    rows = 60
    idx = rng.integers(0, 6, size=rows)
    settings = np.array([conditions[i] for i in idx])
    sensors = rng.normal(size=(rows, 3)) + 10.0 * idx[:, None]  # condition-shifted
    inst = TimeSeriesInstance(unit_id=1, sensors=sensors, op_settings=settings)
    norm = fit_normalizer([inst], healthy_fraction=1.0, mode="per_condition")
    assert len(norm.groups) == 6
    out = apply_normalizer(norm, inst)
    assert out.shape[0] == rows

    other = TimeSeriesInstance(
        unit_id=2,
        sensors=rng.normal(size=(4, 3)),
        op_settings=np.tile([99.0, 0.5, 0.0], (4, 1)),
    )
    with pytest.raises(DataError, match="unseen condition"):
        apply_normalizer(norm, other)


def test_per_condition_masks_feature_constant_within_group():
    # feature 0 varies across groups but is constant inside each -> masked
    settings = np.repeat([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 5, axis=0)
    f0 = np.repeat([1.0, 2.0], 5)
    f1 = np.arange(10.0)
    inst = TimeSeriesInstance(
        unit_id=1, sensors=np.column_stack([f0, f1]), op_settings=settings
    )
    norm = fit_normalizer([inst], healthy_fraction=1.0, mode="per_condition")
    assert norm.feature_mask == (1,)


def test_condition_key_rounding_and_negative_zero():
    assert condition_key([42.003, 0.8401, 100.0]) == "42.0|0.8|100.0"
    assert condition_key([-0.04, 0.0, 0.0]) == "0.0|0.0|0.0"


def test_normalizer_dict_round_trip():
    inst = _simple_instance(rows=10)
    norm = fit_normalizer([inst], healthy_fraction=1.0, mode="global")
    back = Normalizer.from_dict(norm.to_dict())
    assert back.mode == norm.mode
    assert back.feature_mask == norm.feature_mask
    out_a = apply_normalizer(norm, inst)
    out_b = apply_normalizer(back, inst)
    assert np.array_equal(out_a, out_b)


# --- synthetic ----------------------------------------------------------------


def test_generate_synthetic_deterministic():
    cfg = SyntheticConfig(num_units=5, dim=3, cycles_range=(30, 60), rho_range=(0.4, 0.8))
    a_inst, a_truth = generate_synthetic(cfg, seed=9)
    b_inst, b_truth = generate_synthetic(cfg, seed=9)
    assert format_csv(a_inst) == format_csv(b_inst)
    assert format_truth_csv(a_truth) == format_truth_csv(b_truth)
    c_inst, _ = generate_synthetic(cfg, seed=10)
    assert format_csv(a_inst) != format_csv(c_inst)


def test_generate_synthetic_shapes_and_truth_bounds():
    cfg = SyntheticConfig(num_units=8, dim=4, cycles_range=(25, 40), rho_range=(0.3, 0.9))
    instances, truths = generate_synthetic(cfg, seed=1)
    assert len(instances) == len(truths) == 8
    for inst, tr in zip(instances, truths):
        assert 25 <= inst.cycles <= 40
        assert 1 <= tr.true_change_cycle <= inst.cycles - 1
        assert inst.sensors.shape == (inst.cycles, 4)
        assert np.allclose(inst.op_settings, 0.0)
        assert np.isclose(np.linalg.norm(tr.drift_direction), 1.0)


def test_generate_synthetic_zero_drift_still_records_truth():
    cfg = SyntheticConfig(
        num_units=3, dim=2, cycles_range=(30, 30), rho_range=(0.5, 0.5),
        drift_magnitude=0.0,
    )
    instances, truths = generate_synthetic(cfg, seed=2)
    for tr in truths:
        assert tr.true_change_cycle == 15


def test_generate_synthetic_validates_config():
    with pytest.raises(ValueError):
        SyntheticConfig(cycles_range=(5, 30))
    with pytest.raises(ValueError):
        SyntheticConfig(rho_range=(0.0, 0.5))
    with pytest.raises(ValueError):
        SyntheticConfig(dim=0)


def test_distance_threshold_oracle_locates_sharp_onset():
    # With a sharp onset and drift 10x the noise, thresholding the distance
    # from the healthy mean localizes the change within 5% of T on >= 95% of
    # units (threshold 4.53 ~ the 0.999 quantile of a 5-D standard normal's
    # radius).
    cfg = SyntheticConfig(
        num_units=100, dim=5, cycles_range=(100, 300), rho_range=(0.3, 0.8),
        drift_magnitude=10.0, ramp_shape=0.25, noise_std=1.0,
    )
    instances, truths = generate_synthetic(cfg, seed=42)
    hits = 0
    for inst, tr in zip(instances, truths):
        labels = (np.linalg.norm(inst.sensors, axis=1) <= 4.53).astype(int)
        t = len(labels)
        ones_prefix = np.cumsum(labels)[:-1]
        c = np.arange(1, t)
        mismatches = (c - ones_prefix) + (labels.sum() - ones_prefix)
        located = int(np.argmin(mismatches)) + 1
        hits += abs(located - tr.true_change_cycle) <= 0.05 * t
    assert hits >= 95


def test_truth_csv_round_trip():
    cfg = SyntheticConfig(num_units=4, dim=2, cycles_range=(20, 30), rho_range=(0.4, 0.6))
    _, truths = generate_synthetic(cfg, seed=3)
    parsed = parse_truth_csv(io.StringIO(format_truth_csv(truths)))
    assert parsed == {t.unit_id: (t.true_change_cycle, t.cycles) for t in truths}


def test_instance_validation():
    with pytest.raises(DataError):
        TimeSeriesInstance(unit_id=1, sensors=np.empty((0, 3)), op_settings=np.empty((0, 3)))
    with pytest.raises(DataError):
        TimeSeriesInstance(
            unit_id=1, sensors=np.array([[np.inf]]), op_settings=np.zeros((1, 1))
        )
