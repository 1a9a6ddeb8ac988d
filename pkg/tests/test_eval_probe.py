import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import rel_entr

from dpolab.attack import AttackConfig
from dpolab.core.network import TrainedModel
from dpolab.evaluation import (SweepResult, attack_success_rate, emit_report, kl_divergence, kl_probe,
                               moving_average, optimal_z_trajectory, rank_stability, run_sweep, success_from_logits,
                               sweep_rows, unimodality_check)
from dpolab.transforms import TransformSpec


def logit_model(classes, name="picker"):
    """Logits equal the first ``classes`` pixels of a 4x4 image (pixels >= 0)."""
    fc1 = np.zeros((64, 16))
    fc1[:16] = np.eye(16)
    fc2 = np.zeros((classes, 64))
    fc2[:, :classes] = np.eye(classes)
    weights = {"fc1.w": fc1, "fc1.b": np.zeros(64), "fc2.w": fc2, "fc2.b": np.zeros(classes)}
    return TrainedModel("mlp2", weights, {"input_shape": [1, 4, 4], "classes": classes, "name": name})


def images_with_logits(logits):
    logits = np.asarray(logits, float)
    x = np.zeros((len(logits), 1, 4, 4))
    x.reshape(len(logits), 16)[:, :logits.shape[1]] = logits
    return x


# -- attack success rate -------------------------------------------------------


def test_asr_all_correct_and_all_wrong():
    model = logit_model(3)
    x = images_with_logits([[0.9, 0.1, 0.0], [0.0, 0.8, 0.1], [0.2, 0.1, 0.7]])
    assert attack_success_rate([model], x, [0, 1, 2]) == [0.0]
    assert attack_success_rate([model], x, [1, 2, 0]) == [1.0]


def test_targeted_asr_counts_target_hits():
    model = logit_model(4)
    logits = [[0.1, 0.9, 0, 0], [0, 0.2, 0.8, 0], [0.1, 0.7, 0, 0], [0.9, 0, 0, 0], [0, 0, 0.1, 0.6]]
    labels = [0, 1, 0, 2, 2]
    assert attack_success_rate([model], images_with_logits(logits), labels, target=1) == [pytest.approx(0.4)]
    assert success_from_logits(logits, labels, target=1) == pytest.approx(0.4)


def test_argmax_tie_goes_to_smallest_class():
    model = logit_model(3)
    x = images_with_logits([[0.5, 0.5, 0.5], [0.0, 0.4, 0.4]])
    assert attack_success_rate([model], x, [0, 1]) == [0.0]
    assert attack_success_rate([model], x, [1, 2]) == [1.0]


def test_asr_empty_batch_rejected():
    with pytest.raises(ValueError, match="empty"):
        attack_success_rate([logit_model(2)], np.zeros((0, 1, 4, 4)), [])


def test_benign_filter_drops_images_already_misclassified():
    model = logit_model(2)
    clean = images_with_logits([[0.9, 0.1], [0.1, 0.9], [0.9, 0.1], [0.9, 0.1]])
    adv = images_with_logits([[0.1, 0.9], [0.1, 0.9], [0.9, 0.1], [0.1, 0.9]])
    labels = [0, 0, 0, 0]
    assert attack_success_rate([model], adv, labels) == [0.75]
    # image 1 was already wrong; two of the remaining three flip
    assert attack_success_rate([model], adv, labels, clean_batch=clean) == [pytest.approx(2 / 3)]
    # nothing survives the filter
    assert math.isnan(attack_success_rate([model], adv, [1, 0, 1, 1], clean_batch=clean)[0])


# -- KL --------------------------------------------------------------------------


def test_kl_hand_value():
    kl, floored = kl_divergence([0.9, 0.1], [0.5, 0.5])
    assert abs(kl[0] - 0.368064) < 1e-6
    assert floored == 0


def test_kl_floor_is_counted():
    kl, floored = kl_divergence([[0.5, 0.5, 0.0]], [[1.0, 0.0, 0.0]])
    assert floored == 2
    assert kl[0] == pytest.approx(0.5 * math.log(0.5 / 1.0) + 0.5 * math.log(0.5 / 1e-12))


distribution = st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6)


@settings(max_examples=80, deadline=None)
@given(distribution, st.data())
def test_kl_nonnegative_and_matches_scipy(p, data):
    q = data.draw(st.lists(st.floats(0.01, 1.0), min_size=len(p), max_size=len(p)))
    p, q = np.array(p) / sum(p), np.array(q) / sum(q)
    kl, _ = kl_divergence(p, q)
    assert kl[0] >= -1e-12
    assert kl[0] == pytest.approx(rel_entr(p, q).sum(), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(distribution)
def test_kl_of_a_distribution_with_itself_is_zero(p):
    p = np.array(p) / sum(p)
    assert abs(kl_divergence(p, p)[0][0]) < 1e-12


def test_identity_probe_is_zero_on_desk(desk_data, desk_pool):
    images = desk_data[1].images[:50]
    res = kl_probe(desk_pool.surrogates[0], images, TransformSpec("identity"))
    # p == q exactly, so floored tiny probabilities cancel
    assert abs(res.mean[0]) <= 1e-9


def test_probe_grows_with_noise_and_is_deterministic(desk_data, desk_pool):
    images = desk_data[1].images[:50]
    spec = TransformSpec("noise", (0.1,))
    zs = [[0.02], [0.2], [0.5]]
    a = kl_probe(desk_pool.surrogates[0], images, spec, zs, draws_per_sample=2, seed=3)
    b = kl_probe(desk_pool.surrogates[0], images, spec, zs, draws_per_sample=2, seed=3, workers=3)
    assert a == b
    assert a.mean[0] < a.mean[1] < a.mean[2]
    assert all(e >= 0 for e in a.stderr)


def test_probe_rejects_bad_counts(desk_data, desk_pool):
    with pytest.raises(ValueError):
        kl_probe(desk_pool.surrogates[0], desk_data[1].images, TransformSpec("identity"), sample_count=0)
    with pytest.raises(ValueError, match="need"):
        kl_probe(desk_pool.surrogates[0], desk_data[1].images[:3], TransformSpec("identity"), sample_count=10)


# -- unimodality -------------------------------------------------------------------


def test_moving_average_truncates_at_edges():
    np.testing.assert_allclose(moving_average([1, 2, 3, 2, 1]), [1.5, 2, 7 / 3, 2, 1.5])


@pytest.mark.parametrize("values, expected", [
    ([1, 2, 3, 2, 1], (True, 2)),
    ([1, 3, 1, 3, 1], (False, None)),
    ([1, 2, 3], (True, 2)),
    ([3, 2, 1], (True, 0)),
    ([1, 1, 1, 1], (False, None)),
])
def test_unimodality_examples(values, expected):
    assert unimodality_check(values) == expected


def test_unimodality_plateau_peak_reports_first_index():
    assert unimodality_check([0, 1, 5, 5, 5, 1, 0], smoothing_window=1) == (True, 2)


def test_unimodality_needs_three_points():
    with pytest.raises(ValueError):
        unimodality_check([1, 2])


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 15), st.data())
def test_rise_then_fall_is_unimodal(n, data):
    peak = data.draw(st.integers(0, n - 1))
    steps = data.draw(st.lists(st.floats(0.01, 1.0), min_size=n - 1, max_size=n - 1))
    values = [0.0]
    for i, d in enumerate(steps):
        values.append(values[-1] + (d if i < peak else -d))
    ok, idx = unimodality_check(values, smoothing_window=1)
    assert ok and idx == peak


# -- sweeps ---------------------------------------------------------------------------


def _sweep(table, iterations, z_values):
    cells = {(zi, t, "m", 0): v for t, row in zip(iterations, table) for zi, v in enumerate(row)}
    return SweepResult("noise", [[z] for z in z_values], iterations, ["m"], [0], cells)


def test_trajectory_moves_right():
    sweep = _sweep([[0.2, 0.5, 0.4], [0.1, 0.3, 0.6]], [5, 50], [0.1, 0.2, 0.3])
    traj, rising = optimal_z_trajectory(sweep)
    assert traj == [[0.2], [0.3]] and rising


def test_trajectory_flat_sweep_picks_smallest_z():
    sweep = _sweep([[0.4, 0.4, 0.4], [0.4, 0.4, 0.4]], [5, 50], [0.1, 0.2, 0.3])
    assert optimal_z_trajectory(sweep) == ([[0.1], [0.1]], True)


def test_trajectory_reports_decrease_and_needs_two_counts():
    sweep = _sweep([[0.1, 0.2, 0.6], [0.5, 0.2, 0.1]], [5, 50], [0.1, 0.2, 0.3])
    assert optimal_z_trajectory(sweep) == ([[0.3], [0.1]], False)
    with pytest.raises(ValueError):
        optimal_z_trajectory(_sweep([[0.1, 0.2, 0.3]], [5], [0.1, 0.2, 0.3]))


def test_rank_stability_reports_rankings():
    a = _sweep([[0.5, 0.6], [0.7, 0.8]], [5, 50], [0.1, 0.2])
    b = _sweep([[0.6, 0.7], [0.6, 0.65]], [5, 50], [0.1, 0.2])
    out = rank_stability({"a": a, "b": b}, 5, 50)
    assert out["ranking"] == {"5": ["b", "a"], "50": ["a", "b"]}
    assert out["stable"] is False
    assert out["best_asr"]["a"]["50"] == 0.8


def test_empty_sweep_csv_is_header_only(tmp_path):
    path = emit_report(SweepResult("noise", [], [], [], []), "csv", str(tmp_path / "s.csv"))
    assert open(path).read() == "kind,z,T,model,seed,asr\n"


def test_one_cell_sweep_csv(tmp_path):
    sweep = _sweep([[0.25]], [10], [0.14])
    rows = list(csv.reader(io.StringIO(open(emit_report(sweep, "csv", str(tmp_path / "s.csv"))).read())))
    assert len(rows) == 2 and len(rows[1]) == 6
    assert rows[1] == ["noise", "0.14", "10", "m", "0", "0.25"]


def test_absent_cells_are_marked():
    sweep = SweepResult("noise", [[0.1], [0.2]], [5], ["m"], [0], {(0, 5, "m", 0): 0.3})
    _, rows = sweep_rows(sweep)
    assert rows[1][-1] == ""
    assert sweep.to_dict()["cells"][1]["asr"] is None
    assert sweep.mean_asr(1, 5) is None


def test_multi_slot_sweep_has_one_column_per_slot():
    sweep = SweepResult("bsr", [[3.0, 24.0]], [5], ["m"], [0], {(0, 5, "m", 0): 0.5})
    header, rows = sweep_rows(sweep)
    assert header == ["kind", "z1", "z2", "T", "model", "seed", "asr"]
    assert rows[0][1:3] == ["3.0", "24.0"]


def test_sweep_json_round_trip(tmp_path):
    sweep = _sweep([[0.1, 0.2], [0.3, 0.4]], [5, 50], [0.1, 0.2])
    sweep.config = {"batch": 4}
    path = emit_report(sweep, "json", str(tmp_path / "s.json"))
    data = json.load(open(path))
    assert SweepResult.from_dict(data) == sweep
    assert data["config_fingerprint"] == sweep.fingerprint()


def test_report_into_missing_directory_fails(tmp_path):
    with pytest.raises(OSError):
        emit_report(_sweep([[0.1]], [5], [0.1]), "json", str(tmp_path / "nope" / "s.json"))
    with pytest.raises(ValueError):
        emit_report(_sweep([[0.1]], [5], [0.1]), "xml", str(tmp_path / "s.xml"))


def test_run_sweep_is_deterministic_and_worker_independent(desk_data, desk_pool):
    images, labels = desk_data[1].images[:16], desk_data[1].labels[:16]
    cfg = AttackConfig(iterations=2, seed=4)
    args = (images, labels, desk_pool.surrogates, desk_pool.validation, TransformSpec("noise", (0.1,)),
            [[0.05], [0.3]], [1, 2], cfg)
    a = run_sweep(*args, seeds=[4, 5])
    b = run_sweep(*args, seeds=[4, 5], workers=4)
    assert a == b
    assert len(a.cells) == 2 * 2 * 2 * len(desk_pool.validation)
    assert all(0.0 <= v <= 1.0 for v in a.cells.values())
    assert a.config["exclude_benign_errors"] is False
    filtered = run_sweep(*args, seeds=[4], exclude_benign_errors=True)
    assert filtered.config["exclude_benign_errors"] is True
