import csv
import itertools
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perifuse.dataset import (
    CROSS_SENSOR,
    GENUINE,
    IMPOSTOR,
    SampleRef,
    all_conditions,
    condition_sensor,
    generate_genuine_trials,
    generate_impostor_trials,
    generate_protocol,
    is_same_sensor,
    load_manifest,
    same_sensor,
)
from perifuse.errors import DataError

from helpers import vssiris_shaped_refs


def test_condition_strings_round_trip():
    cond = same_sensor("dslr")
    assert cond == "same_sensor:dslr"
    assert is_same_sensor(cond)
    assert condition_sensor(cond) == "dslr"
    assert not is_same_sensor(CROSS_SENSOR)


def test_reference_shape_counts():
    refs = vssiris_shaped_refs()
    assert len(refs) == 560
    for sensor in ("dslr", "phone"):
        gen = generate_genuine_trials(refs, same_sensor(sensor))
        assert len(gen) == 560
    assert len(generate_genuine_trials(refs, CROSS_SENSOR)) == 1400
    for cond in ("same_sensor:dslr", "same_sensor:phone", CROSS_SENSOR):
        assert len(generate_impostor_trials(refs, cond)) == 3080


def _make_refs(n_subjects, eyes, sensors, n_samples):
    refs = []
    for s in range(n_subjects):
        for eye in eyes:
            for sensor in sensors:
                for idx in range(1, n_samples + 1):
                    refs.append(SampleRef(f"p{s}", eye, sensor, idx, f"{s}_{eye}_{sensor}_{idx}.png"))
    return refs


@settings(max_examples=40, deadline=None)
@given(
    n_subjects=st.integers(1, 4),
    n_eyes=st.integers(1, 2),
    n_sensors=st.integers(2, 3),
    n_samples=st.integers(2, 3),
)
def test_trial_counts_match_brute_force(n_subjects, n_eyes, n_sensors, n_samples):
    """Closed-form counts and exact pair sets against a brute-force enumeration."""
    eyes = ("left", "right")[:n_eyes]
    sensors = tuple(f"sen{j}" for j in range(n_sensors))
    refs = _make_refs(n_subjects, eyes, sensors, n_samples)
    n_inst = n_subjects * n_eyes

    by_key = {r.key: r for r in refs}
    assert len(by_key) == len(refs)

    for sensor in sensors:
        got = generate_genuine_trials(refs, same_sensor(sensor))
        assert len(got) == n_inst * n_samples * (n_samples - 1) // 2
        expect = set()
        for a, b in itertools.combinations(refs, 2):
            if a.instance == b.instance and a.sensor_id == sensor and b.sensor_id == sensor:
                expect.add(frozenset((a.key, b.key)))
        assert {frozenset((t.probe, t.gallery)) for t in got} == expect
        assert all(t.label == GENUINE and t.condition == same_sensor(sensor) for t in got)

    got = generate_genuine_trials(refs, CROSS_SENSOR)
    n_pairs = n_sensors * (n_sensors - 1) // 2
    assert len(got) == n_pairs * n_inst * n_samples * n_samples
    expect = set()
    for a in refs:
        for b in refs:
            if a.instance == b.instance and a.sensor_id < b.sensor_id:
                expect.add((a.key, b.key))
    assert {(t.probe, t.gallery) for t in got} == expect
    # probe always from the lexicographically smaller sensor
    assert all(t.probe.sensor_id < t.gallery.sensor_id for t in got)

    def first_two(inst, sensor):
        mine = sorted(
            (r for r in refs if r.instance == inst and r.sensor_id == sensor),
            key=lambda r: r.sample_idx,
        )
        return mine[0], mine[1]

    instances = sorted({r.instance for r in refs})
    for sensor in sensors:
        got = generate_impostor_trials(refs, same_sensor(sensor))
        assert len(got) == n_inst * (n_inst - 1)
        expect = set()
        for i, j in itertools.permutations(instances, 2):
            expect.add((first_two(i, sensor)[0].key, first_two(j, sensor)[1].key))
        assert {(t.probe, t.gallery) for t in got} == expect
        assert all(t.label == IMPOSTOR for t in got)

    got = generate_impostor_trials(refs, CROSS_SENSOR)
    assert len(got) == n_pairs * n_inst * (n_inst - 1)
    expect = set()
    for sa, sb in itertools.combinations(sensors, 2):
        for i, j in itertools.permutations(instances, 2):
            expect.add((first_two(i, sa)[0].key, first_two(j, sb)[1].key))
    assert {(t.probe, t.gallery) for t in got} == expect


def test_protocol_is_sorted_and_complete():
    refs = _make_refs(3, ("left",), ("a", "b"), 2)
    trials = generate_protocol(refs)
    conds = all_conditions(refs)
    assert conds == ["same_sensor:a", "same_sensor:b", CROSS_SENSOR]
    total = sum(len(generate_genuine_trials(refs, c)) for c in conds)
    total += sum(len(generate_impostor_trials(refs, c)) for c in conds)
    assert len(trials) == total
    assert len(set(trials)) == len(trials)
    assert trials == generate_protocol(refs)


def test_impostor_needs_two_samples_per_instance():
    refs = _make_refs(2, ("left",), ("a", "b"), 1)
    with pytest.raises(DataError):
        generate_impostor_trials(refs, same_sensor("a"))


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


MAN_HDR = ["subject_id", "eye", "sensor_id", "sample_idx", "image_path"]
ANN_HDR = ["subject_id", "eye", "sensor_id", "sample_idx",
           "iris_cx", "iris_cy", "iris_r", "sclera_cx", "sclera_cy", "sclera_r"]


def _ann_row(subject, eye, sensor, idx):
    return [subject, eye, sensor, idx, 100, 100, 30, 100, 100, 80]


def test_load_manifest_round_trip(tmp_path):
    rows = [["s1", "left", "a", 1, "x.png"], ["s1", "left", "b", 2, "y.png"]]
    _write_csv(tmp_path / "manifest.csv", MAN_HDR, rows)
    _write_csv(tmp_path / "annotations.csv", ANN_HDR,
               [_ann_row("s1", "left", "a", 1), _ann_row("s1", "left", "b", 2)])
    samples, anns = load_manifest(tmp_path / "manifest.csv")
    assert [s.key for s in samples] == [a.key for a in anns]
    assert samples[0].sample_idx == 1 and samples[1].sensor_id == "b"
    assert anns[0].sclera_r == 80.0


def test_load_manifest_duplicate_key(tmp_path):
    rows = [["s1", "left", "a", 1, "x.png"], ["s1", "left", "a", 1, "y.png"]]
    _write_csv(tmp_path / "manifest.csv", MAN_HDR, rows)
    _write_csv(tmp_path / "annotations.csv", ANN_HDR, [_ann_row("s1", "left", "a", 1)])
    with pytest.raises(DataError, match="duplicate"):
        load_manifest(tmp_path / "manifest.csv")


def test_load_manifest_missing_annotation(tmp_path):
    _write_csv(tmp_path / "manifest.csv", MAN_HDR, [["s1", "left", "a", 1, "x.png"]])
    _write_csv(tmp_path / "annotations.csv", ANN_HDR, [_ann_row("s9", "left", "a", 1)])
    with pytest.raises(DataError, match="annotation missing for sample"):
        load_manifest(tmp_path / "manifest.csv")


def test_load_manifest_ignores_unmatched_annotations(tmp_path):
    _write_csv(tmp_path / "manifest.csv", MAN_HDR, [["s1", "left", "a", 1, "x.png"]])
    _write_csv(tmp_path / "annotations.csv", ANN_HDR,
               [_ann_row("s1", "left", "a", 1), _ann_row("zz", "right", "b", 4)])
    samples, anns = load_manifest(tmp_path / "manifest.csv")
    assert len(samples) == len(anns) == 1


def test_load_manifest_rejects_bad_radii(tmp_path):
    _write_csv(tmp_path / "manifest.csv", MAN_HDR, [["s1", "left", "a", 1, "x.png"]])
    bad = ["s1", "left", "a", 1, 100, 100, 90, 100, 100, 80]  # iris >= sclera
    _write_csv(tmp_path / "annotations.csv", ANN_HDR, [bad])
    with pytest.raises(DataError):
        load_manifest(tmp_path / "manifest.csv")


def test_load_manifest_rejects_wrong_header(tmp_path):
    _write_csv(tmp_path / "manifest.csv", ["subject", "eye"], [["s1", "left"]])
    with pytest.raises(DataError):
        load_manifest(tmp_path / "manifest.csv")


def test_load_manifest_rejects_bad_eye(tmp_path):
    _write_csv(tmp_path / "manifest.csv", MAN_HDR, [["s1", "center", "a", 1, "x.png"]])
    _write_csv(tmp_path / "annotations.csv", ANN_HDR, [_ann_row("s1", "center", "a", 1)])
    with pytest.raises(DataError, match="eye"):
        load_manifest(tmp_path / "manifest.csv")
