import numpy as np
import pytest

from perifuse.dataset import (
    CROSS_SENSOR,
    GENUINE,
    IMPOSTOR,
    SampleKey,
    SampleRef,
    TrialSpec,
    generate_protocol,
)
from perifuse.errors import DataError, NumericError
from perifuse.features import GABOR, HOG, LBP, Template, extract_hog, extract_lbp, make_grid
from perifuse.matching import (
    PROVENANCE_COMPUTED,
    PROVENANCE_INGESTED,
    ScoreSet,
    TrialScore,
    build_store,
    compare_gabor,
    compare_hist,
    export_scores,
    ingest_external_scores,
    merge_scoresets,
    read_scores,
    score_protocol,
)

from helpers import manual_scoreset

HIST_META = {"grid_n": 4, "image_side": 64, "bins": 8}


def _hist_template(vec, cid=LBP, key=None):
    key = key or SampleKey("s", "left", "a", 1)
    return Template(cid, key, np.asarray(vec, dtype=np.float64), dict(HIST_META))


def _gab_template(vec, key=None):
    key = key or SampleKey("s", "left", "a", 1)
    meta = {"grid_n": 4, "image_side": 64, "wavelengths": [8.0], "orientations_deg": [0.0]}
    return Template(GABOR, key, np.asarray(vec, dtype=np.float64), meta)


# -- chi-square histogram comparator --------------------------------------


def test_identical_histograms_score_zero():
    v = np.tile([0.5, 0.5, 0, 0, 0, 0, 0, 0], 8)
    s = compare_hist(_hist_template(v), _hist_template(v))
    assert s == 0.0
    assert str(s) == "0.0"  # normalized away from -0.0


def test_disjoint_one_hot_blocks():
    # chi-square per block for disjoint unit masses is 2; similarity = -2/block
    n_blocks = 8
    a = np.tile(np.eye(8)[0], n_blocks)
    b = np.tile(np.eye(8)[3], n_blocks)
    s = compare_hist(_hist_template(a), _hist_template(b))
    assert s == pytest.approx(-2.0 * n_blocks, abs=1e-12)


def test_hist_symmetry_and_range():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.random(64)
        b = rng.random(64)
        ta, tb = _hist_template(a), _hist_template(b)
        assert compare_hist(ta, tb) == pytest.approx(compare_hist(tb, ta), abs=1e-12)
        assert compare_hist(ta, tb) <= 0.0


def test_hist_real_extractions_genuine_beats_impostor():
    rng = np.random.default_rng(33)
    grid = make_grid(64, 4)
    base = rng.random((64, 64))
    same = np.clip(base + rng.normal(0, 0.02, base.shape), 0, 1)
    other = rng.random((64, 64))
    t0 = extract_lbp(base, grid)
    t1 = extract_lbp(same, grid)
    t2 = extract_lbp(other, grid)
    assert compare_hist(t0, t1) > compare_hist(t0, t2)


def test_hist_rejects_comparator_mismatch():
    a = _hist_template(np.ones(64) / 8, cid=LBP)
    b = _hist_template(np.ones(64) / 8, cid=HOG)
    with pytest.raises(DataError):
        compare_hist(a, b)


def test_hist_rejects_gabor_templates():
    with pytest.raises(DataError):
        compare_hist(_gab_template(np.ones(4)), _gab_template(np.ones(4)))


def test_hist_rejects_meta_mismatch():
    a = _hist_template(np.ones(64) / 8)
    b = _hist_template(np.ones(64) / 8)
    b.meta["grid_n"] = 8
    with pytest.raises(DataError):
        compare_hist(a, b)


def test_hist_rejects_length_mismatch():
    with pytest.raises(DataError):
        compare_hist(_hist_template(np.ones(64) / 8), _hist_template(np.ones(56) / 7))


# -- cosine comparator -----------------------------------------------------


def test_cosine_parallel_orthogonal():
    a = _gab_template([1.0, 2.0, 3.0, 4.0])
    b = _gab_template([2.0, 4.0, 6.0, 8.0])
    assert compare_gabor(a, b) == pytest.approx(1.0, abs=1e-12)
    c = _gab_template([0.0, 0.0, 1.0, 0.0])
    d = _gab_template([0.0, 1.0, 0.0, 0.0])
    assert compare_gabor(c, d) == pytest.approx(0.0, abs=1e-12)


def test_cosine_zero_norm_is_numeric_error():
    a = _gab_template(np.zeros(4))
    b = _gab_template(np.ones(4))
    with pytest.raises(NumericError, match="zero-norm"):
        compare_gabor(a, b)


# -- protocol scoring ------------------------------------------------------


def _tiny_protocol():
    refs = []
    for subj in ("p1", "p2"):
        for sensor in ("a", "b"):
            for idx in (1, 2):
                refs.append(SampleRef(subj, "left", sensor, idx, f"{subj}{sensor}{idx}.png"))
    return refs, generate_protocol(refs)


def test_score_protocol_runs_and_orders():
    refs, trials = _tiny_protocol()
    rng = np.random.default_rng(1)
    grid = make_grid(64, 4)
    templates = []
    for ref in refs:
        img = rng.random((64, 64))
        templates.append(extract_lbp(img, grid, sample_key=ref.key))
        templates.append(extract_hog(img, grid, sample_key=ref.key))
    store = build_store(templates)
    ss = score_protocol(trials, store, (LBP, HOG))
    assert ss.comparator_ids == (LBP, HOG)
    assert [t.trial for t in ss.trials] == trials
    assert ss.provenance == PROVENANCE_COMPUTED
    m = ss.matrix()
    assert m.shape == (len(trials), 2)
    assert np.isfinite(m).all()


def test_score_protocol_missing_template():
    refs, trials = _tiny_protocol()
    grid = make_grid(64, 4)
    templates = [
        extract_lbp(np.random.default_rng(2).random((64, 64)), grid, sample_key=ref.key)
        for ref in refs[:-1]
    ]
    with pytest.raises(DataError, match="template"):
        score_protocol(trials, build_store(templates), (LBP,))


def test_score_protocol_unknown_comparator():
    refs, trials = _tiny_protocol()
    with pytest.raises(DataError, match="ingested"):
        score_protocol(trials, {}, ("resnet",))


def test_build_store_rejects_duplicates():
    grid = make_grid(64, 4)
    t = extract_lbp(np.random.default_rng(3).random((64, 64)), grid,
                    sample_key=SampleKey("s", "left", "a", 1))
    with pytest.raises(DataError, match="duplicate"):
        build_store([t, t])


# -- score persistence -----------------------------------------------------


def test_export_read_round_trip(tmp_path):
    ss = manual_scoreset(
        CROSS_SENSOR,
        {"c1": [0.1, 1e-17, -3.25], "c2": [7.0, -0.0, 2.0 / 3.0]},
        {"c1": [-1.5, 0.25], "c2": [0.0, 1e300]},
    )
    path = tmp_path / "scores.csv"
    export_scores(ss, path)
    back = read_scores(path)
    assert back.comparator_ids == ss.comparator_ids
    assert [t.trial for t in back.trials] == [t.trial for t in ss.trials]
    assert np.array_equal(back.matrix(), ss.matrix())  # repr round-trip is exact
    assert back.provenance == PROVENANCE_INGESTED


def test_read_scores_rejects_partial_coverage(tmp_path):
    ss = manual_scoreset(CROSS_SENSOR, {"c1": [1.0], "c2": [2.0]}, {"c1": [0.0], "c2": [0.1]})
    path = tmp_path / "scores.csv"
    export_scores(ss, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")  # drop one comparator row
    with pytest.raises(DataError, match="lacks scores"):
        read_scores(path)


def test_read_scores_rejects_duplicates(tmp_path):
    ss = manual_scoreset(CROSS_SENSOR, {"c1": [1.0]}, {"c1": [0.0]})
    path = tmp_path / "scores.csv"
    export_scores(ss, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + [lines[-1]]) + "\n")
    with pytest.raises(DataError, match="duplicate"):
        read_scores(path)


# -- ingest ----------------------------------------------------------------


def _protocol_and_external(tmp_path, mutate=None):
    refs, trials = _tiny_protocol()
    ext = ScoreSet(
        ("deep",),
        [TrialScore(t, {"deep": float(k)}) for k, t in enumerate(trials)],
        PROVENANCE_COMPUTED,
    )
    path = tmp_path / "ext.csv"
    export_scores(ext, path)
    if mutate:
        text = path.read_text()
        path.write_text(mutate(text))
    return trials, path


def test_ingest_happy_path(tmp_path):
    trials, path = _protocol_and_external(tmp_path)
    ss = ingest_external_scores(path, "deep", trials)
    assert ss.comparator_ids == ("deep",)
    assert [t.trial for t in ss.trials] == trials
    assert ss.provenance == PROVENANCE_INGESTED
    assert ss.trials[3].scores["deep"] == 3.0


def test_ingest_rejects_wrong_comparator(tmp_path):
    trials, path = _protocol_and_external(tmp_path)
    with pytest.raises(DataError, match="comparator"):
        ingest_external_scores(path, "other", trials)


def test_ingest_rejects_missing_trials(tmp_path):
    trials, path = _protocol_and_external(
        tmp_path, mutate=lambda text: "\n".join(text.splitlines()[:-2]) + "\n"
    )
    with pytest.raises(DataError, match="missing"):
        ingest_external_scores(path, "deep", trials)


def test_ingest_rejects_unmatched_rows(tmp_path):
    def swap_subject(text):
        lines = text.splitlines()
        parts = lines[1].split(",")
        parts[1] = "ghost"
        lines[1] = ",".join(parts)
        return "\n".join(lines) + "\n"

    trials, path = _protocol_and_external(tmp_path, mutate=swap_subject)
    with pytest.raises(DataError):
        ingest_external_scores(path, "deep", trials)


def test_ingest_rejects_label_disagreement(tmp_path):
    def flip_label(text):
        return text.replace(GENUINE, IMPOSTOR, 1)

    trials, path = _protocol_and_external(tmp_path, mutate=flip_label)
    with pytest.raises(DataError):
        ingest_external_scores(path, "deep", trials)


def test_ingest_rejects_duplicate_rows(tmp_path):
    def dup(text):
        lines = text.splitlines()
        return "\n".join(lines + [lines[1]]) + "\n"

    trials, path = _protocol_and_external(tmp_path, mutate=dup)
    with pytest.raises(DataError):
        ingest_external_scores(path, "deep", trials)


# -- merging ---------------------------------------------------------------


def test_merge_scoresets_combines_columns():
    a = manual_scoreset(CROSS_SENSOR, {"c1": [1.0, 2.0]}, {"c1": [0.0]})
    b = manual_scoreset(CROSS_SENSOR, {"c2": [5.0, 6.0]}, {"c2": [4.0]})
    merged = merge_scoresets([a, b])
    assert merged.comparator_ids == ("c1", "c2")
    assert np.array_equal(merged.matrix(), np.array([[1, 5], [2, 6], [0, 4]], dtype=float))
    assert merged.provenance == PROVENANCE_COMPUTED


def test_merge_rejects_overlapping_comparators():
    a = manual_scoreset(CROSS_SENSOR, {"c1": [1.0]}, {"c1": [0.0]})
    with pytest.raises(DataError):
        merge_scoresets([a, a])


def test_merge_rejects_trial_mismatch():
    a = manual_scoreset(CROSS_SENSOR, {"c1": [1.0, 2.0]}, {"c1": [0.0]})
    b = manual_scoreset("same_sensor:a", {"c2": [1.0, 2.0]}, {"c2": [0.0]})
    with pytest.raises(DataError):
        merge_scoresets([a, b])


# -- scoreset views --------------------------------------------------------


def test_scoreset_slicing_and_class_split():
    ss = manual_scoreset(CROSS_SENSOR, {"c1": [3.0, 4.0]}, {"c1": [1.0, 0.0, 2.0]})
    g, i = ss.class_scores("c1")
    assert np.array_equal(np.sort(g), [3.0, 4.0])
    assert np.array_equal(np.sort(i), [0.0, 1.0, 2.0])
    assert ss.conditions() == [CROSS_SENSOR]
    sliced = ss.slice_condition(CROSS_SENSOR)
    assert len(sliced.trials) == 5
    assert len(ss.slice_condition("same_sensor:zz").trials) == 0


def test_matrix_respects_requested_order():
    ss = manual_scoreset(CROSS_SENSOR, {"c1": [1.0], "c2": [2.0]}, {"c1": [0.0], "c2": [9.0]})
    m = ss.matrix(("c2", "c1"))
    assert np.array_equal(m[0], [2.0, 1.0])
    with pytest.raises(DataError):
        ss.matrix(("nope",))
