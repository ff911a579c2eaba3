"""Template comparison and protocol scoring.

Similarity conventions: histogram comparators (LBP, HOG) use negated
chi-square distance, so scores are <= 0 with 0 for identical templates;
the Gabor comparator uses cosine similarity in [-1, 1].  Higher always means
more similar, which keeps every downstream consumer (fusion, evaluation)
agnostic of the comparator family.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import GENUINE, SampleKey, TrialSpec
from .errors import DataError, NumericError
from .features import GABOR, HOG, LBP, Template

PROVENANCE_COMPUTED = "computed"
PROVENANCE_INGESTED = "ingested"

SCORE_FIELDS = (
    "comparator_id",
    "probe_subject", "probe_eye", "probe_sensor", "probe_idx",
    "gallery_subject", "gallery_eye", "gallery_sensor", "gallery_idx",
    "label", "condition", "score",
)


@dataclass(frozen=True)
class TrialScore:
    """Scores of all comparators for one trial."""

    trial: TrialSpec
    scores: Mapping[str, float]


@dataclass
class ScoreSet:
    """Scores of one or more comparators over a fixed trial list."""

    comparator_ids: tuple[str, ...]
    trials: list[TrialScore]
    provenance: str

    def conditions(self) -> list[str]:
        return sorted({t.trial.condition for t in self.trials})

    def slice_condition(self, condition: str) -> "ScoreSet":
        kept = [t for t in self.trials if t.trial.condition == condition]
        return ScoreSet(self.comparator_ids, kept, self.provenance)

    def subset(self, indices: Sequence[int]) -> "ScoreSet":
        return ScoreSet(self.comparator_ids, [self.trials[i] for i in indices], self.provenance)

    def genuine_mask(self) -> np.ndarray:
        return np.array([t.trial.label == GENUINE for t in self.trials], dtype=bool)

    def matrix(self, comparator_ids: Sequence[str] | None = None) -> np.ndarray:
        """Trial-by-comparator score matrix in the requested column order."""
        cids = tuple(comparator_ids) if comparator_ids is not None else self.comparator_ids
        missing = [c for c in cids if c not in self.comparator_ids]
        if missing:
            raise DataError(f"score set has no comparator(s) {missing}")
        out = np.empty((len(self.trials), len(cids)))
        for i, t in enumerate(self.trials):
            for j, c in enumerate(cids):
                out[i, j] = t.scores[c]
        return out

    def class_scores(self, comparator_id: str) -> tuple[np.ndarray, np.ndarray]:
        """(genuine, impostor) score arrays of one comparator."""
        col = self.matrix((comparator_id,))[:, 0]
        gen = self.genuine_mask()
        return col[gen], col[~gen]


def _check_scoreset(ss: ScoreSet) -> ScoreSet:
    for t in ss.trials:
        for cid in ss.comparator_ids:
            if cid not in t.scores:
                raise DataError(f"trial {t.trial.probe} vs {t.trial.gallery} lacks score for {cid!r}")
            if not np.isfinite(t.scores[cid]):
                raise DataError(f"non-finite score for {cid!r} on trial {t.trial.probe} vs {t.trial.gallery}")
    return ss


# ---------------------------------------------------------------------------
# Comparators
# ---------------------------------------------------------------------------


def _check_pair(a: Template, b: Template, allowed: tuple[str, ...]) -> None:
    if a.comparator_id != b.comparator_id:
        raise DataError(f"comparator mismatch: {a.comparator_id!r} vs {b.comparator_id!r}")
    if a.comparator_id not in allowed:
        raise DataError(f"comparator {a.comparator_id!r} not supported here (need one of {allowed})")
    if a.meta != b.meta:
        raise DataError(f"template meta mismatch for comparator {a.comparator_id!r}")
    if a.vector.shape != b.vector.shape:
        raise DataError(f"template length mismatch: {a.vector.shape} vs {b.vector.shape}")


def compare_hist(a: Template, b: Template) -> float:
    """Negated chi-square distance between histogram templates.

    chi2 = sum (x - y)^2 / (x + y) over bins where x + y > 0.  Symmetric,
    0 for identical templates, and for per-block one-hot histograms with
    disjoint support equals -2 per block.
    """
    _check_pair(a, b, (LBP, HOG))
    x = a.vector
    y = b.vector
    denom = x + y
    mask = denom > 0
    diff = x[mask] - y[mask]
    chi2 = float(np.sum(diff * diff / denom[mask]))
    return -chi2 + 0.0


def compare_gabor(a: Template, b: Template) -> float:
    """Cosine similarity between Gabor magnitude vectors."""
    _check_pair(a, b, (GABOR,))
    na = float(np.linalg.norm(a.vector))
    nb = float(np.linalg.norm(b.vector))
    if na == 0.0 or nb == 0.0:
        raise NumericError(
            f"zero-norm gabor template for sample "
            f"{(a if na == 0.0 else b).sample_key} (constant image?)"
        )
    return float(np.dot(a.vector, b.vector) / (na * nb))


_MATCHERS = {GABOR: compare_gabor, LBP: compare_hist, HOG: compare_hist}


def score_protocol(
    trials: Sequence[TrialSpec],
    templates: Mapping[tuple[SampleKey, str], Template],
    comparator_ids: Sequence[str],
) -> ScoreSet:
    """Score every trial with every requested built-in comparator.

    Args:
        trials: protocol trial list; output preserves its order.
        templates: lookup keyed by (sample_key, comparator_id).
        comparator_ids: which comparators to run; each must be built in.

    Raises:
        DataError: comparator without a built-in matcher, or a trial whose
            probe or gallery template is missing.
    """
    cids = tuple(comparator_ids)
    for cid in cids:
        if cid not in _MATCHERS:
            raise DataError(
                f"no built-in matcher for comparator {cid!r}; external scores must be ingested"
            )
    scored: list[TrialScore] = []
    for trial in trials:
        row: dict[str, float] = {}
        for cid in cids:
            pair = []
            for role, key in (("probe", trial.probe), ("gallery", trial.gallery)):
                t = templates.get((key, cid))
                if t is None:
                    raise DataError(f"missing template for {role} sample {key} comparator {cid!r}")
                pair.append(t)
            row[cid] = _MATCHERS[cid](pair[0], pair[1])
        scored.append(TrialScore(trial, row))
    return _check_scoreset(ScoreSet(cids, scored, PROVENANCE_COMPUTED))


def build_store(templates: Iterable[Template]) -> dict[tuple[SampleKey, str], Template]:
    """Index templates for score_protocol lookups."""
    store: dict[tuple[SampleKey, str], Template] = {}
    for t in templates:
        key = (t.sample_key, t.comparator_id)
        if key in store:
            raise DataError(f"duplicate template for sample {t.sample_key} comparator {t.comparator_id!r}")
        store[key] = t
    return store


# ---------------------------------------------------------------------------
# Score CSV I/O
# ---------------------------------------------------------------------------


def _trial_row(trial: TrialSpec) -> tuple:
    return (
        trial.probe.subject_id, trial.probe.eye, trial.probe.sensor_id, str(trial.probe.sample_idx),
        trial.gallery.subject_id, trial.gallery.eye, trial.gallery.sensor_id, str(trial.gallery.sample_idx),
        trial.label, trial.condition,
    )


def export_scores(scores: ScoreSet, path: str | Path) -> None:
    """Write one CSV row per (trial, comparator); floats keep full precision
    via shortest round-trip repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_FIELDS)
        for t in scores.trials:
            mid = _trial_row(t.trial)
            for cid in scores.comparator_ids:
                writer.writerow((cid, *mid, repr(float(t.scores[cid]))))


def _parse_trial(row: dict, path: Path, line: int) -> TrialSpec:
    try:
        probe = SampleKey(
            row["probe_subject"], row["probe_eye"], row["probe_sensor"], int(row["probe_idx"])
        )
        gallery = SampleKey(
            row["gallery_subject"], row["gallery_eye"], row["gallery_sensor"], int(row["gallery_idx"])
        )
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}:{line}: bad sample index") from exc
    return TrialSpec(probe, gallery, row["label"], row["condition"])


def _score_rows(path: Path) -> Iterable[tuple[int, dict]]:
    if not path.is_file():
        raise DataError(f"score file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_FIELDS:
            raise DataError(f"{path}: expected header {','.join(SCORE_FIELDS)}")
        for line, row in enumerate(reader, start=2):
            if any(v is None for v in row.values()):
                raise DataError(f"{path}:{line}: short row")
            yield line, row


def _parse_score(row: dict, path: Path, line: int) -> float:
    try:
        value = float(row["score"])
    except ValueError as exc:
        raise DataError(f"{path}:{line}: bad score {row['score']!r}") from exc
    if not np.isfinite(value):
        raise DataError(f"{path}:{line}: non-finite score")
    return value


def read_scores(path: str | Path) -> ScoreSet:
    """Read a (possibly multi-comparator) score CSV back into a ScoreSet.

    Trials keep first-appearance order; every trial must carry the same
    comparator set exactly once.
    """
    path = Path(path)
    order: list[TrialSpec] = []
    table: dict[TrialSpec, dict[str, float]] = {}
    cids: list[str] = []
    for line, row in _score_rows(path):
        trial = _parse_trial(row, path, line)
        cid = row["comparator_id"]
        if cid not in cids:
            cids.append(cid)
        bucket = table.get(trial)
        if bucket is None:
            order.append(trial)
            bucket = table[trial] = {}
        if cid in bucket:
            raise DataError(f"{path}:{line}: duplicate score for trial {trial.probe} vs {trial.gallery}")
        bucket[cid] = _parse_score(row, path, line)
    if not order:
        raise DataError(f"{path}: no score rows")
    expected = set(cids)
    for trial in order:
        if set(table[trial]) != expected:
            raise DataError(
                f"{path}: trial {trial.probe} vs {trial.gallery} lacks scores for "
                f"{sorted(expected - set(table[trial]))}"
            )
    trials = [TrialScore(t, table[t]) for t in order]
    return _check_scoreset(ScoreSet(tuple(cids), trials, PROVENANCE_INGESTED))


def ingest_external_scores(
    path: str | Path,
    comparator_id: str,
    trials: Sequence[TrialSpec],
) -> ScoreSet:
    """Load externally computed scores and align them with the protocol.

    Rows are merged by exact (probe, gallery) key.  Every protocol trial must
    be covered; rows that match no trial, disagree on label/condition, carry
    the wrong comparator_id, or appear twice are fatal.  Missing trials are
    fatal as well: no imputation.
    """
    path = Path(path)
    index: dict[tuple[SampleKey, SampleKey], TrialSpec] = {
        (t.probe, t.gallery): t for t in trials
    }
    found: dict[TrialSpec, float] = {}
    for line, row in _score_rows(path):
        if row["comparator_id"] != comparator_id:
            raise DataError(
                f"{path}:{line}: expected comparator {comparator_id!r}, got {row['comparator_id']!r}"
            )
        parsed = _parse_trial(row, path, line)
        trial = index.get((parsed.probe, parsed.gallery))
        if trial is None:
            raise DataError(
                f"{path}:{line}: score row matches no protocol trial "
                f"({parsed.probe} vs {parsed.gallery})"
            )
        if parsed.label != trial.label or parsed.condition != trial.condition:
            raise DataError(
                f"{path}:{line}: label/condition disagree with protocol for "
                f"{parsed.probe} vs {parsed.gallery}"
            )
        if trial in found:
            raise DataError(f"{path}:{line}: duplicate score for {parsed.probe} vs {parsed.gallery}")
        found[trial] = _parse_score(row, path, line)

    missing = [t for t in trials if t not in found]
    if missing:
        head = ", ".join(f"{t.probe} vs {t.gallery}" for t in missing[:3])
        raise DataError(
            f"{path}: missing external scores for {len(missing)} protocol trial(s), e.g. {head}"
        )
    scored = [TrialScore(t, {comparator_id: found[t]}) for t in trials]
    return ScoreSet((comparator_id,), scored, PROVENANCE_INGESTED)


def merge_scoresets(parts: Sequence[ScoreSet]) -> ScoreSet:
    """Combine score sets over the identical trial sequence into one set with
    the union of their comparators."""
    if not parts:
        raise DataError("nothing to merge")
    base = parts[0]
    cids: list[str] = []
    for part in parts:
        for cid in part.comparator_ids:
            if cid in cids:
                raise DataError(f"comparator {cid!r} appears in more than one score set")
            cids.append(cid)
        if len(part.trials) != len(base.trials):
            raise DataError("trial lists differ in length; cannot merge")
        for a, b in zip(base.trials, part.trials):
            if a.trial != b.trial:
                raise DataError(
                    f"trial mismatch while merging: {a.trial.probe} vs {b.trial.probe}"
                )
    merged = []
    for i, t in enumerate(base.trials):
        row: dict[str, float] = {}
        for part in parts:
            row.update(part.trials[i].scores)
        merged.append(TrialScore(t.trial, row))
    provenance = (
        PROVENANCE_COMPUTED
        if all(p.provenance == PROVENANCE_COMPUTED for p in parts)
        else PROVENANCE_INGESTED
    )
    return _check_scoreset(ScoreSet(tuple(cids), merged, provenance))
