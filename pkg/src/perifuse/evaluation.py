"""Verification metrics, synthetic score generation, and report rendering.

Error-tradeoff conventions are fixed so results are reproducible to the bit:
thresholds are the sorted distinct pooled scores with -inf/+inf sentinels,
the false accept rate at threshold t counts impostor scores >= t, and the
false reject rate counts genuine scores < t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import ndtri

from .dataset import (
    CROSS_SENSOR,
    GENUINE,
    IMPOSTOR,
    SampleKey,
    TrialSpec,
    condition_sensor,
    is_same_sensor,
)
from .errors import NumericError
from .matching import PROVENANCE_COMPUTED, ScoreSet, TrialScore

ALL_CONDITIONS = "all"

_LN2 = math.log(2.0)


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    far: float
    frr: float


def _check_scores(name: str, values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} score list is empty")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} scores contain non-finite values")
    return arr


def compute_curve(genuine, impostor) -> list[CurvePoint]:
    """Error tradeoff curve over the pooled distinct scores.

    Thresholds are the sorted distinct values of both classes plus -inf and
    +inf sentinels; far(t) is the fraction of impostor scores >= t and frr(t)
    the fraction of genuine scores < t, so far falls from 1 to 0 and frr
    rises from 0 to 1 as t increases.
    """
    g = _check_scores("genuine", genuine)
    i = _check_scores("impostor", impostor)
    thresholds = np.concatenate(([-np.inf], np.unique(np.concatenate((g, i))), [np.inf]))
    gs = np.sort(g)
    isort = np.sort(i)
    frr = np.searchsorted(gs, thresholds, side="left") / g.size
    far = (i.size - np.searchsorted(isort, thresholds, side="left")) / i.size
    return [CurvePoint(float(t), float(fa), float(fr)) for t, fa, fr in zip(thresholds, far, frr)]


def compute_eer(curve: Sequence[CurvePoint]) -> float:
    """Equal error rate, linearly interpolated between the two curve points
    bracketing the sign change of (far - frr)."""
    if len(curve) < 2:
        raise ValueError("curve must have at least two points")
    far = np.array([p.far for p in curve])
    frr = np.array([p.frr for p in curve])
    d = far - frr
    negatives = np.nonzero(d < 0)[0]
    if negatives.size == 0 or negatives[0] == 0:
        raise ValueError("curve does not bracket an equal-error crossing")
    j = int(negatives[0])
    k = j - 1
    w = d[k] / (d[k] - d[j])
    return float(far[k] + w * (far[j] - far[k]))


def det_points(curve: Sequence[CurvePoint], floor: float = 1e-6) -> list[tuple[float, float]]:
    """Map curve error rates through the probit after clamping to
    [floor, 1 - floor], yielding standard DET coordinates."""
    out = []
    for p in curve:
        fa = min(max(p.far, floor), 1.0 - floor)
        fr = min(max(p.frr, floor), 1.0 - floor)
        out.append((float(ndtri(fa)), float(ndtri(fr))))
    return out


# ---------------------------------------------------------------------------
# Calibration quality (Cllr and its PAV-optimal floor)
# ---------------------------------------------------------------------------


def _pav_posteriors(scores: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted pool-adjacent-violators fit of a non-decreasing posterior.

    Tied scores are pooled first so the fit is a function of the score.
    Returns one probability per input sample (original order irrelevant to
    the caller, which aggregates by class).
    """
    uniq, inverse = np.unique(scores, return_inverse=True)
    wsum = np.bincount(inverse, weights=weights, minlength=uniq.size)
    ysum = np.bincount(inverse, weights=weights * labels, minlength=uniq.size)

    ws: list[float] = []
    ys: list[float] = []
    counts: list[int] = []
    for k in range(uniq.size):
        cw, cy, cn = float(wsum[k]), float(ysum[k]), 1
        # merge while the previous block mean >= current (cross-multiplied)
        while ws and ys[-1] * cw >= cy * ws[-1]:
            cw += ws.pop()
            cy += ys.pop()
            cn += counts.pop()
        ws.append(cw)
        ys.append(cy)
        counts.append(cn)
    block_p = np.repeat(
        np.array(ys) / np.array(ws), np.array(counts, dtype=np.int64)
    )
    return block_p[inverse]


def compute_cllr(genuine_llr, impostor_llr) -> tuple[float, float]:
    """Log-likelihood-ratio cost and its optimal-calibration floor.

    cllr = 0.5 * mean_gen log2(1 + e^-llr) + 0.5 * mean_imp log2(1 + e^llr),
    in bits; 1.0 for a system that always outputs llr = 0.  cllr_min applies
    the PAV-optimal monotone recalibration to the same scores first, so
    cllr - cllr_min isolates the calibration loss.
    """
    g = _check_scores("genuine", genuine_llr)
    i = _check_scores("impostor", impostor_llr)
    cllr = 0.5 * float(np.mean(np.logaddexp(0.0, -g))) / _LN2 \
        + 0.5 * float(np.mean(np.logaddexp(0.0, i))) / _LN2

    scores = np.concatenate((g, i))
    labels = np.concatenate((np.ones(g.size), np.zeros(i.size)))
    weights = np.concatenate(
        (np.full(g.size, 0.5 / g.size), np.full(i.size, 0.5 / i.size))
    )
    p = _pav_posteriors(scores, labels, weights)
    with np.errstate(divide="ignore"):
        llr_opt = np.log(p) - np.log1p(-p)
    # p = 0 blocks hold no genuine mass and p = 1 blocks no impostor mass,
    # so the infinite llrs below always land on zero-cost terms.
    gen_terms = np.logaddexp(0.0, -llr_opt[:g.size])
    imp_terms = np.logaddexp(0.0, llr_opt[g.size:])
    cllr_min = 0.5 * float(np.mean(gen_terms)) / _LN2 + 0.5 * float(np.mean(imp_terms)) / _LN2
    return cllr, cllr_min


# ---------------------------------------------------------------------------
# Synthetic score sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassGaussians:
    """Per-comparator score model of one condition: class-conditional normals."""

    genuine_mean: float
    genuine_std: float
    impostor_mean: float
    impostor_std: float


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic multi-comparator score set.

    ``params`` maps condition -> comparator -> ClassGaussians, ``counts``
    maps condition -> (n_genuine, n_impostor).  ``correlation`` is the common
    pairwise correlation between comparators within a class draw.
    """

    comparator_ids: tuple[str, ...]
    params: Mapping[str, Mapping[str, ClassGaussians]]
    counts: Mapping[str, tuple[int, int]]
    correlation: float = 0.0


def _chol_equicorrelation(k: int, rho: float) -> np.ndarray:
    if abs(rho) >= 1.0:
        raise ValueError(f"invalid correlation {rho}: |rho| must be < 1")
    corr = np.full((k, k), rho)
    np.fill_diagonal(corr, 1.0)
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            f"correlation {rho} is not positive definite for {k} comparators"
        ) from exc


def _synthetic_keys(condition: str, ci: int, n: int, label: str, sensors: tuple[str, str]):
    """Deterministic probe/gallery key pairs for fabricated trials."""
    if is_same_sensor(condition):
        sp = sg = condition_sensor(condition)
    else:
        sp, sg = sensors
    pairs = []
    for t in range(n):
        if label == GENUINE:
            subj = f"c{ci}g{t:06d}"
            pairs.append((SampleKey(subj, "left", sp, 1), SampleKey(subj, "left", sg, 2)))
        else:
            pairs.append(
                (
                    SampleKey(f"c{ci}i{t:06d}", "left", sp, 1),
                    SampleKey(f"c{ci}j{t:06d}", "left", sg, 2),
                )
            )
    return pairs


def generate_synthetic_scoreset(spec: SyntheticSpec, seed: int) -> ScoreSet:
    """Draw a deterministic score set from per-condition Gaussian models.

    Comparator scores within one trial are drawn jointly with the requested
    equicorrelation.  Conditions are generated in sorted order, genuine
    before impostor, so the same (spec, seed) always reproduces the same set
    bit for bit.
    """
    if not spec.comparator_ids:
        raise ValueError("need at least one comparator")
    conds = sorted(spec.params)
    if not conds:
        raise ValueError("need at least one condition")
    if sorted(spec.counts) != conds:
        raise ValueError("params and counts must cover the same conditions")
    for cond in conds:
        got = sorted(spec.params[cond])
        if got != sorted(spec.comparator_ids):
            raise ValueError(f"condition {cond!r} params cover {got}, expected {sorted(spec.comparator_ids)}")
        n_gen, n_imp = spec.counts[cond]
        if n_gen < 1 or n_imp < 1:
            raise ValueError(f"condition {cond!r} needs positive genuine and impostor counts")
        for cg in spec.params[cond].values():
            if cg.genuine_std <= 0 or cg.impostor_std <= 0:
                raise ValueError(f"condition {cond!r} has non-positive std")

    k = len(spec.comparator_ids)
    chol = _chol_equicorrelation(k, spec.correlation)
    same_sensors = sorted(condition_sensor(c) for c in conds if is_same_sensor(c))
    if len(same_sensors) >= 2:
        sensors = (same_sensors[0], same_sensors[1])
    elif len(same_sensors) == 1:
        sensors = (same_sensors[0], same_sensors[0] + "_alt")
    else:
        sensors = ("sensor_a", "sensor_b")

    rng = np.random.default_rng(seed)
    trials: list[TrialScore] = []
    for ci, cond in enumerate(conds):
        n_gen, n_imp = spec.counts[cond]
        for label, n in ((GENUINE, n_gen), (IMPOSTOR, n_imp)):
            z = rng.standard_normal((n, k)) @ chol.T
            cols = np.empty((n, k))
            for j, cid in enumerate(spec.comparator_ids):
                cg = spec.params[cond][cid]
                if label == GENUINE:
                    cols[:, j] = cg.genuine_mean + cg.genuine_std * z[:, j]
                else:
                    cols[:, j] = cg.impostor_mean + cg.impostor_std * z[:, j]
            keys = _synthetic_keys(cond, ci, n, label, sensors)
            for t, (probe, gallery) in enumerate(keys):
                scores = {cid: float(cols[t, j]) for j, cid in enumerate(spec.comparator_ids)}
                trials.append(TrialScore(TrialSpec(probe, gallery, label, cond), scores))
    return ScoreSet(tuple(spec.comparator_ids), trials, PROVENANCE_COMPUTED)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class ConditionMetrics:
    eer: float
    cllr: float
    cllr_min: float
    curve: list[CurvePoint] = field(repr=False, default_factory=list)
    det: list[tuple[float, float]] = field(repr=False, default_factory=list)


@dataclass
class EvalReport:
    """Per-condition metrics plus the pooled "all" entry."""

    per_condition: dict[str, ConditionMetrics]


def evaluate_llrs(by_condition: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> EvalReport:
    """Full metric set per condition and pooled over all conditions."""
    out: dict[str, ConditionMetrics] = {}
    gens, imps = [], []
    for cond in sorted(by_condition):
        g, i = by_condition[cond]
        out[cond] = _metrics(g, i)
        gens.append(np.asarray(g, dtype=np.float64))
        imps.append(np.asarray(i, dtype=np.float64))
    out[ALL_CONDITIONS] = _metrics(np.concatenate(gens), np.concatenate(imps))
    return EvalReport(out)


def _metrics(genuine, impostor) -> ConditionMetrics:
    curve = compute_curve(genuine, impostor)
    cllr, cllr_min = compute_cllr(genuine, impostor)
    return ConditionMetrics(
        eer=compute_eer(curve),
        cllr=cllr,
        cllr_min=cllr_min,
        curve=curve,
        det=det_points(curve),
    )


def condition_order(conditions: Sequence[str], with_all: bool = True) -> list[str]:
    """Same-sensor conditions sorted, then cross-sensor, then "all"."""
    same = sorted(c for c in conditions if is_same_sensor(c))
    rest = [c for c in conditions if not is_same_sensor(c) and c != ALL_CONDITIONS]
    out = same + sorted(rest)
    if with_all:
        out.append(ALL_CONDITIONS)
    return out


def format_relative(change: float | None) -> str:
    """Relative EER change as a signed percent string: "+0%", "-43.8%".

    One decimal unless the rounded value is integral; infinite change (from a
    zero baseline) renders as "+inf%".
    """
    if change is None:
        return ""
    if math.isinf(change):
        return "+inf%"
    pct = round(change * 100.0, 1)
    if pct == int(pct):
        return f"{int(pct):+d}%"
    return f"{pct:+.1f}%"


def report_table(results: Sequence, conditions: Sequence[str]) -> tuple[str, str]:
    """Render ranked fusion results as (csv_text, aligned_text).

    ``results`` rows need ``comparator_ids``, ``eer`` (condition -> EER) and
    ``relative`` (condition -> fraction, or None for single-comparator rows,
    whose bracket cells stay empty).  EER cells show percent with two
    decimals; bracketed cells append the relative change against the best
    individual comparator of the same column.
    """
    conds = list(conditions)
    header = ["rank", "n_systems", "systems"]
    for cond in conds:
        header += [f"{cond}_eer_pct", f"{cond}_vs_best"]
    csv_lines = [",".join(header)]
    cells_rows: list[list[str]] = []
    for rank, row in enumerate(results, start=1):
        ids = "+".join(row.comparator_ids)
        csv_row = [str(rank), str(len(row.comparator_ids)), ids]
        text_row = [str(rank), ids]
        for cond in conds:
            eer_pct = f"{row.eer[cond] * 100.0:.2f}"
            rel = format_relative(None if row.relative is None else row.relative[cond])
            csv_row += [eer_pct, rel]
            text_row.append(eer_pct if not rel else f"{eer_pct} ({rel})")
        csv_lines.append(",".join(csv_row))
        cells_rows.append(text_row)

    text_header = ["#", "systems"] + conds
    widths = [
        max(len(text_header[c]), *(len(r[c]) for r in cells_rows)) if cells_rows else len(text_header[c])
        for c in range(len(text_header))
    ]
    def fmt(row): return "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
    text_lines = [fmt(text_header), fmt(["-" * w for w in widths])]
    text_lines += [fmt(r) for r in cells_rows]
    return "\n".join(csv_lines) + "\n", "\n".join(text_lines) + "\n"


def curve_csv(curve: Sequence[CurvePoint]) -> str:
    lines = ["threshold,far,frr"]
    lines += [f"{repr(p.threshold)},{repr(p.far)},{repr(p.frr)}" for p in curve]
    return "\n".join(lines) + "\n"


def det_csv(points: Sequence[tuple[float, float]]) -> str:
    lines = ["probit_far,probit_frr"]
    lines += [f"{repr(x)},{repr(y)}" for x, y in points]
    return "\n".join(lines) + "\n"
