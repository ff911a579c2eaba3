"""Score fusion by linear logistic regression in log-likelihood-ratio form.

A fusion model is an affine map llr = a0 + sum_i a_i * s_i trained to
minimize the prior-weighted logistic loss, which makes the fused score an
approximate log-likelihood ratio: thresholding at 0 is the Bayes decision at
the training prior.  Two deployment strategies are supported: one model per
acquisition condition (sensor-dependent) or a single model pooled over all
conditions (sensor-independent).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .dataset import CROSS_SENSOR, TrialSpec, is_same_sensor
from .errors import ConfigError, DataError, NumericError
from .evaluation import ALL_CONDITIONS, compute_curve, compute_eer
from .matching import ScoreSet, TrialScore

SENSOR_DEPENDENT = "sensor_dependent"
SENSOR_INDEPENDENT = "sensor_independent"
STRATEGIES = (SENSOR_DEPENDENT, SENSOR_INDEPENDENT)

POOLED = "pooled"

RIDGE = 1e-6
MAX_ITERS = 1000
LOSS_DECREASE_TOL = 1e-10

MAX_SEARCH_COMPARATORS = 20


@dataclass
class FusionModel:
    """Affine llr map over a fixed comparator tuple."""

    comparator_ids: tuple[str, ...]
    a0: float
    a: np.ndarray
    trained_condition: str
    training_meta: dict


@dataclass(frozen=True)
class CalibratedScore:
    trial: TrialSpec
    llr: float


def fit_logistic_llr(
    scores: np.ndarray,
    genuine: np.ndarray,
    prior: float = 0.5,
) -> tuple[float, np.ndarray, list[float]]:
    """Minimize the prior-weighted logistic loss over affine weights.

    The loss is  prior/G * sum_gen log(1 + e^-(s_cal + tau))
              + (1-prior)/I * sum_imp log(1 + e^(s_cal + tau))
    with tau = logit(prior) and s_cal = a0 + a . s, plus an L2 ridge of
    ``RIDGE`` on the slope weights only, which keeps perfectly separable
    data at finite weights.  Deterministic full-batch gradient descent from
    zero weights with backtracking line search; stops when the loss decrease
    falls below 1e-10 or after 1000 iterations.

    Args:
        scores: (n, k) matrix, columns already scaled sanely by the caller.
        genuine: boolean mask of genuine rows.
        prior: effective genuine prior in (0, 1).

    Returns:
        (a0, slopes, loss trajectory); the trajectory is non-increasing.
    """
    X = np.asarray(scores, dtype=np.float64)
    y = np.asarray(genuine, dtype=bool)
    n, k = X.shape
    n_gen = int(y.sum())
    n_imp = n - n_gen
    if n_gen == 0 or n_imp == 0:
        raise DataError("training slice contains a single class")
    if not (0.0 < prior < 1.0):
        raise ValueError(f"prior must be in (0, 1), got {prior}")
    if not np.isfinite(X).all():
        raise DataError("training scores contain non-finite values")

    tau = math.log(prior / (1.0 - prior))
    w_gen = prior / n_gen
    w_imp = (1.0 - prior) / n_imp

    def loss_at(w: np.ndarray) -> float:
        z = w[0] + X @ w[1:] + tau
        value = w_gen * np.logaddexp(0.0, -z[y]).sum() + w_imp * np.logaddexp(0.0, z[~y]).sum()
        return float(value + 0.5 * RIDGE * np.dot(w[1:], w[1:]))

    def grad_at(w: np.ndarray) -> np.ndarray:
        z = w[0] + X @ w[1:] + tau
        r = np.empty(n)
        r[y] = w_gen * (expit(z[y]) - 1.0)
        r[~y] = w_imp * expit(z[~y])
        g = np.empty(k + 1)
        g[0] = r.sum()
        g[1:] = X.T @ r + RIDGE * w[1:]
        return g

    w = np.zeros(k + 1)
    loss = loss_at(w)
    losses = [loss]
    step = 1.0
    for _ in range(MAX_ITERS):
        g = grad_at(w)
        gnorm2 = float(np.dot(g, g))
        if gnorm2 == 0.0:
            break
        t = step
        accepted = None
        while t >= 1e-20:
            cand = w - t * g
            cand_loss = loss_at(cand)
            if cand_loss <= loss - 1e-4 * t * gnorm2:
                accepted = (cand, cand_loss, t)
                break
            t *= 0.5
        if accepted is None:
            break
        w, new_loss, t = accepted
        step = t * 2.0
        losses.append(new_loss)
        decrease = loss - new_loss
        loss = new_loss
        if decrease < LOSS_DECREASE_TOL:
            break
    if not np.isfinite(w).all():
        raise NumericError("logistic fit diverged to non-finite weights")
    return float(w[0]), w[1:], losses


def train_llr(
    scores: ScoreSet,
    comparator_ids: Sequence[str] | None = None,
    prior: float = 0.5,
) -> FusionModel:
    """Train an llr fusion model on one score slice.

    Comparator columns are standardized internally (training-slice mean and
    std) before optimization and the fitted weights are mapped back to raw
    score units, so retraining on affinely transformed scores reproduces the
    same llr outputs.

    Raises:
        DataError: single-class slice or non-finite scores.
    """
    cids = tuple(comparator_ids) if comparator_ids is not None else scores.comparator_ids
    X = scores.matrix(cids)
    y = scores.genuine_mask()

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0.0, sd, 1.0)
    c0, c, losses = fit_logistic_llr((X - mu) / sd, y, prior)

    a = c / sd
    a0 = c0 - float(np.dot(c, mu / sd))
    conds = scores.conditions()
    trained = conds[0] if len(conds) == 1 else POOLED
    meta = {
        "iterations": len(losses) - 1,
        "final_loss": losses[-1],
        "effective_prior": prior,
    }
    return FusionModel(cids, a0, a, trained, meta)


def apply_fusion(model: FusionModel, trial_score: TrialScore) -> CalibratedScore:
    """Fused llr of one trial: a0 + sum_i a_i * s_i over the model's comparators."""
    total = model.a0
    for cid, weight in zip(model.comparator_ids, model.a):
        if cid not in trial_score.scores:
            raise DataError(
                f"trial {trial_score.trial.probe} vs {trial_score.trial.gallery} "
                f"lacks score for {cid!r}"
            )
        total += weight * trial_score.scores[cid]
    return CalibratedScore(trial_score.trial, float(total))


def apply_fusion_array(model: FusionModel, scores: ScoreSet) -> np.ndarray:
    """Fused llrs for every trial of a score set, in trial order."""
    X = scores.matrix(model.comparator_ids)
    return model.a0 + X @ model.a


def _check_coverage(scores: ScoreSet) -> list[str]:
    conds = scores.conditions()
    same = [c for c in conds if is_same_sensor(c)]
    if len(same) < 2 or CROSS_SENSOR not in conds:
        raise DataError(
            "score set must cover two same-sensor conditions and cross_sensor; "
            f"found {conds}"
        )
    return conds


def train_strategy(
    scores: ScoreSet,
    strategy: str,
    comparator_ids: Sequence[str] | None = None,
    prior: float = 0.5,
) -> dict[str, FusionModel]:
    """Train fusion models per the deployment strategy.

    sensor_dependent returns one model per condition; sensor_independent
    returns a single pooled model mapped to every condition.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    conds = _check_coverage(scores)
    if strategy == SENSOR_DEPENDENT:
        return {
            cond: train_llr(scores.slice_condition(cond), comparator_ids, prior)
            for cond in conds
        }
    pooled = train_llr(scores, comparator_ids, prior)
    return {cond: pooled for cond in conds}


def _fold_ids(n: int, folds: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64) % folds


def condition_llrs(
    scores: ScoreSet,
    strategy: str,
    comparator_ids: Sequence[str] | None = None,
    prior: float = 0.5,
    folds: int = 0,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-condition (genuine, impostor) fused llr arrays under a strategy.

    With ``folds`` == 0 models are trained in-sample on the full slices.
    With ``folds`` >= 2 each trial's llr comes from the model trained with
    that trial's fold held out (fold assignment is by position within the
    condition slice, so it is deterministic).
    """
    if folds < 0 or folds == 1:
        raise ConfigError(f"folds must be 0 or >= 2, got {folds}")
    conds = _check_coverage(scores)
    per_cond = {c: scores.slice_condition(c) for c in conds}

    llrs: dict[str, np.ndarray] = {}
    if folds == 0:
        models = train_strategy(scores, strategy, comparator_ids, prior)
        for cond in conds:
            llrs[cond] = apply_fusion_array(models[cond], per_cond[cond])
    else:
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        fold_of = {c: _fold_ids(len(per_cond[c].trials), folds) for c in conds}
        for c in conds:
            llrs[c] = np.empty(len(per_cond[c].trials))
        for f in range(folds):
            train_parts = {
                c: per_cond[c].subset(np.nonzero(fold_of[c] != f)[0]) for c in conds
            }
            if strategy == SENSOR_DEPENDENT:
                fold_models = {
                    c: train_llr(train_parts[c], comparator_ids, prior) for c in conds
                }
            else:
                merged = ScoreSet(
                    scores.comparator_ids,
                    [t for c in conds for t in train_parts[c].trials],
                    scores.provenance,
                )
                pooled = train_llr(merged, comparator_ids, prior)
                fold_models = {c: pooled for c in conds}
            for c in conds:
                held = np.nonzero(fold_of[c] == f)[0]
                if held.size:
                    part = per_cond[c].subset(held)
                    llrs[c][held] = apply_fusion_array(fold_models[c], part)

    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for cond in conds:
        gen = per_cond[cond].genuine_mask()
        out[cond] = (llrs[cond][gen], llrs[cond][~gen])
    return out


# ---------------------------------------------------------------------------
# Exhaustive subset search
# ---------------------------------------------------------------------------


@dataclass
class SubsetResult:
    """One row of the fusion search: a comparator subset and its EERs."""

    comparator_ids: tuple[str, ...]
    eer: dict[str, float]
    relative: dict[str, float] | None


def subset_search(
    scores: ScoreSet,
    strategy: str,
    comparator_ids: Sequence[str] | None = None,
    prior: float = 0.5,
    folds: int = 0,
) -> list[SubsetResult]:
    """Evaluate every non-empty comparator subset and rank by cross-sensor EER.

    Rows carry per-condition EERs plus the pooled "all" entry, and for
    multi-comparator subsets the relative EER change against the best single
    comparator of the same column.  Ordering: cross-sensor EER ascending,
    ties broken by smaller subset, then lexicographic comparator tuple.

    Raises:
        ConfigError: more than 20 comparators (2^N guard) or none at all.
    """
    cids = tuple(comparator_ids) if comparator_ids is not None else scores.comparator_ids
    if len(cids) == 0:
        raise ConfigError("subset search needs at least one comparator")
    if len(cids) > MAX_SEARCH_COMPARATORS:
        raise ConfigError(
            f"refusing subset search over {len(cids)} comparators "
            f"(limit {MAX_SEARCH_COMPARATORS}; 2^N subsets)"
        )

    rows: list[tuple[tuple[str, ...], dict[str, float]]] = []
    for r in range(1, len(cids) + 1):
        for combo in itertools.combinations(cids, r):
            by_cond = condition_llrs(scores, strategy, combo, prior, folds)
            eer = {c: compute_eer(compute_curve(g, i)) for c, (g, i) in by_cond.items()}
            all_gen = np.concatenate([g for g, _ in by_cond.values()])
            all_imp = np.concatenate([i for _, i in by_cond.values()])
            eer[ALL_CONDITIONS] = compute_eer(compute_curve(all_gen, all_imp))
            rows.append((combo, eer))

    conds = list(rows[0][1].keys())
    best_single = {
        c: min(eer[c] for combo, eer in rows if len(combo) == 1) for c in conds
    }
    results = []
    for combo, eer in rows:
        if len(combo) == 1:
            relative = None
        else:
            relative = {}
            for c in conds:
                base = best_single[c]
                if base == 0.0:
                    relative[c] = 0.0 if eer[c] == 0.0 else math.inf
                else:
                    relative[c] = (eer[c] - base) / base
        results.append(SubsetResult(combo, eer, relative))
    results.sort(key=lambda row: (row.eer[CROSS_SENSOR], len(row.comparator_ids), row.comparator_ids))
    return results


# ---------------------------------------------------------------------------
# Model I/O
# ---------------------------------------------------------------------------


def save_model(model: FusionModel, path: str | Path) -> None:
    payload = {
        "comparator_ids": list(model.comparator_ids),
        "a0": model.a0,
        "a": [float(v) for v in model.a],
        "trained_condition": model.trained_condition,
        "training_meta": model.training_meta,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_model(path: str | Path) -> FusionModel:
    path = Path(path)
    try:
        with open(path) as fh:
            payload = json.load(fh)
        return FusionModel(
            comparator_ids=tuple(payload["comparator_ids"]),
            a0=float(payload["a0"]),
            a=np.asarray(payload["a"], dtype=np.float64),
            trained_condition=payload["trained_condition"],
            training_meta=payload["training_meta"],
        )
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DataError(f"cannot read fusion model {path}: {exc}") from exc
