"""Sample bookkeeping and verification trial generation.

A sample is one image of one eye captured by one sensor.  An eye instance
(subject_id, eye) is the identity unit: trials comparing two samples of the
same instance are genuine, everything else is impostor.  Trial generation is
pure combinatorics over the manifest and never touches pixel data, so the
protocol can be regenerated exactly from the manifest alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

from .errors import DataError

EYES = ("left", "right")

GENUINE = "genuine"
IMPOSTOR = "impostor"

CROSS_SENSOR = "cross_sensor"
_SAME_PREFIX = "same_sensor:"

MANIFEST_FIELDS = ("subject_id", "eye", "sensor_id", "sample_idx", "image_path")
ANNOTATION_FIELDS = (
    "subject_id", "eye", "sensor_id", "sample_idx",
    "iris_cx", "iris_cy", "iris_r", "sclera_cx", "sclera_cy", "sclera_r",
)


def same_sensor(sensor_id: str) -> str:
    """Condition string for same-sensor comparisons on one device."""
    return _SAME_PREFIX + sensor_id


def is_same_sensor(condition: str) -> bool:
    return condition.startswith(_SAME_PREFIX)


def condition_sensor(condition: str) -> str:
    """Sensor id carried by a same-sensor condition string."""
    if not is_same_sensor(condition):
        raise ValueError(f"not a same-sensor condition: {condition!r}")
    return condition[len(_SAME_PREFIX):]


class SampleKey(NamedTuple):
    subject_id: str
    eye: str
    sensor_id: str
    sample_idx: int

    @property
    def instance(self) -> tuple[str, str]:
        return (self.subject_id, self.eye)


@dataclass(frozen=True)
class SampleRef:
    """One manifest row: a single capture plus the path to its image."""

    subject_id: str
    eye: str
    sensor_id: str
    sample_idx: int
    image_path: str

    @property
    def key(self) -> SampleKey:
        return SampleKey(self.subject_id, self.eye, self.sensor_id, self.sample_idx)

    @property
    def instance(self) -> tuple[str, str]:
        return (self.subject_id, self.eye)


@dataclass(frozen=True)
class CircleAnnotation:
    """Iris and sclera circles for one sample, in source-image pixel coordinates."""

    subject_id: str
    eye: str
    sensor_id: str
    sample_idx: int
    iris_cx: float
    iris_cy: float
    iris_r: float
    sclera_cx: float
    sclera_cy: float
    sclera_r: float

    @property
    def key(self) -> SampleKey:
        return SampleKey(self.subject_id, self.eye, self.sensor_id, self.sample_idx)


@dataclass(frozen=True)
class TrialSpec:
    """One verification comparison: probe sample vs gallery sample."""

    probe: SampleKey
    gallery: SampleKey
    label: str
    condition: str


def _parse_sample_row(row: dict, path: Path, line: int) -> SampleRef:
    eye = row["eye"].strip()
    if eye not in EYES:
        raise DataError(f"{path}:{line}: eye must be one of {EYES}, got {eye!r}")
    try:
        idx = int(row["sample_idx"])
    except ValueError as exc:
        raise DataError(f"{path}:{line}: bad sample_idx {row['sample_idx']!r}") from exc
    if idx < 1:
        raise DataError(f"{path}:{line}: sample_idx must be >= 1, got {idx}")
    return SampleRef(
        subject_id=row["subject_id"].strip(),
        eye=eye,
        sensor_id=row["sensor_id"].strip(),
        sample_idx=idx,
        image_path=row["image_path"].strip(),
    )


def _parse_annotation_row(row: dict, path: Path, line: int) -> CircleAnnotation:
    eye = row["eye"].strip()
    if eye not in EYES:
        raise DataError(f"{path}:{line}: eye must be one of {EYES}, got {eye!r}")
    try:
        vals = {f: float(row[f]) for f in ANNOTATION_FIELDS[4:]}
        idx = int(row["sample_idx"])
    except ValueError as exc:
        raise DataError(f"{path}:{line}: non-numeric annotation field") from exc
    ann = CircleAnnotation(
        subject_id=row["subject_id"].strip(),
        eye=eye,
        sensor_id=row["sensor_id"].strip(),
        sample_idx=idx,
        **vals,
    )
    if not (ann.sclera_r > ann.iris_r > 0):
        raise DataError(
            f"{path}:{line}: radii must satisfy sclera_r > iris_r > 0 "
            f"(got iris {ann.iris_r}, sclera {ann.sclera_r})"
        )
    if min(ann.iris_cx, ann.iris_cy, ann.sclera_cx, ann.sclera_cy) < 0:
        raise DataError(f"{path}:{line}: circle centers must be non-negative")
    return ann


def _read_rows(path: Path, fields: tuple[str, ...]) -> Iterable[tuple[int, dict]]:
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        got = tuple(reader.fieldnames or ())
        if got != fields:
            raise DataError(f"{path}: expected header {','.join(fields)}, got {','.join(got)}")
        for line, row in enumerate(reader, start=2):
            if any(v is None for v in row.values()):
                raise DataError(f"{path}:{line}: short row")
            yield line, row


def load_manifest(
    manifest_path: str | Path,
    annotations_path: str | Path | None = None,
) -> tuple[list[SampleRef], list[CircleAnnotation]]:
    """Load the sample manifest and its circle annotations.

    Args:
        manifest_path: CSV with header ``subject_id,eye,sensor_id,sample_idx,image_path``.
        annotations_path: CSV keyed by the same sample columns; defaults to
            ``annotations.csv`` next to the manifest.

    Returns:
        ``(samples, annotations)`` with one annotation per sample, both in
        manifest row order.

    Raises:
        DataError: duplicate sample key, or a sample whose annotation is missing.
    """
    manifest_path = Path(manifest_path)
    if annotations_path is None:
        annotations_path = manifest_path.parent / "annotations.csv"
    annotations_path = Path(annotations_path)

    samples: list[SampleRef] = []
    seen: set[SampleKey] = set()
    for line, row in _read_rows(manifest_path, MANIFEST_FIELDS):
        ref = _parse_sample_row(row, manifest_path, line)
        if ref.key in seen:
            raise DataError(f"{manifest_path}:{line}: duplicate sample key {ref.key}")
        seen.add(ref.key)
        samples.append(ref)

    by_key: dict[SampleKey, CircleAnnotation] = {}
    for line, row in _read_rows(annotations_path, ANNOTATION_FIELDS):
        ann = _parse_annotation_row(row, annotations_path, line)
        if ann.key in by_key:
            raise DataError(f"{annotations_path}:{line}: duplicate annotation key {ann.key}")
        by_key[ann.key] = ann

    annotations: list[CircleAnnotation] = []
    for ref in samples:
        if ref.key not in by_key:
            raise DataError(f"annotation missing for sample {ref.key}")
        annotations.append(by_key[ref.key])
    return samples, annotations


# ---------------------------------------------------------------------------
# Trial generation
# ---------------------------------------------------------------------------


def _instances(samples: Iterable[SampleRef]) -> dict[tuple[str, str], dict[str, list[SampleRef]]]:
    """Group samples as instance -> sensor_id -> samples sorted by sample_idx."""
    out: dict[tuple[str, str], dict[str, list[SampleRef]]] = {}
    for s in samples:
        out.setdefault(s.instance, {}).setdefault(s.sensor_id, []).append(s)
    for per_sensor in out.values():
        for refs in per_sensor.values():
            refs.sort(key=lambda r: r.sample_idx)
    return out


def _sensor_ids(samples: Iterable[SampleRef]) -> list[str]:
    return sorted({s.sensor_id for s in samples})


def _sensor_pairs(samples: Iterable[SampleRef]) -> list[tuple[str, str]]:
    ids = _sensor_ids(samples)
    if len(ids) < 2:
        raise DataError(f"cross-sensor trials need at least two sensors, found {ids}")
    return [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]]


def _check_condition(samples: list[SampleRef], condition: str) -> None:
    if condition == CROSS_SENSOR:
        return
    if not is_same_sensor(condition):
        raise DataError(f"unknown condition {condition!r}")
    sensor = condition_sensor(condition)
    if sensor not in _sensor_ids(samples):
        raise DataError(f"unknown sensor_id {sensor!r} in condition {condition!r}")


def generate_genuine_trials(samples: list[SampleRef], condition: str) -> list[TrialSpec]:
    """All genuine comparisons for one condition, in canonical sorted order.

    Same-sensor: every unordered sample pair within an instance on that sensor,
    probe being the lower sample_idx.  Cross-sensor: every ordered pair taking
    the probe from the lexicographically smaller sensor of each sensor pair.
    """
    _check_condition(samples, condition)
    trials: list[TrialSpec] = []
    grouped = _instances(samples)
    if is_same_sensor(condition):
        sensor = condition_sensor(condition)
        for inst in sorted(grouped):
            refs = grouped[inst].get(sensor, [])
            for i, probe in enumerate(refs):
                for gallery in refs[i + 1:]:
                    trials.append(TrialSpec(probe.key, gallery.key, GENUINE, condition))
    else:
        for sa, sb in _sensor_pairs(samples):
            for inst in sorted(grouped):
                for probe in grouped[inst].get(sa, []):
                    for gallery in grouped[inst].get(sb, []):
                        trials.append(TrialSpec(probe.key, gallery.key, GENUINE, condition))
    trials.sort(key=lambda t: (t.probe, t.gallery))
    return trials


def _first_second(refs: list[SampleRef], sensor: str, inst: tuple[str, str]) -> tuple[SampleRef, SampleRef]:
    by_idx = {r.sample_idx: r for r in refs}
    if 1 not in by_idx or 2 not in by_idx:
        raise DataError(
            f"instance {inst} lacks sample_idx 1 or 2 on sensor {sensor!r}, "
            "required for impostor trials"
        )
    return by_idx[1], by_idx[2]


def generate_impostor_trials(samples: list[SampleRef], condition: str) -> list[TrialSpec]:
    """All impostor comparisons for one condition, in canonical sorted order.

    Uses the first sample of each instance as probe against the second sample
    of every other instance, yielding M*(M-1) ordered trials for M instances.
    Cross-sensor probes come from the lexicographically smaller sensor.
    """
    _check_condition(samples, condition)
    grouped = _instances(samples)
    insts = sorted(grouped)
    trials: list[TrialSpec] = []

    def pairs_for(sensor_probe: str, sensor_gallery: str) -> None:
        firsts = {}
        seconds = {}
        for inst in insts:
            if sensor_probe in grouped[inst]:
                firsts[inst], _ = _first_second(grouped[inst][sensor_probe], sensor_probe, inst)
            if sensor_gallery in grouped[inst]:
                _, seconds[inst] = _first_second(grouped[inst][sensor_gallery], sensor_gallery, inst)
        for pi in insts:
            if pi not in firsts:
                continue
            for gi in insts:
                if gi == pi or gi not in seconds:
                    continue
                trials.append(TrialSpec(firsts[pi].key, seconds[gi].key, IMPOSTOR, condition))

    if is_same_sensor(condition):
        sensor = condition_sensor(condition)
        pairs_for(sensor, sensor)
    else:
        for sa, sb in _sensor_pairs(samples):
            pairs_for(sa, sb)
    trials.sort(key=lambda t: (t.probe, t.gallery))
    return trials


def all_conditions(samples: list[SampleRef]) -> list[str]:
    """Condition strings covered by a manifest: each sensor, then cross-sensor."""
    conds = [same_sensor(s) for s in _sensor_ids(samples)]
    if len(conds) >= 2:
        conds.append(CROSS_SENSOR)
    return conds


def generate_protocol(samples: list[SampleRef]) -> list[TrialSpec]:
    """Full trial list over every condition, genuine then impostor per condition."""
    trials: list[TrialSpec] = []
    for cond in all_conditions(samples):
        trials.extend(generate_genuine_trials(samples, cond))
        trials.extend(generate_impostor_trials(samples, cond))
    return trials
