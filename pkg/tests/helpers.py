"""Shared builders for the test suite: tiny image datasets, config files,
and synthetic score sets."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from perifuse.dataset import GENUINE, SampleKey, TrialSpec
from perifuse.evaluation import ClassGaussians, SyntheticSpec, generate_synthetic_scoreset
from perifuse.matching import PROVENANCE_COMPUTED, ScoreSet, TrialScore

IMG_SIZE = 360
R_SCLERA = 80.0
R_IRIS = 30.0


def eye_image(subject: int, sensor: str, sample: int, constant: float | None = None) -> np.ndarray:
    """Synthetic periocular-style frame: per-subject texture, sensor-specific
    gain and noise, concentric iris/sclera rings at the image center."""
    if constant is not None:
        return np.full((IMG_SIZE, IMG_SIZE), constant)
    rng = np.random.default_rng([subject, 977])
    base = rng.normal(0.5, 0.18, (IMG_SIZE // 4, IMG_SIZE // 4))
    tex = np.kron(base, np.ones((4, 4)))[:IMG_SIZE, :IMG_SIZE]
    yy, xx = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE]
    rr = np.hypot(xx - IMG_SIZE / 2, yy - IMG_SIZE / 2)
    img = 0.55 + 0.25 * tex
    ring = (rr >= R_IRIS) & (rr < R_SCLERA)
    img = np.where(ring, 0.75 - 0.3 * tex, img)
    img = np.where(rr < R_IRIS, 0.15 + 0.1 * tex, img)
    scode = {"dslr": 1, "phone": 2}[sensor]
    srng = np.random.default_rng([subject, scode, sample])
    if sensor == "dslr":
        img = img * 0.9 + 0.05 + srng.normal(0, 0.012, img.shape)
    else:
        img = img * 1.08 - 0.02 + srng.normal(0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0)


def write_eye_dataset(root: Path, constant: float | None = None) -> Path:
    """2 subjects x 2 sensors x 2 samples with annotations; returns manifest path."""
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows, anns = [], []
    c = IMG_SIZE / 2.0
    for subject in (1, 2):
        for sensor in ("dslr", "phone"):
            for sample in (1, 2):
                arr = (eye_image(subject, sensor, sample, constant) * 255).round().astype(np.uint8)
                name = f"s{subject}_{sensor}_{sample}.png"
                Image.fromarray(arr, mode="L").save(root / "images" / name)
                rows.append([f"subj{subject}", "left", sensor, sample, f"images/{name}"])
                anns.append([f"subj{subject}", "left", sensor, sample,
                             c, c, R_IRIS, c, c, R_SCLERA])
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "eye", "sensor_id", "sample_idx", "image_path"])
        w.writerows(rows)
    with open(root / "annotations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "eye", "sensor_id", "sample_idx",
                    "iris_cx", "iris_cy", "iris_r", "sclera_cx", "sclera_cy", "sclera_r"])
        w.writerows(anns)
    return manifest


def write_config(path: Path, body: str) -> Path:
    path.write_text(body)
    return path


IMAGE_CONFIG = """\
[meta]
version = 1
seed = 7

[paths]
manifest = manifest.csv
work_dir = {work_dir}

[features]
grid_n = 4

[fusion]
strategy = sensor_dependent
"""

SYNTH_CONFIG = """\
[meta]
version = 1
seed = {seed}

[paths]
work_dir = {work_dir}

[fusion]
strategy = {strategy}

[synthetic]
enabled = true
comparators = alpha,beta
correlation = 0.2
params.same_sensor:a.alpha = 2.0,1.0,0.0,1.0
params.same_sensor:a.beta = 1.6,1.0,0.0,1.0
params.same_sensor:b.alpha = 2.2,1.0,0.0,1.0
params.same_sensor:b.beta = 1.5,1.0,0.0,1.0
params.cross_sensor.alpha = 1.4,1.0,0.0,1.0
params.cross_sensor.beta = 1.2,1.0,0.0,1.0
counts.same_sensor:a = 150,300
counts.same_sensor:b = 150,300
counts.cross_sensor = 300,600
"""


def gaussian_scoreset(
    cond_means: dict[str, dict[str, tuple[float, float]]],
    counts: dict[str, tuple[int, int]],
    rho: float = 0.0,
    seed: int = 0,
    stds: float = 1.0,
) -> ScoreSet:
    """Equal-variance Gaussian score set. cond_means maps condition ->
    comparator -> (genuine_mean, impostor_mean)."""
    cids = tuple(sorted(next(iter(cond_means.values()))))
    params = {
        cond: {cid: ClassGaussians(mg, stds, mi, stds) for cid, (mg, mi) in per.items()}
        for cond, per in cond_means.items()
    }
    return generate_synthetic_scoreset(SyntheticSpec(cids, params, counts, rho), seed)


def standard_conditions(
    gen_mean: float = 2.0,
    imp_mean: float = 0.0,
    n_gen: int = 300,
    n_imp: int = 600,
    rho: float = 0.0,
    seed: int = 0,
    cids: tuple[str, ...] = ("c1",),
) -> ScoreSet:
    """Three-condition set (two same-sensor + cross) with identical Gaussians,
    enough to satisfy strategy coverage checks."""
    conds = ("same_sensor:a", "same_sensor:b", "cross_sensor")
    cond_means = {c: {cid: (gen_mean, imp_mean) for cid in cids} for c in conds}
    counts = {c: (n_gen, n_imp) for c in conds}
    return gaussian_scoreset(cond_means, counts, rho, seed)


def manual_scoreset(
    condition: str,
    per_comparator_genuine: dict[str, list[float]],
    per_comparator_impostor: dict[str, list[float]],
) -> ScoreSet:
    """Build a single-condition ScoreSet from explicit score lists (all
    comparators must give lists of equal length per class)."""
    cids = tuple(per_comparator_genuine)
    n_gen = len(next(iter(per_comparator_genuine.values())))
    n_imp = len(next(iter(per_comparator_impostor.values())))
    trials = []
    for t in range(n_gen):
        k1 = SampleKey(f"g{t}", "left", "sa", 1)
        k2 = SampleKey(f"g{t}", "left", "sb", 2)
        trials.append(TrialScore(
            TrialSpec(k1, k2, GENUINE, condition),
            {cid: float(per_comparator_genuine[cid][t]) for cid in cids},
        ))
    for t in range(n_imp):
        k1 = SampleKey(f"i{t}", "left", "sa", 1)
        k2 = SampleKey(f"j{t}", "left", "sb", 2)
        trials.append(TrialScore(
            TrialSpec(k1, k2, "impostor", condition),
            {cid: float(per_comparator_impostor[cid][t]) for cid in cids},
        ))
    return ScoreSet(cids, trials, PROVENANCE_COMPUTED)


def vssiris_shaped_refs():
    """56 eye instances x 2 sensors x 5 samples, mirroring the reference
    collection's shape (28 subjects, both eyes)."""
    from perifuse.dataset import SampleRef

    refs = []
    for subject in range(1, 29):
        for eye in ("left", "right"):
            for sensor in ("dslr", "phone"):
                for sample in range(1, 6):
                    refs.append(SampleRef(
                        subject_id=f"s{subject:02d}",
                        eye=eye,
                        sensor_id=sensor,
                        sample_idx=sample,
                        image_path=f"{subject:02d}_{eye}_{sensor}_{sample}.png",
                    ))
    return refs
