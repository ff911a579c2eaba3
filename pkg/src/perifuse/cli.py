"""Command line pipeline driver.

Stages map one-to-one onto subcommands and communicate only through files
under the work directory, so any stage can be rerun in isolation:

    normalized/   geometry-normalized, contrast-equalized frames + sidecars
    templates/    per-comparator feature vectors, one file per sample
    scores/       raw trial scores (computed.csv, combined.csv) and
                  calibrated.csv with fused log-likelihood-ratios
    models/       fusion model JSON files
    reports/      metric tables plus curves/ and det/ point files

Exit codes: 0 success, 1 configuration problems, 2 data problems
(missing/corrupt files, protocol mismatches), 3 numeric failures.
All report output is deterministic for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import dataset, evaluation, features, fusion, matching, preproc
from .config import RunConfig, load_config, with_overrides
from .dataset import SampleKey, SampleRef, CircleAnnotation
from .errors import ConfigError, DataError, NumericError

log = logging.getLogger("perifuse")

LOG_ENV = "PERIFUSE_LOG"
_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _setup_logging() -> None:
    raw = os.environ.get(LOG_ENV, "warn").strip().lower()
    if raw not in _LOG_LEVELS:
        raise ConfigError(
            f"{LOG_ENV} must be one of {sorted(_LOG_LEVELS)}, got {raw!r}"
        )
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(_LOG_LEVELS[raw])
    log.propagate = False


# ---------------------------------------------------------------------------
# Work directory layout
# ---------------------------------------------------------------------------


def _dirs(cfg: RunConfig) -> dict[str, Path]:
    w = cfg.work_dir
    return {
        "normalized": w / "normalized",
        "templates": w / "templates",
        "scores": w / "scores",
        "models": w / "models",
        "reports": w / "reports",
        "curves": w / "reports" / "curves",
        "det": w / "reports" / "det",
    }


def _safe_name(raw: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "-", raw)


def _sample_names(samples: list[SampleRef]) -> dict[SampleKey, str]:
    """Filesystem-safe basename per sample; collisions after sanitizing are fatal."""
    names: dict[SampleKey, str] = {}
    taken: dict[str, SampleKey] = {}
    for ref in samples:
        k = ref.key
        name = _safe_name(f"{k.subject_id}_{k.eye}_{k.sensor_id}_{k.sample_idx}")
        if name in taken and taken[name] != k:
            raise DataError(
                f"sample keys {taken[name]} and {k} collide on file name {name!r}"
            )
        taken[name] = k
        names[k] = name
    return names


def _resolve_image(cfg: RunConfig, ref: SampleRef) -> Path:
    p = Path(ref.image_path)
    if p.is_absolute():
        return p
    root = cfg.images_root if cfg.images_root is not None else cfg.manifest.parent
    return root / p


def _load_samples(cfg: RunConfig) -> tuple[list[SampleRef], list[CircleAnnotation]]:
    if cfg.manifest is None:
        raise ConfigError("this command needs [paths] manifest (synthetic mode has none)")
    return dataset.load_manifest(cfg.manifest, cfg.annotations)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def _prepare_params(cfg: RunConfig) -> tuple:
    return (
        cfg.sclera_radius,
        cfg.clahe_tiles,
        float(cfg.clahe_clip_factor),
        cfg.clahe_bins,
    )


def _prepare_one(task: tuple) -> np.ndarray:
    path_str, ann, params = task
    radius, tiles, clip_factor, bins = params
    gray = preproc.gray_from_any(preproc.load_image(path_str))
    h, w = gray.shape[:2]
    if not (0 <= ann.sclera_cx < w and 0 <= ann.sclera_cy < h):
        raise DataError(
            f"sclera center ({ann.sclera_cx}, {ann.sclera_cy}) outside "
            f"{w}x{h} image for sample {ann.key}"
        )
    frame = preproc.normalize_geometry(gray, ann, radius=radius)
    return preproc.clahe(frame, tiles=tiles, clip_factor=clip_factor, bins=bins)


def cmd_prepare(cfg: RunConfig) -> None:
    samples, annotations = _load_samples(cfg)
    names = _sample_names(samples)
    out_dir = _dirs(cfg)["normalized"]
    out_dir.mkdir(parents=True, exist_ok=True)
    params = _prepare_params(cfg)

    pending: list[tuple[SampleRef, CircleAnnotation, Path, str]] = []
    skipped = 0
    for ref, ann in zip(samples, annotations):
        src = _resolve_image(cfg, ref)
        if not src.is_file():
            raise DataError(f"image not found for sample {ref.key}: {src}")
        digest = preproc.prepare_digest(src.read_bytes(), params)
        dst = out_dir / f"{names[ref.key]}.png"
        if dst.is_file():
            try:
                sidecar = preproc.load_sidecar(dst)
            except DataError:
                sidecar = {}
            if sidecar.get("input_digest") == digest:
                skipped += 1
                log.debug("prepare: up to date %s", dst.name)
                continue
        pending.append((ref, ann, src, digest))

    tasks = [(str(src), ann, params) for _, ann, src, _ in pending]
    if cfg.jobs > 1 and len(tasks) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            frames = list(pool.map(_prepare_one, tasks))
    else:
        frames = [_prepare_one(t) for t in tasks]

    for (ref, ann, _, digest), frame in zip(pending, frames):
        scale = cfg.sclera_radius / ann.sclera_r
        dst = out_dir / f"{names[ref.key]}.png"
        preproc.save_normalized(frame, dst, scale, ref.key, input_digest=digest)
        log.info("prepare: wrote %s (scale %.4f)", dst.name, scale)
    print(f"prepare: {len(pending)} written, {skipped} skipped")


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------


def _extract_one(task: tuple) -> list[features.Template]:
    path_str, key, cfg_bits, comparators = task
    grid_n, side, wl_min, wl_max, n_wl, n_ori = cfg_bits
    img = preproc.load_normalized(path_str)
    grid = features.make_grid(side, grid_n)
    out = []
    for cid in comparators:
        if cid == features.GABOR:
            out.append(
                features.extract_gabor(
                    img, grid, wl_min, wl_max, n_wl, n_ori, sample_key=key
                )
            )
        elif cid == features.LBP:
            out.append(features.extract_lbp(img, grid, sample_key=key))
        elif cid == features.HOG:
            out.append(features.extract_hog(img, grid, sample_key=key))
        else:
            raise DataError(f"no built-in extractor for comparator {cid!r}")
    return out


def cmd_extract(cfg: RunConfig) -> None:
    samples, _ = _load_samples(cfg)
    names = _sample_names(samples)
    d = _dirs(cfg)
    for cid in cfg.comparators:
        (d["templates"] / cid).mkdir(parents=True, exist_ok=True)

    cfg_bits = (
        cfg.grid_n,
        cfg.frame_side,
        cfg.gabor_wavelength_min,
        cfg.gabor_wavelength_max,
        cfg.gabor_n_wavelengths,
        cfg.gabor_n_orientations,
    )
    pending: list[tuple] = []
    digests: list[str] = []
    skipped = 0
    for ref in samples:
        name = names[ref.key]
        src = d["normalized"] / f"{name}.png"
        if not src.is_file():
            raise DataError(f"normalized frame missing for {ref.key}: {src} (run prepare)")
        digest = _file_digest(src)
        todo = [
            cid
            for cid in cfg.comparators
            if features.template_digest(d["templates"] / cid / f"{name}.json") != digest
        ]
        skipped += len(cfg.comparators) - len(todo)
        if todo:
            pending.append((str(src), ref.key, cfg_bits, tuple(todo)))
            digests.append(digest)

    if cfg.jobs > 1 and len(pending) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            groups = list(pool.map(_extract_one, pending))
    else:
        groups = [_extract_one(t) for t in pending]

    written = 0
    for (src, key, _, _), digest, group in zip(pending, digests, groups):
        name = names[key]
        for tpl in group:
            path = d["templates"] / tpl.comparator_id / f"{name}.json"
            features.save_template(tpl, path, source_digest=digest)
            written += 1
            log.debug("extract: wrote %s/%s", tpl.comparator_id, path.name)
    print(f"extract: {written} templates written, {skipped} skipped")


# ---------------------------------------------------------------------------
# score / ingest
# ---------------------------------------------------------------------------


def _load_templates(cfg: RunConfig, samples: list[SampleRef]) -> dict:
    names = _sample_names(samples)
    d = _dirs(cfg)
    store: dict[tuple[SampleKey, str], features.Template] = {}
    for ref in samples:
        for cid in cfg.comparators:
            path = d["templates"] / cid / f"{names[ref.key]}.json"
            if not path.is_file():
                raise DataError(f"template missing for {ref.key} / {cid}: {path} (run extract)")
            tpl = features.load_template(path)
            store[(tpl.sample_key, tpl.comparator_id)] = tpl
    return store


def cmd_score(cfg: RunConfig) -> None:
    samples, _ = _load_samples(cfg)
    trials = dataset.generate_protocol(samples)
    store = _load_templates(cfg, samples)
    scores = matching.score_protocol(trials, store, cfg.comparators)
    d = _dirs(cfg)
    d["scores"].mkdir(parents=True, exist_ok=True)
    matching.export_scores(scores, d["scores"] / "computed.csv")
    print(f"score: {len(trials)} trials x {len(cfg.comparators)} comparators")


def cmd_ingest(cfg: RunConfig) -> None:
    samples, _ = _load_samples(cfg)
    protocol = dataset.generate_protocol(samples)
    d = _dirs(cfg)
    computed_path = d["scores"] / "computed.csv"
    if not computed_path.is_file():
        raise DataError(f"computed scores missing: {computed_path} (run score)")
    computed = matching.read_scores(computed_path)
    if computed.provenance != matching.PROVENANCE_COMPUTED:
        computed = matching.ScoreSet(
            computed.comparator_ids, computed.trials, matching.PROVENANCE_COMPUTED
        )
    if [t.trial for t in computed.trials] != protocol:
        raise DataError(f"{computed_path} does not match the manifest protocol (re-run score)")

    parts = [computed]
    for cid in sorted(cfg.external_scores):
        part = matching.ingest_external_scores(cfg.external_scores[cid], cid, protocol)
        parts.append(part)
        log.info("ingest: merged %s from %s", cid, cfg.external_scores[cid])
    merged = matching.merge_scoresets(parts)
    matching.export_scores(merged, d["scores"] / "combined.csv")
    print(f"ingest: {len(parts) - 1} external comparator(s) merged")


# ---------------------------------------------------------------------------
# fuse / eval
# ---------------------------------------------------------------------------


def _read_combined(cfg: RunConfig) -> matching.ScoreSet:
    path = _dirs(cfg)["scores"] / "combined.csv"
    if not path.is_file():
        raise DataError(f"combined scores missing: {path} (run ingest, or run with synthetic mode)")
    return matching.read_scores(path)


def _export_calibrated(scores: matching.ScoreSet, llrs: np.ndarray, path: Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(matching.SCORE_FIELDS) + ["llr"])
        for ts, llr in zip(scores.trials, llrs):
            t = ts.trial
            for cid in scores.comparator_ids:
                writer.writerow(
                    [
                        cid,
                        t.probe.subject_id, t.probe.eye, t.probe.sensor_id, t.probe.sample_idx,
                        t.gallery.subject_id, t.gallery.eye, t.gallery.sensor_id, t.gallery.sample_idx,
                        t.label, t.condition,
                        repr(ts.scores[cid]), repr(float(llr)),
                    ]
                )


def cmd_fuse(cfg: RunConfig) -> None:
    scores = _read_combined(cfg)
    models = fusion.train_strategy(scores, cfg.strategy, prior=cfg.prior)
    d = _dirs(cfg)
    d["models"].mkdir(parents=True, exist_ok=True)
    if cfg.strategy == fusion.SENSOR_INDEPENDENT:
        pooled = next(iter(models.values()))
        fusion.save_model(pooled, d["models"] / "pooled.json")
        n_files = 1
    else:
        for cond in sorted(models):
            fusion.save_model(models[cond], d["models"] / f"{_safe_name(cond)}.json")
        n_files = len(models)

    llrs = np.array(
        [fusion.apply_fusion(models[ts.trial.condition], ts).llr for ts in scores.trials]
    )
    _export_calibrated(scores, llrs, d["scores"] / "calibrated.csv")
    print(f"fuse: {n_files} model file(s) written ({cfg.strategy})")


def _write_individual_eers(scores: matching.ScoreSet, path: Path) -> None:
    conds = evaluation.condition_order(scores.conditions(), with_all=False)
    lines = ["comparator_id,condition,eer"]
    for cid in scores.comparator_ids:
        for cond in conds:
            g, i = scores.slice_condition(cond).class_scores(cid)
            eer = evaluation.compute_eer(evaluation.compute_curve(g, i))
            lines.append(f"{cid},{cond},{repr(eer)}")
        g, i = scores.class_scores(cid)
        eer = evaluation.compute_eer(evaluation.compute_curve(g, i))
        lines.append(f"{cid},{evaluation.ALL_CONDITIONS},{repr(eer)}")
    path.write_text("\n".join(lines) + "\n")


def _write_curves(tag: str, curve, det, d: dict[str, Path]) -> None:
    (d["curves"] / f"{tag}.csv").write_text(evaluation.curve_csv(curve))
    (d["det"] / f"{tag}.csv").write_text(evaluation.det_csv(det))


def cmd_eval(cfg: RunConfig) -> None:
    scores = _read_combined(cfg)
    d = _dirs(cfg)
    for k in ("reports", "curves", "det"):
        d[k].mkdir(parents=True, exist_ok=True)

    _write_individual_eers(scores, d["reports"] / "individual_eer.csv")

    results = fusion.subset_search(scores, cfg.strategy, prior=cfg.prior, folds=cfg.folds)
    conds = evaluation.condition_order(scores.conditions(), with_all=True)
    csv_text, txt_text = evaluation.report_table(results, conds)
    (d["reports"] / "fusion_table.csv").write_text(csv_text)
    (d["reports"] / "fusion_table.txt").write_text(txt_text)

    best = results[0]
    by_cond = fusion.condition_llrs(
        scores, cfg.strategy, best.comparator_ids, cfg.prior, cfg.folds
    )
    report = evaluation.evaluate_llrs(by_cond)
    metric_lines = ["condition,eer,cllr,cllr_min"]
    for cond in evaluation.condition_order(by_cond, with_all=True):
        m = report.per_condition[cond]
        metric_lines.append(f"{cond},{repr(m.eer)},{repr(m.cllr)},{repr(m.cllr_min)}")
        _write_curves(f"fused_{_safe_name(cond)}", m.curve, m.det, d)
    (d["reports"] / "metrics.csv").write_text("\n".join(metric_lines) + "\n")

    for cid in scores.comparator_ids:
        for cond in evaluation.condition_order(scores.conditions(), with_all=False):
            g, i = scores.slice_condition(cond).class_scores(cid)
            curve = evaluation.compute_curve(g, i)
            _write_curves(f"{cid}_{_safe_name(cond)}", curve, evaluation.det_points(curve), d)
        g, i = scores.class_scores(cid)
        curve = evaluation.compute_curve(g, i)
        _write_curves(f"{cid}_all", curve, evaluation.det_points(curve), d)

    cross = best.eer.get(dataset.CROSS_SENSOR)
    cross_txt = f"{cross * 100.0:.2f}%" if cross is not None else "n/a"
    print(f"eval: best subset {'+'.join(best.comparator_ids)}, cross-sensor eer {cross_txt}")


# ---------------------------------------------------------------------------
# simulate / run
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> None:
    if cfg.synthetic is None:
        raise ConfigError("simulate needs an enabled [synthetic] section")
    scores = evaluation.generate_synthetic_scoreset(cfg.synthetic, cfg.seed)
    d = _dirs(cfg)
    d["scores"].mkdir(parents=True, exist_ok=True)
    matching.export_scores(scores, d["scores"] / "combined.csv")
    print(f"simulate: {len(scores.trials)} trials written (seed {cfg.seed})")


def cmd_run(cfg: RunConfig) -> None:
    if cfg.synthetic is not None:
        cmd_simulate(cfg)
    else:
        cmd_prepare(cfg)
        cmd_extract(cfg)
        cmd_score(cfg)
        cmd_ingest(cfg)
    cmd_fuse(cfg)
    cmd_eval(cfg)


# Long-form name for the one-shot pipeline entry point.
cmd_run_experiment = cmd_run

_COMMANDS = {
    "prepare": cmd_prepare,
    "extract": cmd_extract,
    "score": cmd_score,
    "ingest": cmd_ingest,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "run": cmd_run,
}


# ---------------------------------------------------------------------------
# Argument parsing and entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse reserves exit code 2 for usage errors; route them through
    ConfigError so the documented code (1) applies instead."""

    def error(self, message):
        raise ConfigError(message)


def _add_common(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="run configuration file")
    p.add_argument("--seed", type=int, metavar="N", default=d, help="override [meta] seed")
    p.add_argument("--jobs", type=int, metavar="N", default=d, help="worker processes for prepare/extract")
    p.add_argument("--out", metavar="DIR", default=d, help="override [paths] work_dir")


_STAGE_HELP = {
    "prepare": "normalize geometry and contrast for every manifest image",
    "extract": "compute feature templates from normalized frames",
    "score": "run the trial protocol with the built-in comparators",
    "ingest": "merge external score files with computed scores",
    "fuse": "train fusion models and calibrate trial scores",
    "eval": "subset search, metric tables, and curve files",
    "simulate": "draw a synthetic score set instead of using images",
    "run": "full pipeline (or simulate+fuse+eval in synthetic mode)",
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="perifuse", description=__doc__.splitlines()[0])
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, help_text in _STAGE_HELP.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        _add_common(sp, suppress=True)
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = _build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError("no command given (try --help)")
        if args.config is None:
            raise ConfigError("--config is required")
        cfg = load_config(args.config)
        cfg = with_overrides(
            cfg,
            seed=args.seed,
            jobs=args.jobs,
            out=Path(args.out) if args.out is not None else None,
        )
        _COMMANDS[args.command](cfg)
        return 0
    except ConfigError as exc:
        print(f"perifuse: config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"perifuse: data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ValueError, ZeroDivisionError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"perifuse: numeric error: {exc}", file=sys.stderr)
        return 3


def run_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run_main()
