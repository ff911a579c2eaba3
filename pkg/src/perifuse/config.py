"""Run configuration: one versioned key = value sections file.

Paths inside the file resolve relative to the file's own directory, so a
config can travel with its data.  Every referenced file must exist at
validation time; range checks happen here too, keeping the pipeline stages
free of parameter policing.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .evaluation import ClassGaussians, SyntheticSpec
from .features import COMPUTED_COMPARATORS
from .fusion import STRATEGIES

CONFIG_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for one experiment run."""

    version: int = CONFIG_VERSION
    # data
    manifest: Path | None = None
    annotations: Path | None = None
    images_root: Path | None = None
    work_dir: Path = Path("out")
    # preprocessing
    sclera_radius: int = 145
    clahe_tiles: int = 8
    clahe_clip_factor: float = 4.0
    clahe_bins: int = 256
    # features
    grid_n: int = 8
    gabor_wavelength_min: float = 8.0
    gabor_wavelength_max: float = 64.0
    gabor_n_wavelengths: int = 5
    gabor_n_orientations: int = 6
    # comparators
    comparators: tuple[str, ...] = COMPUTED_COMPARATORS
    external_scores: dict[str, Path] = field(default_factory=dict)
    # fusion
    strategy: str = "sensor_dependent"
    prior: float = 0.5
    folds: int = 0
    # synthetic mode
    synthetic: SyntheticSpec | None = None
    # run
    seed: int = 0
    jobs: int = 1

    @property
    def frame_side(self) -> int:
        return 6 * self.sclera_radius + 1

    @property
    def all_comparator_ids(self) -> tuple[str, ...]:
        if self.synthetic is not None:
            return self.synthetic.comparator_ids
        return tuple(self.comparators) + tuple(sorted(self.external_scores))


def _get(cp: configparser.ConfigParser, section: str, key: str, default: str) -> str:
    if cp.has_option(section, key):
        return cp.get(section, key).strip()
    return default


def _get_int(cp, section, key, default):
    raw = _get(cp, section, key, str(default))
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} must be an integer, got {raw!r}") from exc


def _get_float(cp, section, key, default):
    raw = _get(cp, section, key, str(default))
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} must be a number, got {raw!r}") from exc


def _get_bool(cp, section, key, default):
    raw = _get(cp, section, key, str(default)).lower()
    if raw in ("true", "yes", "1", "on"):
        return True
    if raw in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"[{section}] {key} must be a boolean, got {raw!r}")


def _split_list(raw: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def _parse_synthetic(cp: configparser.ConfigParser) -> SyntheticSpec | None:
    if not cp.has_section("synthetic") or not _get_bool(cp, "synthetic", "enabled", "false"):
        return None
    comparators = _split_list(_get(cp, "synthetic", "comparators", ""))
    if not comparators:
        raise ConfigError("[synthetic] comparators must list at least one id")
    correlation = _get_float(cp, "synthetic", "correlation", 0.0)

    params: dict[str, dict[str, ClassGaussians]] = {}
    counts: dict[str, tuple[int, int]] = {}
    for key, raw in cp.items("synthetic"):
        if key.startswith("params."):
            rest = key[len("params."):]
            cond, sep, cid = rest.rpartition(".")
            if not sep or cid not in comparators:
                raise ConfigError(f"[synthetic] bad params key {key!r}")
            vals = _split_list(raw)
            if len(vals) != 4:
                raise ConfigError(
                    f"[synthetic] {key} needs 4 values "
                    "(genuine_mean,genuine_std,impostor_mean,impostor_std)"
                )
            try:
                gm, gs, im, istd = (float(v) for v in vals)
            except ValueError as exc:
                raise ConfigError(f"[synthetic] {key} has non-numeric values") from exc
            params.setdefault(cond, {})[cid] = ClassGaussians(gm, gs, im, istd)
        elif key.startswith("counts."):
            cond = key[len("counts."):]
            vals = _split_list(raw)
            if len(vals) != 2:
                raise ConfigError(f"[synthetic] {key} needs 2 values (n_genuine,n_impostor)")
            try:
                counts[cond] = (int(vals[0]), int(vals[1]))
            except ValueError as exc:
                raise ConfigError(f"[synthetic] {key} has non-integer counts") from exc

    if sorted(params) != sorted(counts):
        raise ConfigError("[synthetic] params.* and counts.* must cover the same conditions")
    for cond, per_comp in params.items():
        missing = [c for c in comparators if c not in per_comp]
        if missing:
            raise ConfigError(f"[synthetic] condition {cond!r} lacks params for {missing}")
    if not params:
        raise ConfigError("[synthetic] enabled but no params.* entries given")
    return SyntheticSpec(comparators, params, counts, correlation)


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a config file.

    Raises:
        ConfigError: unreadable file, unsupported version, out-of-range
            parameter, or a referenced file that does not exist.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(
        delimiters=("=",), inline_comment_prefixes=("#",), interpolation=None
    )
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    version = _get_int(cp, "meta", "version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version} (supported: {CONFIG_VERSION})")

    base = path.parent

    def respath(section: str, key: str) -> Path | None:
        raw = _get(cp, section, key, "")
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else (base / p)

    synthetic = _parse_synthetic(cp)
    manifest = respath("paths", "manifest")
    annotations = respath("paths", "annotations")
    images_root = respath("paths", "images_root")
    work_dir = respath("paths", "work_dir") or (base / "out")

    comparators = _split_list(_get(cp, "comparators", "enabled", ",".join(COMPUTED_COMPARATORS)))
    for cid in comparators:
        if cid not in COMPUTED_COMPARATORS:
            raise ConfigError(
                f"[comparators] enabled lists {cid!r}, which has no built-in extractor "
                f"(built in: {COMPUTED_COMPARATORS}); external scores go in [external_scores]"
            )

    external: dict[str, Path] = {}
    if cp.has_section("external_scores"):
        for cid, raw in cp.items("external_scores"):
            if cid in comparators:
                raise ConfigError(f"[external_scores] {cid!r} clashes with an enabled built-in comparator")
            p = Path(raw.strip())
            external[cid] = p if p.is_absolute() else (base / p)

    cfg = RunConfig(
        version=version,
        manifest=manifest,
        annotations=annotations,
        images_root=images_root,
        work_dir=work_dir,
        sclera_radius=_get_int(cp, "preproc", "sclera_radius", 145),
        clahe_tiles=_get_int(cp, "preproc", "clahe_tiles", 8),
        clahe_clip_factor=_get_float(cp, "preproc", "clahe_clip_factor", 4.0),
        clahe_bins=_get_int(cp, "preproc", "clahe_bins", 256),
        grid_n=_get_int(cp, "features", "grid_n", 8),
        gabor_wavelength_min=_get_float(cp, "features", "gabor_wavelength_min", 8.0),
        gabor_wavelength_max=_get_float(cp, "features", "gabor_wavelength_max", 64.0),
        gabor_n_wavelengths=_get_int(cp, "features", "gabor_n_wavelengths", 5),
        gabor_n_orientations=_get_int(cp, "features", "gabor_n_orientations", 6),
        comparators=comparators,
        external_scores=external,
        strategy=_get(cp, "fusion", "strategy", "sensor_dependent"),
        prior=_get_float(cp, "fusion", "prior", 0.5),
        folds=_get_int(cp, "fusion", "folds", 0),
        synthetic=synthetic,
        seed=_get_int(cp, "meta", "seed", 0),
        jobs=1,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.sclera_radius < 1:
        raise ConfigError(f"sclera_radius must be positive, got {cfg.sclera_radius}")
    if cfg.clahe_tiles < 1 or cfg.clahe_bins < 2 or cfg.clahe_clip_factor <= 0:
        raise ConfigError("invalid CLAHE parameters")
    if cfg.grid_n % 2 != 0 or cfg.grid_n < 4:
        raise ConfigError(f"grid_n must be even and >= 4, got {cfg.grid_n}")
    if not (0 < cfg.gabor_wavelength_min <= cfg.gabor_wavelength_max):
        raise ConfigError("gabor wavelengths must satisfy 0 < min <= max")
    if cfg.gabor_n_wavelengths < 1 or cfg.gabor_n_orientations < 1:
        raise ConfigError("gabor bank needs at least one wavelength and orientation")
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {cfg.strategy!r}; expected one of {STRATEGIES}")
    if not (0.0 < cfg.prior < 1.0):
        raise ConfigError(f"prior must be in (0, 1), got {cfg.prior}")
    if cfg.folds < 0 or cfg.folds == 1:
        raise ConfigError(f"folds must be 0 or >= 2, got {cfg.folds}")
    if cfg.jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {cfg.jobs}")
    if cfg.synthetic is not None:
        if abs(cfg.synthetic.correlation) >= 1.0:
            raise ConfigError(f"correlation {cfg.synthetic.correlation} out of range (|rho| < 1)")
        for cond, (n_gen, n_imp) in cfg.synthetic.counts.items():
            if n_gen < 1 or n_imp < 1:
                raise ConfigError(f"[synthetic] counts for {cond!r} must be positive")
        for cond, per_comp in cfg.synthetic.params.items():
            for cid, cg in per_comp.items():
                if cg.genuine_std <= 0 or cg.impostor_std <= 0:
                    raise ConfigError(f"[synthetic] {cond}/{cid} std must be positive")
    else:
        if cfg.manifest is None:
            raise ConfigError("[paths] manifest is required unless synthetic mode is enabled")
        if not cfg.manifest.is_file():
            raise ConfigError(f"manifest does not exist: {cfg.manifest}")
        ann = cfg.annotations or (cfg.manifest.parent / "annotations.csv")
        if not ann.is_file():
            raise ConfigError(f"annotations file does not exist: {ann}")
        if cfg.images_root is not None and not cfg.images_root.is_dir():
            raise ConfigError(f"images_root does not exist: {cfg.images_root}")
    for cid, p in cfg.external_scores.items():
        if not p.is_file():
            raise ConfigError(f"external score file for {cid!r} does not exist: {p}")
    if not cfg.all_comparator_ids:
        raise ConfigError("no comparators configured")


def with_overrides(
    cfg: RunConfig,
    seed: int | None = None,
    jobs: int | None = None,
    out: Path | None = None,
) -> RunConfig:
    """Apply CLI flag overrides on top of a loaded config."""
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if jobs is not None:
        updates["jobs"] = jobs
    if out is not None:
        updates["work_dir"] = out
    cfg = replace(cfg, **updates) if updates else cfg
    validate_config(cfg)
    return cfg
