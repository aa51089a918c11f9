"""Experiment configuration: INI-style sections named after the pipeline modules."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..errors import ConfigError, InvalidArgumentError
from ..features import EncoderConfig
from ..phantom import PRESETS, CohortConfig, PhantomParams, preset
from ..recon import ReconConfig
from ..simulate import CHUNK_EVENTS, ScannerGeometry


@dataclass(frozen=True)
class ExperimentSection:
    master_seed: int = 20241014
    output_dir: str = "runs/default"
    depths: tuple[int, ...] = (1, 2, 3, 4)
    workers: int = 1
    train_on: str = "mc"


@dataclass(frozen=True)
class PhantomSection:
    preset: str = "focal"
    ad_reduction: float | None = None
    subject_jitter: float | None = None
    gray_white_ratio: float | None = None
    cortex_thickness_mm: float | None = None
    mu_tissue_per_mm: float | None = None
    jitter_smoothing_mm: float | None = None

    def params(self) -> PhantomParams:
        overrides = {f.name: getattr(self, f.name) for f in fields(self)
                     if f.name != "preset" and getattr(self, f.name) is not None}
        return preset(self.preset, **overrides)


@dataclass(frozen=True)
class SimulateSection:
    events: int = 100_000
    chunk_events: int = CHUNK_EVENTS


@dataclass(frozen=True)
class ReconSection:
    iterations: int = 2
    subsets: int = 30
    psf_fwhm_mm: float = 2.5
    dims: tuple[int, int, int] = (64, 64, 64)
    voxel_mm: tuple[float, float, float] = (3.0, 3.0, 3.0)
    sensitivity_lors: int = 200_000
    epsilon: float = 1e-9
    sensitivity_seed: int = 7

    def config(self) -> ReconConfig:
        return ReconConfig(self.iterations, self.subsets, self.psf_fwhm_mm, self.dims, self.voxel_mm,
                           self.sensitivity_lors, self.epsilon)


@dataclass(frozen=True)
class FeaturesSection:
    seed: int = 2024
    input_dim: int = 64
    norm_epsilon: float = 1e-5
    # post-reconstruction smoothing ahead of the encoder
    prefilter_fwhm_mm: float = 20.0

    def config(self) -> EncoderConfig:
        return EncoderConfig(seed=self.seed, input_dim=self.input_dim, norm_epsilon=self.norm_epsilon)


@dataclass(frozen=True)
class ClassifySection:
    C: float = 1.0
    tol: float = 1e-6
    max_epochs: int = 20000
    head_lr: float = 0.5
    head_epochs: int = 500
    head_l2: float = 1e-2


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    cohort: CohortConfig = field(default_factory=CohortConfig)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    scanner: ScannerGeometry = field(default_factory=ScannerGeometry)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    recon: ReconSection = field(default_factory=ReconSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    classify: ClassifySection = field(default_factory=ClassifySection)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def result_dict(self) -> dict:
        """Everything that influences results (output location and worker count excluded)."""
        d = self.to_dict()
        d["experiment"] = {k: v for k, v in d["experiment"].items() if k not in ("output_dir", "workers")}
        return d

    def config_hash(self) -> str:
        return digest(self.result_dict())

    def with_section(self, name: str, **changes) -> "ExperimentConfig":
        return replace(self, **{name: replace(getattr(self, name), **changes)})


SECTIONS = [f.name for f in fields(ExperimentConfig)]


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def validate(cfg: ExperimentConfig) -> None:
    e = cfg.experiment
    if not e.depths or any(d not in (1, 2, 3, 4) for d in e.depths):
        raise ConfigError(f"depths must be a nonempty subset of 1..4, got {e.depths}")
    if e.workers < 1:
        raise ConfigError("workers must be >= 1")
    if e.train_on not in ("mc", "nmc"):
        raise ConfigError("train_on must be 'mc' or 'nmc'")
    if cfg.phantom.preset not in PRESETS:
        raise ConfigError(f"unknown phantom preset {cfg.phantom.preset!r}")
    # the section dataclasses build the module configs, which check their own invariants
    try:
        cfg.phantom.params()
        cfg.recon.config()
        cfg.features.config()
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.features.prefilter_fwhm_mm < 0:
        raise ConfigError("prefilter_fwhm_mm must be >= 0")
    if cfg.simulate.events < 0:
        raise ConfigError("events must be >= 0")
    for _, _, n in cfg.cohort.counts():
        if n < 0:
            raise ConfigError("cohort counts must be >= 0")


def smoke_config(base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Small end-to-end configuration: 20 subjects, 32^3 grid, 2e4 events."""
    base = base or ExperimentConfig()
    return replace(
        base,
        cohort=replace(base.cohort, train_cn=6, train_ad=6, val_cn=0, val_ad=0, test_cn=4, test_ad=4),
        simulate=replace(base.simulate, events=20_000),
        recon=replace(base.recon, dims=(32, 32, 32), voxel_mm=(6.0, 6.0, 6.0), sensitivity_lors=100_000),
        experiment=replace(base.experiment, output_dir="runs/smoke"),
    )


# ---------------------------------------------------------------------------
# parsing


def _parse_value(raw: str, annotation, where: str):
    hint = annotation if not isinstance(annotation, str) else eval(annotation, vars(typing))  # noqa: S307
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    raw = raw.strip()
    try:
        if origin is typing.Union or origin is types.UnionType:
            inner = [a for a in args if a is not type(None)][0]
            if raw.lower() in ("", "none"):
                return None
            return _parse_value(raw, inner, where)
        if origin is tuple:
            parts = [p for p in raw.replace(",", " ").split() if p]
            elem = args[0]
            return tuple(elem(p) for p in parts)
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        return hint(raw)
    except (ValueError, TypeError, IndexError) as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    base = base or ExperimentConfig()
    sections = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]; expected one of {SECTIONS}")
        current = getattr(base, name)
        known = {f.name: f for f in fields(current)}
        changes = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            changes[key] = _parse_value(raw, known[key].type, f"[{name}] {key}")
        try:
            sections[name] = replace(current, **changes)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    try:
        return replace(base, **sections)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, base)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(sec):
            v = getattr(sec, f.name)
            if v is None:
                v = ""
            elif isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
