# [file name]: config.py
"""
Experiment configuration.

Precedence: preset defaults < config file < command-line flags.
The config file is INI-style (`key = value`, comma-separated lists) with
sections [experiment], [data], [teacher] and [student]; see README.md.
"""

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace

import joblib
from dotenv import load_dotenv

from ml_training.data_pipeline import IMAGE_SIDE
from ml_training.distiller import StudentConfig
from ml_training.errors import ConfigError, ValidationError
from ml_training.sgld_sampler import TeacherConfig

load_dotenv()

MODEL_FAMILIES = ("fcnn", "cnn")
DATASETS = ("mnist", "blobs")
PRECISIONS = ("float64", "float32")
PRESET_NAMES = ("desk", "paper", "blobs")

FULL_N_LABELED = (10000, 20000, 30000, 60000)
STANDARD_MASK_SIDES = (0, 2, 6, 10, 14, 18, 22, 26)

# knobs that change how a run executes but never what it computes
RUN_ONLY_KEYS = ("jobs", "quiet", "out_dir", "data_dir")

# teacher fields filled in per cell, never read from a config file
_PER_CELL_TEACHER_KEYS = ("n_total", "seed")
_PER_CELL_STUDENT_KEYS = ("seed",)


@dataclass(frozen=True)
class Cell:
    """One grid coordinate; every cell yields one MetricRecord"""

    model_family: str
    n_labeled: int
    mask_side: int
    capacity_factor: float
    replicate: int = 0

    @property
    def cell_id(self):
        return f"{self.model_family}_n{self.n_labeled}_m{self.mask_side}_c{self.capacity_factor:g}_r{self.replicate}"

    @property
    def teacher_coordinates(self):
        """Coordinates shared by every capacity factor: same data, same teacher chain"""
        return (MODEL_FAMILIES.index(self.model_family), self.n_labeled, self.mask_side, self.replicate)

    @property
    def coordinates(self):
        return self.teacher_coordinates + (int(round(self.capacity_factor * 1000)),)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(data["model_family"], int(data["n_labeled"]), int(data["mask_side"]),
                   float(data["capacity_factor"]), int(data.get("replicate", 0)))


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "desk"
    model_family: str = "fcnn"
    dataset: str = "mnist"
    n_labeled: tuple = (5000,)
    mask_sides: tuple = (0, 14, 26)
    capacity_factors: tuple = (1.0,)
    replicates: int = 1
    master_seed: int = 0
    base_width: int = 100
    precision: str = "float64"
    checkpoint_every: int = 5000

    # data
    data_dir: str = ""
    pool_size: int = 10000
    test_size: int = 2000
    blob_classes: int = 3
    blob_dims: int = 2
    blob_per_class: int = 200
    blob_test_per_class: int = 100
    blob_separation: float = 3.0

    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)

    # run-only
    out_dir: str = "results"
    jobs: int = 1
    quiet: bool = False

    def __post_init__(self):
        if self.preset not in PRESET_NAMES:
            raise ConfigError(f"preset must be one of {PRESET_NAMES}, got {self.preset}")
        if self.model_family not in MODEL_FAMILIES:
            raise ConfigError(f"model_family must be one of {MODEL_FAMILIES}, got {self.model_family}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision}")
        if not self.n_labeled or not self.mask_sides or not self.capacity_factors:
            raise ConfigError("n_labeled, mask_sides and capacity_factors must be non-empty")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if any(m < 0 or m > IMAGE_SIDE for m in self.mask_sides):
            raise ConfigError(f"mask sides must lie in [0, {IMAGE_SIDE}]")
        if any(c <= 0 for c in self.capacity_factors):
            raise ConfigError("capacity factors must be positive")
        if any(n < self.teacher.batch_size for n in self.n_labeled):
            raise ConfigError(f"every n_labeled must be >= the teacher batch size {self.teacher.batch_size}")
        if any(n > self.pool_size for n in self.n_labeled):
            raise ConfigError(f"n_labeled {max(self.n_labeled)} exceeds pool_size {self.pool_size}")
        if self.teacher.burn_in + self.teacher.thinning > self.teacher.total_iters:
            raise ConfigError("no sample would be retained: burn_in + thinning exceeds total_iters")
        if self.dataset == "blobs":
            if self.model_family == "cnn":
                raise ConfigError("the cnn family needs image data; use dataset = mnist")
            if any(m != 0 for m in self.mask_sides):
                raise ConfigError("blob data cannot be masked; use mask_sides = 0")
            if self.pool_size > self.blob_classes * self.blob_per_class:
                raise ConfigError("pool_size exceeds the number of generated blob cases")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def cells(self):
        """Grid cells in CSV order: (n_labeled, mask_side, capacity_factor, replicate)"""
        return [
            Cell(self.model_family, n, m, float(c), r)
            for n in sorted(self.n_labeled)
            for m in sorted(self.mask_sides)
            for c in sorted(self.capacity_factors)
            for r in range(self.replicates)
        ]

    def to_dict(self):
        data = asdict(self)
        for key in ("n_labeled", "mask_sides", "capacity_factors"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["teacher"] = TeacherConfig(**data["teacher"])
        data["student"] = StudentConfig(**data["student"])
        for key in ("n_labeled", "mask_sides", "capacity_factors"):
            data[key] = tuple(data[key])
        return cls(**data)

    def hashable_dict(self):
        data = self.to_dict()
        for key in RUN_ONLY_KEYS:
            data.pop(key, None)
        return data

    @property
    def config_hash(self):
        return joblib.hash(self.hashable_dict())


PRESETS = {
    "desk": ExperimentConfig(
        preset="desk",
        n_labeled=(5000,),
        mask_sides=(0, 14, 26),
        capacity_factors=(1.0,),
        base_width=100,
        pool_size=10000,
        test_size=2000,
        checkpoint_every=5000,
        teacher=TeacherConfig(eta=1e-5, lam=10.0, batch_size=100, burn_in=500, thinning=50, total_iters=50_000),
        student=StudentConfig(rho0=1e-3, dropout_rate=0.5),
    ),
    "paper": ExperimentConfig(
        preset="paper",
        n_labeled=FULL_N_LABELED,
        mask_sides=STANDARD_MASK_SIDES,
        capacity_factors=(1.0,),
        base_width=400,
        pool_size=60000,
        test_size=10000,
        checkpoint_every=50_000,
        teacher=TeacherConfig(eta=4e-6, lam=10.0, batch_size=100, burn_in=1000, thinning=100,
                              total_iters=1_000_000),
        student=StudentConfig(rho0=1e-3, dropout_rate=0.5),
    ),
    "blobs": ExperimentConfig(
        preset="blobs",
        dataset="blobs",
        n_labeled=(200,),
        mask_sides=(0,),
        capacity_factors=(1.0,),
        base_width=16,
        pool_size=600,
        checkpoint_every=500,
        teacher=TeacherConfig(eta=1e-3, lam=1.0, batch_size=50, burn_in=200, thinning=20, total_iters=2000),
        student=StudentConfig(rho0=1e-2, dropout_rate=0.1),
    ),
}


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}', choose from {sorted(PRESETS)}")
    return PRESETS[name]


# ---------------------------------------------------------------- file parsing

_SECTIONS = {
    "experiment": ("preset", "model_family", "dataset", "n_labeled", "mask_sides", "capacity_factors",
                   "replicates", "master_seed", "base_width", "precision", "checkpoint_every", "out_dir", "jobs"),
    "data": ("data_dir", "pool_size", "test_size", "blob_classes", "blob_dims", "blob_per_class",
             "blob_test_per_class", "blob_separation"),
}


def _coerce(raw, template, key):
    """Parse `raw` to the type of the template value"""
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(template, tuple):
            element = type(template[0]) if template else str
            return tuple(element(float(item)) if element is int else element(item)
                         for item in (part.strip() for part in raw.split(",")) if item)
        if isinstance(template, int):
            value = float(raw)
            if value != int(value):
                raise ValueError(f"{raw} is not an integer")
            return int(value)
        if isinstance(template, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for '{key}': {raw!r} ({e})") from e


def _apply_section(target, section, allowed, where):
    updates = {}
    for key, raw in section.items():
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in [{where}]")
        updates[key] = _coerce(raw, getattr(target, key), f"{where}.{key}")
    return updates


def parse_config_text(text, base=None, source="<config>"):
    """Apply the INI text on top of `base` (or the preset it names)"""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {source}: {e}") from e

    unknown = set(parser.sections()) - {"experiment", "data", "teacher", "student"}
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)} in {source}")

    if base is None:
        name = parser.get("experiment", "preset", fallback="desk").strip()
        base = preset(name)

    updates = {}
    for where, allowed in _SECTIONS.items():
        if parser.has_section(where):
            updates.update(_apply_section(base, parser[where], allowed, where))

    teacher_keys = tuple(f.name for f in fields(TeacherConfig) if f.name not in _PER_CELL_TEACHER_KEYS)
    student_keys = tuple(f.name for f in fields(StudentConfig) if f.name not in _PER_CELL_STUDENT_KEYS)
    try:
        teacher, student = base.teacher, base.student
        if parser.has_section("teacher"):
            teacher = replace(teacher, **_apply_section(teacher, parser["teacher"], teacher_keys, "teacher"))
        if parser.has_section("student"):
            student = replace(student, **_apply_section(student, parser["student"], student_keys, "student"))
        return replace(base, teacher=teacher, student=student, **updates)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_config(path=None, preset_name=None, **overrides):
    """
    Build an ExperimentConfig.

    `preset_name` replaces the file's own preset key; keyword overrides
    (seed, jobs, out_dir, quiet, ...) win over both. None-valued overrides
    are ignored so click options can be passed straight through.
    """
    base = preset(preset_name) if preset_name else None
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, 'r') as f:
            cfg = parse_config_text(f.read(), base=base, source=path)
    else:
        cfg = base if base is not None else preset("desk")

    env_defaults = {"data_dir": os.getenv("BDK_DATA_DIR"), "out_dir": os.getenv("BDK_OUT_DIR")}
    updates = {k: v for k, v in env_defaults.items() if v and getattr(cfg, k) == getattr(PRESETS[cfg.preset], k, None)}
    if preset_name:
        updates["preset"] = preset_name
    updates.update({k: v for k, v in overrides.items() if v is not None})
    if "seed" in updates:
        updates["master_seed"] = updates.pop("seed")
    try:
        return replace(cfg, **updates)
    except TypeError as e:
        raise ConfigError(f"unknown configuration override: {e}") from e
    except ValidationError as e:
        raise ConfigError(str(e)) from e
