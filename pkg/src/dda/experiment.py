"""Experiment configuration and the end-to-end pipeline behind the CLI.

A configuration is a plain-text ``key = value`` file.  Every random choice
(subsamples, patch bank, blends, pixel draws, shuffles, augmentation,
initialization) is derived from the mandatory ``seed``, so all artifacts
are reproducible bit-for-bit.
"""

import dataclasses
import hashlib
import logging
import os
import time
import zlib
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import classifier, core, datasets, diagnostics
from .core import TransformConfig
from .datasets import DataError

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


class MarginError(RuntimeError):
    """An asserted acceptance margin did not hold."""


def bundled_data(name):
    """Path of a file in the bundled MNIST-5k fixture."""
    return str(resources.files("dda") / "data" / "mnist5k" / name)


@dataclass
class ExperimentConfig:
    seed: int = None
    out: str = "runs/default"
    # source domain: IDX files (defaults: the bundled 5000-digit fixture)
    source_train_images: str = ""
    source_train_labels: str = ""
    source_test_images: str = ""
    source_test_labels: str = ""
    # target domain: "synth" blends source digits with a patch bank,
    # "dir" loads image directories with manifests
    target: str = "synth"
    target_train_dir: str = ""
    target_train_manifest: str = ""
    target_test_dir: str = ""
    target_test_manifest: str = ""
    photo_dir: str = ""
    patch_count: int = 1000
    # procedural patch bank (used when photo_dir is empty)
    patch_waves: int = 8
    patch_min_cycles: float = 1.0
    patch_max_cycles: float = 4.0
    patch_brightness_min: float = 0.05
    patch_brightness_max: float = 0.85
    patch_chroma: float = 0.15
    patch_contrast_min: float = 0.1
    patch_contrast_max: float = 0.5
    patch_color_texture: float = 1.0
    # 0 keeps every image
    train_per_class: int = 200
    test_per_class: int = 50
    kind: str = "tiny_cnn"
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    augment: bool = True
    pixels_per_draw: int = 1
    center_kernels: bool = True
    pca_cap: int = diagnostics.MAX_PER_DOMAIN
    min_target_gain: float = 0.15
    max_source_drop: float = 0.05

    def __post_init__(self):
        for key, default in (
            ("source_train_images", "train-images-idx3-ubyte.gz"),
            ("source_train_labels", "train-labels-idx1-ubyte.gz"),
            ("source_test_images", "t10k-images-idx3-ubyte.gz"),
            ("source_test_labels", "t10k-labels-idx1-ubyte.gz"),
        ):
            if not getattr(self, key):
                setattr(self, key, bundled_data(default))

    @property
    def transform(self):
        return TransformConfig(pixels_per_draw=self.pixels_per_draw, seed=self.seed,
                               center_kernels=self.center_kernels)

    def train_config(self, dda):
        return classifier.TrainConfig(kind=self.kind, epochs=self.epochs, batch_size=self.batch_size,
                                      lr=self.lr, seed=self.seed, dda=dda, augment=self.augment,
                                      transform=self.transform)

    def full_scale(self):
        """The paper-scale protocol: every image, 100 epochs, batch 128."""
        return dataclasses.replace(self, train_per_class=0, test_per_class=0, epochs=100, batch_size=128)

    def validate(self):
        if self.seed is None:
            raise ConfigError("a seed is required (config key 'seed' or --seed)")
        if self.target not in ("synth", "dir"):
            raise ConfigError(f"target must be 'synth' or 'dir', got {self.target!r}")
        if self.kind not in classifier.KINDS:
            raise ConfigError(f"kind must be one of {', '.join(classifier.KINDS)}, got {self.kind!r}")
        for key in ("epochs", "batch_size", "pixels_per_draw", "patch_count", "patch_waves", "pca_cap"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("train_per_class", "test_per_class"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative, got {getattr(self, key)}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.patch_brightness_min <= self.patch_brightness_max <= 1:
            raise ConfigError("patch brightness range must satisfy 0 <= min <= max <= 1")
        if not 0 <= self.patch_contrast_min <= self.patch_contrast_max:
            raise ConfigError("patch contrast range must satisfy 0 <= min <= max")
        if not 0 < self.patch_min_cycles <= self.patch_max_cycles:
            raise ConfigError("patch cycles must satisfy 0 < min <= max")
        if not 0 <= self.patch_color_texture <= 1:
            raise ConfigError(f"patch_color_texture must lie in [0, 1], got {self.patch_color_texture}")
        paths = ["source_train_images", "source_train_labels", "source_test_images", "source_test_labels"]
        if self.target == "dir":
            paths += ["target_train_dir", "target_train_manifest", "target_test_dir", "target_test_manifest"]
        if self.photo_dir:
            paths.append("photo_dir")
        for key in paths:
            value = getattr(self, key)
            if not value:
                raise ConfigError(f"{key} must be set when target = {self.target}")
            if not os.path.exists(value):
                raise DataError(f"{key}: no such file or directory: {value}")
        return self


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(name, kind, text):
    try:
        if kind is bool:
            return _BOOL[text.lower()]
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except (KeyError, ValueError):
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind.__name__}") from None
    return text


def _field_types():
    types = {}
    for f in fields(ExperimentConfig):
        types[f.name] = int if f.name == "seed" else type(f.default)
    return types


def parse_config(text, source="<config>", base_dir=None):
    """Parse ``key = value`` lines into a dict of typed overrides.

    Blank lines and ``#`` comments are ignored.  Relative input paths
    resolve against ``base_dir`` (the config file's directory); ``out``
    stays relative to the working directory.
    """
    types = _field_types()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        value = _coerce(key, types[key], value)
        if base_dir is not None and isinstance(value, str) and value and _is_path_key(key):
            value = str(Path(base_dir, value)) if not os.path.isabs(value) else value
        values[key] = value
    return values


def _is_path_key(key):
    return key.endswith(("_images", "_labels", "_dir", "_manifest"))


def load_config(path=None, **overrides):
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values = parse_config(text, str(path), Path(path).parent)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


# -- seeds ------------------------------------------------------------------

def derive_seed(seed, purpose):
    """Independent 63-bit seed for one named use of the master seed."""
    state = np.random.SeedSequence([int(seed) % 2**64, zlib.crc32(purpose.encode())]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


# -- data -------------------------------------------------------------------

@dataclass
class Domains:
    source_train: datasets.Dataset
    source_test: datasets.Dataset
    target_train: datasets.Dataset
    target_test: datasets.Dataset


def _maybe_subsample(d, n, seed):
    return datasets.subsample(d, n, seed) if n else d


def patch_bank(cfg, shape):
    h, w = shape
    seed = derive_seed(cfg.seed, "patch-bank")
    if cfg.photo_dir:
        return datasets.photo_patch_bank(cfg.photo_dir, cfg.patch_count, h, w, seed)
    return datasets.procedural_patch_bank(
        cfg.patch_count, h, w, seed, n_waves=cfg.patch_waves,
        min_cycles=cfg.patch_min_cycles, max_cycles=cfg.patch_max_cycles,
        brightness=(cfg.patch_brightness_min, cfg.patch_brightness_max), chroma=cfg.patch_chroma,
        contrast=(cfg.patch_contrast_min, cfg.patch_contrast_max), color_texture=cfg.patch_color_texture)


def load_domains(cfg):
    """Source subsamples plus the matching target sets, all 3-channel."""
    pool = datasets.to_rgb(datasets.load_idx(cfg.source_train_images, cfg.source_train_labels, name="source"))
    test_pool = datasets.to_rgb(datasets.load_idx(cfg.source_test_images, cfg.source_test_labels,
                                                  name="source-test"))
    source_train = _maybe_subsample(pool, cfg.train_per_class, derive_seed(cfg.seed, "source-train"))
    source_test = _maybe_subsample(test_pool, cfg.test_per_class, derive_seed(cfg.seed, "source-test"))
    if cfg.target == "synth":
        bank = patch_bank(cfg, source_train.geometry[1:])
        # the target digits are an independent draw from the same pool, as
        # the colored digit sets are built from the same digit corpus
        digits = _maybe_subsample(pool, cfg.train_per_class, derive_seed(cfg.seed, "target-train"))
        target_train = datasets.synthesize_target(digits, bank, derive_seed(cfg.seed, "blend-train"),
                                                  name="target")
        target_test = datasets.synthesize_target(source_test, bank, derive_seed(cfg.seed, "blend-test"),
                                                 name="target-test")
    else:
        target_train = _maybe_subsample(
            datasets.load_image_dir(cfg.target_train_dir, cfg.target_train_manifest, name="target"),
            cfg.train_per_class, derive_seed(cfg.seed, "target-train"))
        target_test = _maybe_subsample(
            datasets.load_image_dir(cfg.target_test_dir, cfg.target_test_manifest, name="target-test"),
            cfg.test_per_class, derive_seed(cfg.seed, "target-test"))
    geoms = {d.name: d.geometry for d in (source_train, source_test, target_train, target_test)}
    if len(set(geoms.values())) != 1:
        raise DataError(f"domain geometries differ: {geoms}")
    return Domains(source_train, source_test, target_train, target_test)


def compute_domain_stats(cfg, domains):
    """Statistics of both training partitions on the signed network scale."""
    source = core.compute_stats(core.prepare_inputs(domains.source_train.images), cfg.seed, "source")
    target = core.compute_stats(core.prepare_inputs(domains.target_train.images), cfg.seed, "target")
    return source, target


def stats_paths(out):
    d = Path(out) / "stats"
    return d / "source.stats", d / "target.stats"


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_domain_stats(out, source_stats, target_stats):
    paths = stats_paths(out)
    paths[0].parent.mkdir(parents=True, exist_ok=True)
    for path, stats in zip(paths, (source_stats, target_stats)):
        core.write_stats(path, stats)
    return paths


def read_domain_stats(stats_dir):
    src, tgt = Path(stats_dir) / "source.stats", Path(stats_dir) / "target.stats"
    for p in (src, tgt):
        if not p.exists():
            raise DataError(f"missing statistics cache {p} (run the 'stats' command first)")
    try:
        return core.read_stats(src, "source"), core.read_stats(tgt, "target")
    except ValueError as exc:
        raise DataError(str(exc)) from None


# -- diagnostics ------------------------------------------------------------

def pca_tables(cfg, domains, source_stats=None, target_stats=None):
    """PCA projections of the test partitions as the network sees them.

    Returns ``{"before": table}`` and, when statistics are given, also the
    ``"after"`` table computed on the transformed inputs.
    """
    src, tgt = domains.source_test, domains.target_test
    keep_s = diagnostics.cap_per_domain(len(src), derive_seed(cfg.seed, "pca-source"), cfg.pca_cap)
    keep_t = diagnostics.cap_per_domain(len(tgt), derive_seed(cfg.seed, "pca-target"), cfg.pca_cap)
    src, tgt = src.take(keep_s), tgt.take(keep_t)
    inputs = {"before": (classifier.prepare_raw(src.images), classifier.prepare_raw(tgt.images))}
    if source_stats is not None:
        inputs["after"] = (
            classifier.prepare_inference(src.images, source_stats.mean_pixel, target_stats, cfg.transform),
            classifier.prepare_inference(tgt.images, target_stats.mean_pixel, source_stats, cfg.transform),
        )
    tables = {}
    for stage, (xs, xt) in inputs.items():
        model = diagnostics.fit_pca(np.concatenate([xs, xt]), k=2)
        tables[stage] = diagnostics.ProjectionTable.concat([
            diagnostics.project(model, xs, src.labels, "source"),
            diagnostics.project(model, xt, tgt.labels, "target"),
        ])
    return tables


def write_pca(out, tables):
    """Write CSV and SVG per stage plus ``pca_summary.csv``; return the gaps."""
    out = Path(out)
    gaps = {}
    for stage, table in tables.items():
        gaps[stage] = diagnostics.domain_gap(table)
        (out / f"pca_{stage}.csv").write_text(diagnostics.table_to_csv(table))
        title = f"{stage} DDA: domain gap {gaps[stage]:.3f}"
        (out / f"pca_{stage}.svg").write_text(diagnostics.scatter_svg(table, title))
    lines = ["stage,domain_gap"] + [f"{stage},{gap!r}" for stage, gap in gaps.items()]
    (out / "pca_summary.csv").write_text("\n".join(lines) + "\n")
    return gaps


# -- the experiment ---------------------------------------------------------

@dataclass
class RunResult:
    accuracies: dict
    gaps: dict
    seconds: dict

    @property
    def target_gain(self):
        return self.accuracies["dda"][1] - self.accuracies["baseline"][1]

    @property
    def source_change(self):
        return self.accuracies["dda"][0] - self.accuracies["baseline"][0]


def _train_and_save(cfg, out, name, domains, dda, source_stats=None, target_stats=None):
    if dda:
        eval_sets = [
            classifier.EvalSet("source_test", domains.source_test, "dda_source", target_stats,
                               source_stats.mean_pixel),
            classifier.EvalSet("target_test", domains.target_test, "dda_target", source_stats,
                               target_stats.mean_pixel),
        ]
    else:
        eval_sets = [classifier.EvalSet("source_test", domains.source_test),
                     classifier.EvalSet("target_test", domains.target_test)]
    t0 = time.perf_counter()
    model, report = classifier.train(domains.source_train, target_stats, cfg.train_config(dda), eval_sets)
    seconds = time.perf_counter() - t0
    run_dir = Path(out) / name
    run_dir.mkdir(parents=True, exist_ok=True)
    classifier.save_checkpoint(run_dir / "model.ckpt", model)
    (run_dir / "train_report.csv").write_text(report.to_csv())
    cols = [c for c in report.columns() if c.endswith("_acc")]
    (run_dir / "train_curves.svg").write_text(diagnostics.curves_svg(cols, report.rows, f"{name} accuracy"))
    last = report.rows[-1]
    return (last["source_test_acc"], last["target_test_acc"]), seconds


def write_summary(out, accuracies):
    lines = ["run,source_test_acc,target_test_acc"]
    for name, (s, t) in accuracies.items():
        lines.append(f"{name},{s!r},{t!r}")
    if "dda" in accuracies and "baseline" in accuracies:
        (bs, bt), (ds, dt) = accuracies["baseline"], accuracies["dda"]
        lines.append(f"dda_minus_baseline,{ds - bs!r},{dt - bt!r}")
    path = Path(out) / "summary.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def run_experiment(cfg, dda=True):
    """Train the baseline (and the DDA model), evaluate, and run the PCA.

    With ``dda=False`` only the baseline is trained and no domain
    statistics are computed or read.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    domains = load_domains(cfg)
    accuracies, seconds = {}, {}
    accuracies["baseline"], seconds["baseline"] = _train_and_save(cfg, out, "baseline", domains, dda=False)
    gaps = {}
    if dda:
        source_stats, target_stats = compute_domain_stats(cfg, domains)
        write_domain_stats(out, source_stats, target_stats)
        accuracies["dda"], seconds["dda"] = _train_and_save(cfg, out, "dda", domains, True,
                                                            source_stats, target_stats)
        gaps = write_pca(out, pca_tables(cfg, domains, source_stats, target_stats))
    write_summary(out, accuracies)
    return RunResult(accuracies, gaps, seconds)


def check_margins(cfg, result):
    """Raise MarginError listing every acceptance margin that failed."""
    failures = []
    if result.target_gain < cfg.min_target_gain:
        failures.append(f"target-test gain {result.target_gain:+.4f} < {cfg.min_target_gain}")
    if abs(result.source_change) > cfg.max_source_drop:
        failures.append(f"source-test change {result.source_change:+.4f} exceeds +/-{cfg.max_source_drop}")
    if not result.gaps["after"] < result.gaps["before"]:
        failures.append(f"domain gap after {result.gaps['after']:.4f} >= before {result.gaps['before']:.4f}")
    if failures:
        raise MarginError("; ".join(failures))


# -- transforms for inspection ----------------------------------------------

def transform_images(images, domain, source_stats, target_stats, cfg=TransformConfig()):
    """Inference-side transform of ``[0, 1]`` images from ``domain``.

    Single-channel images are replicated when the statistics are 3-channel.
    Raises DataError on geometry mismatch or degenerate outputs.
    """
    images = np.asarray(images, dtype=np.float64)
    channels = source_stats.geometry[0]
    if images.shape[1] == 1 and channels == 3:
        images = np.repeat(images, 3, axis=1)
    own, other = (source_stats, target_stats) if domain == "source" else (target_stats, source_stats)
    if images.shape[1:] != other.geometry:
        raise DataError(f"{domain} images have geometry {images.shape[1:]}, "
                        f"statistics have {other.geometry}")
    cfg = dataclasses.replace(cfg, renormalize=True)
    out, ok = core.inference_transform_batch(core.prepare_inputs(images), own.mean_pixel, other, cfg)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise DataError(f"{domain} image {bad} is constant after the transform")
    return out


def pixel_correlation(a, b):
    """Pearson correlation of the flattened pixels of two images."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.corrcoef(a, b)[0, 1])
