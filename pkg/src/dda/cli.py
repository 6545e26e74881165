"""Command-line entry point.

Subcommands: ``stats``, ``run``, ``transform``, ``pca``, ``synth`` and
``idx-info``.  Exit codes: 0 success, 1 usage or configuration error,
2 data error, 3 acceptance-margin failure.
"""

import argparse
import logging
import os
import sys
from contextlib import ExitStack, nullcontext
from pathlib import Path

import numpy as np

from . import classifier, core, datasets, experiment
from .datasets import DataError
from .experiment import ConfigError, MarginError

log = logging.getLogger("dda")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MARGIN = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", metavar="PATH", help="key = value experiment file")
    p.add_argument("--seed", type=int, help="master seed (required here or in the config)")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    p.add_argument("--full-scale", action="store_true",
                   help="every image, 100 epochs, batch 128 (slow; not used by the acceptance tests)")


def build_parser():
    parser = _Parser(prog="dda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("stats", help="compute and cache per-domain statistics")
    _common(p)

    p = sub.add_parser("run", help="train baseline and DDA models, evaluate, run PCA")
    _common(p)
    p.add_argument("--no-dda", action="store_true", help="train only the baseline; never touch statistics")
    p.add_argument("--assert-margins", action="store_true",
                   help="exit 3 unless the target gain, source fidelity and gap margins hold")

    p = sub.add_parser("pca", help="PCA scatter of both domains before and after DDA")
    _common(p)

    p = sub.add_parser("synth", help="export the patch bank and synthesized target sets")
    _common(p)

    p = sub.add_parser("transform", help="apply the transforms to images for inspection")
    p.add_argument("--stats", metavar="DIR", required=True, help="directory holding source/target .stats")
    p.add_argument("--source-idx", nargs=2, metavar=("IMAGES", "LABELS"), help="source images (IDX)")
    p.add_argument("--source-dir", nargs=2, metavar=("DIR", "MANIFEST"), help="source images (directory)")
    p.add_argument("--target-idx", nargs=2, metavar=("IMAGES", "LABELS"), help="target images (IDX)")
    p.add_argument("--target-dir", nargs=2, metavar=("DIR", "MANIFEST"), help="target images (directory)")
    p.add_argument("--limit", type=int, help="only the first N images of each input")
    p.add_argument("--out", metavar="DIR", required=True)

    p = sub.add_parser("idx-info", help="describe IDX files")
    p.add_argument("paths", nargs="+", metavar="PATH")
    return parser


def _load_config(args):
    cfg = experiment.load_config(args.config, seed=args.seed, out=args.out)
    if args.full_scale:
        cfg = cfg.full_scale()
    return cfg.validate()


def _lock(out):
    """Guard ``out`` against concurrent invocations."""
    from filelock import FileLock, Timeout

    Path(out).mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(Path(out) / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"{out} is in use by another dda process") from None
    return lock


def _thread_limit():
    value = os.environ.get("DDA_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"DDA_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"DDA_THREADS must be positive, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def cmd_stats(args):
    cfg = _load_config(args)
    with ExitStack() as stack:
        stack.callback(_lock(cfg.out).release)
        domains = experiment.load_domains(cfg)
        stats = experiment.compute_domain_stats(cfg, domains)
        for path, s in zip(experiment.write_domain_stats(cfg.out, *stats), stats):
            c, h, w = s.geometry
            print(f"{s.domain}: {path}  geometry {h}x{w}x{c}  samples {s.sample_count}  "
                  f"sha256 {experiment.file_sha256(path)}")
    return EXIT_OK


def cmd_run(args):
    cfg = _load_config(args)
    if args.no_dda and args.assert_margins:
        raise ConfigError("--assert-margins needs the DDA run; drop --no-dda")
    with ExitStack() as stack:
        stack.callback(_lock(cfg.out).release)
        result = experiment.run_experiment(cfg, dda=not args.no_dda)
    for name, (s, t) in result.accuracies.items():
        print(f"{name:9s} source-test {s:.4f}  target-test {t:.4f}  ({result.seconds[name]:.1f} s)")
    if not args.no_dda:
        print(f"target-test gain {result.target_gain:+.4f}  source-test change {result.source_change:+.4f}")
        print(f"domain gap before {result.gaps['before']:.4f}  after {result.gaps['after']:.4f}")
    print(f"artifacts in {cfg.out}")
    if args.assert_margins:
        experiment.check_margins(cfg, result)
        print("margins hold")
    return EXIT_OK


def cmd_pca(args):
    cfg = _load_config(args)
    with ExitStack() as stack:
        stack.callback(_lock(cfg.out).release)
        domains = experiment.load_domains(cfg)
        stats = experiment.compute_domain_stats(cfg, domains)
        gaps = experiment.write_pca(cfg.out, experiment.pca_tables(cfg, domains, *stats))
    for stage, gap in gaps.items():
        print(f"domain gap {stage}: {gap:.4f}")
    return EXIT_OK


def cmd_synth(args):
    cfg = _load_config(args)
    with ExitStack() as stack:
        stack.callback(_lock(cfg.out).release)
        domains = experiment.load_domains(cfg)
        out = Path(cfg.out)
        bank = experiment.patch_bank(cfg, domains.source_train.geometry[1:])
        datasets.save_image_dir(bank.patches, np.zeros(len(bank.patches), dtype=np.int64),
                                out / "patches", prefix="patch")
        (out / "patches" / "ORIGIN").write_text(bank.origin + "\n")
        for name, d in (("target_train", domains.target_train), ("target_test", domains.target_test)):
            manifest = datasets.save_image_dir(d.images, d.labels, out / name)
            print(f"{name}: {len(d)} images, manifest {manifest}")
    return EXIT_OK


def _transform_input(idx, directory, domain, limit):
    if idx:
        d = datasets.load_idx(*idx, domain_tag=domain)
    elif directory:
        d = datasets.load_image_dir(*directory, domain_tag=domain)
    else:
        return None
    if limit is not None:
        d = d.take(np.arange(min(limit, len(d))))
    return d


def _save_panels(images, labels, out_dir):
    """Composite PNG per image plus a strip of its channels side by side."""
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for j, (im, label) in enumerate(zip(images, labels)):
        pixels = np.clip(np.rint((im + 1.0) * 127.5), 0, 255).astype(np.uint8)
        composite = pixels.transpose(1, 2, 0) if pixels.shape[0] == 3 else pixels[0]
        Image.fromarray(composite).save(out_dir / f"img{j:05d}.png")
        Image.fromarray(np.concatenate(list(pixels), axis=1)).save(out_dir / f"img{j:05d}_channels.png")
        lines.append(f"img{j:05d}.png\t{int(label)}\n")
    (out_dir / "labels.tsv").write_text("".join(lines), encoding="utf-8")
    np.save(out_dir / "transformed.npy", images)


def cmd_transform(args):
    source_stats, target_stats = experiment.read_domain_stats(args.stats)
    inputs = {
        "source": _transform_input(args.source_idx, args.source_dir, "source", args.limit),
        "target": _transform_input(args.target_idx, args.target_dir, "target", args.limit),
    }
    if all(d is None for d in inputs.values()):
        raise ConfigError("give at least one of --source-idx, --source-dir, --target-idx, --target-dir")
    out = Path(args.out)
    with ExitStack() as stack:
        stack.callback(_lock(out).release)
        raw, done = {}, {}
        for domain, d in inputs.items():
            if d is None:
                continue
            images = d.images
            if images.shape[1] == 1 and source_stats.geometry[0] == 3:
                images = np.repeat(images, 3, axis=1)
            raw[domain] = core.prepare_inputs(images)
            done[domain] = experiment.transform_images(images, domain, source_stats, target_stats)
            _save_panels(done[domain], d.labels, out / domain)
            print(f"{domain}: {len(d)} images -> {out / domain}")
        if len(done) == 2:
            n = min(len(inputs["source"]), len(inputs["target"]))
            lines = ["index,source_label,target_label,raw_corr,dda_corr"]
            for j in range(n):
                r = experiment.pixel_correlation(raw["source"][j], raw["target"][j])
                t = experiment.pixel_correlation(done["source"][j], done["target"][j])
                lines.append(f"{j},{inputs['source'].labels[j]},{inputs['target'].labels[j]},{r!r},{t!r}")
            (out / "pairs.csv").write_text("\n".join(lines) + "\n")
            print(f"pairwise correlations -> {out / 'pairs.csv'}")
    return EXIT_OK


def cmd_idx_info(args):
    for path in args.paths:
        info = datasets.idx_header(path)
        dims = "x".join(str(n) for n in info["dims"]) or "-"
        print(f"{path}: {info['kind']} magic 0x{info['magic']:08x} count {info['count']} dims {dims}")
        if info["kind"] == "labels":
            hist = np.bincount(info["labels"], minlength=10)
            print("  label counts " + " ".join(f"{k}:{n}" for k, n in enumerate(hist)))
    return EXIT_OK


COMMANDS = {
    "stats": cmd_stats,
    "run": cmd_run,
    "pca": cmd_pca,
    "synth": cmd_synth,
    "transform": cmd_transform,
    "idx-info": cmd_idx_info,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"dda: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, core.DegenerateImageError, classifier.TrainingError, OSError) as exc:
        print(f"dda: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MarginError as exc:
        print(f"dda: margin check failed: {exc}", file=sys.stderr)
        return EXIT_MARGIN


if __name__ == "__main__":
    sys.exit(main())
