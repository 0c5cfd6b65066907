"""``bgsplit`` command line.

Exit status: 0 on success, 1 on a usage error, 2 when the command fails.
"""

from __future__ import annotations

import argparse
import inspect
import json
import logging
import sys
import traceback
from pathlib import Path

from . import __version__
from .data import (build_bg_manifest, generate_synthetic_longtail, manifest_stats, read_manifest,
                   write_manifest)
from .errors import BgSplitError, ConfigurationError
from .experiments import (BENCHMARK_SYNTHETIC, BENCHMARK_TRAIN, CANONICAL_METHODS, STUDIES,
                          ExperimentSpec, bundled_spec, run_study, write_summary)
from .metrics import evaluate, write_report
from .model import load_checkpoint, save_checkpoint
from .pseudolabels import VARIANTS, PseudoLabelSource, attach_pseudolabels
from .trainer import TrainConfig, train

log = logging.getLogger("bgsplit")

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None


def _category_list(text: str) -> list[str]:
    return [c.strip() for c in text.split(",") if c.strip()]


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    params = dict(BENCHMARK_SYNTHETIC)
    if args.config:
        params.update(_read_json(args.config))
    for name in ("n_categories", "zipf_s", "examples_total", "d", "latent_dim",
                 "center_distance", "spread"):
        value = getattr(args, name)
        if value is not None:
            params[name] = value
    params["seed"] = args.seed
    accepted = set(inspect.signature(generate_synthetic_longtail).parameters)
    unknown = set(params) - accepted
    if unknown:
        raise ConfigurationError(f"unknown synthetic parameters: {sorted(unknown)}")
    m = generate_synthetic_longtail(**params)
    write_manifest(m, args.out)
    print(f"wrote {len(m)} examples to {args.out}")
    return 0


def cmd_build(args) -> int:
    src = read_manifest(args.manifest)
    m = build_bg_manifest(src, _category_list(args.foreground))
    write_manifest(m, args.out)
    print(f"N={m.N} background_fraction={m.background_fraction:.6f} -> {args.out}")
    return 0


def cmd_pseudolabel(args) -> int:
    m = read_manifest(args.manifest)
    source = PseudoLabelSource(args.variant, K=args.K, path=args.path, seed=args.seed)
    out = attach_pseudolabels(m, source)
    write_manifest(out, args.out)
    share = manifest_stats(out).get("max_pseudo_share")
    print(f"{source.describe()} max_pseudo_share={share} -> {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    d = dict(BENCHMARK_TRAIN)
    if args.config:
        d.update(_read_json(args.config))
    if args.method:
        d.update(CANONICAL_METHODS[args.method])
    for name in ("epochs", "batch_size", "learning_rate", "sampling"):
        value = getattr(args, name)
        if value is not None:
            d[name] = value
    d["seed"] = args.seed
    if "trunk_shape" in d:
        d["trunk_shape"] = tuple(d["trunk_shape"])
    return TrainConfig.from_dict(d)


def cmd_train(args) -> int:
    m = read_manifest(args.manifest)
    cfg = _train_config(args)
    params, tlog = train(m, cfg)
    save_checkpoint(params, args.out, {"train_config": cfg.to_dict(),
                                       "foreground_categories": list(m.foreground_categories)})
    last = tlog.epochs[-1]
    print(f"trained {cfg.epochs} epochs, final loss {last.total:.6f} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    m = read_manifest(args.manifest)
    params, extra = load_checkpoint(args.checkpoint)
    cfg_dict = extra.get("train_config")
    if cfg_dict is not None:
        cfg_dict = {**cfg_dict, "trunk_shape": tuple(cfg_dict["trunk_shape"])}
        cfg = TrainConfig.from_dict(cfg_dict)
    else:
        cfg = TrainConfig(use_thresholding=params.clamp_background, b0=params.b0,
                          use_aux=params.v is not None)
    report = evaluate(params, m, cfg, skip_empty=args.skip_empty)
    write_report(report, args.out)
    print(f"mAP={report.mAP:.6f} meanF1={report.meanF1:.6f} -> {args.out}")
    return 0


def cmd_stats(args) -> int:
    print(json.dumps(manifest_stats(read_manifest(args.manifest)), indent=1, sort_keys=True))
    return 0


def cmd_spec(args) -> int:
    text = json.dumps(bundled_spec(args.study).to_dict(), indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_study(args) -> int:
    spec = ExperimentSpec.load(args.config) if args.config else bundled_spec(args.study)
    if args.config and spec.study != args.study:
        raise ConfigurationError(f"spec file describes a {spec.study!r} study, not {args.study!r}")
    if args.seeds:
        spec.seeds = [int(s) for s in args.seeds.split(",")]
    out = args.out or spec.out_dir
    record = run_study(spec, out)
    write_summary(record, out)
    print((Path(out) / "means.csv").read_text(encoding="utf-8"), end="")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bgsplit", description="Background splitting experiments.")
    p.add_argument("--version", action="version", version=f"bgsplit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic long-tail source dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="JSON object of generator parameters")
    s.add_argument("--n-categories", dest="n_categories", type=int)
    s.add_argument("--zipf-s", dest="zipf_s", type=float)
    s.add_argument("--examples", dest="examples_total", type=int)
    s.add_argument("--d", type=int)
    s.add_argument("--latent-dim", dest="latent_dim", type=int)
    s.add_argument("--center-distance", dest="center_distance", type=float)
    s.add_argument("--spread", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build", help="relabel a source manifest around foreground categories")
    s.add_argument("--manifest", required=True)
    s.add_argument("--foreground", required=True, help="comma-separated category names")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("pseudolabel", help="attach auxiliary pseudo-labels")
    s.add_argument("--manifest", required=True)
    s.add_argument("--variant", choices=VARIANTS, required=True)
    s.add_argument("--K", type=int)
    s.add_argument("--path", help="id<TAB>label file for the external variant")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pseudolabel)

    s = sub.add_parser("train", help="train a model on the train split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="JSON object of training options")
    s.add_argument("--method", choices=sorted(CANONICAL_METHODS))
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--learning-rate", dest="learning_rate", type=float)
    s.add_argument("--sampling", choices=("uniform", "class_balanced"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="directory for report.json and report.csv")
    s.add_argument("--skip-empty", action="store_true",
                   help="drop classes without test positives instead of failing")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="print manifest statistics")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("spec", help="print the bundled spec for a study")
    s.add_argument("study", choices=STUDIES)
    s.add_argument("--out")
    s.set_defaults(func=cmd_spec)

    s = sub.add_parser("study", help="run a study from a spec file (or the bundled benchmark)")
    s.add_argument("study", choices=STUDIES)
    s.add_argument("--config", help="JSON spec file")
    s.add_argument("--seeds", help="comma-separated seeds, overriding the spec")
    s.add_argument("--out")
    s.set_defaults(func=cmd_study)
    return p


def _origin(exc: BaseException) -> str:
    frames = traceback.extract_tb(exc.__traceback__)
    for frame in reversed(frames):
        path = Path(frame.filename)
        if path.parent.name == "bgsplit":
            return f"bgsplit.{path.stem}"
    return "bgsplit"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (BgSplitError, OSError, ValueError) as exc:
        print(f"bgsplit {args.command}: {_origin(exc)}: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
