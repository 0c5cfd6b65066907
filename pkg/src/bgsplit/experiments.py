"""Study runners: factor analysis, pseudo-label sources, sweeps and transfer.

Every (method, seed, axis value) run is keyed by a canonical description of
everything that influences its result. The key's hash names the run directory,
so two studies asking for the same run share it, and a rerun of a finished
run is read back instead of recomputed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import platform
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (build_bg_manifest, build_subset_family, downsample_background,
                   generate_synthetic_longtail, read_manifest)
from .errors import BgSplitError, ConfigurationError
from .metrics import EvalReport, average_reports, evaluate, read_report, write_report
from .model import load_checkpoint, save_checkpoint
from .pseudolabels import PseudoLabelSource, attach_pseudolabels
from .trainer import TrainConfig, freeze_trunk_and_retrain_head, train

log = logging.getLogger(__name__)

STUDIES = ("factor", "pseudolabel", "sweep", "transfer")
SWEEP_AXES = ("batch_size", "bg_fraction", "N")

# the bundled desk-scale benchmark
BENCHMARK_SYNTHETIC = {"n_categories": 55, "zipf_s": 1.5, "examples_total": 23530, "d": 32,
                       "spread": 1.0, "center_distance": 3.0, "latent_dim": 4,
                       "test_fraction": 0.15, "seed": 0}
BENCHMARK_FOREGROUND = [f"c{i:03d}" for i in range(50, 55)]
BENCHMARK_TRANSFER_S2 = [f"c{i:03d}" for i in range(45, 50)]
BENCHMARK_TRAIN = {"epochs": 40, "learning_rate": 0.05, "batch_size": 1024,
                   "trunk_shape": [64]}

# the four canonical factor-analysis variants
CANONICAL_METHODS = {
    "FT": {"use_thresholding": False, "use_aux": False, "lambda_g": 0.0},
    "+Aux": {"use_thresholding": False, "use_aux": True},
    "+Thresh": {"use_thresholding": True, "use_aux": False, "lambda_g": 0.0},
    "Both": {"use_thresholding": True, "use_aux": True},
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def spec_hash(obj) -> str:
    """sha256 of the key-sorted JSON form; insensitive to key order."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Method:
    name: str
    overrides: dict = field(default_factory=dict)


@dataclass
class ExperimentSpec:
    """A study description, usually loaded from a JSON file.

    ``dataset`` holds either ``{"synthetic": {...}}`` (arguments of the
    synthetic generator) or ``{"manifest": path}``. The synthetic seed is
    offset by the run seed, so each seed draws a fresh benchmark instance.
    """

    study: str = "factor"
    dataset: dict = field(default_factory=lambda: {"synthetic": dict(BENCHMARK_SYNTHETIC)})
    foreground: list = field(default_factory=lambda: list(BENCHMARK_FOREGROUND))
    pseudolabels: dict = field(default_factory=lambda: {"variant": "cluster", "K": 50})
    train: dict = field(default_factory=lambda: dict(BENCHMARK_TRAIN))
    methods: list = field(default_factory=lambda: [Method(n, dict(o))
                                                   for n, o in CANONICAL_METHODS.items()])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs"
    pseudo_sources: list = field(default_factory=list)
    sweep: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)

    def __post_init__(self):
        self.methods = [m if isinstance(m, Method) else _method_from_obj(m) for m in self.methods]
        self.validate()

    def validate(self) -> None:
        if self.study not in STUDIES:
            raise ConfigurationError(f"unknown study {self.study!r}; expected one of {STUDIES}")
        names = [m.name for m in self.methods]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ConfigurationError(f"method names must be unique: {dupes}")
        if not self.seeds:
            raise ConfigurationError("spec lists no seeds")
        if set(self.dataset) not in ({"synthetic"}, {"manifest"}):
            raise ConfigurationError("dataset must hold exactly one of 'synthetic' or 'manifest'")
        if "manifest" in self.dataset and not Path(self.dataset["manifest"]).exists():
            raise ConfigurationError(f"manifest {self.dataset['manifest']!r} does not exist")
        TrainConfig.from_dict(_train_dict(self.train))
        for m in self.methods:
            TrainConfig.from_dict(_train_dict({**self.train, **m.overrides}))
        for src in [self.pseudolabels, *self.pseudo_sources]:
            ps = PseudoLabelSource(**src)
            if ps.variant == "external" and not Path(ps.path).exists():
                raise ConfigurationError(f"pseudo-label file {ps.path!r} does not exist")
        if self.study == "pseudolabel" and not self.pseudo_sources:
            raise ConfigurationError("pseudo-label study needs 'pseudo_sources'")
        if self.study == "sweep":
            if self.sweep.get("axis") not in SWEEP_AXES:
                raise ConfigurationError(f"sweep axis must be one of {SWEEP_AXES}")
            if not self.sweep.get("values"):
                raise ConfigurationError("sweep needs a non-empty 'values' list")
        if self.study == "transfer":
            s2 = self.transfer.get("s2")
            if not s2:
                raise ConfigurationError("transfer study needs 's2' categories")
            overlap = sorted(set(self.foreground) & set(s2))
            if overlap:
                raise ConfigurationError(f"S1 and S2 overlap: {overlap}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["methods"] = [{"name": m.name, "train": m.overrides} for m in self.methods]
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> ExperimentSpec:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"spec file {path} does not exist")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(obj)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return spec_hash(d)


def _method_from_obj(obj) -> Method:
    if isinstance(obj, str):
        if obj not in CANONICAL_METHODS:
            raise ConfigurationError(f"unknown method {obj!r}; give overrides for custom methods")
        return Method(obj, dict(CANONICAL_METHODS[obj]))
    return Method(obj["name"], dict(obj.get("train", {})))


def _train_dict(d: dict) -> dict:
    d = dict(d)
    if "trunk_shape" in d:
        d["trunk_shape"] = tuple(d["trunk_shape"])
    return d


def bundled_spec(study: str = "factor", out_dir: str = "runs") -> ExperimentSpec:
    """The desk-scale benchmark configured for one of the studies."""
    extra = {}
    if study == "pseudolabel":
        extra["methods"] = [Method("BG", {"use_thresholding": True, "use_aux": True})]
        extra["pseudo_sources"] = [{"variant": "none"}, {"variant": "random", "K": 50},
                                   {"variant": "cluster", "K": 50}]
    elif study == "sweep":
        extra["methods"] = [Method("FT", dict(CANONICAL_METHODS["FT"]))]
        extra["sweep"] = {"axis": "batch_size", "values": [128, 1024]}
    elif study == "transfer":
        extra["transfer"] = {"s2": list(BENCHMARK_TRANSFER_S2)}
    return ExperimentSpec(study=study, out_dir=out_dir, **extra)


# -- records -----------------------------------------------------------------

@dataclass
class RunResult:
    method: str
    seed: int
    axis_value: object
    run_hash: str
    report: EvalReport
    train_logs: list = field(default_factory=list)

    def row(self) -> dict:
        return {"method": self.method, "seed": self.seed,
                "axis_value": "" if self.axis_value is None else self.axis_value,
                "mAP": self.report.mAP, "meanF1": self.report.meanF1,
                "precision": self.report.aggregate("precision"),
                "recall": self.report.aggregate("recall"), "run_hash": self.run_hash[:16]}


@dataclass
class RunRecord:
    spec_hash: str
    study: str
    axis: str | None
    results: list[RunResult] = field(default_factory=list)
    environment: dict = field(default_factory=dict)
    error: str | None = None

    def means(self) -> list[dict]:
        """Seed means per (axis value, method), in first-seen order."""
        groups: dict[tuple, list[RunResult]] = {}
        for r in self.results:
            groups.setdefault((r.axis_value, r.method), []).append(r)
        rows = []
        for (value, method), rs in groups.items():
            rows.append({"method": method, "axis_value": "" if value is None else value,
                         "n_seeds": len(rs),
                         "mAP": float(np.mean([r.report.mAP for r in rs])),
                         "meanF1": float(np.mean([r.report.meanF1 for r in rs])),
                         "precision": float(np.mean([r.report.aggregate("precision")
                                                     for r in rs]))})
        return rows

    def mean_map(self, method: str, axis_value=None) -> float:
        for row in self.means():
            if row["method"] == method and row["axis_value"] == ("" if axis_value is None
                                                                 else axis_value):
                return row["mAP"]
        raise KeyError(method)

    def to_dict(self) -> dict:
        return {"spec_hash": self.spec_hash, "study": self.study, "axis": self.axis,
                "environment": self.environment, "error": self.error,
                "runs": [r.row() for r in self.results], "means": self.means()}


def _csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([f"{row[c]:.6f}" if isinstance(row[c], float) else row[c]
                         for c in columns])
    return buf.getvalue()


def write_summary(record: RunRecord, out_dir) -> None:
    """summary.csv (per run) and means.csv (seed means) carry no timestamps;
    record.json adds the environment fingerprint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    axis = record.axis or "axis"
    runs = [{**r.row(), axis: r.row()["axis_value"]} for r in record.results]
    cols = ["method", "seed", "mAP", "meanF1", "precision", "recall", "run_hash"]
    mean_cols = ["method", "n_seeds", "mAP", "meanF1", "precision"]
    if record.axis:
        cols.insert(0, axis)
        mean_cols.insert(0, axis)
    (out_dir / "summary.csv").write_text(_csv(runs, cols), encoding="utf-8")
    means = [{**m, axis: m["axis_value"]} for m in record.means()]
    (out_dir / "means.csv").write_text(_csv(means, mean_cols), encoding="utf-8")
    (out_dir / "record.json").write_text(json.dumps(record.to_dict(), sort_keys=True, indent=1)
                                         + "\n", encoding="utf-8")


def environment_fingerprint() -> dict:
    return {"bgsplit": __version__, "numpy": np.__version__,
            "python": platform.python_version(), "started": time.time()}


# -- execution ---------------------------------------------------------------

class Runner:
    """Runs keyed training jobs, caching datasets and pseudo-labels in memory
    and finished runs on disk under ``<out>/runs/<hash>``."""

    def __init__(self, spec: ExperimentSpec, out_dir=None):
        self.spec = spec
        self.out = Path(out_dir or spec.out_dir)
        self._sources: dict[str, object] = {}
        self._pseudo: dict[str, object] = {}

    # datasets

    def dataset_key(self, seed: int) -> dict:
        if "manifest" in self.spec.dataset:
            return {"manifest": str(self.spec.dataset["manifest"])}
        params = {**BENCHMARK_SYNTHETIC, **self.spec.dataset["synthetic"]}
        params["seed"] = int(params["seed"]) + int(seed)
        return {"synthetic": params}

    def source(self, seed: int):
        key = canonical_json(self.dataset_key(seed))
        if key not in self._sources:
            dk = self.dataset_key(seed)
            if "manifest" in dk:
                self._sources[key] = read_manifest(dk["manifest"])
            else:
                self._sources[key] = generate_synthetic_longtail(**dk["synthetic"])
        return self._sources[key]

    def pseudo_source(self, src: dict, seed: int) -> PseudoLabelSource:
        ps = PseudoLabelSource(**src)
        if ps.variant in ("random", "cluster") and "seed" not in src:
            ps = dataclasses.replace(ps, seed=int(seed))
        return ps

    def manifest(self, foreground, src: dict, seed: int):
        """Foreground relabelling of the seed's dataset with pseudo-labels attached.

        Pseudo-labels depend only on the features, so they are computed once
        per (dataset, source) and shared across foreground sets.
        """
        base = self.source(seed)
        ps = self.pseudo_source(src, seed)
        if ps.variant == "none":
            return build_bg_manifest(base, foreground)
        key = canonical_json([self.dataset_key(seed), dataclasses.asdict(ps)])
        if key not in self._pseudo:
            self._pseudo[key] = attach_pseudolabels(base, ps)
        return build_bg_manifest(self._pseudo[key], foreground)

    # runs

    def config(self, method: Method, seed: int, extra: dict | None = None) -> TrainConfig:
        d = _train_dict({**self.spec.train, **method.overrides, **(extra or {})})
        d["seed"] = int(seed)
        return TrainConfig.from_dict(d)

    def run_key(self, method: Method, seed: int, config: TrainConfig, src: dict,
                foreground, bg_fraction: float = 1.0, head_from: str | None = None) -> dict:
        """Canonical description of a run. Settings that cannot influence the
        result are dropped: the pseudo-label source and lambda_g when the aux
        head is off, and a background fraction of 1."""
        cfg = config.to_dict()
        key = {"dataset": self.dataset_key(seed), "foreground": list(foreground), "train": cfg}
        if config.use_aux:
            key["pseudolabels"] = dataclasses.asdict(self.pseudo_source(src, seed))
        else:
            cfg.pop("lambda_g")
        if bg_fraction != 1.0:
            key["bg_fraction"] = bg_fraction
        if head_from is not None:
            key["head_from"] = head_from
        return key

    def run_dir(self, label: str, key: dict) -> tuple[str, Path]:
        """Hash of ``key`` and the run's directory. An existing finished
        directory with the same hash wins over the label."""
        h = spec_hash(key)
        runs = self.out / "runs"
        for d in sorted(runs.glob(f"*-{h[:12]}")) if runs.exists() else ():
            if (d / "report.json").exists():
                return h, d
        return h, runs / f"{label}-{h[:12]}"

    def execute(self, label: str, key: dict, fit) -> tuple[str, EvalReport, list]:
        """Run ``fit() -> (params, report, log_dict, extra_files)`` unless a
        finished directory for ``key`` exists. Output lands in a temporary
        directory that is renamed into place only once complete."""
        h, final = self.run_dir(label, key)
        if (final / "report.json").exists():
            log.info("reusing %s", final.name)
            logs = json.loads((final / "train_log.json").read_text(encoding="utf-8"))
            return h, read_report(final / "report.json"), logs
        tmp = final.with_name(f".{final.name}.tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        params, report, logs = fit(tmp)
        if params is not None:
            save_checkpoint(params, tmp / "checkpoint.json", {"run_key": key})
        write_report(report, tmp)
        (tmp / "run_key.json").write_text(json.dumps(key, sort_keys=True, indent=1) + "\n",
                                          encoding="utf-8")
        (tmp / "train_log.json").write_text(json.dumps(logs, sort_keys=True) + "\n",
                                            encoding="utf-8")
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
        return h, report, logs

    def train_eval(self, method: Method, seed: int, src: dict | None = None, foreground=None,
                   extra: dict | None = None, bg_fraction: float = 1.0,
                   label: str | None = None) -> tuple[str, EvalReport, list, Path]:
        src = self.spec.pseudolabels if src is None else src
        foreground = self.spec.foreground if foreground is None else foreground
        cfg = self.config(method, seed, extra)
        if not cfg.use_aux:
            src = {"variant": "none"}
        key = self.run_key(method, seed, cfg, src, foreground, bg_fraction)
        label = label or f"{_slug(method.name)}-s{seed}"

        def fit(_tmp):
            m = self.manifest(foreground, src, seed)
            m = downsample_background(m, bg_fraction, seed=seed)
            params, tlog = train(m, cfg)
            return params, evaluate(params, m, cfg), [tlog.to_dict()]

        h, report, logs = self.execute(label, key, fit)
        return h, report, logs, self.run_dir(label, key)[1]


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_") or "m"


def _new_record(spec: ExperimentSpec, axis=None) -> RunRecord:
    return RunRecord(spec.hash(), spec.study, axis, environment=environment_fingerprint())


def _finish(record: RunRecord, out: Path, body) -> RunRecord:
    """Run ``body``; on failure keep what finished, write the summary and re-raise."""
    try:
        body()
    except BgSplitError as exc:
        record.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        record.environment["finished"] = time.time()
        write_summary(record, out)
    return record


def run_factor_analysis(spec: ExperimentSpec, out_dir=None) -> RunRecord:
    """Train and evaluate every method for every seed."""
    runner = Runner(spec, out_dir)
    record = _new_record(spec)

    def body():
        for seed in spec.seeds:
            for method in spec.methods:
                h, rep, logs, _ = runner.train_eval(method, seed)
                record.results.append(RunResult(method.name, seed, None, h, rep, logs))

    return _finish(record, runner.out, body)


def run_pseudolabel_study(spec: ExperimentSpec, out_dir=None) -> RunRecord:
    """One row per pseudo-label source. Source ``none`` switches the aux head off."""
    runner = Runner(spec, out_dir)
    record = _new_record(spec, "source")
    method = spec.methods[0]

    def body():
        for seed in spec.seeds:
            for src in spec.pseudo_sources:
                ps = PseudoLabelSource(**src)
                extra = {"use_aux": ps.variant != "none"}
                if ps.variant == "none":
                    extra["lambda_g"] = 0.0
                h, rep, logs, _ = runner.train_eval(method, seed, src, extra=extra,
                                                    label=f"pl_{ps.variant}-s{seed}")
                record.results.append(RunResult(method.name, seed, ps.variant, h, rep, logs))

    return _finish(record, runner.out, body)


def run_sweep(spec: ExperimentSpec, out_dir=None) -> RunRecord:
    """One train and eval per axis value, method and seed.

    Axis ``N`` partitions the foreground list into subsets of the given size;
    each subset is trained separately and the per-class rows are pooled.
    """
    runner = Runner(spec, out_dir)
    axis = spec.sweep["axis"]
    record = _new_record(spec, axis)

    def one(method, seed, value):
        if axis == "batch_size":
            return runner.train_eval(method, seed, extra={"batch_size": int(value)})[:3]
        if axis == "bg_fraction":
            return runner.train_eval(method, seed, bg_fraction=float(value))[:3]
        family = build_subset_family(runner.source(seed), spec.foreground, int(value), seed=seed)
        hashes, reports, logs = [], [], []
        for i, subset in enumerate(family.subsets):
            h, rep, lg, _ = runner.train_eval(method, seed, foreground=list(subset),
                                              label=f"{_slug(method.name)}-s{seed}-N{value}-{i}")
            hashes.append(h)
            reports.append(rep)
            logs.extend(lg)
        return spec_hash(hashes), average_reports(reports), logs

    def body():
        for value in spec.sweep["values"]:
            for seed in spec.seeds:
                for method in spec.methods:
                    h, rep, logs = one(method, seed, value)
                    record.results.append(RunResult(method.name, seed, value, h, rep, logs))

    return _finish(record, runner.out, body)


def run_transfer_study(spec: ExperimentSpec, out_dir=None) -> RunRecord:
    """Train FT and BG Splitting on S1, retrain only the main head on S2 from
    each, and train BG Splitting on S2 from scratch as the upper bound."""
    runner = Runner(spec, out_dir)
    record = _new_record(spec)
    s1, s2 = list(spec.foreground), list(spec.transfer["s2"])
    ft = Method("FT", dict(CANONICAL_METHODS["FT"]))
    bgs = Method("Both", dict(CANONICAL_METHODS["Both"]))
    head_method = Method("head", {"use_thresholding": True, "use_aux": False, "lambda_g": 0.0})

    def head_only(seed, name, trunk_dir: Path, trunk_hash: str):
        cfg = runner.config(head_method, seed)
        key = runner.run_key(head_method, seed, cfg, {"variant": "none"}, s2,
                             head_from=trunk_hash)

        def fit(_tmp):
            params, _ = load_checkpoint(trunk_dir / "checkpoint.json")
            m = runner.manifest(s2, {"variant": "none"}, seed)
            out = freeze_trunk_and_retrain_head(params, m, cfg)
            return out, evaluate(out, m, cfg), []

        h, rep, logs = runner.execute(f"head_{name}-s{seed}", key, fit)
        return RunResult(f"head-on-{name}", seed, None, h, rep, logs)

    def body():
        for seed in spec.seeds:
            h_ft, _, _, d_ft = runner.train_eval(ft, seed, foreground=s1)
            h_bg, _, _, d_bg = runner.train_eval(bgs, seed, foreground=s1)
            record.results.append(head_only(seed, "FT", d_ft, h_ft))
            record.results.append(head_only(seed, "BGSplit", d_bg, h_bg))
            h, rep, logs, _ = runner.train_eval(bgs, seed, foreground=s2,
                                                label=f"Both_S2-s{seed}")
            record.results.append(RunResult("full-BGSplit", seed, None, h, rep, logs))

    return _finish(record, runner.out, body)


def run_study(spec: ExperimentSpec, out_dir=None) -> RunRecord:
    return {"factor": run_factor_analysis, "pseudolabel": run_pseudolabel_study,
            "sweep": run_sweep, "transfer": run_transfer_study}[spec.study](spec, out_dir)
