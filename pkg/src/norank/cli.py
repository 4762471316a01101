"""Command-line harness: dataset generation, training, decomposition and the benchmark grid.

Exit codes: 0 on success, 2 for configuration errors, 3 when a pipeline
stage fails.  ``NORANK_SEED`` in the environment overrides every seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, baselines, data, decomp, encoder, metrics, trainer
from .losses import LossConfig
from .tensor import SingularSystemError, read_dtn1, write_dtn1

logger = logging.getLogger("norank")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
REPORT_SCHEMA = "norank-report/1"
RUN_SCHEMA = "norank-run/1"
FORMATS = ("csv", "json", "svg")
GENERATORS = ("crystals", "galaxies", "blobs")
BASE_METHODS = ("metric-learning", "pca", "tsne", "raw", "umap")
UNAVAILABLE_METHODS = ("umap",)  # listed in tables as n/a, never computed
NOT_AVAILABLE = "n/a"
DEFAULT_METHODS = ("metric-learning", "pca", "tsne", "cp:5", "cp:10", "cp:20",
                   "tucker:5", "tucker:10", "tucker:20")
METRIC_HEADER = ("dataset", "method", "k") + metrics.TABLE_COLUMNS
RECON_HEADER = ("dataset", "method", "epsilon", "explained_variance")
HIST_BINS = 30
# fixed 10-color categorical palette for scatter plots
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class DatasetSpec:
    generator: str | None = "crystals"
    n: int | None = None
    seed: int = 0
    tensor: str | None = None
    labels: str | None = None
    provenance: str = "generic"

    @property
    def name(self) -> str:
        if self.generator is not None:
            return self.generator
        return Path(self.tensor).stem

    def validate(self) -> None:
        if self.generator is None:
            if not self.tensor or not self.labels:
                raise ConfigError("a file dataset needs both 'tensor' and 'labels' paths")
        elif self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        if self.n is not None and self.n < 4:
            raise ConfigError("generated datasets need n >= 4")

    def load(self) -> data.LabeledDataset:
        if self.generator == "crystals":
            return data.generate_crystals(self.n or 400, self.seed)
        if self.generator == "galaxies":
            return data.generate_galaxies(self.n or 500, self.seed)
        if self.generator == "blobs":
            return data.generate_blobs(self.n or 80, seed=self.seed)
        for path in (self.tensor, self.labels):
            if not Path(path).is_file():
                raise FileNotFoundError(f"missing input file {path}")
        return data.load_dataset(self.tensor, self.labels, self.provenance)


@dataclass(frozen=True)
class EncoderSpec:
    hidden: tuple[int, ...] = encoder.DEFAULT_HIDDEN
    embed_dim: int = encoder.DEFAULT_EMBED_DIM
    head: bool = False
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    methods: tuple[str, ...] = DEFAULT_METHODS
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    output_dir: str = "runs/benchmark"
    formats: tuple[str, ...] = ("csv", "json", "svg")
    k_neighbors: int = metrics.DEFAULT_K_NEIGHBORS
    eval_seed: int = 0
    tsne: baselines.TsneConfig = field(default_factory=baselines.TsneConfig)

    def validate(self) -> None:
        self.dataset.validate()
        if not self.methods:
            raise ConfigError("at least one method is required")
        for m in self.methods:
            parse_method(m)
        bad = [f for f in self.formats if f not in FORMATS]
        if bad:
            raise ConfigError(f"unknown report formats {bad}; choose from {FORMATS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["formats"] = list(self.formats)
        d["encoder"]["hidden"] = list(self.encoder.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        try:
            kwargs = {}
            if "dataset" in d:
                kwargs["dataset"] = DatasetSpec(**d.pop("dataset"))
            if "train" in d:
                kwargs["train"] = trainer.TrainConfig.from_dict(d.pop("train"))
            if "loss" in d:  # a top-level loss block overrides the one under train
                loss = LossConfig.from_dict(d.pop("loss"))
                kwargs["train"] = replace(kwargs.get("train", trainer.TrainConfig()), loss=loss)
            if "encoder" in d:
                enc = dict(d.pop("encoder"))
                if "hidden" in enc:
                    enc["hidden"] = tuple(enc["hidden"])
                kwargs["encoder"] = EncoderSpec(**enc)
            if "tsne" in d:
                kwargs["tsne"] = baselines.TsneConfig(**d.pop("tsne"))
            for key in ("methods", "formats"):
                if key in d:
                    kwargs[key] = tuple(d.pop(key))
            cfg = cls(**kwargs, **d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid run config: {exc}") from exc
        return cfg

    def with_seed(self, seed: int) -> "RunConfig":
        """Every seed in the config replaced by ``seed``."""
        return replace(self, dataset=replace(self.dataset, seed=seed),
                       train=replace(self.train, seed=seed),
                       encoder=replace(self.encoder, seed=seed),
                       tsne=replace(self.tsne, seed=seed), eval_seed=seed)

    def seeds(self) -> dict:
        return {"dataset": self.dataset.seed, "train": self.train.seed,
                "encoder": self.encoder.seed, "tsne": self.tsne.seed, "eval": self.eval_seed}


def parse_method(name: str) -> tuple[str, int | None]:
    """``'cp:5'`` becomes ``('cp', 5)``; plain methods carry no rank."""
    if name in BASE_METHODS:
        return name, None
    kind, _, rank = name.partition(":")
    if kind in ("cp", "tucker") and rank.isdigit() and int(rank) >= 1:
        return kind, int(rank)
    raise ConfigError(f"unknown method {name!r}; expected one of {BASE_METHODS} or cp:R / tucker:R")


def _env_seed(default: int | None) -> int | None:
    raw = os.environ.get("NORANK_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"NORANK_SEED must be an integer, got {raw!r}") from None


def apply_env_seed(cfg: RunConfig) -> RunConfig:
    seed = _env_seed(None)
    return cfg if seed is None else cfg.with_seed(seed)


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class ReportRow:
    """One table line; ``report`` is ``None`` for methods shown as n/a."""

    dataset: str
    method: str
    report: metrics.MetricsReport | None
    k: int = metrics.DEFAULT_K_NEIGHBORS

    @property
    def k_neighbors(self) -> int:
        return self.report.k_neighbors if self.report is not None else self.k


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _metrics_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_HEADER)
    for r in rows:
        values = ([_fmt(v) for v in r.report.table_values()] if r.report is not None
                  else [NOT_AVAILABLE] * len(metrics.TABLE_COLUMNS))
        writer.writerow([r.dataset, r.method, r.k_neighbors] + values)
    return buf.getvalue()


def _metrics_json(rows: list[ReportRow]) -> str:
    doc = {"schema": REPORT_SCHEMA, "columns": list(metrics.TABLE_COLUMNS),
           "rows": [{"dataset": r.dataset, "method": r.method, "k": r.k_neighbors,
                     "values": ([float(v) for v in r.report.table_values()]
                                if r.report is not None else None)} for r in rows]}
    return json.dumps(doc, indent=2) + "\n"


def _bar_svg(rows: list[ReportRow]) -> str:
    """Horizontal bars of the silhouette score per row, on a [-1, 1] axis."""
    width, bar_h, left = 560, 18, 200
    height = 30 + bar_h * len(rows) + 10
    scale = (width - left - 20) / 2.0
    zero = left + scale
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           '<text x="10" y="18" font-family="sans-serif" font-size="12">Silhouette</text>',
           f'<line x1="{zero:.1f}" y1="24" x2="{zero:.1f}" y2="{height - 6}" stroke="#444"/>']
    for i, r in enumerate(rows):
        y = 28 + i * bar_h
        out.append(f'<text x="10" y="{y + 12}" font-family="sans-serif" font-size="11">'
                   f'{r.dataset}/{r.method}</text>')
        if r.report is None:
            out.append(f'<text x="{zero + 4:.1f}" y="{y + 12}" font-family="sans-serif" '
                       f'font-size="11">{NOT_AVAILABLE}</text>')
            continue
        x0, x1 = sorted((zero, zero + float(r.report.silhouette) * scale))
        out.append(f'<rect x="{x0:.2f}" y="{y + 2}" width="{x1 - x0:.2f}" height="{bar_h - 4}" '
                   f'fill="{PALETTE[i % len(PALETTE)]}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(rows: list[ReportRow], fmt: str, path) -> Path:
    """Write ``rows`` as CSV, versioned JSON or an SVG bar chart.

    Nothing is written when ``rows`` is empty or the format is unknown.
    """
    if not rows:
        raise ValueError("no metric reports to write")
    render = {"csv": _metrics_csv, "json": _metrics_json, "svg": _bar_svg}.get(fmt)
    if render is None:
        raise ValueError(f"unknown report format {fmt!r}; choose from {FORMATS}")
    path = Path(path)
    _atomic_write(path, render(rows).encode())
    return path


def _report_from_values(values, k: int) -> metrics.MetricsReport | None:
    if values is None or all(v == NOT_AVAILABLE for v in values):
        return None
    sil, db, ch, sr, cont, trust, ari, nmi = (float(v) for v in values)
    return metrics.MetricsReport(sil, db, ch, sr, cont, trust, ari, nmi, int(k))


def read_report(path) -> list[ReportRow]:
    """Load rows written by :func:`emit_report` in CSV or JSON form."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text)
        if doc.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"{path}: unsupported report schema {doc.get('schema')!r}")
        return [ReportRow(r["dataset"], r["method"], _report_from_values(r["values"], r["k"]),
                          int(r["k"])) for r in doc["rows"]]
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader, ()))
    if header != METRIC_HEADER:
        raise ValueError(f"{path}: unexpected header {header}")
    return [ReportRow(r[0], r[1], _report_from_values(r[3:], r[2]), int(r[2]))
            for r in reader if r]


def scatter_svg(points, labels, title: str = "") -> str:
    """Axis-aligned 2-D scatter, one palette color per class id."""
    pts = np.asarray(points, dtype=np.float64)[:, :2]
    labels = np.asarray(labels)
    size, pad = 400, 20
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = pad + (pts - lo) / span * (size - 2 * pad)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
           f'<rect x="0" y="0" width="{size}" height="{size}" fill="white" stroke="#888"/>']
    if title:
        out.append(f'<text x="6" y="14" font-family="sans-serif" font-size="11">{title}</text>')
    for (x, y), c in zip(xy, labels):
        out.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="2.5" '
                   f'fill="{PALETTE[int(c) % len(PALETTE)]}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- benchmark

@dataclass
class MethodResult:
    method: str
    embedding: np.ndarray
    diagnostics: decomp.DecompDiagnostics


def _decoder_diagnostics(z: np.ndarray, x: np.ndarray) -> decomp.DecompDiagnostics:
    """Reconstruction error of the best affine decoder from ``z`` back to ``x``.

    When the centered embedding is rank-deficient (for instance n <= d) a
    ridge of 1e-10 times the mean embedding variance makes the fit unique.
    """
    try:
        return encoder.fit_linear_decoder(z, x).diagnostics(z, x)
    except SingularSystemError:
        ridge = 1e-10 * max(float(np.sum((z - z.mean(axis=0)) ** 2)) / z.shape[1], 1e-300)
        logger.warning("embedding is rank-deficient; decoder fit uses ridge %.3g", ridge)
        return encoder.fit_linear_decoder(z, x, ridge=ridge).diagnostics(z, x)


def _run_method(name: str, ds: data.LabeledDataset, cfg: RunConfig) -> MethodResult:
    kind, rank = parse_method(name)
    x = ds.x
    if kind == "raw":
        return MethodResult(name, x, decomp.diagnostics_from_error(0.0))
    if kind == "metric-learning":
        params = encoder.init_params(x.shape[1], cfg.encoder.hidden, cfg.encoder.embed_dim,
                                     head=cfg.encoder.head, seed=cfg.encoder.seed)
        params, _ = trainer.train(ds, params, cfg.train)
        z = encoder.embed(params, x)
        return MethodResult(name, z, _decoder_diagnostics(z, x))
    if kind == "pca":
        model, y = baselines.pca_fit_transform(x, min(cfg.encoder.embed_dim, *x.shape))
        return MethodResult(name, y, decomp.diagnostics(x, model.inverse_transform(y)))
    if kind == "tsne":
        res = baselines.tsne_embed(x, _tsne_config(cfg, ds.n_samples))
        y = res.embedding
        return MethodResult(name, y, _decoder_diagnostics(y, x))
    t = ds.as_tensor()
    if t.ndim < 2:
        raise ValueError(f"{name} needs a tensor dataset, got flat samples")
    if kind == "cp":
        model, diag = decomp.cp_als(t, rank, seed=cfg.eval_seed)
    else:
        ranks = tuple(min(rank, s) for s in t.shape)
        model, diag = decomp.tucker_hooi(t, ranks)
    return MethodResult(name, decomp.sample_embedding(model), diag)


def _tsne_config(cfg: RunConfig, n: int) -> baselines.TsneConfig:
    """The configured t-SNE, with perplexity clamped below (n - 1) / 3 for small n."""
    limit = (n - 1) / 3.0
    if cfg.tsne.perplexity < limit:
        return cfg.tsne
    clamped = max(1.5, math.floor(limit - 1e-9) - 0.5)
    logger.warning("t-SNE perplexity %.3g too large for n=%d; using %.3g",
                   cfg.tsne.perplexity, n, clamped)
    return replace(cfg.tsne, perplexity=clamped)


def _projections(name: str, result: MethodResult, ds: data.LabeledDataset, cfg: RunConfig,
                 raw_cache: dict) -> dict[str, np.ndarray]:
    """2-D views: learned embeddings are projected themselves, baselines show the raw data."""
    def project(x, key):
        views = {}
        if x.shape[1] >= 2:
            views[f"{key}_pca"] = baselines.pca_fit_transform(x, 2)[1]
        views[f"{key}_tsne"] = baselines.tsne_embed(x, _tsne_config(cfg, ds.n_samples)).embedding
        return views

    if name == "metric-learning":
        return project(result.embedding, "metric-learning")
    if "raw" not in raw_cache:
        raw_cache["raw"] = project(ds.x, "raw")
    return raw_cache["raw"]


def _write_text(path: Path, text: str, written: list[Path]) -> None:
    _atomic_write(path, text.encode())
    written.append(path)


def run_benchmark(cfg: RunConfig) -> dict:
    """Run every configured method on one dataset and write tables, plots and a manifest.

    Returns the manifest dictionary.  Failures are raised as ``StageError``
    naming the stage.
    """
    cfg.validate()
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StageError("output", exc) from exc
    try:
        ds = cfg.dataset.load()
    except (OSError, ValueError) as exc:
        raise StageError("load-dataset", exc) from exc
    name = cfg.dataset.name
    rows, recon, hist_lines = [], [], []
    views: dict[str, np.ndarray] = {}
    raw_cache: dict = {}
    for method in cfg.methods:
        if method in UNAVAILABLE_METHODS:
            rows.append(ReportRow(name, method, None, cfg.k_neighbors))
            recon.append((name, method, None, None))
            continue
        logger.info("%s: running %s", name, method)
        try:
            result = _run_method(method, ds, cfg)
        except Exception as exc:  # surface any module failure with its stage
            raise StageError(method, exc) from exc
        try:
            report = metrics.evaluate(ds.x, result.embedding, ds.labels,
                                      k_neighbors=cfg.k_neighbors, seed=cfg.eval_seed)
            intra, inter, edges = metrics.distance_histograms(result.embedding, ds.labels, HIST_BINS)
            if "svg" in cfg.formats:
                views.update(_projections(method, result, ds, cfg, raw_cache))
        except Exception as exc:
            raise StageError(f"evaluate:{method}", exc) from exc
        rows.append(ReportRow(name, method, report))
        recon.append((name, method, result.diagnostics.error, result.diagnostics.explained_variance))
        for b in range(HIST_BINS):
            hist_lines.append([name, method, _fmt(edges[b]), _fmt(edges[b + 1]),
                               int(intra[b]), int(inter[b])])

    written: list[Path] = []
    try:
        for fmt in cfg.formats:
            written.append(emit_report(rows, fmt, out / f"metrics.{fmt}"))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RECON_HEADER)
        for ds_name, method, eps, var in recon:
            if eps is None:
                w.writerow([ds_name, method, NOT_AVAILABLE, NOT_AVAILABLE])
            else:
                w.writerow([ds_name, method, _fmt(eps), _fmt(var)])
        _write_text(out / "reconstruction.csv", buf.getvalue(), written)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "method", "bin_lo", "bin_hi", "intra", "inter"])
        w.writerows(hist_lines)
        _write_text(out / "histograms.csv", buf.getvalue(), written)
        for key in sorted(views):
            _write_text(out / f"scatter_{key.replace(':', '-')}.svg",
                        scatter_svg(views[key], ds.labels, key), written)
        manifest = {
            "schema": RUN_SCHEMA,
            "config": cfg.to_dict(),
            "seeds": cfg.seeds(),
            "versions": {"norank": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "files": {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in written},
        }
        _write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    [])
    except OSError as exc:
        raise StageError("write-outputs", exc) from exc
    return manifest


# ---------------------------------------------------------------- argparse

def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tensor", help="DTN1 tensor with samples on the first axis")
    p.add_argument("--labels", help="CSV of index,label rows")
    p.add_argument("--provenance", default="generic", choices=data.PROVENANCES)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--schedule", choices=trainer.SCHEDULES)
    p.add_argument("--decay", type=float)
    p.add_argument("--strategy")
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--margin", type=float)
    p.add_argument("--lambda-div", type=float)
    p.add_argument("--lambda-uniform", type=float)
    p.add_argument("--lambda-local", type=float)
    p.add_argument("--lambda-global", type=float)
    p.add_argument("--k", type=int, help="original-space neighbors for the locality terms")
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--head", action="store_true", default=None)
    p.add_argument("--seed", type=int)


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        loss_kw = {k: v for k, v in (("margin", args.margin), ("lambda_div", args.lambda_div),
                                     ("lambda_uniform", args.lambda_uniform),
                                     ("lambda_local", args.lambda_local),
                                     ("lambda_global", args.lambda_global), ("k", args.k))
                   if v is not None}
        train_kw = {k: v for k, v in (("epochs", args.epochs), ("batch_size", args.batch_size),
                                      ("learning_rate", args.learning_rate),
                                      ("schedule", args.schedule), ("decay", args.decay),
                                      ("strategy", args.strategy), ("augment", args.augment))
                    if v is not None}
        enc_kw = {k: v for k, v in (("hidden", tuple(args.hidden) if args.hidden else None),
                                    ("embed_dim", args.embed_dim), ("head", args.head))
                  if v is not None}
        train_cfg = replace(cfg.train, **train_kw, loss=replace(cfg.train.loss, **loss_kw))
        cfg = replace(cfg, train=train_cfg, encoder=replace(cfg.encoder, **enc_kw))
        if getattr(args, "generator", None) or getattr(args, "tensor", None):
            gen = getattr(args, "generator", None)
            cfg = replace(cfg, dataset=DatasetSpec(
                generator=gen, n=getattr(args, "n", None), seed=cfg.dataset.seed,
                tensor=None if gen else args.tensor, labels=None if gen else args.labels,
                provenance=args.provenance))
        elif getattr(args, "n", None) is not None:
            cfg = replace(cfg, dataset=replace(cfg.dataset, n=args.n))
        if getattr(args, "methods", None):
            cfg = replace(cfg, methods=tuple(args.methods))
        if getattr(args, "formats", None):
            cfg = replace(cfg, formats=tuple(args.formats))
        if getattr(args, "out", None):
            cfg = replace(cfg, output_dir=args.out)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg = apply_env_seed(cfg)
    cfg.validate()
    return cfg


def _cmd_generate(args) -> int:
    seed = _env_seed(args.seed if args.seed is not None else 0)
    spec = DatasetSpec(generator=args.kind, n=args.n, seed=seed)
    spec.validate()
    ds = spec.load()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.save_dataset(ds, out / "tensor.dtn", out / "labels.csv", out / "manifest.json",
                      extra={"seed": seed, "generator": args.kind})
    print(f"wrote {ds.n_samples} {args.kind} samples to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    ds = cfg.dataset.load()
    params = encoder.init_params(ds.x.shape[1], cfg.encoder.hidden, cfg.encoder.embed_dim,
                                 head=cfg.encoder.head, seed=cfg.encoder.seed)
    params, log = trainer.train(ds, params, cfg.train,
                                progress=lambda r: logger.info("epoch %d total %.5g", r.epoch,
                                                               r.losses.total))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    encoder.save_params(params, out / "encoder")
    log.to_csv(out / "train_log.csv")
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    print(f"trained {len(log)} epochs; final total loss "
          f"{log.epochs[-1].losses.total if len(log) else float('nan'):.6g}")
    return EXIT_OK


def _cmd_embed(args) -> int:
    params = encoder.load_params(args.model)
    x = data.vectorize_samples(read_dtn1(args.tensor))
    write_dtn1(args.out, encoder.embed(params, x))
    return EXIT_OK


def _cmd_decompose(args) -> int:
    t = read_dtn1(args.tensor)
    if args.method == "cp":
        model, diag = decomp.cp_als(t, args.rank, max_iters=args.max_iters, tol=args.tol,
                                    seed=_env_seed(args.seed))
    else:
        ranks = tuple(min(args.rank, s) for s in t.shape)
        model, diag = decomp.tucker_hooi(t, ranks, max_iters=args.max_iters, tol=args.tol)
    decomp.save_model(model, diag, args.out)
    print(f"epsilon={_fmt(diag.error)} explained_variance={_fmt(diag.explained_variance)} "
          f"iterations={diag.iterations} converged={diag.converged}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    ds = data.load_dataset(args.tensor, args.labels)
    emb = read_dtn1(args.embedding)
    emb = emb.reshape(emb.shape[0], -1)
    if emb.shape[0] != ds.n_samples:
        raise ConfigError(f"embedding has {emb.shape[0]} rows for {ds.n_samples} samples")
    seed = _env_seed(args.seed)
    report = metrics.evaluate(ds.x, emb, ds.labels, k_neighbors=args.k, seed=seed)
    row = ReportRow(Path(args.tensor).stem, args.method, report)
    if args.out:
        emit_report([row], Path(args.out).suffix.lstrip(".") or "csv", args.out)
    else:
        sys.stdout.write(_metrics_csv([row]))
    return EXIT_OK


def _cmd_benchmark(args) -> int:
    cfg = _load_run_config(args)
    manifest = run_benchmark(cfg)
    print(f"wrote {len(manifest['files'])} files to {cfg.output_dir}")
    return EXIT_OK


def _cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        rows += read_report(path)
    emit_report(rows, args.format, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="norank", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("kind", choices=GENERATORS)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train the encoder")
    p.add_argument("--config")
    p.add_argument("--generator", choices=GENERATORS)
    p.add_argument("--n", type=int)
    _add_dataset_args(p)
    _add_train_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("embed", help="embed a tensor with a trained encoder")
    p.add_argument("--model", required=True)
    p.add_argument("--tensor", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("decompose", help="fit a CP or Tucker model")
    p.add_argument("--tensor", required=True)
    p.add_argument("--method", choices=("cp", "tucker"), required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--max-iters", type=int, default=decomp.DEFAULT_MAX_ITERS)
    p.add_argument("--tol", type=float, default=decomp.DEFAULT_TOL)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output stem for the .dtn and .json files")
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("evaluate", help="score an embedding")
    p.add_argument("--tensor", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--embedding", required=True)
    p.add_argument("--method", default="embedding")
    p.add_argument("--k", type=int, default=metrics.DEFAULT_K_NEIGHBORS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("benchmark", help="run the method grid on one dataset")
    p.add_argument("--config")
    p.add_argument("--generator", choices=GENERATORS)
    p.add_argument("--n", type=int)
    _add_dataset_args(p)
    _add_train_args(p)
    p.add_argument("--methods", nargs="+")
    p.add_argument("--formats", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("report", help="merge and convert metric reports")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--format", choices=FORMATS, default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
