"""Command-line entry points: pretrain, probe, analyze, ablate-reg, make-synthetic.

Every command exits 0 on success.  Failures print one JSON line to stderr
and exit 1 for user errors (bad input, bad config, mismatched files) or 2
for anything unexpected.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import analysis, container, data, downstream, training
from .model import load_checkpoint, represent
from .numeric import ConfigurationError, DimensionError

logger = logging.getLogger("tjepa")

TARGET_COLUMN = "y"
METRICS = ("kl", "uniformity", "dist", "variance")


class UserError(Exception):
    """Bad invocation or input; reported with exit code 1."""


class SchemaMismatch(UserError):
    pass


USER_ERRORS = (
    UserError,
    data.DataError,
    ConfigurationError,
    DimensionError,
    container.ContainerError,
    analysis.AnalysisError,
    downstream.DownstreamError,
    FileNotFoundError,
    IsADirectoryError,
    NotADirectoryError,
    PermissionError,
    json.JSONDecodeError,
)


# -- manifests ---------------------------------------------------------------------------------------


def git_blob_hash(path) -> str:
    """Hash a file the way ``git hash-object`` does."""
    content = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    started: str
    finished: str = ""
    inputs: dict = dataclasses.field(default_factory=dict)
    artifacts: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def begin(cls, command: str, argv, config: dict | None = None, seed=None, inputs=()) -> "RunManifest":
        hashes = {str(p): git_blob_hash(p) for p in inputs if p is not None and Path(p).is_file()}
        return cls(command, list(argv), dict(config or {}), seed, _now(), inputs=hashes)

    def finish(self, path, artifacts=()) -> Path:
        self.finished = _now()
        self.artifacts = {str(p): git_blob_hash(p) for p in sorted(map(str, artifacts)) if Path(p).is_file()}
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


# -- shared helpers ----------------------------------------------------------------------------------


def _csv_header(path) -> list[str]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return next(csv.reader(fh), [])


def load_dataset(path, target_column: str | None = TARGET_COLUMN, seed: int = 0) -> data.TabularDataset:
    """Read a CSV, drop the target column if present, split and fit on train."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    target = target_column if target_column and target_column in _csv_header(path) else None
    ds = data.load_csv(path, target_column=target)
    data.split(ds, seed)
    data.fit_preprocessor(ds, "train")
    return ds


def _checkpoint_stem(path) -> Path:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    if not path.with_suffix(".json").is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def _checkpoints(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found = sorted(p.glob("checkpoint_epoch*.json"))
            if not found:
                raise FileNotFoundError(f"no checkpoints in directory: {p}")
            out += [f.with_suffix("") for f in found]
        else:
            out.append(_checkpoint_stem(p))
    return out


def _aligned_dataset(checkpoint_meta: dict, data_path, target_column):
    """Load data with the checkpoint's split and normalization, checking layout."""
    seed = int(checkpoint_meta.get("config", {}).get("seed", 0))
    ds = load_dataset(data_path, target_column, seed)
    expected = checkpoint_meta.get("schema_hash")
    actual = ds.schema.hash()
    if expected != actual:
        raise SchemaMismatch(f"schema hash mismatch: checkpoint={expected} data={actual}")
    ds.schema = data.FeatureSchema.from_dict(checkpoint_meta["schema"])
    return ds


def _representations(state, ds, split: str) -> np.ndarray:
    X = data.encode_split(ds, split, data.Encoder(ds.schema))
    return represent(X.astype(state.params["embedding.index"].dtype), state)


def _read_labels(path, ds: data.TabularDataset, target_column) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"label file not found: {path}")
    header = _csv_header(path)
    if len(header) > 1:
        if target_column not in header:
            raise UserError(f"{path}: multi-column label file has no {target_column!r} column")
        with path.open(newline="", encoding="utf-8") as fh:
            values = [row[target_column].strip() for row in csv.DictReader(fh)]
        if len(values) != len(ds):
            raise data.DataError(f"{path}: {len(values)} labels for {len(ds)} rows")
        return values
    return data.load_labels(path, len(ds))


def _epoch_curve(log: list[dict]) -> list[float]:
    means = training.epoch_mean_losses(log)
    return [means[e] for e in sorted(means)]


def _write_json(obj, out) -> str:
    text = json.dumps(obj, sort_keys=True)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    return text


def _load_config(path, seed) -> training.TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise UserError(f"{path}: config must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    return training.TrainConfig.from_dict(raw)


def _train(config: training.TrainConfig, ds, out_dir: Path):
    with (out_dir / "metrics.jsonl").open("w") as fh:
        result = training.pretrain(ds, config, out_dir=out_dir, log_fh=fh)
    return result


# -- commands --------------------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    config = _load_config(args.config, args.seed)
    manifest = RunManifest.begin("pretrain", args.argv, config.to_dict(), config.seed, [args.config, args.data])
    ds = load_dataset(args.data, args.target_column, config.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = _train(config, ds, out)
    artifacts = sorted(out.glob("checkpoint_epoch*")) + [out / "metrics.jsonl"]
    manifest.finish(out / "manifest.json", artifacts)
    curve = _epoch_curve(result.log)
    print(json.dumps({"out": str(out), "epochs": config.epochs, "final_loss": curve[-1] if curve else None}))
    return 0


def cmd_probe(args) -> int:
    stem = _checkpoint_stem(args.checkpoint)
    state, meta = load_checkpoint(stem)
    manifest = RunManifest.begin(
        "probe", args.argv, vars_json(args), args.seed, [stem.with_suffix(".json"), stem.with_suffix(".bin"), args.data, args.labels]
    )
    ds = _aligned_dataset(meta, args.data, args.target_column)
    labels = _read_labels(args.labels, ds, args.target_column)
    H = _representations(state, ds, "all")
    projection = None if args.projection == "none" else args.projection
    task = args.task
    if args.head == "linear":
        result = downstream.train_linear_probe(
            H, labels, task, epochs=args.epochs, lr=args.lr, splits=ds.split_labels,
            eval_split=args.split, projection=projection, seed=args.seed,
        )
    else:
        cfg = downstream.MLPConfig(lr=args.lr if args.lr is not None else downstream.MLPConfig.lr)
        result = downstream.train_mlp_head(
            H, labels, task, cfg, splits=ds.split_labels, eval_split=args.split,
            projection=projection, seed=args.seed,
        )
    text = _write_json(result.to_dict(), args.out)
    manifest_path = Path(args.out).with_suffix(".manifest.json") if args.out else stem.parent / "probe_manifest.json"
    manifest.finish(manifest_path, [args.out] if args.out else [])
    print(text)
    return 0


def cmd_analyze(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in METRICS]
    if unknown or not metrics:
        raise UserError(f"unknown metric(s) {', '.join(unknown) or '(none)'}; expected a subset of {','.join(METRICS)}")
    stems = _checkpoints(args.checkpoint)
    inputs = [s.with_suffix(ext) for s in stems for ext in (".json", ".bin")] + [args.data]
    manifest = RunManifest.begin("analyze", args.argv, vars_json(args), None, inputs)
    rows = []
    for stem in stems:
        state, meta = load_checkpoint(stem)
        ds = _aligned_dataset(meta, args.data, args.target_column)
        H = _representations(state, ds, args.split)
        row = {"checkpoint": str(stem), "epoch": meta.get("epoch"), "n": int(len(H))}
        row.update(analysis.metric_report(H, metrics, t=args.t, seed=0))
        rows.append(row)
    report = {"metrics": metrics, "t": args.t, "split": args.split, "rows": rows}
    text = _write_json(report, args.out)
    manifest_path = Path(args.out).with_suffix(".manifest.json") if args.out else stems[0].parent / "analyze_manifest.json"
    manifest.finish(manifest_path, [args.out] if args.out else [])
    print(text)
    return 0


def cmd_ablate_reg(args) -> int:
    try:
        tokens = [int(t) for t in args.tokens.split(",") if t.strip()]
    except ValueError:
        raise UserError(f"--tokens must be comma-separated integers, got {args.tokens!r}") from None
    if not tokens:
        raise UserError("--tokens is empty; give at least one token count")
    if any(t < 0 for t in tokens):
        raise UserError("token counts must be >= 0")
    base = _load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.begin("ablate-reg", args.argv, base.to_dict(), base.seed, [args.config, args.data])
    ds = load_dataset(args.data, args.target_column, base.seed)
    curves, uniformity, artifacts = {}, {}, []
    for n_reg in tokens:
        config = dataclasses.replace(base, n_reg_tokens=n_reg)
        arm = out / f"reg{n_reg}"
        arm.mkdir(parents=True, exist_ok=True)
        arm_manifest = RunManifest.begin("pretrain", args.argv, config.to_dict(), config.seed, [args.config, args.data])
        result = _train(config, ds, arm)
        arm_files = sorted(arm.glob("checkpoint_epoch*")) + [arm / "metrics.jsonl"]
        arm_manifest.finish(arm / "manifest.json", arm_files)
        artifacts += arm_files + [arm / "manifest.json"]
        curves[str(n_reg)] = _epoch_curve(result.log)
        H = _representations(result.state, ds, args.split)
        uniformity[str(n_reg)] = analysis.uniformity(analysis.EmbeddingMatrix.from_representations(H))
    report = {
        "tokens": tokens,
        "epochs": list(range(1, base.epochs + 1)),
        "loss_curves": curves,
        "final_uniformity": uniformity,
        "split": args.split,
    }
    (out / "ablation_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    manifest.finish(out / "manifest.json", artifacts + [out / "ablation_report.json"])
    print(json.dumps({"report": str(out / "ablation_report.json"), "tokens": tokens}))
    return 0


def make_synthetic(n: int, d: int, task: str = "cls", seed: int = 0, proxy_loading: float = 0.4, informative_noise: float = 0.3):
    """Features and labels for the synthetic fixture.

    Two independent latent factors drive the informative columns x0 and x1
    (each factor plus a little noise).  Every further column is a noise
    feature: a weak proxy ``a * factor + sqrt(1 - a^2) * eps`` of one factor,
    so the columns share structure a self-supervised model can exploit but
    the label is a function of x0 and x1 alone.  Columns are standardized.
    Classification labels are the XOR of the signs of x0 and x1 (base rate
    1/2 since the factors are independent); regression labels are
    ``x0 * x1`` plus Gaussian noise.
    """
    if n < 100:
        raise UserError(f"--n must be >= 100, got {n}")
    if d < 2:
        raise UserError(f"--d must be >= 2, got {d}")
    if task not in ("cls", "reg"):
        raise UserError(f"--task must be cls or reg, got {task!r}")
    rng = np.random.default_rng(seed)
    factors = rng.standard_normal((n, 2))
    X = np.empty((n, d))
    X[:, :2] = factors + informative_noise * rng.standard_normal((n, 2))
    a = proxy_loading
    for j in range(2, d):
        X[:, j] = a * factors[:, j % 2] + np.sqrt(1.0 - a * a) * rng.standard_normal(n)
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    if task == "cls":
        y = ((X[:, 0] > 0) != (X[:, 1] > 0)).astype(int)
    else:
        y = X[:, 0] * X[:, 1] + 0.1 * rng.standard_normal(n)
    return X, y


def write_synthetic(path, X: np.ndarray, y: np.ndarray) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x{j}" for j in range(X.shape[1])] + [TARGET_COLUMN])
    integer = y.dtype.kind in "iu"
    for row, label in zip(X, y):
        writer.writerow([repr(float(v)) for v in row] + [int(label) if integer else repr(float(label))])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def cmd_make_synthetic(args) -> int:
    manifest = RunManifest.begin(
        "make-synthetic", args.argv, {"n": args.n, "d": args.d, "task": args.task}, args.seed
    )
    X, y = make_synthetic(args.n, args.d, args.task, args.seed)
    path = write_synthetic(args.out, X, y)
    manifest.finish(Path(str(path) + ".manifest.json"), [path])
    print(json.dumps({"out": str(path), "rows": int(len(X)), "columns": int(X.shape[1] + 1)}))
    return 0


def vars_json(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "argv")}


# -- parser ----------------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tjepa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_target(p):
        p.add_argument("--target-column", default=TARGET_COLUMN,
                       help="column excluded from the features when present (default: y)")

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    with_target(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="train a head on frozen representations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--head", choices=("linear", "mlp"), default="linear")
    p.add_argument("--projection", choices=("none",) + downstream.PROJECTIONS, default="none")
    p.add_argument("--task", choices=(downstream.CLASSIFICATION, downstream.REGRESSION), default=downstream.CLASSIFICATION)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    with_target(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("analyze", help="representation metrics per checkpoint")
    p.add_argument("--checkpoint", required=True, nargs="+", help="checkpoint stems or run directories")
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default=",".join(METRICS))
    p.add_argument("--t", type=float, default=2.0)
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--out")
    with_target(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate-reg", help="pretrain once per REG token count")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tokens", default="0,1,2,4")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", default="test", choices=data.SPLITS)
    with_target(p)
    p.set_defaults(func=cmd_ablate_reg)

    p = sub.add_parser("make-synthetic", help="write the synthetic CSV fixture")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--task", choices=("cls", "reg"), default="cls")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    line = json.dumps({"error": kind, "message": " ".join(str(message).split()), "exit": code})
    print(line, file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        return _fail("UsageError", str(exc), 1)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "probe" and args.lr is None and args.head == "linear":
        args.lr = 1e-3
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        logger.debug("internal error", exc_info=True)
        return _fail(type(exc).__name__, str(exc) or repr(exc), 2)


if __name__ == "__main__":
    sys.exit(main())
