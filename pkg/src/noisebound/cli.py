"""Command-line front end: training runs, bound audits, depth/width sweeps,
noise-resilience verification, and SVG report plots.

Artifacts are deterministic given the flags: checkpoints are full-precision
decimal text with a sha256 checksum, every report CSV has a fixed column
order, and a rerun with the same seeds is byte-identical.  Exit codes:
0 success, 1 verification/convergence failure, 2 usage or IO error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import urllib.request
from dataclasses import dataclass

import numpy as np

from .analysis import scan_dataset
from .bounds import audit_network, build_tolerance_constraints, solve_sigma_star
from .data import Dataset, IdxParseError, load_mnist, subset, synthetic_blobs
from .linalg import RngStream, _splitmix64
from .network import MlpParams, init_network
from .perturb import default_sigma_grid, estimate_mu_hat, verify_lemma_e1
from .trainer import TrainConfig, TrainingDiverged, train

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "UsageError",
    "FetchVerificationError",
    "SweepSpec",
    "CSV_COLUMNS",
    "FIGURE_COLUMNS",
    "VERIFY_COLUMNS",
    "checkpoint_to_text",
    "parse_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "build_parser",
    "main",
]

CHECKPOINT_MAGIC = "noisebound-checkpoint"
CHECKPOINT_VERSION = 1

# Fixed, versioned report schema; column order never changes across runs.
CSV_COLUMNS = (
    "depth", "width", "m", "gamma_class", "delta",
    "B_layer_l2", "B_preact", "B_preact_5pc", "B_preact_median", "B_output",
    "B_jac_row_l2", "B_jac_spec",
    "sigma_star", "binding_constraint", "kl",
    "train_margin_loss", "test_error",
    "our_bound", "our_bound_5pc", "our_bound_median", "our_bound_loose",
    "neyshabur18", "bartlett17", "spectral_term",
    "warnings",
)

# Extra columns appended (never substituted) under --figure-mode: the bound
# with the sample-size dependence and log factors stripped, leaving
# depth * weight-distance * sqrt(width) * (largest finite diagnostic ratio).
FIGURE_COLUMNS = ("figure_bound", "figure_bound_5pc", "figure_bound_median")

VERIFY_COLUMNS = (
    "point", "statement", "layers", "sigma", "trials", "failures",
    "rate", "threshold", "pass", "ci_low", "ci_high",
)


class UsageError(Exception):
    """Bad flags, bad config, or missing files; maps to exit code 2."""


class CheckpointError(Exception):
    """Checkpoint text failed to parse or verify."""


class FetchVerificationError(Exception):
    """A downloaded file's digest does not match the published value."""


def _g17(x) -> str:
    # 17 significant decimal digits round-trip any float64 exactly.
    return format(float(x), ".17g")


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return _g17(v)


# ---------------------------------------------------------------------------
# checkpoint serialization

@dataclass(frozen=True)
class Checkpoint:
    """A trained network plus everything needed to reproduce it: the full
    training configuration, the outcome metadata, and both weight sets
    (current W and the init snapshot Z, required downstream for the
    divergence term and the distance-based baselines)."""

    format_version: int
    init_scheme: str
    config: TrainConfig
    epochs_run: int
    final_margin_accuracy: float
    converged: bool
    params: MlpParams

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def dims(self) -> tuple[int, ...]:
        return self.params.dims


def checkpoint_to_text(ckpt: Checkpoint) -> str:
    if ckpt.format_version != CHECKPOINT_VERSION:
        raise CheckpointError(f"cannot write version {ckpt.format_version}")
    p, cfg = ckpt.params, ckpt.config
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}"]
    lines.append("dims: " + " ".join(str(d) for d in p.dims))
    lines.append(f"seed: {cfg.seed}")
    lines.append(f"init_scheme: {ckpt.init_scheme}")
    lines.append(f"optimizer: {cfg.optimizer}")
    lines.append(f"learning_rate: {_g17(cfg.learning_rate)}")
    lines.append(f"batch_size: {cfg.batch_size}")
    lines.append(f"stop_fraction: {_g17(cfg.stop_fraction)}")
    lines.append(f"stop_margin: {_g17(cfg.stop_margin)}")
    lines.append(f"max_epochs: {cfg.max_epochs}")
    lines.append(f"epochs_run: {ckpt.epochs_run}")
    lines.append(f"margin_accuracy: {_g17(ckpt.final_margin_accuracy)}")
    lines.append(f"converged: {1 if ckpt.converged else 0}")
    for tag, tensors in (("W", p.weights), ("Z", p.init_snapshot)):
        for d, w in enumerate(tensors, start=1):
            lines.append(f"tensor {tag} {d} {w.shape[0]} {w.shape[1]}")
            for row in w:
                lines.append(" ".join(_g17(v) for v in row))
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    return body + f"checksum: sha256:{digest}\n"


_HEADER_KEYS = (
    "dims", "seed", "init_scheme", "optimizer", "learning_rate", "batch_size",
    "stop_fraction", "stop_margin", "max_epochs", "epochs_run",
    "margin_accuracy", "converged",
)


def parse_checkpoint(text: str) -> Checkpoint:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CheckpointError("empty file")
    if not lines[-1].startswith("checksum: sha256:"):
        raise CheckpointError("missing checksum line (file truncated?)")
    body = "\n".join(lines[:-1]) + "\n"
    want = lines[-1][len("checksum: sha256:"):].strip()
    got = hashlib.sha256(body.encode("utf-8")).hexdigest()
    if got != want:
        raise CheckpointError("checksum mismatch: file corrupted or edited")

    head = lines[0].split()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC or not head[1].startswith("v"):
        raise CheckpointError(f"line 1: not a {CHECKPOINT_MAGIC} file")
    if head[1] != f"v{CHECKPOINT_VERSION}":
        raise CheckpointError(f"line 1: unsupported checkpoint version {head[1][1:]!r}")

    kv: dict[str, str] = {}
    i = 1
    while i < len(lines) - 1 and not lines[i].startswith("tensor "):
        if ": " not in lines[i]:
            raise CheckpointError(f"line {i + 1}: expected 'key: value', got {lines[i]!r}")
        key, val = lines[i].split(": ", 1)
        kv[key] = val
        i += 1
    missing = [k for k in _HEADER_KEYS if k not in kv]
    if missing:
        raise CheckpointError(f"missing header fields: {', '.join(missing)}")

    def bad(lineno, msg):
        return CheckpointError(f"line {lineno + 1}: {msg}")

    try:
        dims = tuple(int(t) for t in kv["dims"].split())
    except ValueError:
        raise CheckpointError(f"bad dims line: {kv['dims']!r}") from None
    if len(dims) < 3:
        raise CheckpointError(f"dims {dims} describe fewer than 2 layers")
    depth = len(dims) - 1

    tensors: dict[tuple[str, int], np.ndarray] = {}
    while i < len(lines) - 1:
        parts = lines[i].split()
        if len(parts) != 5 or parts[0] != "tensor":
            raise bad(i, f"expected a tensor header, got {lines[i]!r}")
        tag, d_s, rows_s, cols_s = parts[1:]
        if tag not in ("W", "Z"):
            raise bad(i, f"unknown tensor tag {tag!r}")
        try:
            d, rows, cols = int(d_s), int(rows_s), int(cols_s)
        except ValueError:
            raise bad(i, f"bad tensor header {lines[i]!r}") from None
        if not 1 <= d <= depth or (tag, d) in tensors:
            raise bad(i, f"unexpected tensor {tag} {d}")
        if rows != dims[d] or cols != dims[d - 1]:
            raise bad(i, f"tensor {tag} {d} is {rows}x{cols}, dims require {dims[d]}x{dims[d - 1]}")
        if i + rows >= len(lines):
            raise bad(i, f"tensor {tag} {d} truncated")
        block = np.empty((rows, cols))
        for r in range(rows):
            toks = lines[i + 1 + r].split()
            if len(toks) != cols:
                raise bad(i + 1 + r, f"expected {cols} values, got {len(toks)}")
            try:
                block[r] = [float(t) for t in toks]
            except ValueError:
                raise bad(i + 1 + r, "unparseable float") from None
        tensors[(tag, d)] = block
        i += 1 + rows

    for tag in ("W", "Z"):
        for d in range(1, depth + 1):
            if (tag, d) not in tensors:
                raise CheckpointError(f"tensor {tag} {d} missing")

    try:
        cfg = TrainConfig(
            optimizer=kv["optimizer"],
            learning_rate=float(kv["learning_rate"]),
            batch_size=int(kv["batch_size"]),
            stop_fraction=float(kv["stop_fraction"]),
            stop_margin=float(kv["stop_margin"]),
            max_epochs=int(kv["max_epochs"]),
            seed=int(kv["seed"]),
        )
        epochs_run = int(kv["epochs_run"])
        margin_acc = float(kv["margin_accuracy"])
    except ValueError as e:
        raise CheckpointError(f"bad header value: {e}") from None
    if kv["converged"] not in ("0", "1"):
        raise CheckpointError(f"converged must be 0 or 1, got {kv['converged']!r}")

    try:
        params = MlpParams(
            dims,
            tuple(tensors[("W", d)] for d in range(1, depth + 1)),
            tuple(tensors[("Z", d)] for d in range(1, depth + 1)),
        )
    except ValueError as e:
        raise CheckpointError(str(e)) from None
    return Checkpoint(CHECKPOINT_VERSION, kv["init_scheme"], cfg, epochs_run,
                      margin_acc, kv["converged"] == "1", params)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(checkpoint_to_text(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", newline="") as fh:
        return parse_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# report rows

def _figure_values(report, params: MlpParams) -> dict[str, float]:
    dist = math.sqrt(sum(float(np.sum((w - z) ** 2))
                         for w, z in zip(params.weights, params.init_snapshot)))
    base = report.depth * dist * math.sqrt(params.hidden_width)

    def largest(preact_term):
        vals = [report.b_layer_l2, preact_term, report.b_output,
                report.b_jac_row_l2, report.b_jac_spec]
        finite = [v for v in vals if math.isfinite(v)]
        return max(finite) if finite else math.inf

    return {
        "figure_bound": base * largest(report.b_preact),
        "figure_bound_5pc": base * largest(report.b_preact_5pc),
        "figure_bound_median": base * largest(report.b_preact_median),
    }


def _report_row(report, include_loose: bool, figure: dict | None) -> list[str]:
    row = [
        _fmt_cell(report.depth), _fmt_cell(report.width), _fmt_cell(report.m),
        _fmt_cell(report.gamma_class), _fmt_cell(report.delta),
        _fmt_cell(report.b_layer_l2), _fmt_cell(report.b_preact),
        _fmt_cell(report.b_preact_5pc), _fmt_cell(report.b_preact_median),
        _fmt_cell(report.b_output), _fmt_cell(report.b_jac_row_l2),
        _fmt_cell(report.b_jac_spec),
        _fmt_cell(report.sigma_star), report.binding_constraint,
        _fmt_cell(report.kl), _fmt_cell(report.train_margin_loss),
        _fmt_cell(report.test_error),
        _fmt_cell(report.final_bound), _fmt_cell(report.final_bound_5pc),
        _fmt_cell(report.final_bound_median),
        _fmt_cell(report.final_bound_loose) if include_loose else "",
        _fmt_cell(report.baseline_neyshabur18),
        _fmt_cell(report.baseline_bartlett17),
        _fmt_cell(report.baseline_spectral_product),
        " | ".join(report.warnings),
    ]
    if figure is not None:
        row += [_fmt_cell(figure[k]) for k in FIGURE_COLUMNS]
    return row


def _failed_run_row(depth, width, m, gamma_class, delta, message, figure_mode):
    row = [_fmt_cell(depth), _fmt_cell(width), _fmt_cell(m),
           _fmt_cell(gamma_class), _fmt_cell(delta)]
    row += [""] * (len(CSV_COLUMNS) - 6)
    row.append(f"run-failed: {message}")
    if figure_mode:
        row += [""] * len(FIGURE_COLUMNS)
    return row


def _write_csv(path, header, rows, comments=()):
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_csv(path):
    with open(path, "r", newline="") as fh:
        rows = list(csv.reader(ln for ln in fh if not ln.startswith("#")))
    if not rows:
        raise UsageError(f"{path}: empty csv")
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# dataset plumbing

MNIST_DIR_ENV = "NOISEBOUND_MNIST_DIR"

_IDX_BASENAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _resolve_idx_pair(directory, split):
    img_base, lbl_base = _IDX_BASENAMES[split]
    for suffix in ("", ".gz"):
        img = os.path.join(directory, img_base + suffix)
        lbl = os.path.join(directory, lbl_base + suffix)
        if os.path.exists(img) and os.path.exists(lbl):
            return img, lbl
    raise UsageError(f"no {split} IDX pair ({img_base}[.gz], {lbl_base}[.gz]) under {directory}")


def _add_data_args(p: argparse.ArgumentParser, with_subset=True):
    g = p.add_argument_group("data")
    g.add_argument("--images", help="IDX image file (optionally .gz)")
    g.add_argument("--labels", help="IDX label file (optionally .gz)")
    g.add_argument("--mnist-dir",
                   help=f"directory holding the standard IDX pairs (default: ${MNIST_DIR_ENV})")
    g.add_argument("--blobs", action="store_true",
                   help="use a synthetic Gaussian-cluster dataset instead of files")
    g.add_argument("--blob-n", type=int, default=256)
    g.add_argument("--blob-dim", type=int, default=16)
    g.add_argument("--blob-classes", type=int, default=4)
    g.add_argument("--blob-sep", type=float, default=6.0)
    g.add_argument("--blob-seed", type=int, default=1)
    if with_subset:
        g.add_argument("-m", "--m", type=int, default=None,
                       help="subsample this many examples (uniform, seeded)")
        g.add_argument("--subset-seed", type=int, default=0)


def _load_cli_dataset(args, apply_subset=True) -> Dataset:
    if args.blobs:
        data = synthetic_blobs(args.blob_n, args.blob_dim, args.blob_classes,
                               args.blob_sep, RngStream(args.blob_seed, 0xDA7A))
    else:
        images, labels = args.images, args.labels
        if images is None or labels is None:
            directory = args.mnist_dir or os.environ.get(MNIST_DIR_ENV)
            if directory is None:
                raise UsageError(
                    "no dataset given: pass --images/--labels, --mnist-dir, "
                    f"set ${MNIST_DIR_ENV}, or use --blobs")
            images, labels = _resolve_idx_pair(directory, "train")
        for path in (images, labels):
            if not os.path.exists(path):
                raise UsageError(f"data file not found: {path}")
        data = load_mnist(images, labels)
    m = getattr(args, "m", None)
    if apply_subset and m is not None:
        if m > len(data):
            raise UsageError(f"-m {m} exceeds dataset size {len(data)}")
        data = subset(data, m, RngStream(args.subset_seed, 0x5B5E7))
    return data


def _check_shapes(params: MlpParams, data: Dataset):
    if data.input_dim != params.input_dim or data.num_classes != params.num_classes:
        raise UsageError(
            f"checkpoint expects input dim {params.input_dim} / {params.num_classes} "
            f"classes, dataset has {data.input_dim} / {data.num_classes}")


def _mix_seed(*parts) -> int:
    acc = 0x9E3779B97F4A7C15
    for p in parts:
        acc = _splitmix64(acc ^ _splitmix64(int(p) & 0xFFFFFFFFFFFFFFFF))
    return int(acc & 0x7FFFFFFFFFFFFFFF)


# ---------------------------------------------------------------------------
# train

_TRAIN_DEFAULTS = {
    "seed": 0,
    "optimizer": "sgd",
    "learning_rate": 0.1,
    "batch_size": 64,
    "stop_fraction": 0.99,
    "stop_margin": 10.0,
    "max_epochs": 2000,
    "init_scheme": "inv-sqrt-fanin",
}
_CONFIG_KEYS = set(_TRAIN_DEFAULTS) | {"dims", "depth", "width"}


def _add_train_hyper_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("training")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--optimizer", choices=("sgd", "adam"), default=None)
    g.add_argument("--lr", dest="learning_rate", type=float, default=None)
    g.add_argument("--batch-size", type=int, default=None)
    g.add_argument("--stop-fraction", type=float, default=None,
                   help="stop once this fraction of examples clears the stop margin")
    g.add_argument("--stop-margin", type=float, default=None)
    g.add_argument("--max-epochs", type=int, default=None)
    g.add_argument("--init-scheme", choices=("inv-sqrt-fanin", "paper-footnote"),
                   default=None)


def _train_one(dims, scheme, cfg, data):
    params0 = init_network(dims, scheme, RngStream(cfg.seed, 0x1217))
    result = train(params0, data, cfg)
    return Checkpoint(CHECKPOINT_VERSION, scheme, cfg, result.epochs_run,
                      result.final_margin_accuracy, result.converged, result.params)


def cmd_train(args) -> int:
    config = {}
    if args.config:
        with open(args.config) as fh:
            config = json.load(fh)
        unknown = sorted(set(config) - _CONFIG_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")

    def pick(name):
        v = getattr(args, name, None)
        if v is not None:
            return v
        if name in config:
            return config[name]
        return _TRAIN_DEFAULTS.get(name)

    data = _load_cli_dataset(args)
    dims_arg = args.dims if args.dims is not None else config.get("dims")
    depth, width = pick("depth"), pick("width")
    if dims_arg is not None:
        if depth is not None or width is not None:
            raise UsageError("give either --dims or --depth/--width, not both")
        dims = tuple(int(t) for t in str(dims_arg).replace("[", "").replace("]", "")
                     .replace(",", " ").split())
        if dims[0] != data.input_dim or dims[-1] != data.num_classes:
            raise UsageError(
                f"--dims must start at the input dim ({data.input_dim}) and end "
                f"at the class count ({data.num_classes}), got {dims}")
    elif depth is not None and width is not None:
        if depth < 2:
            raise UsageError("--depth must be at least 2 (one hidden layer)")
        dims = (data.input_dim,) + (int(width),) * (int(depth) - 1) + (data.num_classes,)
    else:
        raise UsageError("network shape missing: give --dims, or --depth and --width")

    cfg = TrainConfig(
        optimizer=pick("optimizer"),
        learning_rate=float(pick("learning_rate")),
        batch_size=int(pick("batch_size")),
        stop_fraction=float(pick("stop_fraction")),
        stop_margin=float(pick("stop_margin")),
        max_epochs=int(pick("max_epochs")),
        seed=int(pick("seed")),
    )
    if cfg.batch_size > len(data):
        raise UsageError(f"batch size {cfg.batch_size} exceeds dataset size {len(data)}")

    try:
        ckpt = _train_one(dims, pick("init_scheme"), cfg, data)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 1
    save_checkpoint(args.out, ckpt)
    state = "converged" if ckpt.converged else "NOT converged"
    print(f"wrote {args.out}: dims {'x'.join(str(d) for d in dims)}, "
          f"{ckpt.epochs_run} epochs, margin accuracy "
          f"{ckpt.final_margin_accuracy:.4f}, {state}")
    return 0 if ckpt.converged else 1


# ---------------------------------------------------------------------------
# audit

def cmd_audit(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = _load_cli_dataset(args)
    _check_shapes(ckpt.params, data)
    test_data = None
    if args.test_images or args.test_labels:
        if not (args.test_images and args.test_labels):
            raise UsageError("need both --test-images and --test-labels")
        test_data = load_mnist(args.test_images, args.test_labels)
        _check_shapes(ckpt.params, test_data)

    report = audit_network(ckpt.params, list(data), gamma_class=args.gamma_class,
                           delta=args.delta,
                           test_data=list(test_data) if test_data else None)
    figure = _figure_values(report, ckpt.params) if args.figure_mode else None
    header = CSV_COLUMNS + (FIGURE_COLUMNS if args.figure_mode else ())
    _write_csv(args.out, header, [_report_row(report, args.loose, figure)])
    print(f"wrote {args.out}: sigma_star {report.sigma_star:.6g} "
          f"({report.binding_constraint}), bound {report.final_bound:.6g}, "
          f"spectral baseline {report.baseline_spectral_product:.6g}, "
          f"{len(report.warnings)} warning(s)")
    return 0


# ---------------------------------------------------------------------------
# sweep

@dataclass(frozen=True)
class SweepSpec:
    """One experiment family: train/audit `runs` networks at every value of
    the swept axis, holding the other shape dimension and the protocol fixed."""

    axis: str
    values: tuple[int, ...]
    width: int | None
    depth: int | None
    m: int | None
    gamma_class: float
    delta: float
    runs: int
    seed: int
    optimizer: str
    learning_rate: float
    batch_size: int
    stop_fraction: float
    stop_margin: float
    max_epochs: int
    init_scheme: str

    def __post_init__(self):
        if self.axis not in ("depth", "width"):
            raise UsageError(f"axis must be depth or width, got {self.axis!r}")
        if not self.values:
            raise UsageError("sweep values must be nonempty")
        if any(v <= 0 for v in self.values):
            raise UsageError(f"sweep values must be positive, got {self.values}")
        if self.axis == "depth" and (self.width is None or self.width < 1):
            raise UsageError("a depth sweep needs --width")
        if self.axis == "width" and (self.depth is None or self.depth < 2):
            raise UsageError("a width sweep needs --depth >= 2")
        if self.runs < 1:
            raise UsageError("--runs must be at least 1")

    def dims_for(self, value: int, data: Dataset) -> tuple[int, ...]:
        if self.axis == "depth":
            depth, width = value, self.width
        else:
            depth, width = self.depth, value
        if depth < 2:
            raise UsageError(f"swept depth {depth} is below 2")
        return (data.input_dim,) + (width,) * (depth - 1) + (data.num_classes,)


_PRESETS = {
    "h40-depth": dict(axis="depth", values=tuple(range(2, 12)), width=40, m=4096, runs=1),
    "h1280-depth": dict(axis="depth", values=tuple(range(2, 12)), width=1280, m=4096, runs=1),
    "d8-width": dict(axis="width", values=(40, 80, 160, 320, 640, 1280), depth=8, m=4096, runs=1),
    "d14-width": dict(axis="width", values=(40, 80, 160, 320, 640, 1280), depth=14, m=4096, runs=1),
    "d28-adam": dict(axis="depth", values=(28,), width=1280, m=4096, runs=12,
                     optimizer="adam", learning_rate=1e-5, stop_fraction=0.95,
                     stop_margin=0.0),
}

# Columns whose log10-vs-axis slope gets fitted, plus one synthetic column:
# the per-row max of the four range-checked diagnostic ratios.
_SLOPE_COLUMNS = (
    "B_layer_l2", "B_preact", "B_preact_5pc", "B_preact_median", "B_output",
    "B_jac_row_l2", "B_jac_spec", "our_bound", "our_bound_5pc",
    "our_bound_median", "our_bound_loose", "neyshabur18", "bartlett17",
    "spectral_term",
)
_MAX_B_COLUMNS = ("B_layer_l2", "B_output", "B_jac_row_l2", "B_jac_spec")


def _fit_slope(xs, ys):
    """Least-squares slope of ys on xs; None when xs carries no spread."""
    n = len(xs)
    if n < 2:
        return None
    xbar = sum(xs) / n
    ybar = sum(ys) / n
    sxx = sum((x - xbar) ** 2 for x in xs)
    if sxx == 0.0:
        return None
    return sum((x - xbar) * (y - ybar) for x, y in zip(xs, ys)) / sxx


def _fit_log_slope(axis_vals, raw_vals):
    pts = [(x, math.log10(v)) for x, v in zip(axis_vals, raw_vals)
           if math.isfinite(v) and v > 0.0]
    if not pts:
        return None, 0
    slope = _fit_slope([p[0] for p in pts], [p[1] for p in pts])
    return slope, len(pts)


def _resolve_sweep_spec(args) -> SweepSpec:
    preset = dict(_PRESETS[args.preset]) if args.preset else {}

    def pick(name, default):
        v = getattr(args, name, None)
        if v is not None:
            return v
        return preset.get(name, default)

    axis = pick("axis", None)
    if axis is None:
        raise UsageError("--axis is required (or use --preset)")
    values = pick("values", None)
    if values is None:
        raise UsageError("--values is required (or use --preset)")
    if isinstance(values, str):
        values = tuple(int(t) for t in values.split(",") if t.strip())
    gamma_class = pick("gamma_class", 10.0)
    stop_margin = pick("stop_margin", None)
    if stop_margin is None:
        stop_margin = gamma_class  # train toward the audited margin by default
    return SweepSpec(
        axis=axis,
        values=tuple(values),
        width=pick("width", None),
        depth=pick("depth", None),
        m=pick("m", None),
        gamma_class=float(gamma_class),
        delta=args.delta,
        runs=int(pick("runs", 1)),
        seed=args.seed if args.seed is not None else 0,
        optimizer=pick("optimizer", _TRAIN_DEFAULTS["optimizer"]),
        learning_rate=float(pick("learning_rate", _TRAIN_DEFAULTS["learning_rate"])),
        batch_size=int(pick("batch_size", _TRAIN_DEFAULTS["batch_size"])),
        stop_fraction=float(pick("stop_fraction", _TRAIN_DEFAULTS["stop_fraction"])),
        stop_margin=float(stop_margin),
        max_epochs=int(pick("max_epochs", _TRAIN_DEFAULTS["max_epochs"])),
        init_scheme=pick("init_scheme", _TRAIN_DEFAULTS["init_scheme"]),
    )


def run_sweep(spec: SweepSpec, data_full: Dataset, out_dir,
              figure_mode=False, save_checkpoints=False):
    """Train and audit every (axis value, run) cell; never aborts the sweep on
    a single spoiled run.  Returns (rows, slope_rows, failed_count)."""
    os.makedirs(out_dir, exist_ok=True)
    m = spec.m if spec.m is not None else len(data_full)
    if m > len(data_full):
        raise UsageError(f"sweep m {m} exceeds dataset size {len(data_full)}")
    if spec.batch_size > m:
        raise UsageError(f"batch size {spec.batch_size} exceeds sweep m {m}")

    keyed = []
    failed = 0
    for value in spec.values:
        dims = spec.dims_for(value, data_full)
        depth, width = len(dims) - 1, max(dims[1:-1])
        for run in range(spec.runs):
            run_seed = _mix_seed(spec.seed, value, run)
            data_run = (subset(data_full, m, RngStream(run_seed, 0x5B5E7))
                        if m < len(data_full) else data_full)
            cfg = dataclasses.replace(
                TrainConfig(optimizer=spec.optimizer,
                            learning_rate=spec.learning_rate,
                            batch_size=spec.batch_size,
                            stop_fraction=spec.stop_fraction,
                            stop_margin=spec.stop_margin,
                            max_epochs=spec.max_epochs),
                seed=run_seed)
            try:
                ckpt = _train_one(dims, spec.init_scheme, cfg, data_run)
                report = audit_network(ckpt.params, list(data_run),
                                       gamma_class=spec.gamma_class, delta=spec.delta)
                figure = _figure_values(report, ckpt.params) if figure_mode else None
                keyed.append((value, run, _report_row(report, True, figure)))
                print(f"[sweep] {spec.axis}={value} run={run} seed={run_seed}: "
                      f"{ckpt.epochs_run} epochs, sigma_star {report.sigma_star:.4g}, "
                      f"bound {report.final_bound:.4g}", flush=True)
                if save_checkpoints:
                    save_checkpoint(os.path.join(out_dir, f"ckpt_{spec.axis}{value}_run{run}.txt"), ckpt)
            except (TrainingDiverged, RuntimeError) as e:
                failed += 1
                keyed.append((value, run,
                              _failed_run_row(depth, width, m, spec.gamma_class,
                                              spec.delta, e, figure_mode)))
                print(f"[sweep] {spec.axis}={value} run={run} seed={run_seed}: "
                      f"FAILED: {e}", flush=True)
    # concurrency-proof artifact order
    keyed.sort(key=lambda kr: (kr[0], kr[1]))
    rows = [r for _, _, r in keyed]

    col_index = {name: i for i, name in enumerate(CSV_COLUMNS)}
    axis_vals = [kr[0] for kr in keyed]

    def column(name):
        if name == "max_b_term":
            out = []
            for _, _, row in keyed:
                cells = [row[col_index[c]] for c in _MAX_B_COLUMNS]
                vals = [float(c) for c in cells if c not in ("", None)]
                out.append(max(vals) if vals else math.nan)
            return out
        return [float(row[col_index[name]]) if row[col_index[name]] != "" else math.nan
                for _, _, row in keyed]

    slope_rows = []
    for name in _SLOPE_COLUMNS + ("max_b_term",):
        slope, npts = _fit_log_slope(axis_vals, column(name))
        slope_rows.append([name, "" if slope is None else _g17(slope), str(npts)])
    return rows, slope_rows, failed


def cmd_sweep(args) -> int:
    spec = _resolve_sweep_spec(args)
    if args.dry_run:
        print(json.dumps(dataclasses.asdict(spec), sort_keys=True, indent=2))
        return 0
    if args.out_dir is None:
        raise UsageError("--out-dir is required")
    data_full = _load_cli_dataset(args, apply_subset=False)
    rows, slope_rows, failed = run_sweep(spec, data_full, args.out_dir,
                                         figure_mode=args.figure_mode,
                                         save_checkpoints=args.save_checkpoints)
    header = CSV_COLUMNS + (FIGURE_COLUMNS if args.figure_mode else ())
    results = os.path.join(args.out_dir, "results.csv")
    slopes = os.path.join(args.out_dir, "slopes.csv")
    _write_csv(results, header, rows)
    _write_csv(slopes, ("column", "log10_slope", "points"), slope_rows)
    for name, slope, npts in slope_rows:
        if slope != "":
            print(f"[sweep] log10 slope of {name} vs {spec.axis}: "
                  f"{float(slope):+.4f} over {npts} runs")
    print(f"wrote {results} and {slopes} ({len(rows)} rows, {failed} failed runs)")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# verify-noise

def cmd_verify_noise(args) -> int:
    if args.trials < 100:
        raise UsageError("--trials must be at least 100")
    if args.mu_noise < 100:
        raise UsageError("--mu-noise must be at least 100")
    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.params
    data = _load_cli_dataset(args)
    _check_shapes(params, data)
    data_list = list(data)
    m, depth = len(data_list), params.depth

    delta_hat = 1.0 / (4.0 * depth * math.sqrt(m))
    pb, _ = scan_dataset(params, data_list, args.gamma_class)
    star = solve_sigma_star(build_tolerance_constraints(pb, params, delta_hat))
    if args.sigma_grid is not None:
        grid = tuple(float(t) for t in args.sigma_grid.split(",") if t.strip())
        if any(s < 0 for s in grid):
            raise UsageError("sigma grid values must be nonnegative")
    else:
        grid = default_sigma_grid(star.value)
    grid = tuple(dict.fromkeys(grid))  # dedupe, keep order
    n_points = min(args.points, m)
    mu_points = min(args.mu_points, m)
    # Mirrors the bound's union budget: R+1 condition sets at threshold
    # 1/((R+1) sqrt(m)), R = 4 * depth.
    point_threshold = 1.0 / ((4.0 * depth + 1.0) * math.sqrt(m))

    rows = []
    any_fail_within_star = False
    for si, sigma in enumerate(grid):
        worst = 0.0
        for pi in range(n_points):
            estimates = verify_lemma_e1(
                params, data_list[pi], sigma, delta_hat, trials=args.trials,
                rng=RngStream(args.seed, 0xE1).derive(si).derive(pi))
            for label, fe in estimates.items():
                stmt, layers = label[:-1].split("[", 1)
                rows.append([str(pi), stmt, layers, _g17(sigma),
                             str(fe.trials), str(fe.failures), _g17(fe.rate),
                             _g17(fe.threshold), "yes" if fe.passed else "no",
                             _g17(fe.ci_low), _g17(fe.ci_high)])
                worst = max(worst, fe.rate)
                if not fe.passed and sigma <= star.value * (1.0 + 1e-12):
                    any_fail_within_star = True
        line = f"[verify] sigma={sigma:.6g}: worst statement rate {worst:.4g} (delta_hat {delta_hat:.4g})"
        if mu_points > 0:
            mu = estimate_mu_hat(params, data_list[:mu_points], sigma, pb,
                                 n_noise=args.mu_noise,
                                 rng=RngStream(args.seed, 0xC7).derive(si),
                                 point_threshold=point_threshold)
            rows.append(["", "mu_hat", "", _g17(sigma), str(mu_points),
                         str(int(round(mu * mu_points))), _g17(mu),
                         _g17(point_threshold), "", "", ""])
            line += f", mu_hat {mu:.4g}"
        print(line, flush=True)

    comments = (
        "noisebound verify-noise report",
        "spot check only: rates are Monte Carlo estimates at individual training "
        "points and certify nothing beyond the examined inputs and draws",
        f"m: {m}  depth: {depth}  width: {params.hidden_width}  "
        f"gamma_class: {_g17(args.gamma_class)}",
        f"sigma_star: {_g17(star.value)}  binding: {star.binding_constraint}  "
        f"delta_hat: {_g17(delta_hat)}",
        f"trials per statement: {args.trials}  statement points: {n_points}  "
        f"mu_hat points: {mu_points}  noise draws per mu_hat point: {args.mu_noise}",
        "mu_hat rows: rate is the fraction of examined points whose estimated "
        "failure probability exceeds the per-point threshold column; pass is blank",
    )
    _write_csv(args.out, VERIFY_COLUMNS, rows, comments=comments)
    print(f"wrote {args.out} ({len(rows)} rows)")
    if any_fail_within_star:
        print(f"error: statement failure rate exceeded delta_hat at sigma <= "
              f"sigma_star {star.value:.6g}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# plot

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd",
            "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")

_SVG_W, _SVG_H = 720, 480
_ML, _MR, _MT, _MB = 70, 30, 48, 55


def _render_svg(series, x_name, title):
    """Hand-rolled log10 line/scatter plot; one polyline per series."""
    all_x = [x for _, pts in series for x, _ in pts]
    all_y = [y for _, pts in series for _, y in pts]
    x0, x1 = min(all_x), max(all_x)
    y0, y1 = min(all_y), max(all_y)
    if x0 == x1:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y0 == y1:
        y0, y1 = y0 - 0.5, y1 + 0.5
    xpad, ypad = 0.05 * (x1 - x0), 0.05 * (y1 - y0)
    x0, x1 = x0 - xpad, x1 + xpad
    y0, y1 = y0 - ypad, y1 + ypad

    def px(x):
        return _ML + (x - x0) / (x1 - x0) * (_SVG_W - _ML - _MR)

    def py(y):
        return _SVG_H - _MB - (y - y0) / (y1 - y0) * (_SVG_H - _MT - _MB)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="#ffffff"/>',
        f'<text x="{_SVG_W / 2:.0f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
        # axes
        f'<line x1="{_ML}" y1="{_SVG_H - _MB}" x2="{_SVG_W - _MR}" y2="{_SVG_H - _MB}" '
        f'stroke="#000000"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_SVG_H - _MB}" stroke="#000000"/>',
        f'<text x="{(_ML + _SVG_W - _MR) / 2:.0f}" y="{_SVG_H - 14}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{x_name}</text>',
        f'<text x="18" y="{(_MT + _SVG_H - _MB) / 2:.0f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 18 {(_MT + _SVG_H - _MB) / 2:.0f})">log10(value)</text>',
    ]

    xs_unique = sorted({x for x in all_x})
    xticks = xs_unique if len(xs_unique) <= 10 else [
        x0 + xpad + i * (x1 - x0 - 2 * xpad) / 5 for i in range(6)]
    for tx in xticks:
        out.append(f'<line x1="{px(tx):.3f}" y1="{_SVG_H - _MB}" x2="{px(tx):.3f}" '
                   f'y2="{_SVG_H - _MB + 5}" stroke="#000000"/>')
        out.append(f'<text x="{px(tx):.3f}" y="{_SVG_H - _MB + 20}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{tx:g}</text>')
    for i in range(5):
        ty = y0 + ypad + i * (y1 - y0 - 2 * ypad) / 4
        out.append(f'<line x1="{_ML - 5}" y1="{py(ty):.3f}" x2="{_ML}" y2="{py(ty):.3f}" '
                   f'stroke="#000000"/>')
        out.append(f'<text x="{_ML - 9}" y="{py(ty) + 4:.3f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11">{ty:.3g}</text>')

    for k, (name, pts) in enumerate(series):
        color = _PALETTE[k % len(_PALETTE)]
        coords = " ".join(f"{px(x):.3f},{py(y):.3f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{coords}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{px(x):.3f}" cy="{py(y):.3f}" r="2.5" fill="{color}"/>')
        slope = _fit_slope([p[0] for p in pts], [p[1] for p in pts])
        slope_txt = "n/a" if slope is None else format(slope, "+.10g")
        out.append(f'<text x="{_ML + 10}" y="{_MT + 16 + 16 * k}" font-family="sans-serif" '
                   f'font-size="12" fill="{color}">{name}: slope {slope_txt} per {x_name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(args) -> int:
    header, data_rows = _read_csv(args.csv)
    col = {name: i for i, name in enumerate(header)}
    if args.x not in col:
        raise UsageError(f"unknown x column {args.x!r} (csv has: {', '.join(header)})")
    names = [c.strip() for c in args.columns.split(",") if c.strip()]
    if not names:
        raise UsageError("--columns is empty")
    for name in names:
        if name not in col:
            raise UsageError(f"unknown column {name!r} (csv has: {', '.join(header)})")

    series = []
    for name in names:
        pts = []
        for row in data_rows:
            try:
                x = float(row[col[args.x]])
                v = float(row[col[name]])
            except (ValueError, IndexError):
                continue
            if math.isfinite(x) and math.isfinite(v) and v > 0.0:
                pts.append((x, math.log10(v)))
        if not pts:
            raise UsageError(f"column {name!r} has no positive finite values to plot")
        pts.sort(key=lambda p: p[0])
        series.append((name, pts))

    svg = _render_svg(series, args.x, args.title)
    with open(args.out, "w", newline="\n") as fh:
        fh.write(svg)
    print(f"wrote {args.out} ({len(series)} series)")
    return 0


# ---------------------------------------------------------------------------
# fetch-mnist

# Published SHA-256 digests of the canonical gzipped IDX files.
_MNIST_FILES = {
    "train-images-idx3-ubyte.gz":
        "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
    "train-labels-idx1-ubyte.gz":
        "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
    "t10k-images-idx3-ubyte.gz":
        "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
    "t10k-labels-idx1-ubyte.gz":
        "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
}
_DEFAULT_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"


def _fetch_one(url, dest, sha256_hex):
    with urllib.request.urlopen(url) as resp:
        payload = resp.read()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != sha256_hex:
        raise FetchVerificationError(
            f"digest mismatch for {url}: got {digest}, want {sha256_hex}")
    with open(dest, "wb") as fh:
        fh.write(payload)
    return len(payload)


def cmd_fetch_mnist(args) -> int:
    os.makedirs(args.dest, exist_ok=True)
    base = args.base_url if args.base_url.endswith("/") else args.base_url + "/"
    for name, digest in _MNIST_FILES.items():
        dest = os.path.join(args.dest, name)
        if os.path.exists(dest) and not args.force:
            with open(dest, "rb") as fh:
                if hashlib.sha256(fh.read()).hexdigest() == digest:
                    print(f"{name}: already present, digest ok")
                    continue
            print(f"{name}: present but digest differs, refetching")
        size = _fetch_one(base + name, dest, digest)
        print(f"fetched {name} ({size} bytes, sha256 ok)")
    print(f"MNIST IDX files ready under {args.dest} (use --mnist-dir or ${MNIST_DIR_ENV})")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisebound",
        description="Train small ReLU nets, audit deterministic noise-resilience "
                    "generalization bounds, and verify the perturbation analysis "
                    "by Monte Carlo.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write a checkpoint")
    p.add_argument("--config", help="JSON file of training settings (flags win)")
    p.add_argument("--dims", help="comma-separated layer sizes, input first")
    p.add_argument("--depth", type=int, default=None,
                   help="number of weight layers (with --width)")
    p.add_argument("--width", type=int, default=None, help="hidden layer width")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    _add_train_hyper_args(p)
    _add_data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit", help="measure a checkpoint and emit one bound-report CSV row")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="CSV path to write")
    p.add_argument("--gamma-class", type=float, default=10.0)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--loose", action=argparse.BooleanOptionalAction, default=True,
                   help="fill the our_bound_loose column (default on)")
    p.add_argument("--figure-mode", action="store_true",
                   help=f"append normalized columns {', '.join(FIGURE_COLUMNS)}")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    _add_data_args(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("sweep", help="train+audit a grid over depth or width")
    p.add_argument("--preset", choices=sorted(_PRESETS))
    p.add_argument("--axis", choices=("depth", "width"), default=None)
    p.add_argument("--values", default=None, help="comma-separated axis values")
    p.add_argument("--depth", type=int, default=None, help="fixed depth for a width sweep")
    p.add_argument("--width", type=int, default=None, help="fixed width for a depth sweep")
    p.add_argument("--runs", type=int, default=None, help="networks per axis value")
    p.add_argument("--gamma-class", dest="gamma_class", type=float, default=None)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--figure-mode", action="store_true")
    p.add_argument("--save-checkpoints", action="store_true")
    p.add_argument("--dry-run", action="store_true",
                   help="print the resolved sweep spec as JSON and exit")
    _add_train_hyper_args(p)
    _add_data_args(p, with_subset=False)
    p.add_argument("-m", "--m", type=int, default=None,
                   help="training subset size per run (fresh seeded draw each run)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-noise",
                       help="Monte Carlo check of the perturbation statements on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="CSV path to write")
    p.add_argument("--sigma-grid", default=None,
                   help="comma-separated noise scales (default: sigma_star/4, /2, x1, x2)")
    p.add_argument("--trials", type=int, default=2000,
                   help="noise draws per statement estimate (min 100)")
    p.add_argument("--points", type=int, default=3,
                   help="training points to spot-check statements on")
    p.add_argument("--mu-points", type=int, default=32,
                   help="points entering the resilient-fraction estimate (0 disables)")
    p.add_argument("--mu-noise", type=int, default=200,
                   help="noise draws per point for the resilient fraction (min 100)")
    p.add_argument("--gamma-class", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    _add_data_args(p)
    p.set_defaults(func=cmd_verify_noise)

    p = sub.add_parser("plot", help="render log10 trends from a report CSV as SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--columns", required=True, help="comma-separated column names")
    p.add_argument("--x", default="depth", help="axis column (default depth)")
    p.add_argument("--title", default="log10 trends")
    p.add_argument("--out", required=True, help="SVG path to write")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("fetch-mnist",
                       help="download the four MNIST IDX files and verify their sha256")
    p.add_argument("--dest", required=True)
    p.add_argument("--base-url", default=_DEFAULT_MIRROR)
    p.add_argument("--force", action="store_true", help="refetch even if present")
    p.set_defaults(func=cmd_fetch_mnist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage/help
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"error: bad checkpoint: {e}", file=sys.stderr)
        return 2
    except IdxParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as e:
        print(f"error: bad JSON config: {e}", file=sys.stderr)
        return 2
    except FetchVerificationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
