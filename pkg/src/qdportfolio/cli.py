"""Command-line surface: ingest, synth, train, eval, compare, plot.

Configuration resolves in three layers (defaults, then a flat key=value
config file, then command-line flags) and the fully resolved result is
written to the output directory before any computation starts.  Exit
codes: 0 success, 1 usage error, 2 data error, 3 numerical failure; every
failure prints one `error: <category>: <reason>` line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import ensemble as ens
from . import generator as gen
from . import trainer
from .marketdata import (
    DataError,
    compute_log_returns,
    load_prices,
    panel_to_prices,
    synth_dataset,
    time_split,
    write_prices,
)
from .optim import GRADIENT_KINDS, Hyper, OptimError, OptimizerKind
from .trainer import TrainConfig, TrainError, config_to_flat, format_value

__all__ = ["main", "UsageError", "DEFAULTS", "parse_config_file", "render_svg"]

PLOT_SVG = "plot.svg"
SERIES_CSV = "series.csv"
REPORT_TXT = "report.txt"
WEIGHTS_CSV = "weights.csv"

INDEX_COLOR = "#d62728"
ENSEMBLE_COLOR = "#1f77b4"
SUB_COLOR = "#b0b0b0"


class UsageError(Exception):
    """Bad flags, bad config keys or malformed option values."""


DEFAULTS: dict = {
    "iterations": 50,
    "window": 252,
    "seed": 0,
    "eval_seed": None,
    "eval_every": 1,
    "optimizer": "adamw",
    "bag_mode": "sparsify_rows",
    "noise_dim": 16,
    "conv_channels": 8,
    "conv_kernel": 3,
    "lstm_hidden": 64,
    "population": 64,
    "lambda": 1e-6,
    "p_zero": 0.1,
    "noise_sigma": 0.01,
    "corruption": True,
    "learning_rate": None,  # resolved per role: 0.01 generator, 0.1 baselines
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "weight_decay": 0.01,
    "rmsprop_alpha": 0.99,
    "rprop_eta_plus": 1.2,
    "rprop_eta_minus": 0.5,
    "rprop_step_min": 1e-6,
    "rprop_step_max": 50.0,
    "cmaes_sigma0": 0.3,
    "train_fraction": 0.8,
    "index_column": "INDEX",
}

_INT_KEYS = {
    "iterations", "window", "seed", "eval_every",
    "noise_dim", "conv_channels", "conv_kernel", "lstm_hidden", "population",
}
_OPT_INT_KEYS = {"eval_seed"}
_FLOAT_KEYS = {
    "lambda", "p_zero", "noise_sigma", "beta1", "beta2", "eps", "weight_decay",
    "rmsprop_alpha", "rprop_eta_plus", "rprop_eta_minus", "rprop_step_min",
    "rprop_step_max", "cmaes_sigma0", "train_fraction",
}
_OPT_FLOAT_KEYS = {"learning_rate"}
_BOOL_KEYS = {"corruption"}
_STR_KEYS = {"optimizer", "bag_mode", "index_column"}

_TRUE_WORDS = {"true", "1", "yes", "on"}
_FALSE_WORDS = {"false", "0", "no", "off"}


def _coerce(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _OPT_INT_KEYS:
            return None if raw == "" else int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _OPT_FLOAT_KEYS:
            return None if raw == "" else float(raw)
        if key in _BOOL_KEYS:
            low = raw.lower()
            if low in _TRUE_WORDS:
                return True
            if low in _FALSE_WORDS:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if key in _STR_KEYS:
            return raw
    except ValueError as e:
        raise UsageError(f"bad value for {key}: {e}") from None
    raise UsageError(f"unknown configuration key: {key}")


def parse_config_file(path: str | Path) -> dict:
    """Flat key=value lines; blank lines and full-line # comments skipped."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"no such config file: {path}")
    values: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown configuration key: {key}")
        values[key] = _coerce(key, raw)
    return values


class _Parser(argparse.ArgumentParser):
    # argparse defaults to exit(2) on a bad command line; route through
    # our usage category instead so exit codes stay pinned.
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="qdportfolio", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add_common(p: _Parser, *, data=False, out=False):
        p.add_argument("--config", metavar="PATH", default=None)
        if data:
            p.add_argument("--data", metavar="PATH", default=None)
            p.add_argument("--index-column", metavar="NAME", default=None)
        if out:
            p.add_argument("--out", metavar="DIR", default=None)
        p.add_argument("--seed", metavar="U64", type=int, default=None)

    p_ingest = sub.add_parser("ingest", help="validate and normalize a price CSV")
    add_common(p_ingest, data=True, out=True)

    p_synth = sub.add_parser("synth", help="write a synthetic sparse-index dataset")
    add_common(p_synth, out=True)
    p_synth.add_argument("--index-column", metavar="NAME", default=None)
    p_synth.add_argument("--assets", metavar="N", type=int, default=20)
    p_synth.add_argument("--days", metavar="T", type=int, default=400)
    p_synth.add_argument("--sparse", metavar="K", type=int, default=5)
    p_synth.add_argument("--noise-scale", metavar="F", type=float, default=0.0)

    def add_train_flags(p: _Parser):
        p.add_argument("--iterations", metavar="N", type=int, default=None)
        p.add_argument("--population", metavar="B", type=int, default=None)
        p.add_argument("--lambda", dest="lambda_", metavar="F", type=float, default=None)
        p.add_argument("--window", metavar="W", type=int, default=None)
        p.add_argument("--optimizer", metavar="KIND", default=None)
        p.add_argument("--train-fraction", metavar="F", type=float, default=None)
        p.add_argument("--eval-seed", metavar="U64", type=int, default=None)

    p_train = sub.add_parser("train", help="meta-train the portfolio generator")
    add_common(p_train, data=True, out=True)
    add_train_flags(p_train)
    p_train.add_argument("--resume", metavar="CHECKPOINT", default=None)

    p_eval = sub.add_parser("eval", help="score a checkpoint on the validation panel")
    p_eval.add_argument("checkpoint", metavar="CHECKPOINT")
    add_common(p_eval, data=True, out=True)
    p_eval.add_argument("--train-fraction", metavar="F", type=float, default=None)
    p_eval.add_argument("--eval-seed", metavar="U64", type=int, default=None)

    p_compare = sub.add_parser("compare", help="run every optimizer plus the generator")
    add_common(p_compare, data=True, out=True)
    add_train_flags(p_compare)

    p_plot = sub.add_parser("plot", help="render cumulative-return curves as SVG")
    p_plot.add_argument("--data", metavar="PATH", default=None)
    p_plot.add_argument("--out", metavar="DIR", default=None)

    return parser


def _resolve(args, flag_keys: dict[str, str]) -> dict:
    """Layer defaults, then the config file, then explicit flags."""
    resolved = dict(DEFAULTS)
    if getattr(args, "config", None):
        resolved.update(parse_config_file(args.config))
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            resolved[key] = value
    return resolved


_TRAIN_FLAG_KEYS = {
    "seed": "seed",
    "iterations": "iterations",
    "population": "population",
    "lambda_": "lambda",
    "window": "window",
    "optimizer": "optimizer",
    "train_fraction": "train_fraction",
    "eval_seed": "eval_seed",
    "index_column": "index_column",
}


def _require(args, name: str) -> str:
    value = getattr(args, name.replace("-", "_"), None)
    if not value:
        raise UsageError(f"--{name} is required for this command")
    return value


def _build_train_config(resolved: dict, n_assets: int) -> TrainConfig:
    lr = resolved["learning_rate"]
    hyper = Hyper(
        learning_rate=0.01 if lr is None else float(lr),
        beta1=resolved["beta1"],
        beta2=resolved["beta2"],
        eps=resolved["eps"],
        weight_decay=resolved["weight_decay"],
        rmsprop_alpha=resolved["rmsprop_alpha"],
        rprop_eta_plus=resolved["rprop_eta_plus"],
        rprop_eta_minus=resolved["rprop_eta_minus"],
        rprop_step_min=resolved["rprop_step_min"],
        rprop_step_max=resolved["rprop_step_max"],
        cmaes_sigma0=resolved["cmaes_sigma0"],
    )
    flat = dict(resolved)
    flat["n_assets"] = n_assets
    flat["learning_rate"] = hyper.learning_rate
    try:
        return trainer.config_from_flat(flat)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _full_flat(config: TrainConfig, resolved: dict) -> dict:
    flat = config_to_flat(config)
    flat["train_fraction"] = resolved["train_fraction"]
    flat["index_column"] = resolved["index_column"]
    return flat


def _load_split(args, resolved: dict):
    table = load_prices(_require(args, "data"), resolved["index_column"])
    panel = compute_log_returns(table)
    return panel, time_split(panel, resolved["train_fraction"])


# --------------------------------------------------------------------------
# commands

def _cmd_ingest(args) -> int:
    resolved = _resolve(args, {"index_column": "index_column", "seed": "seed"})
    table = load_prices(_require(args, "data"), resolved["index_column"])
    out = Path(_require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    write_prices(table, out / "prices.csv")
    print(f"rows={table.n_rows} assets={table.n_assets} index={table.index_name}")
    return 0


def _cmd_synth(args) -> int:
    resolved = _resolve(args, {"index_column": "index_column", "seed": "seed"})
    if args.assets < 2:
        raise UsageError("--assets must be at least 2")
    panel, true_weights = synth_dataset(
        n_assets=args.assets,
        n_days=args.days,
        k_sparse=args.sparse,
        noise_scale=args.noise_scale,
        seed=resolved["seed"],
    )
    out = Path(_require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    table = panel_to_prices(panel, index_name=resolved["index_column"])
    write_prices(table, out / "prices.csv")
    lines = ["ticker,weight"]
    for ticker, weight in zip(panel.tickers, true_weights):
        if weight > 0:
            lines.append(f"{ticker},{format_value(float(weight))}")
    (out / "true_weights.csv").write_text("\n".join(lines) + "\n")
    print(f"rows={table.n_rows} assets={table.n_assets} support={int((true_weights > 0).sum())}")
    return 0


def _cmd_train(args) -> int:
    resolved = _resolve(args, _TRAIN_FLAG_KEYS)
    panel, split = _load_split(args, resolved)
    config = _build_train_config(resolved, panel.n_assets)
    out = Path(_require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    flat = _full_flat(config, resolved)
    trainer.write_config(flat, out / trainer.RUN_CONFIG)

    resume_payload = trainer.load_checkpoint(args.resume) if args.resume else None
    artifacts = trainer.train_generator(config, split, resume=resume_payload)
    artifacts.config = flat
    trainer.save_run(artifacts, out)
    print(
        f"best_validation_mse={format_value(artifacts.best_validation_mse)} "
        f"iteration={artifacts.best_iteration}"
    )
    return 0


def _load_validation_panel(args, resolved):
    panel = compute_log_returns(
        load_prices(_require(args, "data"), resolved["index_column"])
    )
    return time_split(panel, resolved["train_fraction"]).validation


def _population_from_checkpoint(payload: dict, eval_seed: int | None) -> tuple[gen.Population, dict]:
    kind = payload.get("kind")
    if kind == "generator":
        config, params, state = trainer.params_from_payload(payload)
        if eval_seed is not None:
            rng = np.random.default_rng(np.random.SeedSequence(eval_seed))
            noise = gen.sample_noise(config.generator, rng)
        else:
            noise = np.asarray(
                payload["eval_noise"]["data"], dtype=np.float64
            ).reshape(payload["eval_noise"]["shape"])
        result = gen.forward(params, state, noise, mode="eval")
        meta = {"checkpoint_kind": "generator", "iteration": payload["iteration"]}
        return result.population, meta
    if kind == "baseline":
        logits = np.asarray(payload["logits"], dtype=np.float64)
        weights = gen.sparsemax(logits)
        population = gen.Population(
            logits=logits[None, :].copy(), weights=weights[None, :], mode="eval"
        )
        meta = {
            "checkpoint_kind": f"baseline:{payload.get('optimizer', '?')}",
            "iteration": payload["iteration"],
        }
        return population, meta
    raise DataError(f"checkpoint kind {kind!r} is not scoreable")


def _cmd_eval(args) -> int:
    resolved = _resolve(
        args,
        {"index_column": "index_column", "train_fraction": "train_fraction",
         "eval_seed": "eval_seed", "seed": "seed"},
    )
    payload = trainer.load_checkpoint(args.checkpoint)
    validation = _load_validation_panel(args, resolved)
    out = Path(_require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)

    flat = dict(payload["config"])
    flat["train_fraction"] = resolved["train_fraction"]
    flat["index_column"] = resolved["index_column"]
    trainer.write_config(flat, out / trainer.RUN_CONFIG)

    bag_mode = str(payload["config"].get("bag_mode", "sparsify_rows"))
    population, meta = _population_from_checkpoint(payload, resolved["eval_seed"])
    if population.weights.shape[1] != validation.n_assets:
        raise DataError(
            f"checkpoint expects {population.weights.shape[1]} assets, "
            f"data has {validation.n_assets}"
        )
    report = ens.evaluate_population(population, validation, bag_mode=bag_mode)

    summary = {
        "ensemble_mse": report.ensemble_mse,
        "ensemble_l2": report.ensemble_l2,
        "mean_sub_mse": report.mean_sub_mse,
        "max_corr": report.max_corr,
        "support_size": report.support_size,
        "population": population.weights.shape[0],
        "validation_rows": validation.n_rows,
        **meta,
    }
    report_lines = [f"{key}={format_value(summary[key])}" for key in sorted(summary)]
    (out / REPORT_TXT).write_text("\n".join(report_lines) + "\n")

    header = ["date", "index", "ensemble"] + [
        f"sub_{i:04d}" for i in range(report.sub_returns.shape[0])
    ]
    series_lines = [",".join(header)]
    for t in range(validation.n_rows):
        row = [
            validation.dates[t].isoformat(),
            format_value(float(report.index_returns[t])),
            format_value(float(report.ensemble_returns[t])),
        ]
        row += [format_value(float(v)) for v in report.sub_returns[:, t]]
        series_lines.append(",".join(row))
    (out / SERIES_CSV).write_text("\n".join(series_lines) + "\n")

    weight_lines = ["ticker,weight"]
    for ticker, weight in zip(validation.tickers, report.ensemble_weights):
        if weight >= ens.EXPORT_WEIGHT_FLOOR:
            weight_lines.append(f"{ticker},{format_value(float(weight))}")
    (out / WEIGHTS_CSV).write_text("\n".join(weight_lines) + "\n")

    print(f"ensemble_mse={format_value(report.ensemble_mse)}")
    return 0


def _cmd_compare(args) -> int:
    resolved = _resolve(args, _TRAIN_FLAG_KEYS)
    panel, split = _load_split(args, resolved)
    config = _build_train_config(resolved, panel.n_assets)
    out = Path(_require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    trainer.write_config(_full_flat(config, resolved), out / trainer.RUN_CONFIG)

    lr = resolved["learning_rate"]
    baseline_hyper = replace(config.hyper, learning_rate=0.1 if lr is None else float(lr))
    kinds = GRADIENT_KINDS + (OptimizerKind.CMAES,)
    result = trainer.compare_optimizers(
        config, split, kinds=kinds, baseline_hyper=baseline_hyper
    )
    trainer.save_comparison(result, out)
    top = result.rows[0]
    print(f"best={top.optimizer} mse={format_value(top.best_validation_mse)}")
    return 0


def render_svg(names: list[str], series: list[np.ndarray], width: int = 900, height: int = 480) -> str:
    """Line chart of cumulative sums; self-contained SVG, no external refs."""
    if not names or len(names) != len(series):
        raise UsageError("plot needs one name per series")
    length = len(series[0])
    if length < 2 or any(len(s) != length for s in series):
        raise DataError("plot needs at least two rows of equal-length series")
    cumulative = [np.cumsum(np.asarray(s, dtype=np.float64)) for s in series]
    lo = min(float(c.min()) for c in cumulative)
    hi = max(float(c.max()) for c in cumulative)
    span = hi - lo if hi > lo else 1.0
    margin = 40.0
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin

    def sx(t: int) -> float:
        return margin + plot_w * t / (length - 1)

    def sy(v: float) -> float:
        return margin + plot_h * (1.0 - (v - lo) / span)

    def color_for(name: str) -> str:
        if name == "index":
            return INDEX_COLOR
        if name == "ensemble":
            return ENSEMBLE_COLOR
        return SUB_COLOR

    # draw the highlighted pair last so they sit on top of the gray lines
    order = sorted(range(len(names)), key=lambda i: (names[i] in ("index", "ensemble"), names[i]))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#333333" stroke-width="1"/>',
    ]
    for i in order:
        points = " ".join(
            f"{sx(t):.3f},{sy(float(cumulative[i][t])):.3f}" for t in range(length)
        )
        stroke_width = "1.5" if names[i] in ("index", "ensemble") else "0.75"
        parts.append(
            f'<polyline fill="none" stroke="{color_for(names[i])}" '
            f'stroke-width="{stroke_width}" points="{points}"/>'
        )
    parts.append(
        f'<text x="{margin}" y="{margin - 8:.1f}" font-family="monospace" '
        f'font-size="12" fill="#333333">cumulative log return</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _cmd_plot(args) -> int:
    path = Path(_require(args, "data"))
    if not path.exists():
        raise DataError(f"no such series file: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["date"] or len(rows[0]) < 2:
        raise DataError(f"{path}: expected a header starting with 'date'")
    names = rows[0][1:]
    try:
        data = [
            np.asarray([float(row[j + 1]) for row in rows[1:]])
            for j in range(len(names))
        ]
    except (ValueError, IndexError) as e:
        raise DataError(f"{path}: malformed series row: {e}") from None
    svg = render_svg(names, data)
    out = Path(_require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    (out / PLOT_SVG).write_text(svg)
    print(f"wrote {out / PLOT_SVG}")
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "plot": _cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (ingest, synth, train, eval, compare, plot)")
        return _COMMANDS[args.command](args)
    except DataError as e:
        print(f"error: data: {e}", file=sys.stderr)
        return 2
    except (TrainError, OptimError, dc.NonFiniteError, dc.GraphError,
            dc.GradCheckError, ArithmeticError) as e:
        print(f"error: numerical: {e}", file=sys.stderr)
        return 3
    except (UsageError, ValueError) as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
