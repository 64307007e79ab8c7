"""Training orchestration: seeding, loops, checkpoints and comparisons.

A master seed expands into independent sub-streams (noise, windows,
corruption, initialisation, evaluation) so that changing one consumer
never perturbs the others.  Checkpoints are a versioned JSON document
carrying the configuration, all parameter and optimizer arrays, the
recurrent state, the random-stream positions and the fixed evaluation
noise: loading one and resuming is bit-identical to the uninterrupted
run.  Wall-clock timings are recorded but excluded from artifact
comparisons.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import ensemble as ens
from . import generator as gen
from . import objective as obj
from .marketdata import DataError, ReturnPanel, SplitPanels, WindowSample, sample_window
from .optim import (
    BASELINE_HYPER,
    GENERATOR_HYPER,
    GRADIENT_KINDS,
    Hyper,
    OptimError,
    OptimizerKind,
    OptimizerState,
    cmaes_run,
    init_state,
    step,
)

__all__ = [
    "TrainError",
    "TrainConfig",
    "EvalRecord",
    "RunArtifacts",
    "ComparisonRow",
    "ComparisonResult",
    "CHECKPOINT_VERSION",
    "train_generator",
    "train_baseline",
    "compare_optimizers",
    "config_to_flat",
    "config_from_flat",
    "save_checkpoint",
    "load_checkpoint",
    "save_run",
    "save_comparison",
    "format_value",
    "THREADS_ENV",
]

CHECKPOINT_VERSION = 1
THREADS_ENV = "QD_PORTFOLIO_THREADS"

RUN_CONFIG = "run.config"
LOSS_CSV = "loss.csv"
EVAL_CSV = "eval.csv"
TIMING_CSV = "timing.csv"
CHECKPOINT_FINAL = "checkpoint.final"
CHECKPOINT_BEST = "checkpoint.best"
TABLE_CSV = "table.csv"
FAILURES_CSV = "failures.csv"


class TrainError(RuntimeError):
    """Training could not proceed (non-finite loss, bad resume, ...)."""


@dataclass(frozen=True)
class TrainConfig:
    """Everything one run needs besides the data itself."""

    generator: gen.GeneratorConfig
    loss: obj.LossConfig = obj.LossConfig()
    optimizer: OptimizerKind = OptimizerKind.ADAMW
    hyper: Hyper = GENERATOR_HYPER
    iterations: int = 50
    window: int = 252
    seed: int = 0
    eval_seed: int | None = None
    eval_every: int = 1
    bag_mode: str = "sparsify_rows"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.window < 2:
            raise ValueError("window must be at least 2")
        if self.eval_every < 1:
            raise ValueError("evaluation cadence must be at least 1")
        if self.bag_mode not in ens.BAG_MODES:
            raise ValueError(f"unknown bag mode {self.bag_mode!r}")
        if OptimizerKind(self.optimizer) is OptimizerKind.CMAES:
            raise ValueError("the generator is trained with a gradient rule, not cmaes")


@dataclass(frozen=True)
class EvalRecord:
    iteration: int
    report: ens.EvalReport


@dataclass
class RunArtifacts:
    """In-memory result of one run; `save_run` writes the on-disk layout."""

    label: str
    config: dict
    losses: list[obj.LossReport]
    evals: list[EvalRecord]
    best_iteration: int
    best_validation_mse: float
    final_checkpoint: dict
    best_checkpoint: dict
    evaluations_used: int
    wall_clock: list[float]
    start_iteration: int = 0


@dataclass(frozen=True)
class ComparisonRow:
    optimizer: str
    status: str
    best_validation_mse: float
    evaluations_used: int
    seed: int
    error: str = ""


@dataclass
class ComparisonResult:
    rows: list[ComparisonRow]
    artifacts: dict[str, RunArtifacts]


# --------------------------------------------------------------------------
# configuration <-> flat mapping

def config_to_flat(config: TrainConfig) -> dict:
    g, l, h = config.generator, config.loss, config.hyper
    return {
        "iterations": config.iterations,
        "window": config.window,
        "seed": config.seed,
        "eval_seed": config.eval_seed,
        "eval_every": config.eval_every,
        "optimizer": OptimizerKind(config.optimizer).value,
        "bag_mode": config.bag_mode,
        "n_assets": g.n_assets,
        "noise_dim": g.noise_dim,
        "conv_channels": g.conv_channels,
        "conv_kernel": g.conv_kernel,
        "lstm_hidden": g.lstm_hidden,
        "population": g.population,
        "lambda": l.diversity_weight,
        "p_zero": l.p_zero,
        "noise_sigma": l.noise_sigma,
        "corruption": l.corruption_enabled,
        "learning_rate": h.learning_rate,
        "beta1": h.beta1,
        "beta2": h.beta2,
        "eps": h.eps,
        "weight_decay": h.weight_decay,
        "rmsprop_alpha": h.rmsprop_alpha,
        "rprop_eta_plus": h.rprop_eta_plus,
        "rprop_eta_minus": h.rprop_eta_minus,
        "rprop_step_min": h.rprop_step_min,
        "rprop_step_max": h.rprop_step_max,
        "cmaes_sigma0": h.cmaes_sigma0,
    }


def config_from_flat(flat: dict) -> TrainConfig:
    generator = gen.GeneratorConfig(
        n_assets=int(flat["n_assets"]),
        noise_dim=int(flat["noise_dim"]),
        conv_channels=int(flat["conv_channels"]),
        conv_kernel=int(flat["conv_kernel"]),
        lstm_hidden=int(flat["lstm_hidden"]),
        population=int(flat["population"]),
        seed=int(flat["seed"]),
    )
    loss = obj.LossConfig(
        diversity_weight=float(flat["lambda"]),
        p_zero=float(flat["p_zero"]),
        noise_sigma=float(flat["noise_sigma"]),
        corruption_enabled=bool(flat["corruption"]),
    )
    hyper = Hyper(
        learning_rate=float(flat["learning_rate"]),
        beta1=float(flat["beta1"]),
        beta2=float(flat["beta2"]),
        eps=float(flat["eps"]),
        weight_decay=float(flat["weight_decay"]),
        rmsprop_alpha=float(flat["rmsprop_alpha"]),
        rprop_eta_plus=float(flat["rprop_eta_plus"]),
        rprop_eta_minus=float(flat["rprop_eta_minus"]),
        rprop_step_min=float(flat["rprop_step_min"]),
        rprop_step_max=float(flat["rprop_step_max"]),
        cmaes_sigma0=float(flat["cmaes_sigma0"]),
    )
    eval_seed = flat.get("eval_seed")
    return TrainConfig(
        generator=generator,
        loss=loss,
        optimizer=OptimizerKind(flat["optimizer"]),
        hyper=hyper,
        iterations=int(flat["iterations"]),
        window=int(flat["window"]),
        seed=int(flat["seed"]),
        eval_seed=None if eval_seed in (None, "") else int(eval_seed),
        eval_every=int(flat.get("eval_every", 1)),
        bag_mode=str(flat.get("bag_mode", "sparsify_rows")),
    )


# --------------------------------------------------------------------------
# random streams

@dataclass
class _Streams:
    noise: np.random.Generator
    windows: np.random.Generator
    corruption: np.random.Generator
    init: np.random.Generator
    evaluation: np.random.Generator


def _expand_streams(seed: int, eval_seed: int | None) -> _Streams:
    children = np.random.SeedSequence(seed).spawn(5)
    if eval_seed is not None:
        eval_ss = np.random.SeedSequence(eval_seed)
    else:
        eval_ss = children[4]
    return _Streams(
        noise=np.random.default_rng(children[0]),
        windows=np.random.default_rng(children[1]),
        corruption=np.random.default_rng(children[2]),
        init=np.random.default_rng(children[3]),
        evaluation=np.random.default_rng(eval_ss),
    )


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bit = np.random.PCG64()
    bit.state = state
    return np.random.Generator(bit)


# --------------------------------------------------------------------------
# checkpoint (de)serialisation

def _pack(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _unpack(blob: dict) -> np.ndarray:
    return np.asarray(blob["data"], dtype=np.float64).reshape(blob["shape"])


def save_checkpoint(payload: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"unreadable checkpoint {path}: {e}") from None
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"unsupported checkpoint format_version {version!r} (expected {CHECKPOINT_VERSION})"
        )
    return payload


def _generator_payload(
    config: TrainConfig,
    iteration: int,
    params: gen.GeneratorParams,
    state: gen.GeneratorState,
    opt_state: OptimizerState,
    streams: _Streams,
    eval_noise: np.ndarray,
    best_iteration: int,
    best_mse: float,
    best_snapshot: dict | None,
) -> dict:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "generator",
        "config": config_to_flat(config),
        "iteration": iteration,
        "params": {name: arr.ravel().tolist() for name, arr in params.as_dict().items()},
        "state": {
            "h": _pack(state.h),
            "c": _pack(state.c),
            "iteration": state.iteration,
        },
        "optimizer": {
            "kind": opt_state.kind.value,
            "step": opt_state.step,
            "arrays": {name: _pack(arr) for name, arr in opt_state.arrays.items()},
        },
        "rng": {
            "noise": _rng_state(streams.noise),
            "windows": _rng_state(streams.windows),
            "corruption": _rng_state(streams.corruption),
        },
        "eval_noise": _pack(eval_noise),
        "best": {"iteration": best_iteration, "validation_mse": best_mse},
    }
    if best_snapshot is not None:
        payload["best_state"] = best_snapshot
    return payload


def params_from_payload(payload: dict) -> tuple[TrainConfig, gen.GeneratorParams, gen.GeneratorState]:
    """Rebuild the configuration, parameters and recurrent state."""
    config = config_from_flat(payload["config"])
    shapes = gen.param_shapes(config.generator)
    arrays = {
        name: np.asarray(payload["params"][name], dtype=np.float64).reshape(shape)
        for name, shape in shapes.items()
    }
    params = gen.GeneratorParams(**arrays)
    state = gen.GeneratorState(
        h=_unpack(payload["state"]["h"]),
        c=_unpack(payload["state"]["c"]),
        iteration=int(payload["state"]["iteration"]),
    )
    return config, params, state


# --------------------------------------------------------------------------
# generator training

def train_generator(
    config: TrainConfig,
    data: SplitPanels,
    resume: dict | None = None,
) -> RunArtifacts:
    """Meta-train the generator and validate its ensemble every few steps.

    Per iteration: draw one shared window from the training panel, one
    noise batch, evaluate the corrupted training objective, backpropagate,
    apply the configured rule to the flat parameter vector, then carry the
    detached recurrent state forward.  On the evaluation cadence the
    population produced from the fixed evaluation noise is bagged and
    scored on the validation panel.
    """
    if data.train.n_assets != config.generator.n_assets:
        raise TrainError(
            f"config expects {config.generator.n_assets} assets, data has {data.train.n_assets}"
        )
    if config.window > data.train.n_rows:
        raise DataError(
            f"window {config.window} exceeds training rows {data.train.n_rows}"
        )
    kind = OptimizerKind(config.optimizer)
    dim = config.generator.parameter_count

    if resume is None:
        streams = _expand_streams(config.seed, config.eval_seed)
        params = gen.init_params(config.generator, streams.init)
        state = gen.GeneratorState.zeros(config.generator)
        opt_state = init_state(kind, dim, config.hyper)
        eval_noise = gen.sample_noise(config.generator, streams.evaluation)
        start = 0
        best_iteration = 0
        best_mse = float("inf")
        best_snapshot: dict | None = None
    else:
        if resume.get("kind") != "generator":
            raise TrainError("checkpoint does not describe a generator run")
        saved = dict(resume["config"])
        current = config_to_flat(config)
        mismatched = [
            k for k in current
            if k != "iterations" and current[k] != saved.get(k)
        ]
        if mismatched:
            raise TrainError(f"checkpoint configuration differs on: {', '.join(sorted(mismatched))}")
        _, params, state = params_from_payload(resume)
        blob = resume["optimizer"]
        opt_state = OptimizerState(
            kind=OptimizerKind(blob["kind"]),
            step=int(blob["step"]),
            arrays={name: _unpack(arr) for name, arr in blob["arrays"].items()},
        )
        streams = _Streams(
            noise=_rng_from_state(resume["rng"]["noise"]),
            windows=_rng_from_state(resume["rng"]["windows"]),
            corruption=_rng_from_state(resume["rng"]["corruption"]),
            init=np.random.default_rng(0),  # consumed before the checkpoint
            evaluation=np.random.default_rng(0),
        )
        eval_noise = _unpack(resume["eval_noise"])
        start = int(resume["iteration"])
        best_iteration = int(resume["best"]["iteration"])
        best_mse = float(resume["best"]["validation_mse"])
        best_snapshot = resume.get("best_state")
        if best_snapshot is not None:
            # the carried snapshot must read as if this run had the new
            # iteration target from the start
            best_snapshot = {
                **best_snapshot,
                "config": {**best_snapshot["config"], "iterations": config.iterations},
            }
        if start >= config.iterations:
            raise TrainError(
                f"checkpoint is at iteration {start}, nothing to do before {config.iterations}"
            )

    losses: list[obj.LossReport] = []
    evals: list[EvalRecord] = []
    wall_clock: list[float] = []

    for i in range(start + 1, config.iterations + 1):
        t0 = time.monotonic()
        window = sample_window(data.train, config.window, streams.windows)
        noise = gen.sample_noise(config.generator, streams.noise)
        try:
            result = obj.total_loss(
                params, state, noise, window, config.loss, streams.corruption
            )
        except dc.NonFiniteError as e:
            raise TrainError(f"non-finite loss at iteration {i}: {e}") from e
        if not np.isfinite(result.report.total):
            raise TrainError(f"non-finite loss at iteration {i}")
        dc.backward(result.loss)
        grads = np.concatenate([
            np.ravel(
                result.param_nodes[name].grad
                if result.param_nodes[name].grad is not None
                else np.zeros_like(getattr(params, name))
            )
            for name in gen.PARAM_ORDER
        ])
        try:
            flat, opt_state = step(kind, params.flatten(), grads, opt_state, config.hyper)
        except OptimError as e:
            raise TrainError(f"optimizer failure at iteration {i}: {e}") from e
        params = gen.GeneratorParams.from_flat(config.generator, flat)
        state = result.new_state
        losses.append(result.report)

        if i % config.eval_every == 0 or i == config.iterations:
            eval_fwd = gen.forward(params, state, eval_noise, mode="eval")
            report = ens.evaluate_population(
                eval_fwd.population, data.validation, bag_mode=config.bag_mode
            )
            evals.append(EvalRecord(iteration=i, report=report))
            if report.ensemble_mse < best_mse:
                best_mse = report.ensemble_mse
                best_iteration = i
                best_snapshot = _generator_payload(
                    config, i, params, state, opt_state, streams, eval_noise,
                    best_iteration, best_mse, None,
                )
        wall_clock.append(time.monotonic() - t0)

    final = _generator_payload(
        config, config.iterations, params, state, opt_state, streams, eval_noise,
        best_iteration, best_mse, best_snapshot,
    )
    return RunArtifacts(
        label="proposed",
        config=config_to_flat(config),
        losses=losses,
        evals=evals,
        best_iteration=best_iteration,
        best_validation_mse=best_mse,
        final_checkpoint=final,
        best_checkpoint=best_snapshot if best_snapshot is not None else final,
        evaluations_used=config.generator.population * config.iterations,
        wall_clock=wall_clock,
        start_iteration=start,
    )


# --------------------------------------------------------------------------
# baselines

def _baseline_payload(config: TrainConfig, kind: OptimizerKind, iteration: int,
                      logits: np.ndarray, best_iteration: int, best_mse: float,
                      best_logits: np.ndarray) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "kind": "baseline",
        "optimizer": kind.value,
        "config": config_to_flat(config),
        "iteration": iteration,
        "logits": logits.tolist(),
        "best": {
            "iteration": best_iteration,
            "validation_mse": best_mse,
            "logits": best_logits.tolist(),
        },
    }


def _full_panel_window(panel: ReturnPanel) -> WindowSample:
    return WindowSample(
        start=0,
        length=panel.n_rows,
        returns=panel.returns,
        index_returns=panel.index_returns,
    )


def _validate_logits(logits: np.ndarray, panel: ReturnPanel, bag_mode: str) -> ens.EvalReport:
    weights = gen.sparsemax(logits)
    population = gen.Population(
        logits=logits[None, :].copy(), weights=weights[None, :], mode="eval"
    )
    return ens.evaluate_population(population, panel, bag_mode=bag_mode)


def train_baseline(kind: OptimizerKind, config: TrainConfig, data: SplitPanels) -> RunArtifacts:
    """Directly optimise one logits vector on the full training panel.

    No windows, no corruption and no diversity term: the baseline sees the
    plain tracking MSE of its softmax weights.  Validation applies
    sparsemax to the current logits, mirroring the generator's evaluation
    head.  CMA-ES treats the same training loss as a black box with the
    generator's population size, keeping evaluation budgets comparable.
    """
    kind = OptimizerKind(kind)
    n = data.train.n_assets
    window = _full_panel_window(data.train)
    losses: list[obj.LossReport] = []
    evals: list[EvalRecord] = []
    wall_clock: list[float] = []
    best_mse = float("inf")
    best_iteration = 0

    if kind is OptimizerKind.CMAES:
        returns = data.train.returns
        index = data.train.index_returns

        def objective(v: np.ndarray) -> float:
            shifted = v - v.max()
            e = np.exp(shifted)
            w = e / e.sum()
            deviation = returns @ w - index
            return float(np.mean(deviation * deviation))

        seed = int(np.random.SeedSequence(config.seed).generate_state(1)[0])
        t0 = time.monotonic()
        result = cmaes_run(
            objective,
            dim=n,
            popsize=config.generator.population,
            iterations=config.iterations,
            seed=seed,
            sigma0=config.hyper.cmaes_sigma0,
            x0=np.zeros(n),
        )
        total_elapsed = time.monotonic() - t0
        best_logits = np.zeros(n)
        for record in result.generations:
            losses.append(
                obj.LossReport(
                    tracking_mse=record.best_f,
                    max_corr=0.0,
                    total=record.best_f,
                    window_start=0,
                )
            )
            if record.generation % config.eval_every == 0 or record.generation == config.iterations:
                report = _validate_logits(record.best_x, data.validation, config.bag_mode)
                evals.append(EvalRecord(iteration=record.generation, report=report))
                if report.ensemble_mse < best_mse:
                    best_mse = report.ensemble_mse
                    best_iteration = record.generation
                    best_logits = record.best_x.copy()
            wall_clock.append(total_elapsed / max(1, len(result.generations)))
        final_logits = result.generations[-1].best_x
        payload = _baseline_payload(
            config, kind, config.iterations, final_logits, best_iteration, best_mse, best_logits
        )
        best_payload = _baseline_payload(
            config, kind, best_iteration, best_logits, best_iteration, best_mse, best_logits
        )
        return RunArtifacts(
            label=kind.value,
            config=config_to_flat(config),
            losses=losses,
            evals=evals,
            best_iteration=best_iteration,
            best_validation_mse=best_mse,
            final_checkpoint=payload,
            best_checkpoint=best_payload,
            evaluations_used=result.evaluations,
            wall_clock=wall_clock,
            start_iteration=0,
        )

    logits = np.zeros(n)
    best_logits = logits.copy()
    opt_state = init_state(kind, n, config.hyper)
    for i in range(1, config.iterations + 1):
        t0 = time.monotonic()
        leaf = dc.Node(logits.copy(), op="logits")
        weights = dc.softmax(dc.reshape(leaf, (1, n)))
        series = obj.portfolio_returns(weights, window)
        loss = obj.tracking_loss(series, window.index_returns)
        dc.backward(loss)
        grads = leaf.grad if leaf.grad is not None else np.zeros(n)
        try:
            logits, opt_state = step(kind, logits, grads, opt_state, config.hyper)
        except OptimError as e:
            raise TrainError(f"optimizer failure at iteration {i}: {e}") from e
        losses.append(
            obj.LossReport(
                tracking_mse=float(loss.value), max_corr=0.0,
                total=float(loss.value), window_start=0,
            )
        )
        if i % config.eval_every == 0 or i == config.iterations:
            report = _validate_logits(logits, data.validation, config.bag_mode)
            evals.append(EvalRecord(iteration=i, report=report))
            if report.ensemble_mse < best_mse:
                best_mse = report.ensemble_mse
                best_iteration = i
                best_logits = logits.copy()
        wall_clock.append(time.monotonic() - t0)

    payload = _baseline_payload(
        config, kind, config.iterations, logits, best_iteration, best_mse, best_logits
    )
    best_payload = _baseline_payload(
        config, kind, best_iteration, best_logits, best_iteration, best_mse, best_logits
    )
    return RunArtifacts(
        label=kind.value,
        config=config_to_flat(config),
        losses=losses,
        evals=evals,
        best_iteration=best_iteration,
        best_validation_mse=best_mse,
        final_checkpoint=payload,
        best_checkpoint=best_payload,
        evaluations_used=config.iterations,
        wall_clock=wall_clock,
        start_iteration=0,
    )


# --------------------------------------------------------------------------
# comparison harness

def _parallelism() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise TrainError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, value)


def compare_optimizers(
    config: TrainConfig,
    data: SplitPanels,
    kinds: tuple[OptimizerKind, ...] | list[OptimizerKind] = GRADIENT_KINDS + (OptimizerKind.CMAES,),
    baseline_hyper: Hyper = BASELINE_HYPER,
) -> ComparisonResult:
    """Run every requested baseline plus the proposed method.

    Each run gets its own seed derived from the master seed and its task
    index, so results do not depend on scheduling.  A failed run is
    recorded as failed with its error message, never dropped.  Rows are
    sorted by best validation MSE, failures last.
    """
    ordered: list[OptimizerKind] = []
    for kind in kinds:
        kind = OptimizerKind(kind)
        if kind not in ordered:
            ordered.append(kind)

    tasks: list[tuple[str, OptimizerKind | None, int]] = []
    for idx, kind in enumerate(ordered):
        run_seed = int(np.random.SeedSequence([config.seed, idx]).generate_state(1)[0])
        tasks.append((kind.value, kind, run_seed))
    proposed_seed = int(
        np.random.SeedSequence([config.seed, len(ordered)]).generate_state(1)[0]
    )
    tasks.append(("proposed", None, proposed_seed))

    def run_one(task) -> tuple[str, int, RunArtifacts | None, str]:
        label, kind, run_seed = task
        try:
            if kind is None:
                artifacts = train_generator(replace(config, seed=run_seed), data)
            else:
                baseline_config = replace(
                    config,
                    seed=run_seed,
                    hyper=baseline_hyper,
                    optimizer=OptimizerKind.ADAMW if kind is OptimizerKind.CMAES else kind,
                )
                artifacts = train_baseline(kind, baseline_config, data)
            return label, run_seed, artifacts, ""
        except Exception as e:  # a failed run must be recorded, not raised
            return label, run_seed, None, f"{type(e).__name__}: {e}"

    workers = _parallelism()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, tasks))
    else:
        outcomes = [run_one(task) for task in tasks]

    rows: list[ComparisonRow] = []
    artifacts: dict[str, RunArtifacts] = {}
    for label, run_seed, art, error in outcomes:
        if art is None:
            rows.append(
                ComparisonRow(
                    optimizer=label, status="failed",
                    best_validation_mse=float("nan"),
                    evaluations_used=0, seed=run_seed, error=error,
                )
            )
        else:
            artifacts[label] = art
            rows.append(
                ComparisonRow(
                    optimizer=label, status="ok",
                    best_validation_mse=art.best_validation_mse,
                    evaluations_used=art.evaluations_used, seed=run_seed,
                )
            )
    rows.sort(key=lambda r: (r.status != "ok", r.best_validation_mse if r.status == "ok" else 0.0, r.optimizer))
    return ComparisonResult(rows=rows, artifacts=artifacts)


# --------------------------------------------------------------------------
# on-disk artifacts

def format_value(value) -> str:
    """Render one configuration or CSV value deterministically."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(flat: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={format_value(flat[key])}" for key in sorted(flat)]
    path.write_text("\n".join(lines) + "\n")


def save_run(artifacts: RunArtifacts, out_dir: str | Path) -> None:
    """Write the run directory: config, curves, checkpoints, timings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(artifacts.config, out / RUN_CONFIG)

    loss_lines = ["iteration,tracking_mse,max_corr,total"]
    for offset, report in enumerate(artifacts.losses, start=artifacts.start_iteration + 1):
        loss_lines.append(
            f"{offset},{format_value(report.tracking_mse)},"
            f"{format_value(report.max_corr)},{format_value(report.total)}"
        )
    (out / LOSS_CSV).write_text("\n".join(loss_lines) + "\n")

    eval_lines = ["iteration,ensemble_mse,mean_sub_mse,max_corr"]
    for record in artifacts.evals:
        r = record.report
        eval_lines.append(
            f"{record.iteration},{format_value(r.ensemble_mse)},"
            f"{format_value(r.mean_sub_mse)},{format_value(r.max_corr)}"
        )
    (out / EVAL_CSV).write_text("\n".join(eval_lines) + "\n")

    timing_lines = ["iteration,seconds"]
    for offset, seconds in enumerate(artifacts.wall_clock, start=artifacts.start_iteration + 1):
        timing_lines.append(f"{offset},{format_value(float(seconds))}")
    (out / TIMING_CSV).write_text("\n".join(timing_lines) + "\n")

    save_checkpoint(artifacts.final_checkpoint, out / CHECKPOINT_FINAL)
    save_checkpoint(artifacts.best_checkpoint, out / CHECKPOINT_BEST)


def save_comparison(result: ComparisonResult, out_dir: str | Path) -> None:
    """Write table.csv (plus failures.csv when needed) and per-run artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["optimizer,best_validation_mse,evaluations_used,seed"]
    for row in result.rows:
        lines.append(
            f"{row.optimizer},{format_value(row.best_validation_mse)},"
            f"{row.evaluations_used},{row.seed}"
        )
    (out / TABLE_CSV).write_text("\n".join(lines) + "\n")

    failures = [row for row in result.rows if row.status != "ok"]
    if failures:
        fail_lines = ["optimizer,error"]
        for row in failures:
            fail_lines.append(f"{row.optimizer},{row.error.replace(',', ';')}")
        (out / FAILURES_CSV).write_text("\n".join(fail_lines) + "\n")

    for label, art in result.artifacts.items():
        save_run(art, out / "runs" / label)
