"""Metrics, ablation registry and the multi-seed experiment runner."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .data import (
    SeriesFrame,
    corrupt,
    load_csv,
    make_windows,
    split_chronological,
    standardize,
    synth_generate,
)
from .engine import ConfigError, DimensionError
from .model import ModelConfig, ModelParams, init_params, predict
from .training import LossConfig, TrainReport, fit

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- metrics


def _check(Y, Yhat) -> tuple[np.ndarray, np.ndarray]:
    Y, Yhat = np.asarray(Y, dtype=np.float64), np.asarray(Yhat, dtype=np.float64)
    if Y.shape != Yhat.shape:
        raise DimensionError(f"metric: target {Y.shape} and forecast {Yhat.shape} differ")
    return Y, Yhat


def mse(Y, Yhat) -> float:
    Y, Yhat = _check(Y, Yhat)
    return float(np.mean((Y - Yhat) ** 2))


def mae(Y, Yhat) -> float:
    Y, Yhat = _check(Y, Yhat)
    return float(np.mean(np.abs(Y - Yhat)))


@dataclass
class MetricReport:
    horizon: int
    ablation: str = "full"
    target_channel: Optional[str] = None
    seeds: list = field(default_factory=list)  # one dict per seed

    def ok_rows(self) -> list:
        return [r for r in self.seeds if r.get("status") == "ok"]

    def aggregate(self) -> dict:
        rows = self.ok_rows()
        out: dict = {"n_ok": len(rows), "n_failed": len(self.seeds) - len(rows)}
        keys = ["mse", "mae"] + (["target_mse", "target_mae"] if self.target_channel else [])
        for k in keys:
            vals = np.array([r[k] for r in rows], dtype=np.float64)
            if vals.size:
                out[f"{k}_mean"] = float(vals.mean())
                out[f"{k}_median"] = float(np.median(vals))
                if vals.size >= 2:
                    out[f"{k}_std"] = float(vals.std())
        return out

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "ablation": self.ablation,
            "target_channel": self.target_channel,
            "seeds": self.seeds,
            "aggregate": self.aggregate(),
        }


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    batch,
    names: Optional[list] = None,
    target_channel: Optional[str] = None,
    batch_size: int = 256,
    inverse=None,
) -> tuple[dict, np.ndarray]:
    """Eval-mode metrics over every window; returns (metrics, predictions B×H×N).

    ``inverse`` optionally maps standardized values back to raw units before
    the metrics are reduced.
    """
    target = None
    if target_channel is not None:
        names = names or [f"ch{i}" for i in range(config.channels)]
        if target_channel not in names:
            raise ConfigError(f"unknown target channel {target_channel!r}; channels are {names}")
        target = names.index(target_channel)
    preds = []
    for lo in range(0, len(batch), batch_size):
        hi = lo + batch_size
        preds.append(predict(params, config, batch.X[lo:hi], batch.tau_end[lo:hi]))
    Yhat = np.concatenate(preds).astype(np.float64)
    Y = batch.Y.astype(np.float64)
    if inverse is not None:
        Y, Yhat = inverse(Y), inverse(Yhat)
    metrics = {"mse": mse(Y, Yhat), "mae": mae(Y, Yhat)}
    if target is not None:
        metrics["target_mse"] = mse(Y[..., target], Yhat[..., target])
        metrics["target_mae"] = mae(Y[..., target], Yhat[..., target])
    return metrics, Yhat


# ------------------------------------------------------------------ ablation


def _model(**kw):
    return lambda m, l: (dataclasses.replace(m, **kw), l)


def _loss(mode):
    return lambda m, l: (m, dataclasses.replace(l, mode=mode))


ABLATIONS = {
    "full": lambda m, l: (m, l),
    "act_tanh": _model(activation="tanh"),
    "act_sigmoid": _model(activation="sigmoid"),
    "act_relu": _model(activation="relu"),
    "act_gelu": _model(activation="gelu"),
    "no_EA": _model(use_amplitude=False),
    "no_EP": _model(use_phase=False),
    "sinusoidal": _model(sinusoidal_carriers=True),
    "no_modulator": _model(use_modulator=False),
    "loss_mse": _loss("mse"),
    "loss_mae": _loss("mae"),
}


def apply_ablation(config: ModelConfig, loss_cfg: LossConfig, tag: str) -> tuple[ModelConfig, LossConfig]:
    try:
        fn = ABLATIONS[tag]
    except KeyError:
        raise ConfigError(f"unknown ablation tag {tag!r}; registered: {', '.join(ABLATIONS)}") from None
    return fn(config, loss_cfg)


# -------------------------------------------------------------------- runner


@dataclass
class PreparedData:
    frame: SeriesFrame
    train: object
    val: object
    test: object
    stats: object = None


def load_frame(cfg: ExperimentConfig) -> SeriesFrame:
    if cfg.csv:
        return load_csv(cfg.csv)
    return synth_generate(cfg.synth)


def prepare_data(cfg: ExperimentConfig, frame: Optional[SeriesFrame] = None) -> PreparedData:
    frame = frame if frame is not None else load_frame(cfg)
    L, H = cfg.model.lookback, cfg.model.horizon
    if cfg.model.cycle_len > frame.T:
        raise ConfigError(f"cycle length {cfg.model.cycle_len} exceeds series length {frame.T}")
    if cfg.target_channel is not None:
        frame.channel(cfg.target_channel)
    splits = split_chronological(frame, cfg.split, L, H)
    stats = None
    if cfg.standardize:
        frame, stats = standardize(frame, (0, splits.targets[0][1]))
    train, val, test = (make_windows(frame, r, L, H) for r in splits.rows)
    return PreparedData(frame=frame, train=train, val=val, test=test, stats=stats)


def resolved_configs(cfg: ExperimentConfig, n_channels: int) -> tuple[ModelConfig, LossConfig]:
    model = dataclasses.replace(cfg.model, channels=n_channels)
    return apply_ablation(model, cfg.loss, cfg.ablation)


def write_predictions(path, batch, Yhat: np.ndarray, names: list) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "step", "channel", "y", "yhat"])
        B, H, N = Yhat.shape
        for b in range(B):
            for h in range(H):
                for n in range(N):
                    w.writerow([b, h, names[n], repr(float(batch.Y[b, h, n])), repr(float(Yhat[b, h, n]))])


def read_predictions(path) -> tuple[np.ndarray, np.ndarray, list]:
    """Inverse of ``write_predictions``: (Y, Yhat, channel names)."""
    rows = list(csv.DictReader(Path(path).open(newline="")))
    names = list(dict.fromkeys(r["channel"] for r in rows))
    B = max(int(r["window"]) for r in rows) + 1
    H = max(int(r["step"]) for r in rows) + 1
    Y = np.zeros((B, H, len(names)))
    Yhat = np.zeros_like(Y)
    for r in rows:
        idx = (int(r["window"]), int(r["step"]), names.index(r["channel"]))
        Y[idx] = float(r["y"])
        Yhat[idx] = float(r["yhat"])
    return Y, Yhat, names


def write_train_report(path, report: TrainReport) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "best"])
        for i, (tl, vl) in enumerate(zip(report.train_loss, report.val_loss), start=1):
            w.writerow([i, repr(tl), repr(vl), int(i == report.best_epoch)])


def write_matrix(path, matrix: np.ndarray) -> None:
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), delimiter=",", fmt="%.9g")


def run_seed(cfg: ExperimentConfig, seed: int, prepared: Optional[PreparedData] = None, write: bool = True) -> dict:
    """Train and evaluate one seed; artifacts go to ``<output_dir>/seed_<seed>/``."""
    data = prepared or prepare_data(cfg)
    model_cfg, loss_cfg = resolved_configs(cfg, data.frame.N)
    train, val, test = data.train, data.val, data.test
    if cfg.corrupt.p > 0:
        train = corrupt(train, cfg.corrupt, np.random.default_rng([seed, 3]))
        if cfg.corrupt.apply_to_test:
            test = corrupt(test, cfg.corrupt, np.random.default_rng([seed, 4]))
    params = init_params(model_cfg, seed)
    report = fit(params, model_cfg, train, val, loss_cfg, cfg.optim, seed)
    inverse = data.stats.inverse if (cfg.raw_units and data.stats is not None) else None
    metrics, Yhat = evaluate(params, model_cfg, test, data.frame.names, cfg.target_channel, inverse=inverse)
    row = {"seed": seed, "status": "ok", "best_epoch": report.best_epoch, "epochs": len(report.val_loss)}
    row.update(metrics)
    row["best_val_loss"] = report.best_val_loss
    if write:
        out = Path(cfg.output_dir)
        sdir = out / f"seed_{seed}"
        sdir.mkdir(parents=True, exist_ok=True)
        meta = {
            "seed": seed,
            "best_epoch": report.best_epoch,
            "ablation": cfg.ablation,
            "split": list(cfg.split.fractions) if cfg.split.counts is None else None,
            "split_counts": list(cfg.split.counts) if cfg.split.counts is not None else None,
            "standardize": cfg.standardize,
            "channels": data.frame.names,
        }
        save_checkpoint(sdir / "checkpoint.pamn", params, model_cfg, meta)
        write_train_report(sdir / "train_report.csv", report)
        if params.carriers.phase is not None:
            write_matrix(sdir / "carriers_phase.csv", params.carriers.phase.data)
        if params.carriers.amplitude is not None:
            write_matrix(sdir / "carriers_amplitude.csv", params.carriers.amplitude.data)
        write_predictions(out / f"predictions_{seed}.csv", test, Yhat, data.frame.names)
    return row


def _run_seed_safe(args) -> dict:
    cfg, seed, write = args
    try:
        return run_seed(cfg, seed, write=write)
    except Exception as exc:  # one seed failing must not sink the others
        log.exception("seed %s failed", seed)
        return {"seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("PAMNET_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> MetricReport:
    """Fit and evaluate every seed, then write metrics.json (when ``write``)."""
    if cfg.ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation tag {cfg.ablation!r}")
    if not cfg.seeds:
        raise ConfigError("no seeds requested")
    jobs = [(cfg, s, write) for s in cfg.seeds]
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_seed_safe, jobs))
    else:
        rows = [_run_seed_safe(j) for j in jobs]
    report = MetricReport(horizon=cfg.model.horizon, ablation=cfg.ablation, target_channel=cfg.target_channel, seeds=rows)
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return report


def run_ablation(cfg: ExperimentConfig, tags: list, write: bool = True) -> dict:
    """One experiment per tag (sub-directory per tag); returns tag -> MetricReport."""
    results = {}
    for tag in tags:
        sub = dataclasses.replace(cfg, ablation=tag, output_dir=str(Path(cfg.output_dir) / tag))
        results[tag] = run_experiment(sub, write=write)
    if write:
        write_comparison(Path(cfg.output_dir) / "ablation.csv", results)
    return results


def write_comparison(path, results: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cols = ["mse_mean", "mse_median", "mse_std", "mae_mean", "mae_median", "mae_std", "n_ok"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tag"] + cols)
        for tag, rep in results.items():
            agg = rep.aggregate()
            w.writerow([tag] + [agg.get(c, "") for c in cols])
