"""Run directories: one training run = config snapshot, metrics, APQ log, checkpoint.

Layout::

    run/
      config.ini        full experiment config (replays the run)
      metrics.csv       epoch, train_loss, test_rmse
      apq_log.csv       epoch, batch, layer, object, beta, alpha, scheme
      checkpoint.npz    best parameters + quantisation state + normaliser
      summary.json      headline numbers
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .analysis import model_size, total_overhead
from .config import ExperimentConfig
from .model import TransformerForecaster
from .training import MinMaxNormalizer, TrainingHistory, evaluate_rmse, train_qat


def build_model(cfg: ExperimentConfig) -> TransformerForecaster:
    model = TransformerForecaster(cfg.model, cfg.quant.build(), seed=cfg.training.seed,
                                  dtype=np.dtype(cfg.dtype).type,
                                  ema_momentum=cfg.quant.ema_momentum,
                                  cover_batch=cfg.quant.cover_batch)
    if model.qconfig is not None:
        model.qconfig.apq_threshold = cfg.training.apq_threshold
    return model


def save_checkpoint(path, model: TransformerForecaster, normalizer: MinMaxNormalizer | None) -> None:
    state = model.state_dict()
    arrays = {f"param/{k}": v for k, v in state["params"].items()}
    meta = {"quant": state["quant"], "normalizer": normalizer.to_dict() if normalizer else None}
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path, model: TransformerForecaster) -> MinMaxNormalizer | None:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        params = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("param/")}
    model.load_state_dict({"params": params, "quant": meta["quant"]})
    return MinMaxNormalizer.from_dict(meta["normalizer"]) if meta["normalizer"] else None


def write_history(run_dir: Path, hist: TrainingHistory) -> None:
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "test_rmse"])
        for i, loss in enumerate(hist.loss):
            w.writerow([i, repr(loss), repr(hist.test_rmse[i]) if i < len(hist.test_rmse) else ""])
    with open(run_dir / "apq_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "batch", "layer", "object", "beta", "alpha", "scheme"])
        for d in hist.decisions:
            w.writerow([d.epoch, d.batch, d.layer, d.obj, repr(d.beta), repr(d.alpha), d.scheme])


def train_run(cfg: ExperimentConfig, train, test, normalizer, run_dir=None,
              eval_every_epoch: bool = False) -> dict:
    """Train one configuration; write the run directory if ``run_dir`` is given."""
    model = build_model(cfg)
    hist = train_qat(model, train.X, train.y, cfg.training,
                     X_test=test.X if eval_every_epoch else None,
                     y_test=test.y if eval_every_epoch else None, normalizer=normalizer)
    rmse = evaluate_rmse(model, test.X, test.y, normalizer) if len(test) else float("nan")
    resolved = model.resolved_configuration()
    summary = {
        "preset": cfg.quant.preset,
        "seed": cfg.training.seed,
        "epochs_run": len(hist.loss),
        "best_epoch": hist.best_epoch,
        "best_train_loss": hist.best_loss,
        "test_rmse": rmse,
        "overhead": total_overhead(cfg.model, resolved).total,
        "packed_kb": model_size(cfg.model, model.qconfig).packed_kb,
        "resolved_schemes": {lid: {o: resolved[lid][o].policy.value
                                   for o in ("inputs", "outputs", "weights", "biases")
                                   if resolved[lid][o].enabled}
                             for lid in resolved.layers} if model.qconfig else {},
    }
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(run_dir / "config.ini")
        write_history(run_dir, hist)
        save_checkpoint(run_dir / "checkpoint.npz", model, normalizer)
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"model": model, "history": hist, "summary": summary}


def load_run(run_dir) -> tuple[ExperimentConfig, TransformerForecaster, MinMaxNormalizer | None]:
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.ini")
    model = build_model(cfg)
    norm = load_checkpoint(run_dir / "checkpoint.npz", model)
    return cfg, model, norm

