"""Artifact-producing pipeline steps shared by the CLI and the acceptance tests.

Every step reads and writes under ``cfg.workdir``::

    data/                      manifest.json + <split>.f64
    fp.ckpt                    pretrained full-precision weights
    curves.json, curves.csv    noise-score curves
    calib/<bits>_s<seed>.ckpt  frozen quantization scales
    tune/<bits>_<objective>_s<seed>/{tuned.ckpt, metrics.json, log.csv}
    ablate/{results.csv, results.json, summary.csv}  metric tables
    ablate/timing.json         wall times, kept apart so reruns compare byte for byte
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .metrics import f1_dataset, score_report
from .model import LaneNet, head_slice, predict_heads, pretrain as pretrain_net
from .postprocess import Lane, decode
from .ptq import FocusConfig, TuneConfig, calibrate as calibrate_net, tune as tune_net
from .quant import BitConfig
from .scenes import SceneParams, generate, load_images, load_split, save_dataset
from .sensitivity import SelectionConfig, build_curves, load_curves, save_curves

logger = logging.getLogger(__name__)

WORKERS_ENV = "LANEQUANT_WORKERS"


class MissingArtifact(FileNotFoundError):
    pass


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact {path} (run `{hint}` first)")
    return path


def _stamp(cfg: ExperimentConfig, **extra) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, **extra}


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], header: list[str] | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    header = header or (list(rows[0]) if rows else [])
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


# ---------------------------------------------------------------- paths


def workdir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.workdir)


def data_dir(cfg) -> Path:
    return workdir(cfg) / "data"


def fp_path(cfg) -> Path:
    return workdir(cfg) / "fp.ckpt"


def curves_path(cfg) -> Path:
    return workdir(cfg) / "curves.json"


def calib_path(cfg, bits: str | None = None, seed: int | None = None) -> Path:
    bits = bits or cfg.quant.bits
    return workdir(cfg) / "calib" / f"{bits}_s{cfg.seed if seed is None else seed}.ckpt"


def tune_dir(cfg, bits=None, objective=None, seed=None) -> Path:
    name = f"{bits or cfg.quant.bits}_{objective or cfg.focus.objective}_s{cfg.seed if seed is None else seed}"
    return workdir(cfg) / "tune" / name


# ---------------------------------------------------------------- helpers


def scene_params(cfg: ExperimentConfig) -> SceneParams:
    d = cfg.data
    return SceneParams(min_lanes=d.min_lanes, max_lanes=d.max_lanes, noise_sigma=d.noise_sigma,
                       curvature=d.curvature)


def calibration_indices(cfg: ExperimentConfig, seed: int) -> np.ndarray:
    """The seed's unlabeled calibration subset of the training split (sorted indices)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 512]))
    return np.sort(rng.choice(cfg.data.train, cfg.quant.calib_size, replace=False))


def calibration_images(cfg: ExperimentConfig, seed: int) -> np.ndarray:
    _require(data_dir(cfg) / "manifest.json", "gen-data")
    return load_images(data_dir(cfg), "train")[calibration_indices(cfg, seed)]


def load_net(path: Path, hint: str = "pretrain") -> tuple[LaneNet, dict, dict]:
    ckpt = load_checkpoint(_require(path, hint))
    return LaneNet().load_state_dict(ckpt.tensors), ckpt.quant, ckpt.meta


def decode_all(heads: dict[str, np.ndarray], cfg: ExperimentConfig) -> list[list[Lane]]:
    m = cfg.model
    return [decode(head_slice(heads, i), m.threshold, LaneNet.stride, m.cluster_radius)
            for i in range(len(next(iter(heads.values()))))]


def evaluate(net: LaneNet, quant, images: np.ndarray, lanes, cfg: ExperimentConfig) -> dict:
    preds = decode_all(predict_heads(net, images, quant or None), cfg)
    return f1_dataset(preds, lanes)


def _val(cfg):
    _require(data_dir(cfg) / "manifest.json", "gen-data")
    return load_split(data_dir(cfg), "val")


def _limit_threads():
    # one BLAS thread per process keeps reductions identical across worker counts
    threadpool_limits(1)


def worker_count(tasks: int) -> int:
    cap = os.environ.get(WORKERS_ENV)
    n = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n, tasks))


def _timed(fn, *args):
    start = time.perf_counter()
    return fn(*args), time.perf_counter() - start


def _map(fn, args: list, workers: int, seconds: list | None = None) -> list:
    """``fn(*a)`` for each ``a`` in order; per-call wall times go to ``seconds`` when given."""
    if workers <= 1:
        with threadpool_limits(1):
            out = [_timed(fn, *a) for a in args]
    else:
        with ProcessPoolExecutor(workers, initializer=_limit_threads) as ex:
            futures = [ex.submit(_timed, fn, *a) for a in args]
            out = [f.result() for f in futures]
    if seconds is not None:
        seconds.extend(t for _, t in out)
    return [r for r, _ in out]


# ---------------------------------------------------------------- steps


def gen_data(cfg: ExperimentConfig) -> Path:
    p = scene_params(cfg)
    splits = {"train": generate(cfg.seed, cfg.data.train, p, "train"),
              "val": generate(cfg.seed, cfg.data.val, p, "val")}
    return save_dataset(data_dir(cfg), splits, cfg.seed, p, _stamp(cfg))


def pretrain(cfg: ExperimentConfig) -> dict:
    _require(data_dir(cfg) / "manifest.json", "gen-data")
    train = load_split(data_dir(cfg), "train")
    m = cfg.model
    net = LaneNet(cfg.seed)
    history = pretrain_net(net, train.images, train.targets(), m.epochs, m.lr, m.batch_size, cfg.seed,
                           m.pos_weight, m.root_weight)
    val = _val(cfg)
    report = _stamp(cfg, fp_f1=evaluate(net, None, val.images, val.lanes, cfg)["f1"],
                    final_loss=history[-1] if history else None)
    save_checkpoint(fp_path(cfg), net.state_dict(), None, report)
    _write_json(workdir(cfg) / "pretrain.json", report)
    return report


def _selection(cfg: ExperimentConfig) -> SelectionConfig:
    s = cfg.selection
    return SelectionConfig(s.k, s.refresh_interval, tuple(s.noise_levels), s.reruns, s.curve_images)


def _curve_task(state, images, head, sel, seed):
    net = LaneNet().load_state_dict(state)
    fp = predict_heads(net, images)
    return build_curves(fp, sel, seed, heads=(head,))[head]


def sensitivity(cfg: ExperimentConfig, out: Path | None = None, workers: int | None = None,
                seconds: list | None = None) -> dict:
    """Build and save the noise-score curves from the FP net on the first calibration images."""
    net, _, _ = load_net(fp_path(cfg))
    sel = _selection(cfg)
    images = calibration_images(cfg, cfg.seed)[:sel.curve_images]
    heads = ("local_off", "root_off")
    results = _map(_curve_task, [(net.state_dict(), images, h, sel, cfg.seed) for h in heads],
                   workers or worker_count(len(heads)), seconds)
    curves = dict(zip(heads, results))
    out = out or curves_path(cfg)
    save_curves(out, curves, _stamp(cfg))
    rows = [{"head_id": h, "sigma": s, "mean": _fmt(m), "stderr": _fmt(e)}
            for h, c in curves.items() for (s, m), e in zip(c.nodes, c.stderr)]
    _write_csv(out.with_suffix(".csv"), rows, ["head_id", "sigma", "mean", "stderr"])
    return curves


def calibrate(cfg: ExperimentConfig, out: Path | None = None) -> dict:
    net, _, _ = load_net(fp_path(cfg))
    bits = cfg.bits
    table = calibrate_net(net, calibration_images(cfg, cfg.seed), bits, cfg.tune.batch_size, cfg.quant.momentum)
    val = _val(cfg)
    report = _stamp(cfg, bits=bits.name, calib_f1=evaluate(net, table, val.images, val.lanes, cfg)["f1"])
    save_checkpoint(out or calib_path(cfg), net.state_dict(), table, report)
    return report


def tune(cfg: ExperimentConfig, out: Path | None = None, calib: Path | None = None,
         curves: Path | None = None) -> dict:
    """Tune from the calibrated checkpoint; writes ``tuned.ckpt``, ``metrics.json`` and ``log.csv``."""
    out = out or tune_dir(cfg)
    net, _, fp_meta = load_net(fp_path(cfg))
    calib = calib or calib_path(cfg)
    _, table, calib_meta = load_net(calib, "calibrate")
    focus = FocusConfig(cfg.focus.lam, cfg.focus.objective)
    curve_set = None
    if focus.objective == "focus_select":
        curve_set = load_curves(_require(curves or curves_path(cfg), "sensitivity"))
    images = calibration_images(cfg, cfg.seed)
    t = cfg.tune
    tcfg = TuneConfig(t.iterations, t.lr, t.batch_size, cfg.quant.calib_size, cfg.bits, _selection(cfg),
                      t.log_every, cfg.seed)
    tuned, log = tune_net(net, table, images, tcfg, focus, curve_set)
    val = _val(cfg)
    metrics = {"fp_f1": fp_meta["fp_f1"], "calib_f1": calib_meta["calib_f1"],
               "tuned_f1": evaluate(tuned, table, val.images, val.lanes, cfg)["f1"],
               "objective": focus.objective, "bits": cfg.bits.name, "seed": cfg.seed,
               "config_hash": cfg.hash()}
    save_checkpoint(out / "tuned.ckpt", tuned.state_dict(), table, _stamp(cfg, **metrics))
    _write_json(out / "metrics.json", metrics)
    rows = [{**{k: _fmt(v) for k, v in r.items()}, "config_hash": cfg.hash(), "seed": cfg.seed} for r in log.rows]
    _write_csv(out / "log.csv", rows,
               ["iteration", "loss", "sigma_local_off", "sigma_root_off", "active", "config_hash", "seed"])
    return metrics


def evaluate_checkpoint(cfg: ExperimentConfig, ckpt: Path | None = None, out: Path | None = None) -> dict:
    """F1 of a (possibly quantized) checkpoint on the val split; writes predictions as lanes JSON."""
    ckpt = ckpt or fp_path(cfg)
    net, table, meta = load_net(ckpt)
    val = _val(cfg)
    preds = decode_all(predict_heads(net, val.images, table or None), cfg)
    report = {**f1_dataset(preds, val.lanes), "checkpoint": str(ckpt), **_stamp(cfg)}
    out = out or ckpt.with_suffix(".eval.json")
    _write_json(out, report)
    _write_json(out.with_name(out.stem + ".lanes.json"),
                {**_stamp(cfg), "images": [[l.to_list() for l in p] for p in preds]})
    return report


def read_lanes(path: Path) -> list[Lane]:
    """A lanes JSON file: ``[[[x, y], ...], ...]`` or ``{"lanes": [...]}``."""
    data = json.loads(_require(Path(path), "eval").read_text())
    if isinstance(data, dict):
        data = data["lanes"]
    return [Lane.from_list(l) for l in data]


def score_files(a: Path, b: Path, cfg: ExperimentConfig) -> dict:
    return {**score_report(read_lanes(a), read_lanes(b)).to_dict(), **_stamp(cfg)}


# ---------------------------------------------------------------- ablation


def _calib_cell(cfg: ExperimentConfig, bits: str, seed: int) -> dict:
    cell = replace(cfg, seed=seed, quant=replace(cfg.quant, bits=bits))
    return calibrate(cell, calib_path(cfg, bits, seed))


def _tune_cell(cfg: ExperimentConfig, bits: str, objective: str, seed: int) -> dict:
    cell = replace(cfg, seed=seed, quant=replace(cfg.quant, bits=bits),
                   focus=replace(cfg.focus, objective=objective))
    return tune(cell, tune_dir(cfg, bits, objective, seed), calib_path(cfg, bits, seed), curves_path(cfg))


def ablate(cfg: ExperimentConfig, workers: int | None = None) -> dict:
    """Every (bits, objective, seed) cell; per-cell reports plus a results table and per-group means."""
    _require(fp_path(cfg), "pretrain")
    started = time.perf_counter()
    a = cfg.ablate
    times: dict[str, list[float]] = {"sensitivity": [], "calibrate": [], "tune": []}
    if "focus_select" in a.objectives:
        sensitivity(cfg, workers=workers, seconds=times["sensitivity"])
    calib_args = [(cfg, b, s) for b in a.bits for s in a.seeds]
    _map(_calib_cell, calib_args, workers or worker_count(len(calib_args)), times["calibrate"])
    tune_args = [(cfg, b, o, s) for b in a.bits for o in a.objectives for s in a.seeds]
    rows = _map(_tune_cell, tune_args, workers or worker_count(len(tune_args)), times["tune"])
    out = workdir(cfg) / "ablate"
    table = [{k: _fmt(r[k]) for k in ("bits", "objective", "seed", "fp_f1", "calib_f1", "tuned_f1")}
             for r in rows]
    for row in table:
        row["config_hash"] = cfg.hash()
    _write_csv(out / "results.csv", table)
    summary = []
    for b in a.bits:
        for o in a.objectives:
            f1 = [r["tuned_f1"] for r in rows if r["bits"] == b and r["objective"] == o]
            summary.append({"bits": b, "objective": o, "mean_f1": float(np.mean(f1)),
                            "std_f1": float(np.std(f1)), "seeds": len(f1)})
    _write_csv(out / "summary.csv", [{k: _fmt(v) for k, v in r.items()} for r in summary])
    report = {"config_hash": cfg.hash(), "seed": cfg.seed, "seeds": list(a.seeds),
              "fp_f1": rows[0]["fp_f1"] if rows else None, "cells": rows, "summary": summary}
    _write_json(out / "results.json", report)
    # wall times vary run to run, so they live apart from the metric reports
    _write_json(out / "timing.json", {"config_hash": cfg.hash(), "seed": cfg.seed,
                                      "seconds": time.perf_counter() - started, "task_seconds": times})
    return report
