"""Experiment orchestration: chains generation, preprocessing, source
training, transfer, fine-tuning, injection, scoring, and evaluation
under one output directory with a manifest of every artifact.

All randomness is funneled through named substreams of the top-level
seed so a stored config reproduces a run exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import core, evaluate, inject, preprocess, score, synthgen, train as train_mod, transfer
from .model import ModelSpec, STAutoencoder, build_model, compute_loss
from .preprocess import GraphTopology, Window, build_adjacency, make_windows

CAPTURE_RATES = (0.90, 0.95, 0.99)


def substream(seed: int, name: str) -> int:
    """Stable named substream of the top-level seed."""
    h = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------------------------------------------------
# stage helpers reused by the CLI subcommands


def gen_data(
    subdetector: str,
    n_ls: int,
    seed: int,
    out_dir: Path,
    dims: Optional[tuple[int, int, int]] = None,
    rbx_count: int = 36,
    contaminate_coords: Optional[Sequence] = None,
    run_id: int = 1,
) -> core.MapSequence:
    geometry = synthgen.make_geometry(subdetector, rbx_count=rbx_count, dims=dims)
    profile = synthgen.GenProfile(geometry=geometry, n_ls=n_ls, seed=seed, run_id=run_id)
    seq = synthgen.generate_run(profile)
    if contaminate_coords:
        coords = [core.ChannelCoord(*c) for c in contaminate_coords]
        seq = synthgen.contaminate(seq, coords)
    core.save_run(seq, out_dir)
    return seq


def preprocess_dir(
    in_dir: Path, out_dir: Path, fit_split: float = 0.8
) -> preprocess.PreprocessResult:
    """Normalize every run in a directory; calibration fitted on the
    leading fraction of each run and written alongside."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for run_id in core.list_runs(in_dir):
        seq = core.load_run(in_dir, run_id)
        result = preprocess.preprocess_sequence(seq, fit_fraction=fit_split)
        core.save_run(result.seq, out_dir)
        (out_dir / f"minmax_{run_id}.json").write_text(
            json.dumps(result.calib.to_json_dict())
        )
        medians = {
            "ls": [t.ls for t in result.median_tables],
            "medians": [t.medians.ravel().tolist() for t in result.median_tables],
            "shape": list(result.median_tables[0].medians.shape),
        }
        (out_dir / f"medians_{run_id}.json").write_text(json.dumps(medians))
        results.append(result)
    if not results:
        raise FileNotFoundError(f"no runs found under {in_dir}")
    return results[0]


def save_model_checkpoint(
    store: core.ParameterStore, spec: ModelSpec, path: Path, extras: Optional[dict] = None
) -> None:
    all_extras = {"model_spec": spec.to_json()}
    if extras:
        all_extras.update(extras)
    core.save_checkpoint(store, path, extras=all_extras)


def load_model_checkpoint(path: Path, topo: GraphTopology) -> tuple[STAutoencoder, dict]:
    store, extras = core.load_checkpoint(path)
    spec = ModelSpec.from_json(extras["model_spec"])
    model = build_model(spec, topo, seed=0)
    model.load_store(store)
    return model, extras


def write_history_csv(history: train_mod.TrainHistory, path: Path) -> None:
    rows = history.csv_rows()
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "train_mse", "train_kl", "train_l2", "val_mse", "lr"]
        )
        writer.writeheader()
        writer.writerows(rows)


def save_labels(labeled: inject.LabeledSet, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(
            {
                "kind": labeled.spec.kind,
                "rd": labeled.spec.r_d,
                "seed": labeled.spec.seed,
                "cells": labeled.label_records(),
            }
        )
    )


def save_scores(scores: np.ndarray, windows: Sequence[Window], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"n_windows": len(windows), "shape": list(scores.shape[1:]), "windows": []}
    for k, (s, w) in enumerate(zip(scores, windows)):
        blob = out_dir / f"window_{k}.bin"
        blob.write_bytes(s.astype("<f4").tobytes())
        index["windows"].append({"file": blob.name, "ls": w.ls})
    (out_dir / "index.json").write_text(json.dumps(index))


def load_scores(out_dir: Path) -> tuple[np.ndarray, list[list[int]]]:
    index = json.loads((out_dir / "index.json").read_text())
    shape = tuple(index["shape"])
    arrays = []
    ls_lists = []
    for rec in index["windows"]:
        raw = np.frombuffer((out_dir / rec["file"]).read_bytes(), dtype="<f4")
        arrays.append(raw.reshape(shape).astype(np.float64))
        ls_lists.append(rec["ls"])
    return np.stack(arrays), ls_lists


# ----------------------------------------------------------------------
# evaluation over one labeled set


def window_labels(labeled: inject.LabeledSet, windows: Sequence[Window]) -> np.ndarray:
    """Per-window channel labels, read at the window's last map."""
    ls_to_idx = {m.ls: i for i, m in enumerate(labeled.seq.maps)}
    out = []
    for w in windows:
        out.append(labeled.labels[ls_to_idx[w.ls[-1]]])
    return np.stack(out)


def evaluate_labeled_set(
    scores: np.ndarray,
    labels: np.ndarray,
    valid_mask: np.ndarray,
    capture_rates: Sequence[float] = CAPTURE_RATES,
) -> list[dict]:
    """Metric rows (one per capture rate) for one anomaly kind."""
    flat_scores = scores[:, valid_mask].ravel()
    flat_labels = labels[:, valid_mask].ravel()
    roc_auc = evaluate.auc(flat_scores, flat_labels)
    rows = []
    anomalous = flat_scores[flat_labels]
    for rate in capture_rates:
        alpha = score.threshold_for_capture(anomalous, rate)
        flags = flat_scores > alpha
        rates = evaluate.confusion_rates(flags, flat_labels)
        rows.append(
            {
                "capture": rate,
                "alpha": alpha,
                "fpr": rates.fpr,
                "precision": rates.precision,
                "recall": rates.recall,
                "auc": roc_auc,
            }
        )
    return rows


# ----------------------------------------------------------------------
# full pipeline


@dataclass
class ExperimentConfig:
    experiment_id: str
    seed: int
    out_root: str
    target: dict
    source: Optional[dict] = None
    train: Optional[dict] = None
    source_train: Optional[dict] = None
    tl: Optional[dict] = None
    inject: Optional[dict] = None
    state_mode: str = "reset"
    contaminate: Optional[list] = None

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        d = json.loads(Path(path).read_text())
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        cfg = cls(**known)
        # validate the TL combination before any work happens
        transfer.TLConfig.from_json(cfg.tl or {})
        return cfg

    def tl_config(self) -> transfer.TLConfig:
        return transfer.TLConfig.from_json(self.tl or {})


def _geometry_args(section: dict) -> dict:
    return {
        "subdetector": section.get("subdetector", "custom"),
        "dims": tuple(section["dims"]) if "dims" in section else None,
        "rbx_count": section.get("rbx_count", 36),
    }


def _split_sequence(seq: core.MapSequence) -> tuple[core.MapSequence, core.MapSequence]:
    """train = first 2/3 of LSs, test = remainder."""
    cut = (2 * len(seq)) // 3
    return (
        core.MapSequence(seq.maps[:cut], seq.geometry),
        core.MapSequence([m.copy() for m in seq.maps[cut:]], seq.geometry),
    )


def _prepare_domain(seq, T, fit_split=1.0):
    """Split raw LSs, preprocess with train-fitted calibration, window."""
    train_seq, test_seq = _split_sequence(seq)
    train_res = preprocess.preprocess_sequence(train_seq, fit_fraction=fit_split)
    test_res = preprocess.preprocess_sequence(test_seq, calib=train_res.calib)
    train_windows = make_windows(train_res.seq, T)
    test_windows = make_windows(test_res.seq, T)
    return train_seq, test_seq, train_res, test_res, train_windows, test_windows


def _train_model(model, windows, cfg: train_mod.TrainConfig, geometry):
    arr = np.stack([w.values for w in windows])
    return train_mod.train(model, arr, cfg, geometry.valid_mask)


def run_pipeline(config: ExperimentConfig) -> Path:
    t_start = time.time()
    exp_dir = Path(config.out_root) / config.experiment_id
    exp_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"experiment_id": config.experiment_id, "seed": config.seed, "stages": {}}
    tl_cfg = config.tl_config()
    train_cfg = train_mod.TrainConfig.from_json(config.train or {})
    train_cfg.seed = substream(config.seed, "target-train")
    T = train_cfg.T

    def record_stage(name, paths, t0):
        manifest["stages"][name] = {
            "seconds": round(time.time() - t0, 3),
            "artifacts": {str(p): file_sha256(Path(p)) for p in paths if Path(p).is_file()},
        }
        (exp_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))

    # ---- target data ------------------------------------------------
    t0 = time.time()
    target_dir = exp_dir / "data" / "target"
    geo_args = _geometry_args(config.target)
    if not (target_dir.exists() and core.list_runs(target_dir)):
        gen_data(
            n_ls=config.target.get("n_ls", 800),
            seed=substream(config.seed, "target-data"),
            out_dir=target_dir,
            contaminate_coords=config.contaminate,
            **geo_args,
        )
    target_seq = core.load_run(target_dir, core.list_runs(target_dir)[0])
    record_stage("gen-target", list(target_dir.glob("*")), t0)

    geometry = target_seq.geometry
    topo = build_adjacency(geometry)
    spec = ModelSpec(*geometry.dims, T=T)

    train_seq, test_seq, train_res, test_res, train_windows, test_windows = _prepare_domain(
        target_seq, T
    )

    # ---- source model (optional) ------------------------------------
    source_ckpt = exp_dir / "ckpt" / "source"
    if config.source is not None and tl_cfg.init_mode != "RANDOM":
        t0 = time.time()
        if not (source_ckpt / core.MANIFEST_NAME).exists():
            src_dir = exp_dir / "data" / "source"
            src_args = _geometry_args(config.source)
            if not (src_dir.exists() and core.list_runs(src_dir)):
                gen_data(
                    n_ls=config.source.get("n_ls", 800),
                    seed=substream(config.seed, "source-data"),
                    out_dir=src_dir,
                    **src_args,
                )
            source_seq = core.load_run(src_dir, core.list_runs(src_dir)[0])
            src_geometry = source_seq.geometry
            src_topo = build_adjacency(src_geometry)
            src_spec = ModelSpec(*src_geometry.dims, T=T)
            src_cfg = train_mod.TrainConfig.from_json(config.source_train or config.train or {})
            src_cfg.seed = substream(config.seed, "source-train")
            _, _, _, _, src_train_windows, _ = _prepare_domain(source_seq, T)
            src_model = build_model(src_spec, src_topo, seed=substream(config.seed, "source-init"))
            best, history = _train_model(src_model, src_train_windows, src_cfg, src_geometry)
            save_model_checkpoint(best, src_spec, source_ckpt)
            write_history_csv(history, source_ckpt / "history.csv")
        record_stage("train-source", list(source_ckpt.glob("*")), t0)

    # ---- target model: init, transfer, freeze, fine-tune -------------
    t0 = time.time()
    target_ckpt = exp_dir / "ckpt" / "target"
    if not (target_ckpt / core.MANIFEST_NAME).exists():
        model = build_model(spec, topo, seed=substream(config.seed, "target-init"))
        store = model.to_store()
        if tl_cfg.init_mode != "RANDOM":
            src_store, _ = core.load_checkpoint(source_ckpt)
            store, report = transfer.transfer_init(src_store, store, tl_cfg.init_mode)
            (exp_dir / "transfer_report.json").write_text(json.dumps(report.to_json()))
        store = transfer.apply_freeze(store, tl_cfg)
        model.load_store(store)
        best, history = _train_model(model, train_windows, train_cfg, geometry)
        save_model_checkpoint(best, spec, target_ckpt, extras={"tl": tl_cfg.to_json()})
        write_history_csv(history, target_ckpt / "history.csv")
    record_stage("train-target", list(target_ckpt.glob("*")), t0)

    # ---- sigma calibration on healthy training windows ---------------
    model, _ = load_model_checkpoint(target_ckpt, topo)
    state_mode = config.state_mode
    train_recons, _ = score.reconstruct_series(model, train_windows, state_mode)
    train_errors = score.window_errors(train_windows, train_recons, geometry.valid_mask)
    calib = score.calibrate_sigma(train_errors, state_mode)
    (exp_dir / "sigma.json").write_text(json.dumps(calib.to_json_dict()))
    train_mean_error = train_errors.mean(axis=0)

    # ---- injection, scoring, evaluation -------------------------------
    t0 = time.time()
    inj_cfg = config.inject or {}
    suite = inject.build_eval_suite(
        test_seq,
        n_maps_per_kind=inj_cfg.get("n_maps_per_kind", 200),
        n_channels=inj_cfg.get("n_channels", 8),
        persist_T=T,
        seed=substream(config.seed, "inject"),
    )
    metric_rows = []
    report_dir = exp_dir / "report"
    for labeled in suite:
        kind_tag = f"{labeled.spec.kind}_rd{labeled.spec.r_d:g}"
        labeled_res = preprocess.preprocess_sequence(labeled.seq, calib=train_res.calib)
        windows = make_windows(labeled_res.seq, T)
        recons, _ = score.reconstruct_series(model, windows, state_mode)
        errors = score.window_errors(windows, recons, geometry.valid_mask)
        scores = score.anomaly_score(errors, calib)
        labels = window_labels(labeled, windows)
        save_labels(labeled, exp_dir / "labels" / f"{kind_tag}.json")
        save_scores(scores, windows, exp_dir / "scores" / kind_tag)
        for row in evaluate_labeled_set(scores, labels, geometry.valid_mask):
            row.update({"kind": labeled.spec.kind, "rd": labeled.spec.r_d})
            metric_rows.append(row)
        if labeled.spec.kind in ("dead", "noisy_hot"):
            evaluate.error_reports(
                report_dir,
                scores,
                errors,
                labels,
                geometry,
                train_mean_error=train_mean_error,
                tag=kind_tag,
            )
    evaluate.write_metrics_csv(report_dir / "metrics.csv", metric_rows)
    record_stage("evaluate", [report_dir / "metrics.csv"], t0)

    # summary for compare-runs
    history_rows = list(csv.DictReader(open(target_ckpt / "history.csv")))
    summary = {
        "experiment_id": config.experiment_id,
        "seed": config.seed,
        "data_seed": substream(config.seed, "target-data"),
        "geometry": {"subdetector": geometry.subdetector, "dims": list(geometry.dims)},
        "tl": tl_cfg.to_json(),
        "final_val_mse": float(history_rows[-1]["val_mse"]) if history_rows else None,
        "best_val_mse": min(float(r["val_mse"]) for r in history_rows) if history_rows else None,
        "test_mse": _test_mse(model, test_windows, geometry),
        "elapsed": round(time.time() - t_start, 3),
    }
    (exp_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    return exp_dir


def _test_mse(model, windows, geometry) -> float:
    if not windows:
        return float("nan")
    arr = torch.as_tensor(np.stack([w.values for w in windows]), dtype=torch.float32)
    mask = torch.as_tensor(geometry.valid_mask)
    model.eval()
    with torch.no_grad():
        total = 0.0
        for i in range(0, len(arr), 6):
            x = arr[i : i + 6]
            recon, (mu, logvar, _), _ = model(x, sample=False)
            parts = compute_loss(x, recon, mu, logvar, model, mask, lam=0.0, rho=0.0)
            total += float(parts.mse) * len(x)
    return total / len(arr)


def compare_runs(run_dirs: Sequence[Path], out_path: Optional[Path] = None) -> list[dict]:
    """Delta-MSE table relative to the RANDOM/No-TL baseline.

    Runs are grouped by (init_mode, train_mode); each group yields an
    ``avg`` row (mean test MSE over seeds) and a ``best`` row (minimum),
    with deltas against the baseline group's row of the same type.
    Runs must share geometry and the data seed, otherwise refused.
    """
    summaries = []
    for d in run_dirs:
        summaries.append(json.loads((Path(d) / "summary.json").read_text()))
    ref = summaries[0]
    for s in summaries[1:]:
        if s["data_seed"] != ref["data_seed"] or s["geometry"] != ref["geometry"]:
            raise ValueError("runs do not share geometry and data seed; comparison refused")
    groups: dict[tuple[str, str], list[dict]] = {}
    for s in summaries:
        groups.setdefault((s["tl"]["init_mode"], s["tl"]["train_mode"]), []).append(s)
    if ("RANDOM", "No-TL") not in groups:
        raise ValueError("no RANDOM/No-TL baseline among the runs")
    base_mses = [s["test_mse"] for s in groups[("RANDOM", "No-TL")]]
    base = {"avg": float(np.mean(base_mses)), "best": float(np.min(base_mses))}
    rows = []
    for (init_mode, train_mode), members in groups.items():
        mses = [s["test_mse"] for s in members]
        for row_type, value in (("avg", float(np.mean(mses))), ("best", float(np.min(mses)))):
            rows.append(
                {
                    "init_mode": init_mode,
                    "train_mode": train_mode,
                    "row": row_type,
                    "n_runs": len(members),
                    "test_mse": value,
                    "delta_mse_pct": 100.0 * (value - base[row_type]) / base[row_type],
                }
            )
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh,
                fieldnames=["init_mode", "train_mode", "row", "n_runs", "test_mse", "delta_mse_pct"],
            )
            writer.writeheader()
            writer.writerows(rows)
    return rows
