"""Command-line interface.

Every subcommand maps onto one pipeline stage; ``run-pipeline`` chains
them under a config file.  Exit code 0 only on full success.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import core, evaluate as eval_mod, inject as inject_mod, pipeline, preprocess, score as score_mod, transfer as transfer_mod
from .model import ModelSpec, build_model
from .preprocess import build_adjacency, make_windows
from .train import TrainConfig, train as run_training


@click.group()
def main():
    """Calorimeter data-quality anomaly detection toolkit."""


def _fail(msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


@main.command("gen-data")
@click.option("--subdetector", type=click.Choice(["hb", "he", "custom"]), default="hb")
@click.option("--dims", type=str, default=None, help="custom geometry as IETA,IPHI,DEPTH")
@click.option("--rbx-count", type=int, default=36)
@click.option("--n-ls", type=int, default=800)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--contaminate", type=click.Path(exists=True, path_type=Path), default=None,
              help="JSON list of [ieta, iphi, depth] channels forced dead")
def gen_data_cmd(subdetector, dims, rbx_count, n_ls, seed, out, contaminate):
    """Generate one synthetic run of occupancy maps."""
    dims_t = tuple(int(v) for v in dims.split(",")) if dims else None
    coords = json.loads(Path(contaminate).read_text()) if contaminate else None
    try:
        seq = pipeline.gen_data(
            subdetector, n_ls, seed, out, dims=dims_t, rbx_count=rbx_count,
            contaminate_coords=coords,
        )
    except (ValueError, core.GeometryError) as exc:
        _fail(str(exc))
    click.echo(f"wrote {len(seq)} lumisections ({seq.geometry.n_channels} channels) to {out}")


@main.command("preprocess")
@click.option("--in", "in_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--fit-split", type=float, default=0.8, show_default=True)
def preprocess_cmd(in_dir, out, fit_split):
    """Normalize raw runs; calibration JSON emitted alongside."""
    try:
        pipeline.preprocess_dir(in_dir, out, fit_split)
    except (ValueError, FileNotFoundError, core.GeometryError) as exc:
        _fail(str(exc))
    click.echo(f"preprocessed runs from {in_dir} into {out}")


@main.command("train")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True,
              help="directory of preprocessed runs")
@click.option("--config", type=click.Path(exists=True, path_type=Path), default=None,
              help="training config JSON")
@click.option("--tl", type=click.Path(exists=True, path_type=Path), default=None,
              help="transfer config JSON (freeze policy applied before training)")
@click.option("--init-from", type=click.Path(exists=True, path_type=Path), default=None,
              help="source checkpoint for transfer initialization")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def train_cmd(data, config, tl, init_from, seed, out):
    """Train the autoencoder on preprocessed runs."""
    try:
        cfg = TrainConfig.from_json(json.loads(Path(config).read_text()) if config else {})
        cfg.seed = seed
        tl_cfg = transfer_mod.TLConfig.from_json(
            json.loads(Path(tl).read_text()) if tl else {}
        )
        run_ids = core.list_runs(data)
        if not run_ids:
            _fail(f"no runs under {data}")
        seq = core.load_run(data, run_ids[0])
        geometry = seq.geometry
        topo = build_adjacency(geometry)
        spec = ModelSpec(*geometry.dims, T=cfg.T)
        model = build_model(spec, topo, seed=seed)
        store = model.to_store()
        if tl_cfg.init_mode != "RANDOM":
            if init_from is None:
                _fail("init_mode != RANDOM requires --init-from")
            src_store, _ = core.load_checkpoint(init_from)
            store, report = transfer_mod.transfer_init(src_store, store, tl_cfg.init_mode)
            click.echo(
                f"transfer init: copied {len(report.copied)}, "
                f"skipped {len(report.skipped_shape)} (shape) "
                f"{len(report.skipped_missing)} (missing)"
            )
        store = transfer_mod.apply_freeze(store, tl_cfg)
        model.load_store(store)
        windows = make_windows(seq, cfg.T)
        if not windows:
            _fail("no complete windows in the data")
        best, history = pipeline._train_model(model, windows, cfg, geometry)
        pipeline.save_model_checkpoint(best, spec, Path(out), extras={"tl": tl_cfg.to_json()})
        pipeline.write_history_csv(history, Path(out) / "history.csv")
    except (transfer_mod.TLConfigError, ValueError, core.CorruptionError) as exc:
        _fail(str(exc))
    last = history.epochs[-1] if history.epochs else None
    click.echo(
        f"trained {cfg.epochs} epochs; best epoch {history.best_epoch}"
        + (f", final val MSE {last.val_mse:.6g}" if last else "")
    )


@main.command("transfer")
@click.option("--source", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--target", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--init-mode", type=click.Choice(sorted(transfer_mod.INIT_MODES)), required=True)
@click.option("--train-mode", type=click.Choice(sorted(transfer_mod.FREEZE_SETS)), required=True)
@click.option("--unfreeze-bn", is_flag=True)
@click.option("--unfreeze-bias", is_flag=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def transfer_cmd(source, target, init_mode, train_mode, unfreeze_bn, unfreeze_bias, out):
    """Copy source parameters into a target checkpoint and apply freezing."""
    try:
        cfg = transfer_mod.TLConfig(init_mode, train_mode, unfreeze_bn, unfreeze_bias)
        src_store, _ = core.load_checkpoint(source)
        tgt_store, extras = core.load_checkpoint(target)
        out_store, report = transfer_mod.transfer_init(src_store, tgt_store, cfg.init_mode)
        out_store = transfer_mod.apply_freeze(out_store, cfg)
        extras = dict(extras)
        extras["tl"] = cfg.to_json()
        core.save_checkpoint(out_store, out, extras=extras)
        (Path(out) / "transfer_report.json").write_text(json.dumps(report.to_json()))
    except (transfer_mod.TLConfigError, core.CorruptionError, ValueError) as exc:
        _fail(str(exc))
    n_tr, n_tot, red = transfer_mod.count_trainable(out_store)
    click.echo(
        f"copied {len(report.copied)}, skipped {len(report.skipped_shape)} (shape) "
        f"{len(report.skipped_missing)} (missing); trainable {n_tr}/{n_tot} "
        f"(reduction {100 * red:.2f}%)"
    )


@main.command("inject")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True,
              help="directory of raw runs")
@click.option("--kind", type=click.Choice(inject_mod.KINDS), required=True)
@click.option("--rd", type=float, default=0.0, help="degradation factor")
@click.option("--n-ls", type=int, default=10, help="number of affected windows")
@click.option("--n-channels", type=int, default=8)
@click.option("--persist-t", type=int, default=5)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def inject_cmd(data, kind, rd, n_ls, n_channels, persist_t, seed, out):
    """Inject one anomaly kind into raw maps; emit labeled data."""
    try:
        spec = inject_mod.AnomalySpec(kind, rd, n_ls, n_channels, persist_t, seed)
        run_ids = core.list_runs(data)
        if not run_ids:
            _fail(f"no runs under {data}")
        seq = core.load_run(data, run_ids[0])
        labeled = inject_mod.inject(seq, spec)
    except ValueError as exc:
        _fail(str(exc))
    out = Path(out)
    core.save_run(labeled.seq, out)
    pipeline.save_labels(labeled, out / "labels.json")
    frac = inject_mod.anomalous_fraction(labeled)
    click.echo(f"injected {kind}: anomalous cell fraction {100 * frac:.3f}% -> {out}")


@main.command("score")
@click.option("--ckpt", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True,
              help="directory of preprocessed runs to score")
@click.option("--state-mode", type=click.Choice(["reset", "preserve"]), default="reset")
@click.option("--calib", type=click.Path(path_type=Path), required=True,
              help="sigma calibration JSON; fitted here if absent")
@click.option("--t", "t_len", type=int, default=5)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def score_cmd(ckpt, data, state_mode, calib, t_len, out):
    """Score windows of a preprocessed run against a checkpoint."""
    try:
        run_ids = core.list_runs(data)
        if not run_ids:
            _fail(f"no runs under {data}")
        seq = core.load_run(data, run_ids[0])
        topo = build_adjacency(seq.geometry)
        model, _ = pipeline.load_model_checkpoint(Path(ckpt), topo)
        windows = make_windows(seq, t_len)
        if not windows:
            _fail("no complete windows to score")
        recons, _ = score_mod.reconstruct_series(model, windows, state_mode)
        errors = score_mod.window_errors(windows, recons, seq.geometry.valid_mask)
        calib = Path(calib)
        if calib.exists():
            sig = score_mod.SigmaCalib.from_json_dict(json.loads(calib.read_text()))
            if sig.state_mode != state_mode:
                _fail(
                    f"calibration was made in {sig.state_mode!r} mode, "
                    f"scoring requested {state_mode!r}"
                )
        else:
            sig = score_mod.calibrate_sigma(errors, state_mode)
            calib.parent.mkdir(parents=True, exist_ok=True)
            calib.write_text(json.dumps(sig.to_json_dict()))
            click.echo(f"fitted sigma calibration -> {calib}")
        scores = score_mod.anomaly_score(errors, sig)
        pipeline.save_scores(scores, windows, Path(out))
    except (ValueError, core.CorruptionError) as exc:
        _fail(str(exc))
    click.echo(f"scored {len(windows)} windows -> {out}")


@main.command("evaluate")
@click.option("--scores", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--labels", type=click.Path(exists=True, path_type=Path), required=True,
              help="labels.json from the inject stage")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True,
              help="run directory providing the geometry")
@click.option("--out", type=click.Path(path_type=Path), required=True)
def evaluate_cmd(scores, labels, data, out):
    """Compute metrics and report artifacts from stored scores + labels."""
    try:
        run_ids = core.list_runs(data)
        seq = core.load_run(data, run_ids[0])
        geometry = seq.geometry
        score_arr, ls_lists = pipeline.load_scores(Path(scores))
        lab = json.loads(Path(labels).read_text())
        cell_labels = np.zeros((len(ls_lists),) + geometry.dims, dtype=bool)
        ls_to_window = {tuple(ls): w for w, ls in enumerate(ls_lists)}
        last_ls = {ls[-1]: w for w, ls in enumerate(ls_lists)}
        for ls, ieta, iphi, depth in lab["cells"]:
            if ls in last_ls:
                i, j, k = geometry.coord_to_bins(core.ChannelCoord(ieta, iphi, depth))
                cell_labels[last_ls[ls], i, j, k] = True
        rows = pipeline.evaluate_labeled_set(score_arr, cell_labels, geometry.valid_mask)
        for row in rows:
            row.update({"kind": lab.get("kind", ""), "rd": lab.get("rd", "")})
        out = Path(out)
        eval_mod.write_metrics_csv(out / "metrics.csv", rows)
        eval_mod.error_reports(
            out, score_arr, score_arr, cell_labels, geometry, tag=lab.get("kind", "eval")
        )
    except (ValueError, KeyError, core.GeometryError) as exc:
        _fail(str(exc))
    click.echo(f"wrote metrics and plots -> {out}")


@main.command("run-pipeline")
@click.option("--config", type=click.Path(exists=True, path_type=Path), required=True)
def run_pipeline_cmd(config):
    """Run the full experiment described by a config file."""
    try:
        cfg = pipeline.ExperimentConfig.from_file(config)
    except (transfer_mod.TLConfigError, ValueError, KeyError, TypeError) as exc:
        _fail(f"invalid config: {exc}")
    try:
        exp_dir = pipeline.run_pipeline(cfg)
    except Exception as exc:  # manifest already records partial state
        _fail(f"pipeline aborted: {exc}")
    click.echo(f"experiment complete -> {exp_dir}")


@main.command("compare-runs")
@click.argument("run_dirs", nargs=-1, type=click.Path(exists=True, path_type=Path))
@click.option("--out", type=click.Path(path_type=Path), default=None)
def compare_runs_cmd(run_dirs, out):
    """Delta-MSE comparison of experiment dirs against the no-transfer baseline."""
    if not run_dirs:
        _fail("need at least one experiment directory")
    try:
        rows = pipeline.compare_runs(list(run_dirs), out)
    except (ValueError, FileNotFoundError) as exc:
        _fail(str(exc))
    for r in rows:
        click.echo(
            f"{r['init_mode']:>7}/{r['train_mode']:<6} {r['row']:<4} "
            f"test MSE {r['test_mse']:.6g}  dMSE {r['delta_mse_pct']:+.2f}%"
        )


if __name__ == "__main__":
    main()
