"""Command-line entry point: ``latentfuse <command> [options]``.

Commands: gen-data, train, fuse, sweep, classify, verify. Each writes its
results plus a ``manifest_<command>.json`` listing sha256 digests of every
input and output file. Result files never contain timestamps, so reruns with
the same config and seed are byte-identical.

Exit codes: 0 success, 1 acceptance failure (verify only), 2 config error,
3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import SWEEP_AXES, ConfigError, ExperimentConfig, load_config, resolve_seed
from .eval import BaselineConfig, fewshot_protocol
from .fusion import FusionError, batch_fuse, build_samplers
from .mvae import (CheckpointError, MvaeModel, TrainConfig, TrainingDivergedError, load_model, reconstruction_mse,
                   save_model, train)
from .numkit import Adam, NonFiniteError, Rng
from .protein_synth import DatasetFormatError, load_dataset, make_toy_dataset, save_dataset, save_dataset_csv
from .samplers import measurement_percentage

log = logging.getLogger("latentfuse")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


class OutputDirError(OSError):
    pass


# -- file helpers -------------------------------------------------------------
def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_text(path: Path, text: str) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _csv_text(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def write_manifest(cfg: ExperimentConfig, command: str, started: str, inputs: Sequence[Path],
                   outputs: Sequence[Path]) -> Path:
    doc = {
        "command": command,
        "code_version": __version__,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "started_at": started,
        "finished_at": _now(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    path = cfg.out / f"manifest_{command}.json"
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _require_out(cfg: ExperimentConfig, create: bool = False) -> Path:
    out = cfg.out
    if create:
        out.mkdir(parents=True, exist_ok=True)
    elif not out.is_dir():
        raise OutputDirError(f"output directory {out} does not exist (run gen-data first or create it)")
    return out


def _save_config(cfg: ExperimentConfig, command: str) -> Path:
    return _write_text(cfg.out / f"config_{command}.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.mvae_train
    return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate, kl_scale=t.kl_scale,
                       seed=cfg.seed, posterior_mode=t.posterior_mode,
                       modality_dropout_prob=t.modality_dropout_prob, grad_clip=t.grad_clip,
                       lr_final_fraction=t.lr_final_fraction, ema_decay=t.ema_decay)


def _baseline_config(cfg: ExperimentConfig) -> BaselineConfig:
    b = cfg.eval.baseline
    return BaselineConfig(epochs=b.epochs, batch_size=b.batch_size, learning_rate=b.learning_rate,
                          weight_decay=b.weight_decay, beta1=b.beta1, hidden=b.hidden, seed=cfg.seed)


# -- commands -----------------------------------------------------------------
def cmd_gen_data(cfg: ExperimentConfig, write_csv: bool = False) -> list[Path]:
    started = _now()
    _require_out(cfg, create=True)
    d = cfg.dataset
    data, _, _ = make_toy_dataset(cfg.seed, d.n_samples, d.signal_dim, d.spread, d.component_std, d.weight_std,
                                  d.bias_std)
    path = cfg.dataset_path
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data, path)
    outputs = [path, _save_config(cfg, "gen-data")]
    if write_csv:
        csv_path = path.with_suffix(".csv")
        save_dataset_csv(data, csv_path)
        outputs.append(csv_path)
    log.info("wrote %d samples (%d train / %d test) to %s", len(data), len(data.train()), len(data.test()), path)
    write_manifest(cfg, "gen-data", started, [], outputs)
    return outputs


def cmd_train(cfg: ExperimentConfig, resume: bool = False) -> list[Path]:
    started = _now()
    _require_out(cfg)
    data = load_dataset(cfg.dataset_path)
    tcfg = _train_config(cfg)
    ckpt = cfg.checkpoint_path
    inputs = [cfg.dataset_path]
    optimizer, start_epoch, prior_history = None, 0, []
    if resume:
        model, doc, opt_state = load_model(ckpt, with_state=True)
        inputs.append(ckpt)
        start_epoch = int(doc.get("epochs_done", 0))
        prior_history = list(doc.get("history", []))
        if opt_state is not None:
            optimizer = Adam(model.parameters(), lr=tcfg.learning_rate)
            optimizer.load_state_dict(opt_state)
        if model.posterior_mode != tcfg.posterior_mode:
            raise ConfigError("checkpoint posterior_mode differs from mvae_train.posterior_mode")
    else:
        t = cfg.mvae_train
        model = MvaeModel([data.signal_dim] * data.n_modalities, t.latent_dim, t.hidden, t.posterior_mode,
                          cfg.seed, t.decoder_output)
    log.info("training %s model (%d parameters) for %d epochs", model.posterior_mode, model.n_parameters(), tcfg.epochs)
    result = train(model, data, tcfg, optimizer, start_epoch)
    history = prior_history + result.history
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, ckpt, tcfg.to_dict(), result.optimizer, result.epochs_done, history)
    rows = [{"epoch": i + 1, "loss": repr(v)} for i, v in enumerate(history)]
    curve = _write_text(cfg.out / "loss_curve.csv", _csv_text(["epoch", "loss"], rows))
    test = data.test()
    mse = reconstruction_mse(model, [test.x[m] for m in range(test.n_modalities)]) if len(test) else []
    report = _write_text(cfg.out / "train_report.json", json.dumps(
        {"epochs_done": result.epochs_done, "final_loss": history[-1] if history else None,
         "test_recon_mse": mse, "n_parameters": model.n_parameters()}, indent=2) + "\n")
    outputs = [ckpt, curve, report, _save_config(cfg, "train")]
    write_manifest(cfg, "train", started, inputs, outputs)
    return outputs


def _fuse_point(cfg: ExperimentConfig, model: MvaeModel, data):
    test = data.test()
    n = min(cfg.fusion.n_samples, len(test))
    if n < 1:
        raise ConfigError("test split is empty")
    batch = test.subset(np.arange(n))
    specs = cfg.sampler_specs()
    samplers = build_samplers(specs, model.signal_dims, cfg.seed)
    xs = [batch.x[m] for m in range(batch.n_modalities)]
    results, summary = batch_fuse(xs, model, samplers, cfg.fusion.to_fusion_config(), Rng(cfg.seed).child("fuse"),
                                  batch.sample_ids)
    return batch, samplers, xs, results, summary


def cmd_fuse(cfg: ExperimentConfig) -> list[Path]:
    started = _now()
    out = _require_out(cfg)
    data = load_dataset(cfg.dataset_path)
    model = load_model(cfg.checkpoint_path)
    batch, samplers, xs, results, summary = _fuse_point(cfg, model, data)
    outputs = [_write_text(out / "fuse_summary.csv", summary.to_csv())]

    d = model.latent_dim
    lat_cols = ["sample_id", "winner", "converged", "iterations", "final_loss"] + [f"z{i}" for i in range(d)]
    lat_rows = [{"sample_id": r.sample_id, "winner": r.winner, "converged": int(r.converged),
                 "iterations": r.iterations, "final_loss": repr(r.final_loss),
                 **{f"z{i}": repr(float(v)) for i, v in enumerate(r.z_map)}} for r in results]
    outputs.append(_write_text(out / "fuse_latents.csv", _csv_text(lat_cols, lat_rows)))
    for m in range(model.n_modalities):
        N = model.signal_dims[m]
        cols = ["sample_id"] + [f"x{i}" for i in range(N)]
        rows = [{"sample_id": r.sample_id, **{f"x{i}": repr(float(v)) for i, v in enumerate(r.reconstructions[m])}}
                for r in results]
        outputs.append(_write_text(out / f"fuse_recon_m{m + 1}.csv", _csv_text(cols, rows)))

    table_rows = []
    for m, s in enumerate(samplers):
        n_meas = s.n_out if s is not None else 0
        table_rows.append({
            "modality": m + 1,
            "sampler": s.spec.kind if s is not None else "missing",
            "n_measurements": n_meas,
            "percentage": measurement_percentage(n_meas, model.signal_dims[m]),
            "noise_std": s.noise_std if s is not None else 0.0,
            "mean_recon_mse": repr(summary.mean_mse[m]),
            "std_recon_mse": repr(summary.std_mse[m]),
        })
    outputs.append(_write_text(out / "fuse_table.csv", _csv_text(list(table_rows[0]), table_rows)))
    # amortised reconstruction of the same full signals, for reference
    ae = reconstruction_mse(model, xs)
    report = {"n_samples": len(results), "mean_recon_mse": summary.mean_mse, "std_recon_mse": summary.std_mse,
              "autoencoder_recon_mse": ae, "converged_fraction": float(np.mean([r.converged for r in results]))}
    outputs.append(_write_text(out / "fuse_report.json", json.dumps(report, indent=2) + "\n"))
    outputs.append(_save_config(cfg, "fuse"))
    write_manifest(cfg, "fuse", started, [cfg.dataset_path, cfg.checkpoint_path], outputs)
    return outputs


def _with_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "shots":
        return replace(cfg, eval=replace(cfg.eval, shots=[int(value)]))
    specs = []
    for s in cfg.samplers:
        if s is None:
            specs.append(None)
            continue
        s = dict(s)
        if axis == "n_measurements":
            s.update(kind="random_projection", n_measurements=int(value))
            s.pop("missing_ratio", None)
        elif axis == "missing_ratio":
            s.update(kind="mask", missing_ratio=float(value))
            s.pop("n_measurements", None)
        else:
            s["noise_std"] = float(value)
        specs.append(s)
    return replace(cfg, samplers=specs).validate()


def _fmt_value(axis: str, value) -> str:
    return str(int(value)) if axis in ("n_measurements", "shots") else repr(float(value))


def aggregate_points(axis: str, points: Sequence[tuple[str, Path]]) -> str:
    """Concatenate per-point CSVs, prefixing each row with its axis value."""
    header, lines = None, []
    for label, path in points:
        text = path.read_text(encoding="utf-8").splitlines()
        if header is None:
            header = f"sweep_{axis}," + text[0]
        lines += [f"{label},{row}" for row in text[1:]]
    return "\n".join([header] + lines) + "\n"


def cmd_sweep(cfg: ExperimentConfig) -> list[Path]:
    started = _now()
    out = _require_out(cfg)
    axis = cfg.sweep.axis
    values = cfg.sweep.values
    sweep_dir = out / f"sweep_{axis}"
    sweep_dir.mkdir(exist_ok=True)
    data = load_dataset(cfg.dataset_path)
    model = load_model(cfg.checkpoint_path)
    points, dat_lines, outputs = [], [], []
    for value in values:
        pcfg = _with_axis(cfg, axis, value)
        label = _fmt_value(axis, value)
        path = sweep_dir / f"point_{label}.csv"
        if axis == "shots":
            res = _classify(pcfg, model, data)
            _write_text(path, res.to_csv())
            means = res.mean_f1()
            dat_lines.append(" ".join([label] + [repr(means[(m, int(value))]) for m in pcfg.eval.methods]))
        else:
            *_, summary = _fuse_point(pcfg, model, data)
            _write_text(path, summary.to_csv())
            dat_lines.append(" ".join([label] + [f"{mu!r} {sd!r}" for mu, sd in zip(summary.mean_mse, summary.std_mse)]))
        points.append((label, path))
        outputs.append(path)
    agg = _write_text(out / f"sweep_{axis}.csv", aggregate_points(axis, points))
    if axis == "shots":
        cols = " ".join(cfg.eval.methods)
    else:
        cols = " ".join(f"mse_m{m + 1} std_m{m + 1}" for m in range(model.n_modalities))
    dat = _write_text(out / f"sweep_{axis}.dat", f"# {axis} {cols}\n" + "\n".join(dat_lines) + "\n")
    outputs += [agg, dat, _save_config(cfg, "sweep")]
    write_manifest(cfg, "sweep", started, [cfg.dataset_path, cfg.checkpoint_path], outputs)
    return outputs


def _classify(cfg: ExperimentConfig, model: MvaeModel, data):
    return fewshot_protocol(model, data, [int(s) for s in cfg.eval.shots], cfg.eval.n_seeds, cfg.eval.methods,
                            10, cfg.seed, cfg.eval.embedding, _baseline_config(cfg),
                            cfg.sampler_specs(), cfg.fusion.to_fusion_config())


def cmd_classify(cfg: ExperimentConfig) -> list[Path]:
    started = _now()
    out = _require_out(cfg)
    data = load_dataset(cfg.dataset_path)
    model = load_model(cfg.checkpoint_path)
    res = _classify(cfg, model, data)
    outputs = [_write_text(out / "classify_results.csv", res.to_csv())]
    means = res.mean_f1()
    shots = [int(s) for s in cfg.eval.shots]
    cols = ["method"] + [f"f1_{s}shot" for s in shots]
    rows = [{"method": m, **{f"f1_{s}shot": f"{means[(m, s)]:.4f}" for s in shots}} for m in cfg.eval.methods]
    outputs.append(_write_text(out / "classify_table.csv", _csv_text(cols, rows)))
    outputs.append(_save_config(cfg, "classify"))
    write_manifest(cfg, "classify", started, [cfg.dataset_path, cfg.checkpoint_path], outputs)
    return outputs


def cmd_verify(cfg: ExperimentConfig, criteria: Sequence[int] | None = None) -> int:
    from .acceptance import AcceptanceContext, run_acceptance

    started = _now()
    out = _require_out(cfg, create=True)
    ctx = AcceptanceContext.from_files(cfg.dataset_path, cfg.checkpoint_path) \
        if cfg.dataset_path.exists() and cfg.checkpoint_path.exists() else AcceptanceContext.build(seed=cfg.seed)
    results = run_acceptance(ctx, criteria, workdir=out / "verify_work")
    rows = [r.as_row() for r in results]
    path = _write_text(out / "verify_results.csv", _csv_text(["criterion", "name", "passed", "detail"], rows))
    write_manifest(cfg, "verify", started, [], [path])
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# -- argument parsing -----------------------------------------------------------
def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="global seed (overrides $LATENTFUSE_SEED and the config)")
    common.add_argument("--output-dir", help="directory for results and manifests")
    common.add_argument("--dataset", help="dataset file (default: <output-dir>/dataset.bin)")
    common.add_argument("--checkpoint", help="model checkpoint (default: <output-dir>/model.json)")
    common.add_argument("-v", "--verbose", action="store_true")

    sampler = argparse.ArgumentParser(add_help=False)
    sampler.add_argument("--n-measurements", type=int, help="random projection with this many rows on every observed modality")
    sampler.add_argument("--missing-ratio", type=float, help="binary mask with this fraction of zeroed entries")
    sampler.add_argument("--noise-std", type=float, help="observation noise on every observed modality")
    sampler.add_argument("--n-samples", type=int, help="number of test proteins to fuse")
    sampler.add_argument("--restarts", type=int, help="fusion restarts per sample")

    evalopts = argparse.ArgumentParser(add_help=False)
    evalopts.add_argument("--methods", help="comma-separated subset of sm1,sm2,prob_fusion,dual_branch,sflr")
    evalopts.add_argument("--shots", help="comma-separated shot counts")
    evalopts.add_argument("--n-seeds", type=int)
    evalopts.add_argument("--embedding", choices=("posterior_mean", "fusion"))

    p = argparse.ArgumentParser(prog="latentfuse", description="Sensor fusion in the latent space of a multimodal VAE.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic two-modality protein dataset")
    g.add_argument("--n", type=int, help="number of samples")
    g.add_argument("--csv", action="store_true", help="also write a CSV export")

    t = sub.add_parser("train", parents=[common], help="train the multimodal VAE")
    t.add_argument("--epochs", type=int)
    t.add_argument("--posterior-mode", choices=("joint", "poe", "moe"))
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint's weights and optimizer state")

    sub.add_parser("fuse", parents=[common, sampler], help="fuse subsampled observations of test proteins")

    s = sub.add_parser("sweep", parents=[common, sampler, evalopts], help="repeat fuse or classify along one axis")
    s.add_argument("--axis", choices=SWEEP_AXES)
    s.add_argument("--values", help="comma-separated axis values")

    sub.add_parser("classify", parents=[common, sampler, evalopts], help="few-shot classification table")

    v = sub.add_parser("verify", parents=[common], help="run the acceptance checks")
    v.add_argument("--criteria", help="comma-separated criterion numbers (default: all)")
    return p


def _apply_flags(cfg: ExperimentConfig, a: argparse.Namespace) -> ExperimentConfig:
    cfg.seed = resolve_seed(a.seed, cfg.seed)
    if a.output_dir:
        cfg.output_dir = a.output_dir
    if a.dataset:
        cfg.dataset.path = a.dataset
    if a.checkpoint:
        cfg.mvae_train.checkpoint = a.checkpoint
    get = lambda name: getattr(a, name, None)  # noqa: E731
    if get("n") is not None:
        cfg.dataset.n_samples = a.n
    if get("epochs") is not None:
        cfg.mvae_train.epochs = a.epochs
    if get("posterior_mode"):
        cfg.mvae_train.posterior_mode = a.posterior_mode
    if get("n_measurements") is not None and get("missing_ratio") is not None:
        raise ConfigError("--n-measurements and --missing-ratio are mutually exclusive")
    if get("n_measurements") is not None:
        cfg = _with_axis(cfg, "n_measurements", a.n_measurements)
    if get("missing_ratio") is not None:
        cfg = _with_axis(cfg, "missing_ratio", a.missing_ratio)
    if get("noise_std") is not None:
        cfg = _with_axis(cfg, "noise_std", a.noise_std)
    if get("n_samples") is not None:
        cfg.fusion.n_samples = a.n_samples
    if get("restarts") is not None:
        cfg.fusion.n_restarts = a.restarts
    if get("axis"):
        cfg.sweep.axis = a.axis
    if get("values"):
        cfg.sweep.values = _number_list(a.values, float)
    if get("methods"):
        cfg.eval.methods = [m.strip() for m in a.methods.split(",") if m.strip()]
    if get("shots"):
        cfg.eval.shots = _number_list(a.shots, int)
    if get("n_seeds") is not None:
        cfg.eval.n_seeds = a.n_seeds
    if get("embedding"):
        cfg.eval.embedding = a.embedding
    return cfg


def _number_list(text: str, kind) -> list:
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as a list of numbers") from None


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_flags(load_config(args.config), args).validate()
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.csv)
        elif args.command == "train":
            cmd_train(cfg, args.resume)
        elif args.command == "fuse":
            cmd_fuse(cfg)
        elif args.command == "sweep":
            cmd_sweep(cfg)
        elif args.command == "classify":
            cmd_classify(cfg)
        elif args.command == "verify":
            crit = _number_list(args.criteria, int) if args.criteria else None
            return cmd_verify(cfg, crit)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FusionError, TrainingDivergedError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
