"""Command-line entry point: ``iconnet <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import configparser
import hashlib
import io
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import audio_io, experiment, interpret
from . import grad as G
from .errors import IConNetError
from .estimator import estimator_from_model
from .model import IConNet, IConNetConfig, BlockConfig, count_params, load_model, save_model

log = logging.getLogger("iconnet")

PUBLISHED_TOTAL_PARAMS = 154180
PUBLISHED_FRONT_END_PARAMS = 45568
PUBLISHED_MODEL_KB = 493.3
MIN_INFER_S = 1.0
DATA_ENV = "ICONNET_DATA"

DOWNLOAD_HELP = (
    "The PhysioNet/CinC 2016 training set is not downloaded automatically. Fetch\n"
    "training-a ... training-f (each with REFERENCE.csv) from physionet.org and\n"
    f"point --root or ${DATA_ENV} at the directory holding them."
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------

_TRAIN_FIELDS = {
    "max_epochs": int, "batch_size": int, "micro_batch_size": int, "learning_rate": float,
    "class_weights": str, "patience": int, "segment_s": float, "train_hop_s": float,
    "sample_rate_hz": int, "validation_fraction": float,
}
_MODEL_FIELDS = {
    "block1_kernels": int, "block1_kernel_len": int, "block1_pool": int,
    "block2_kernels": int, "block2_kernel_len": int, "block2_pool": int,
    "ffn_hidden": lambda s: tuple(int(v) for v in str(s).replace("(", "").replace(")", "").split(",") if v.strip()),
    "nonlinearity": str, "window": str, "spacing": str,
}


def _parse_bool(value):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {value!r}")


def resolve_config(args):
    """Merge defaults, an optional INI file, flags and ``--set`` overrides."""
    synthetic = bool(getattr(args, "synthetic", False))
    conf = {
        "run": {"model": args.model, "folds": args.folds, "seed": args.seed, "jobs": args.jobs},
        "data": {"synthetic": synthetic, "root": "", "n_per_class": experiment.SYNTHETIC_PER_CLASS},
        "train": {},
        "model": {},
    }
    if synthetic:
        conf["train"].update(experiment.SYNTHETIC_TRAIN)
        if args.model == "iconnet":
            conf["model"].update(experiment.SYNTHETIC_MODEL)
    if args.config:
        parser = configparser.ConfigParser()
        if not parser.read(args.config):
            raise UsageError(f"cannot read config file {args.config}")
        for section in parser.sections():
            conf.setdefault(section, {}).update(parser[section])
    for item in args.set or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in conf:
            raise UsageError(f"--set expects section.key=value with section in {sorted(conf)}, got {item!r}")
        conf[section][name] = value
    if not synthetic and not conf["data"].get("root"):
        conf["data"]["root"] = args.root or os.environ.get(DATA_ENV, "")
    return _typed(conf)


def _typed(conf):
    run = conf["run"]
    out = {
        "run": {"model": str(run["model"]), "folds": int(run["folds"]), "seed": int(run["seed"]),
                "jobs": int(run["jobs"])},
        "data": {"synthetic": _parse_bool(conf["data"]["synthetic"]), "root": str(conf["data"]["root"]),
                 "n_per_class": int(conf["data"]["n_per_class"])},
    }
    for section, fields in (("train", _TRAIN_FIELDS), ("model", _MODEL_FIELDS)):
        typed = {}
        for key, value in conf[section].items():
            if key not in fields:
                raise UsageError(f"unknown key {section}.{key}; valid: {', '.join(sorted(fields))}")
            try:
                typed[key] = fields[key](value) if isinstance(value, str) else value
            except ValueError:
                raise UsageError(f"bad value for {section}.{key}: {value!r}") from None
        out[section] = dict(sorted(typed.items()))
    if out["run"]["model"] not in ("iconnet", "mfcc-ffn"):
        raise UsageError("run.model must be iconnet or mfcc-ffn")
    if out["run"]["model"] != "iconnet" and out["model"]:
        raise UsageError("[model] keys apply to iconnet only")
    return out


def config_text(conf):
    parser = configparser.ConfigParser()
    for section, values in conf.items():
        parser[section] = {k: (",".join(map(str, v)) if isinstance(v, tuple) else str(v))
                           for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def run_id(conf):
    return hashlib.sha256(config_text(conf).encode()).hexdigest()[:12]


def train_config(conf):
    return experiment.TrainConfig(seed=conf["run"]["seed"], **conf["train"])


def load_dataset(conf):
    data = conf["data"]
    if data["synthetic"]:
        return audio_io.generate_synthetic(conf["run"]["seed"], data["n_per_class"])
    if not data["root"]:
        raise IConNetError(f"no dataset root: pass --root, set ${DATA_ENV}, or use --synthetic\n{DOWNLOAD_HELP}")
    return audio_io.load_physionet(data["root"])


def _prepare_out(path, force):
    path = Path(path)
    occupied = any(path.iterdir()) if path.is_dir() else path.exists()
    if occupied:
        if not force:
            raise IConNetError(f"{path} already exists; use --force to overwrite")
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    return path


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_ingest(args):
    root = args.root or os.environ.get(DATA_ENV)
    if not root:
        raise IConNetError(f"no dataset root given\n{DOWNLOAD_HELP}")
    manifest = audio_io.load_physionet(root)
    out = _prepare_out(args.out, args.force)
    manifest.to_csv(out)
    counts = manifest.counts
    print(f"Normal: {counts.get(audio_io.Label.NORMAL, 0)}")
    print(f"Abnormal: {counts.get(audio_io.Label.ABNORMAL, 0)}")
    print(f"total: {len(manifest)}")
    print(f"sha256: {experiment.manifest_checksum(manifest)}")
    print(f"manifest written to {out}")
    return 0


def cmd_synth_data(args):
    out = _prepare_out(args.out, args.force)
    manifest = audio_io.generate_synthetic(args.seed, args.n_per_class)
    written = audio_io.write_synthetic(manifest, out)
    print(f"wrote {len(written)} recordings to {out}")
    return 0


def _model_metadata(cfg, kind, fold_index):
    return {"kind_label": kind, "fold": fold_index, "segment_len": cfg.window_samples,
            "sample_rate_hz": cfg.sample_rate_hz}


def cmd_train(args):
    conf = resolve_config(args)
    rid = run_id(conf)
    out = _prepare_out(Path(args.out) / rid, args.force)
    manifest = load_dataset(conf)
    cfg = train_config(conf)
    kind = conf["run"]["model"]
    out.mkdir(parents=True)
    (out / "config.ini").write_text(config_text(conf))
    result = experiment.cross_validate(kind, manifest, cfg, conf["run"]["folds"], conf["run"]["jobs"],
                                       model_params=conf["model"] or None, keep_models=True)
    experiment.write_results_csv([result], out / "results.csv")
    extra = {"run_id": rid, "best_epochs": [f.best_epoch for f in result.folds],
             "history": {str(f.fold_index): f.history for f in result.folds}, "table": result.table()}
    models = []
    for f in result.folds:
        path = out / f"model_fold{f.fold_index}.icon"
        save_model(f.estimator.model_, path, _model_metadata(cfg, kind, f.fold_index))
        models.append(path)
    first = load_model(models[0])
    params = count_params(first)
    extra["parameters"] = {**params.as_dict(), "published_total": PUBLISHED_TOTAL_PARAMS,
                           "delta_vs_published": params.total - PUBLISHED_TOTAL_PARAMS}
    extra["model_file_bytes"] = {p.name: p.stat().st_size for p in models}
    extra["published_model_kb"] = PUBLISHED_MODEL_KB
    if isinstance(first, IConNet):
        reports = interpret.analyze_filters(first)
        stats, supp = _export_filters(reports, first, out / "interpret")
        extra["interpret"] = {"block1_bandpass": stats.__dict__, "high_band_suppression_2000": supp.__dict__}
    experiment.write_run_manifest(out / "run.json", cfg, manifest, [kind], conf["run"]["folds"], extra)
    t = result.table()
    print(f"run {rid}: {kind} UA {t['ua']:.2f}% F1 {t['f1']:.2f}% "
          f"(published UA {t['published_ua']}, F1 {t['published_f1']})")
    print(f"parameters: {params.total} (published {PUBLISHED_TOTAL_PARAMS}, delta {params.total - PUBLISHED_TOTAL_PARAMS})")
    print(f"outputs in {out}")
    return 0


def cmd_evaluate(args):
    run = Path(args.run)
    if not (run / "config.ini").is_file():
        raise IConNetError(f"{run} is not a training run directory (config.ini missing)")
    parser = configparser.ConfigParser()
    parser.read(run / "config.ini")
    conf = _typed({s: dict(parser[s]) for s in parser.sections()})
    manifest = load_dataset(conf)
    cfg = train_config(conf)
    folds = experiment.stratified_kfold(manifest, conf["run"]["folds"], cfg.seed, cfg.validation_fraction)
    fold_results = []
    for f in folds:
        path = run / f"model_fold{f.fold_index}.icon"
        est = estimator_from_model(load_model(path))
        report = experiment.evaluate_fold(est, f, cfg, manifest)
        fold_results.append(experiment.FoldResult(f.fold_index, report, [], 0))
    result = experiment.CrossValidationResult(conf["run"]["model"], fold_results)
    experiment.write_results_csv([result], sys.stdout)
    if args.out:
        out = _prepare_out(args.out, args.force)
        experiment.write_results_csv([result], out)
    return 0


def infer_recording(model, waveform, metadata=None):
    """Label, mean class probabilities and per-segment probabilities for one recording."""
    meta = metadata or getattr(model, "metadata", {}) or {}
    rate = int(meta.get("sample_rate_hz", audio_io.MODEL_RATE_HZ))
    seg_len = int(meta.get("segment_len", getattr(model.config, "segment_len", 5 * rate)))
    if waveform.duration_s < MIN_INFER_S:
        raise IConNetError(f"recording is {waveform.duration_s:.3f} s long; at least {MIN_INFER_S:.0f} s is required")
    x = audio_io.prepare_recording(waveform, rate).samples
    segs = audio_io.segment(audio_io.Waveform(x, rate), seg_len, seg_len, audio_io.PadPolicy.PAD_LAST_WITH_ZEROS)
    X = np.stack([s.samples for s in segs]).astype(np.float32)
    proba = estimator_from_model(model).predict_proba(X)
    mean = proba.mean(axis=0)
    label = audio_io.Label(int(np.argmax(mean)))
    return {
        "label": label.title,
        "probabilities": {audio_io.Label(i).title: float(p) for i, p in enumerate(mean)},
        "segments": [{"offset_s": s.offset_samples / rate,
                      "probabilities": {audio_io.Label(i).title: float(p) for i, p in enumerate(row)}}
                     for s, row in zip(segs, proba)],
    }


def cmd_infer(args):
    model = load_model(args.model)
    wf = audio_io.read_wav(args.wav)
    if len(wf.samples) == 0:
        raise IConNetError(f"{args.wav} contains no samples")
    res = infer_recording(model, wf)
    if args.json:
        print(json.dumps(res, indent=2, sort_keys=True))
    else:
        probs = "  ".join(f"{k}={v:.4f}" for k, v in res["probabilities"].items())
        print(f"{res['label']}  {probs}  ({len(res['segments'])} segments)")
    return 0


def _export_filters(reports, model, out):
    summaries = []
    for block, layer in ((1, model.block1), (2, model.block2)):
        rs = [r for r in reports if r.block == block]
        summaries.extend(interpret.band_summary(rs, interpret.default_bands(layer.sample_rate_hz)))
    stats = interpret.passband_statistics(reports, 1)
    supp = interpret.high_band_suppression(reports, 2000.0, 1)
    lines = ["population: block-1 BandPass kernels",
             "published block-1 passband centres: 643 +/- 134 Hz"]
    if supp.count:
        lines.append(f"high-band suppression above 2000 Hz: {supp.fraction:.3f} of {supp.count} kernels")
    else:
        lines.append("high-band suppression above 2000 Hz: no kernels designed above the cutoff")
    interpret.export_report(reports, summaries, out, lines)
    return stats, supp


def cmd_inspect_filters(args):
    if args.model:
        model = load_model(args.model)
        if not isinstance(model, IConNet):
            raise IConNetError("inspect-filters needs an IConNet model")
    else:
        model = IConNet(IConNetConfig(seed=args.seed))
    out = _prepare_out(args.out, args.force)
    reports = interpret.analyze_filters(model, args.n_fft)
    stats, supp = _export_filters(reports, model, out)
    sys.stdout.write((out / "summary.txt").read_text())
    return 0


def gradcheck(seed=0, epsilon=1e-6):
    """Finite-difference check of the full loss on a tiny float64 IConNet."""
    cfg = IConNetConfig(segment_len=2000, block1=BlockConfig(8, 32), block2=BlockConfig(4, 16),
                        ffn_hidden=(8,), seed=seed, dtype="float64")
    model = IConNet(cfg)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, cfg.segment_len))
    y = np.array([0, 1])
    w = np.array([1.0, 2.0])

    def loss(params):
        return G.weighted_cross_entropy(model(x), y, w)

    return G.finite_diff_check(loss, model.parameters(), epsilon)


def cmd_gradcheck(args):
    err = gradcheck(args.seed, args.epsilon)
    ok = err < args.tolerance
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {args.tolerance:g})")
    return 0 if ok else 2


# --------------------------------------------------------------------------
# Dispatch
# --------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="iconnet", description="IConNet heart-sound classification toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    p.subcommands = sub.choices

    s = sub.add_parser("ingest", help="index the PhysioNet 2016 corpus")
    s.add_argument("--root", help=f"corpus root (default ${DATA_ENV})")
    s.add_argument("--out", default="manifest.csv")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth-data", help="write the synthetic corpus as WAV files")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-per-class", type=int, default=experiment.SYNTHETIC_PER_CLASS)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="k-fold cross-validation run")
    s.add_argument("--model", choices=["iconnet", "mfcc-ffn"], default="iconnet")
    s.add_argument("--folds", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)
    src = s.add_mutually_exclusive_group()
    src.add_argument("--synthetic", action="store_true")
    src.add_argument("--root")
    s.add_argument("--config", help="INI file with [run] [data] [train] [model] sections")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.add_argument("--out", default="runs")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="re-evaluate the fold models of a run")
    s.add_argument("--run", required=True)
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("infer", help="classify one recording")
    s.add_argument("--model", required=True)
    s.add_argument("--wav", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("inspect-filters", help="frequency-response report of the front end")
    s.add_argument("--model", help="model file (default: freshly initialized IConNet)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-fft", type=int, default=interpret.ANALYSIS_NFFT)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_inspect_filters)

    s = sub.add_parser("gradcheck", help="finite-difference check of the tiny IConNet")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epsilon", type=float, default=1e-6)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip() + "\niconnet: a subcommand is required")
        if extra:
            sub = parser.subcommands[args.command]
            raise UsageError(f"{sub.prog}: unrecognized arguments: {' '.join(extra)}\n"
                             f"{sub.format_usage().strip()}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (IConNetError, OSError, ValueError, ArithmeticError) as exc:
        print(f"iconnet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
