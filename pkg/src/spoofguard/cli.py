"""Command-line entry point: ``spoofguard <command> [options]``.

Default output directories chain together, so

    spoofguard synth-data && spoofguard extract && spoofguard train \
        && spoofguard score && spoofguard evaluate

runs end to end with no flags. Every command writes ``manifest.json`` into its
output directory. Errors go to stderr as ``spoofguard: <CODE>: message``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, InvalidInputError, SpoofGuardError
from .lfcc import FeatureMatrix, FrontendConfig, read_feature_dump, write_feature_dump
from .metrics import TdcfParams, evaluate_report, fuse_scores
from .model import load_model, save_model
from .ohem import OhemConfig, TrainConfig, score_dataset, train, write_stats_csv
from .pipeline import build_model, extract_features, summary_matrix, waveform_matrix, worker_count
from .signal_io import (
    SynthConfig, generate_synthetic_dataset, labels_from_records, read_protocol, read_scores, read_wav,
    write_protocol, write_scores, write_wav,
)

log = logging.getLogger("spoofguard")

DEFAULT_OUT = {
    "synth-data": "data",
    "extract": "features",
    "train": "train",
    "score": "scores",
    "evaluate": "eval",
    "fuse": "fused",
}


def _fraction(text):
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"fraction must lie in (0, 1], got {text}")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _key_value(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"non-numeric value in {text!r}") from None


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key=value file overriding option defaults")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")

    parser = argparse.ArgumentParser(prog="spoofguard", description="Synthetic-voice anti-spoofing toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="generate a synthetic labelled corpus")
    d = SynthConfig()
    p.add_argument("--n-bonafide", type=_positive, default=d.n_bonafide)
    p.add_argument("--n-spoof", type=_positive, default=d.n_spoof)
    p.add_argument("--utterance-len", type=_positive, default=d.utterance_len)
    p.add_argument("--difficulty", type=float, default=d.difficulty)
    p.add_argument("--hard-fraction", type=float, default=d.hard_fraction)
    p.add_argument("--sample-rate", type=_positive, default=d.sample_rate)
    p.add_argument("--attacks", default=",".join(d.attacks))

    p = sub.add_parser("extract", parents=[common], help="LFCC features for every utterance")
    p.add_argument("--data", default=DEFAULT_OUT["synth-data"])
    f = FrontendConfig()
    p.add_argument("--win-ms", type=float, default=f.win_ms)
    p.add_argument("--hop-ms", type=float, default=f.hop_ms)
    p.add_argument("--n-filters", type=_positive, default=f.n_filters)
    p.add_argument("--n-ceps", type=_positive, default=f.n_ceps)
    p.add_argument("--pre-emphasis", type=float, default=f.pre_emphasis)

    p = sub.add_parser("train", parents=[common], help="train a countermeasure with or without OHEM")
    p.add_argument("--data", default=DEFAULT_OUT["synth-data"])
    p.add_argument("--features", default=DEFAULT_OUT["extract"],
                   help="feature directory from 'extract' (tiny model); computed on the fly if absent")
    p.add_argument("--model", choices=["tiny", "raw-res2net"], default="tiny")
    p.add_argument("--raw-preset", choices=["full", "tiny"], default="full")
    p.add_argument("--ohem", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--ohem-scope", choices=["negatives_only", "all_samples"], default="negatives_only")
    p.add_argument("--rank-key", choices=["per_sample_loss", "bonafide_score"], default="per_sample_loss")
    p.add_argument("--fraction", type=_fraction, default=0.25)
    p.add_argument("--warmup-epochs", type=int, default=0)
    p.add_argument("--epochs", type=_positive, default=20)
    p.add_argument("--batch-size", type=_positive, default=64)
    p.add_argument("--lr", type=float, default=None, help="Adam step size (default 1e-3 tiny, 1e-4 raw-res2net)")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("score", parents=[common], help="score a dataset with a trained checkpoint")
    p.add_argument("--checkpoint", default=str(Path(DEFAULT_OUT["train"]) / "model.ckpt"))
    p.add_argument("--data", default=DEFAULT_OUT["synth-data"])
    p.add_argument("--features", default=DEFAULT_OUT["extract"])

    p = sub.add_parser("evaluate", parents=[common], help="EER, min t-DCF, per-attack EER and DET data")
    p.add_argument("--scores", default=str(Path(DEFAULT_OUT["score"]) / "scores.txt"))
    p.add_argument("--protocol", default=str(Path(DEFAULT_OUT["synth-data"]) / "protocol.txt"))
    p.add_argument("--tdcf", type=_key_value, action="append", default=[], metavar="KEY=VALUE",
                   help="override a t-DCF cost or prior, e.g. asv_p_miss=0.01")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("fuse", parents=[common], help="z-norm score-level fusion of several systems")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--weights", help="comma-separated nonnegative weights, one per score file")
    return parser


# --- config handling ---------------------------------------------------------

def read_config(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _subparser(parser, command):
    return parser._subparsers._group_actions[0].choices[command]


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config(args.config)
        sub = _subparser(parser, args.command)
        actions = {a.dest: a for a in sub._actions}
        # options given on the command line win over the config file
        explicit = set()
        for tok in argv:
            if tok.startswith("--"):
                explicit.add(tok[2:].split("=", 1)[0].replace("-", "_"))
        for key, raw in values.items():
            if key not in actions or key in ("config", "help"):
                raise ConfigError(f"{args.config}: unknown key {key!r} for '{args.command}'")
            if key in explicit:
                continue
            action = actions[key]
            convert = action.type or str
            try:
                if isinstance(action, argparse._StoreTrueAction):
                    value = raw.lower() in ("1", "true", "yes", "on")
                elif action.nargs == "+" or isinstance(action, argparse._AppendAction):
                    value = [convert(v) for v in raw.split(",") if v]
                else:
                    value = convert(raw)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ConfigError(f"{args.config}: bad value for {key}: {exc}") from None
            setattr(args, key, value)
    if args.out is None:
        args.out = DEFAULT_OUT[args.command]
    return parser, args


def manifest_argv(manifest: dict) -> list[str]:
    """Command line that reproduces the run recorded in ``manifest``."""
    command, cfg = manifest["command"], manifest["config"]
    argv = [command]
    for action in _subparser(build_parser(), command)._actions:
        if not action.option_strings or action.dest in ("help", "config", "force"):
            continue
        value = cfg.get(action.dest)
        if value is None or value is False:
            continue
        flag = action.option_strings[0]
        if isinstance(action, argparse._StoreTrueAction):
            argv.append(flag)
        elif isinstance(action, argparse._AppendAction):
            for k, v in value:
                argv += [flag, f"{k}={v!r}"]
        elif action.nargs == "+":
            argv += [flag, *map(str, value)]
        elif action.type is _on_off:
            argv += [flag, "on" if value else "off"]
        else:
            argv += [flag, repr(value) if isinstance(value, float) else str(value)]
    return argv


# --- helpers -----------------------------------------------------------------

def _prepare_out(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise InvalidInputError(f"{out}: output directory is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out, args, outputs, extra=None):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("command",)}
    manifest = {
        "command": args.command,
        "config": cfg,
        "seed": args.seed,
        "version": __version__,
        "outputs": sorted(str(p) for p in outputs),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _load_dataset(data_dir):
    data_dir = Path(data_dir)
    proto = data_dir / "protocol.txt"
    if not proto.exists():
        raise InvalidInputError(f"{proto}: protocol file not found")
    records = read_protocol(proto)
    missing = [r.utterance_id for r in records if not (data_dir / "wav" / f"{r.utterance_id}.wav").exists()]
    if missing:
        raise InvalidInputError(f"{data_dir}: {len(missing)} utterances missing audio: {', '.join(missing[:10])}")
    waves = [read_wav(data_dir / "wav" / f"{r.utterance_id}.wav") for r in records]
    return waves, records


def _features_for(records, waves, features_dir):
    dump = Path(features_dir) / "features.bin" if features_dir else None
    if dump is not None and dump.exists():
        feats = read_feature_dump(dump)
        missing = [r.utterance_id for r in records if r.utterance_id not in feats]
        if missing:
            raise InvalidInputError(f"{dump}: no features for {len(missing)} utterances: {', '.join(missing[:10])}")
        return summary_matrix([FeatureMatrix(feats[r.utterance_id]) for r in records])
    # features are stored as float32; round the same way so both paths agree
    feats = extract_features(waves)
    return summary_matrix([FeatureMatrix(f.data.astype(np.float32)) for f in feats])


# --- commands ----------------------------------------------------------------

def cmd_synth(args):
    cfg = SynthConfig(
        n_bonafide=args.n_bonafide, n_spoof=args.n_spoof, utterance_len=args.utterance_len,
        difficulty=args.difficulty, hard_fraction=args.hard_fraction, seed=args.seed,
        sample_rate=args.sample_rate, attacks=tuple(a for a in args.attacks.split(",") if a),
    )
    cfg.validate()
    out = _prepare_out(args)
    waves, records = generate_synthetic_dataset(cfg)
    (out / "wav").mkdir(exist_ok=True)
    for w, r in zip(waves, records):
        write_wav(out / "wav" / f"{r.utterance_id}.wav", w)
    write_protocol(out / "protocol.txt", records)
    _write_manifest(out, args, [out / "protocol.txt", out / "wav"], {"synth": dataclasses.asdict(cfg)})
    log.info("wrote %d utterances to %s", len(records), out)


def cmd_extract(args):
    fcfg = FrontendConfig(win_ms=args.win_ms, hop_ms=args.hop_ms, n_filters=args.n_filters,
                          n_ceps=args.n_ceps, pre_emphasis=args.pre_emphasis)
    waves, records = _load_dataset(args.data)
    for rate in sorted({w.sample_rate for w in waves}):
        fcfg.validate(rate)
    out = _prepare_out(args)
    feats = extract_features(waves, fcfg, threads=worker_count())
    write_feature_dump(out / "features.bin", {r.utterance_id: f for r, f in zip(records, feats)})
    _write_manifest(out, args, [out / "features.bin", out / "features.bin.manifest"],
                    {"frontend": dataclasses.asdict(fcfg)})
    log.info("extracted %d feature matrices (%dx%d for the first)", len(feats), *feats[0].data.shape)


def cmd_train(args):
    ohem = OhemConfig(enabled=args.ohem, fraction=args.fraction, scope=args.ohem_scope,
                      rank_key=args.rank_key, warmup_epochs=args.warmup_epochs)
    lr = args.lr if args.lr is not None else (1e-3 if args.model == "tiny" else 1e-4)
    tcfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, seed=args.seed, lr=lr,
                       model="tiny_reference" if args.model == "tiny" else "raw_res2net")
    ohem.validate()
    tcfg.validate(ohem)
    waves, records = _load_dataset(args.data)
    out = _prepare_out(args)
    if args.model == "tiny":
        inputs = _features_for(records, waves, args.features)
        model = build_model("tiny", seed=args.seed, n_in=inputs.shape[1])
        model.fit_normalizer(inputs)
    else:
        model = build_model(args.model, seed=args.seed, preset=args.raw_preset)
        inputs = waveform_matrix(waves, model.cfg.input_len)
    started = time.perf_counter()
    result = train(model, inputs, labels_from_records(records), tcfg, ohem)
    log.info("trained %d epochs in %.1f s", tcfg.epochs, time.perf_counter() - started)
    save_model(out / "model.ckpt", model)
    write_stats_csv(out / "stats.csv", result.batches)
    outputs = [out / "model.ckpt", out / "stats.csv"]
    if not args.no_plots:
        from .plotting import plot_training
        plot_training(result.epoch_loss, out / "training_loss.png")
        outputs.append(out / "training_loss.png")
    _write_manifest(out, args, outputs, {
        "train": dataclasses.asdict(tcfg), "ohem": dataclasses.asdict(ohem),
        "final_epoch_loss": result.epoch_loss[-1],
    })


def cmd_score(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise InvalidInputError(f"{ckpt}: checkpoint not found")
    model = load_model(ckpt)
    waves, records = _load_dataset(args.data)
    out = _prepare_out(args)
    if model.kind == "tiny_reference":
        inputs = _features_for(records, waves, args.features)
        if inputs.shape[1] != model.n_in:
            raise InvalidInputError(f"features have {inputs.shape[1]} dims, checkpoint expects {model.n_in}")
    else:
        inputs = waveform_matrix(waves, model.cfg.input_len)
    scores = score_dataset(model, inputs, [r.utterance_id for r in records])
    write_scores(out / "scores.txt", scores)
    _write_manifest(out, args, [out / "scores.txt"])


def cmd_evaluate(args):
    for path in (args.scores, args.protocol):
        if not Path(path).exists():
            raise InvalidInputError(f"{path}: file not found")
    scores = read_scores(args.scores)
    records = read_protocol(args.protocol)
    known = {r.utterance_id for r in records}
    unknown = sorted(set(scores) - known)
    if unknown:
        raise InvalidInputError(f"{len(unknown)} scored ids not in protocol: {', '.join(unknown[:10])}")
    fields = {f.name for f in dataclasses.fields(TdcfParams)}
    unknown_keys = sorted({k for k, _ in args.tdcf} - fields)
    if unknown_keys:
        raise ConfigError(f"unknown t-DCF parameter(s): {', '.join(unknown_keys)}")
    params = TdcfParams(**dict(args.tdcf))
    params.validate()
    report = evaluate_report(scores, [r for r in records if r.utterance_id in scores], params)
    out = _prepare_out(args)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_table())
    with open(out / "det.tsv", "w") as fh:
        fh.write("threshold\tp_miss\tp_fa\n")
        for t, m, f in report.det:
            fh.write(f"{t!r}\t{m!r}\t{f!r}\n")
    with open(out / "per_attack.tsv", "w") as fh:
        fh.write("attack\teer_percent\n")
        for a, v in report.per_attack.items():
            fh.write(f"{a}\t{v:.4f}\n")
    outputs = [out / n for n in ("report.json", "report.txt", "det.tsv", "per_attack.tsv")]
    if not args.no_plots:
        from .plotting import plot_det, plot_per_attack
        plot_det(report.det, out / "det.png", report.eer_percent)
        plot_per_attack(report.per_attack, out / "per_attack.png", report.eer_percent)
        outputs += [out / "det.png", out / "per_attack.png"]
    _write_manifest(out, args, outputs)
    sys.stdout.write(report.to_table())


def cmd_fuse(args, parser):
    if len(args.scores) < 2:
        parser.error("fuse needs at least two score files")
    weights = None
    if args.weights:
        try:
            weights = [float(w) for w in args.weights.split(",")]
        except ValueError:
            parser.error(f"bad --weights {args.weights!r}")
        if len(weights) != len(args.scores):
            parser.error(f"{len(weights)} weights for {len(args.scores)} score files")
    systems = []
    for path in args.scores:
        if not Path(path).exists():
            raise InvalidInputError(f"{path}: file not found")
        systems.append(read_scores(path))
    fused = fuse_scores(systems, weights)
    out = _prepare_out(args)
    write_scores(out / "scores.txt", fused)
    _write_manifest(out, args, [out / "scores.txt"], {"inputs": list(args.scores), "weights": weights})


COMMANDS = {
    "synth-data": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        parser, args = parse_args(argv)
        if args.command == "fuse":
            cmd_fuse(args, parser)
        else:
            COMMANDS[args.command](args)
    except SpoofGuardError as exc:
        print(f"spoofguard: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"spoofguard: E_IO: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
