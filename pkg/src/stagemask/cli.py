"""Batch command-line surface.

Subcommands: info, synth, mix, train, enhance, eval, spec-dump.  Every
command is a single deterministic batch run: identical inputs and seeds give
byte-identical outputs.  Exit codes: 0 success, 2 usage/config/input error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import audio, dsp, metrics
from .blocks import receptive_field
from .config import ConfigError, default_run_config, parse_config_file
from .model import MultiStageModel
from .train import FormatError, TrainingDivergedError, fit, load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class InputError(Exception):
    """Bad invocation, config, or input data detected before any work."""


def _require_file(path: str, kind: str):
    if not os.path.isfile(path):
        raise InputError(f"{kind} not found: {path}")


def _read_wav_checked(path: str, kind: str) -> dsp.Waveform:
    _require_file(path, kind)
    try:
        return audio.read_wav(path)
    except audio.WavFormatError as exc:
        raise InputError(str(exc)) from exc


def _load_checkpoint_checked(path: str) -> MultiStageModel:
    _require_file(path, "checkpoint")
    try:
        model, _ = load_checkpoint(path)
    except FormatError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return model


def _load_pairs(manifest_path: str):
    _require_file(manifest_path, "manifest")
    try:
        rows = audio.read_manifest(manifest_path)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if not rows:
        raise InputError(f"manifest is empty: {manifest_path}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    pairs = []
    for clean_path, noisy_path, _ in rows:
        if not os.path.isabs(clean_path):
            clean_path = os.path.join(base, clean_path)
        if not os.path.isabs(noisy_path):
            noisy_path = os.path.join(base, noisy_path)
        clean = _read_wav_checked(clean_path, "clean wav")
        noisy = _read_wav_checked(noisy_path, "noisy wav")
        pairs.append((noisy, clean))
    return pairs


# -- commands ---------------------------------------------------------------

def cmd_info(args) -> int:
    cfg = parse_config_file(args.config).model
    model = MultiStageModel(cfg)
    counts = model.count_parameters()
    rf = receptive_field(cfg.kernel, cfg.blocks_per_stack)
    print(f"fft_size: {cfg.fft_size}")
    print(f"hop: {cfg.hop}")
    print(f"freq_bins: {cfg.freq_bins}")
    print(f"stages: {cfg.stages}")
    print(f"stacks_per_stage: {cfg.stacks}")
    print(f"blocks_per_stack: {cfg.blocks_per_stack}")
    print(f"kernel: {cfg.kernel}")
    print(f"fusion_blocks: {cfg.num_fusions}")
    print(f"receptive_field_frames: {rf}")
    print(f"params_sa_block: {counts['sa_block']}")
    print(f"params_tcn_blocks: {counts['tcn_blocks']}")
    print(f"params_stage_glue: {counts['stage_glue']}")
    print(f"params_per_stage: {counts['per_stage']}")
    print(f"params_fusion_block: {counts['fusion_block']}")
    print(f"params_total: {counts['total']}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise InputError(f"--n must be >= 1, got {args.n}")
    os.makedirs(args.outdir, exist_ok=True)
    items = audio.synth_toy_dataset(args.n, seed=args.seed)
    rows = []
    for i, item in enumerate(items):
        clean_name = f"clean_{i:03d}.wav"
        noisy_name = f"noisy_{i:03d}.wav"
        audio.write_wav(os.path.join(args.outdir, clean_name), item.clean)
        audio.write_wav(os.path.join(args.outdir, noisy_name), item.noisy)
        rows.append((clean_name, noisy_name, item.snr_db))
    audio.write_manifest(os.path.join(args.outdir, "manifest.tsv"), rows)
    return EXIT_OK


def cmd_mix(args) -> int:
    clean = _read_wav_checked(args.clean, "clean wav")
    noise = _read_wav_checked(args.noise, "noise wav")
    try:
        noisy = audio.mix_at_snr(clean, noise, args.snr)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    audio.write_wav(args.out, noisy)
    return EXIT_OK


def cmd_train(args) -> int:
    run = parse_config_file(args.config)
    manifest = args.data or run.train_manifest
    out = args.out or run.checkpoint
    if manifest is None:
        raise InputError("no training manifest (pass --data or set train_manifest)")
    if out is None:
        raise InputError("no checkpoint path (pass --out or set checkpoint)")
    pairs = _load_pairs(manifest)
    model = MultiStageModel(run.model)
    records = fit(model, pairs, run.train, checkpoint_path=out)
    for record in records:
        print(record.line())
    return EXIT_OK


def cmd_enhance(args) -> int:
    model = _load_checkpoint_checked(args.ckpt)
    wav = _read_wav_checked(args.infile, "input wav")
    if len(wav) < model.config.fft_size:
        raise InputError(
            f"input is shorter ({len(wav)}) than one frame ({model.config.fft_size})"
        )
    enhanced = model.enhance(wav)
    audio.write_wav(args.out, enhanced)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_checkpoint_checked(args.ckpt)
    pairs = _load_pairs(args.manifest)
    report = metrics.evaluate_set(model, pairs)
    print(report.to_tsv())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_spec_dump(args) -> int:
    wav = _read_wav_checked(args.infile, "input wav")
    cfg = (
        parse_config_file(args.config).model
        if args.config
        else default_run_config().model
    )
    if len(wav) < cfg.fft_size:
        raise InputError(
            f"input is shorter ({len(wav)}) than one frame ({cfg.fft_size})"
        )
    win = dsp.hann_window(cfg.fft_size, cfg.hop)
    mag, _ = dsp.stft(wav, win)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in mag.values:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
    return EXIT_OK


# -- plumbing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagemask",
        description="Multi-stage spectral-mask speech enhancement toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("info", help="print model geometry and parameter counts")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("synth", help="generate a synthetic toy dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mix", help="mix clean speech with noise at a target SNR")
    p.add_argument("--clean", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--snr", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="manifest path (overrides config)")
    p.add_argument("--out", help="checkpoint path (overrides config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one wav with a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("spec-dump", help="dump the magnitude matrix as CSV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_spec_dump)

    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())
