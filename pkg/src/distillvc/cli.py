"""Command-line surface: one subcommand per pipeline stage.

Exit codes: 0 success, 2 config error (bad flags, bad config keys, invalid
parameters), 3 data error (missing or malformed artifacts), 4 numeric error
(divergence, broken gradient or contract checks).

Each run takes an exclusive sentinel lock on its output directory and writes
the fully resolved configuration next to its outputs. Input artifacts are
never modified in place.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

from .config import derive_seed, resolve_config
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    NumericError,
    ParameterError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

GRAD_TOLERANCE = 1e-4


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing {what}: {path}")
    return path


@contextlib.contextmanager
def _locked(out_dir: Path):
    """Exclusive sentinel lock so two runs cannot write one directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(
            f"output directory {out_dir} is locked ({lock}); "
            "another run is writing here, or a crashed run left the lock behind"
        ) from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _load_mel_or_wav(path, fcfg):
    """Accept either a mel matrix file or a WAV; sniff by magic bytes."""
    from .features import MEL_FILE_MAGIC, load_wav, mel_spectrogram, read_mel_file

    path = _require(path, "input audio/mel file")
    head = path.open("rb").read(4)
    if head == MEL_FILE_MAGIC:
        return read_mel_file(path, fcfg.frame_rate)
    return mel_spectrogram(load_wav(path, fcfg), fcfg)


def cmd_gen_corpus(args, cfg):
    from .synth import generate_corpus
    from .training import feature_config_from

    with _locked(Path(args.out)) as out:
        cfg.dump(out / "config.resolved")
        generate_corpus(out, cfg["corpus.n_speakers"], cfg["corpus.n_scripts"], args.seed, feature_config_from(cfg))
    print(f"corpus: {args.out} ({cfg['corpus.n_speakers']} speakers x {cfg['corpus.n_scripts']} scripts, seed {args.seed})")


def cmd_extract_features(args, cfg):
    from .training import extract_features

    corpus = _require(args.corpus, "corpus directory")
    _require(corpus / "manifest.tsv", "corpus manifest")
    with _locked(Path(args.out)) as out:
        cfg.dump(out / "config.resolved")
        extract_features(corpus, out, cfg)
    print(f"features: {args.out}")


def cmd_train_vocoder(args, cfg):
    from .training import train_vocoder_run

    corpus = _require(args.corpus, "corpus directory")
    features = _require(args.features, "features directory")
    _require(features / "stats.npz", "feature stats (run extract-features first)")
    with _locked(Path(args.out)) as out:
        cfg.dump(out / "config.resolved")
        res = train_vocoder_run(corpus, features, out, cfg, args.seed)
    print(f"vocoder: {res.ckpt_path} (heldout loss {res.val_loss_init:.4f} -> {res.val_loss_final:.4f})")


def cmd_train_teacher(args, cfg):
    from .training import train_teacher_run

    corpus = _require(args.corpus, "corpus directory")
    features = _require(args.features, "features directory")
    _require(features / "stats.npz", "feature stats (run extract-features first)")
    with _locked(Path(args.out)) as out:
        cfg.dump(out / "config.resolved")
        res = train_teacher_run(corpus, features, out, cfg, args.seed)
    print(f"teacher: {res.ckpt_path} (loss {res.first_epoch_loss:.4f} -> {res.final_epoch_loss:.4f})")


def cmd_distill(args, cfg):
    from .distill import distill_run

    teacher = _require(args.teacher, "teacher checkpoint")
    vocoder = _require(args.vocoder, "vocoder checkpoint")
    corpus = _require(args.corpus, "corpus directory")
    features = _require(args.features, "features directory")
    with _locked(Path(args.out)) as out:
        cfg.dump(out / "config.resolved")
        res = distill_run(teacher, vocoder, corpus, features, out, cfg, args.seed)
    print(f"student: {res.ckpt_path} ({res.steps} steps, final generator loss {res.final_total_g:.4f})")


def cmd_convert(args, cfg):
    from .checkpoint import load_model_bundle, load_vocoder
    from .convert import ConversionRequest, convert_fast, convert_multistep
    from .features import write_mel_file, write_wav
    import numpy as np
    import torch

    bundle = load_model_bundle(_require(args.model, "model checkpoint"))
    k = args.k if args.k is not None else cfg["convert.k"]
    init = args.init if args.init is not None else (cfg["convert.init"] if k == 1 else "clean_source")
    s1 = args.s1 if args.s1 is not None else cfg["convert.s1"]
    sk = args.sk if args.sk is not None else cfg["convert.sk"]
    req = ConversionRequest(
        source_mel=_load_mel_or_wav(args.source, bundle.feature_config),
        target_ref_mel=_load_mel_or_wav(args.target_ref, bundle.feature_config),
        k=k, endpoints=(s1, sk), init=init, seed=args.seed,
    )
    with _locked(Path(args.out)) as out:
        cfg.dump(out / "config.resolved")
        one_step = k == 1 and init == "diffused_source"
        res = convert_fast(req, bundle) if one_step else convert_multistep(req, bundle)
        mel_path = out / (Path(args.source).stem + "_converted.mel")
        write_mel_file(mel_path, res.mel)
        wrote = [str(mel_path)]
        if args.wav:
            vocoder, _ = load_vocoder(_require(args.vocoder, "vocoder checkpoint"))
            with torch.no_grad():
                wav = vocoder(torch.from_numpy(res.normalized.T[None].astype(np.float32)))
            wav_path = out / (Path(args.source).stem + "_converted.wav")
            write_wav(wav_path, wav[0].numpy(), bundle.feature_config)
            wrote.append(str(wav_path))
    print(f"converted (K={k}, init={init}, {res.predictor_calls} predictor calls): " + ", ".join(wrote))


def cmd_sweep_init(args, cfg):
    from .checkpoint import load_model_bundle
    from .convert import parse_grid, sweep_initial_state, write_sweep_csv
    from .evaluate import calibrate_verifier, evaluation_trials, feature_mel, target_reference_mel
    from .training import load_stats

    bundle = load_model_bundle(_require(args.model, "model checkpoint"))
    corpus = _require(args.corpus, "corpus directory")
    features = _require(args.features, "features directory")
    stats = load_stats(features)
    grid = parse_grid(args.grid if args.grid is not None else cfg["sweep.grid"])

    frame_rate = bundle.feature_config.frame_rate
    pairs = []
    for src_utt, tgt_spk, _sc in evaluation_trials(corpus):
        spk, sc = src_utt.split("_", 1)
        pairs.append((
            feature_mel(features, spk, sc, frame_rate),
            target_reference_mel(features, corpus, tgt_spk, frame_rate),
            tgt_spk,
        ))
    verifier = calibrate_verifier(bundle, corpus, features)
    with _locked(Path(args.out)) as out:
        cfg.dump(out / "config.resolved")
        cells = sweep_initial_state(
            bundle, pairs, grid, ("clean_source", "diffused_source"),
            verifier, stats, derive_seed(args.seed, "sweep"),
        )
        write_sweep_csv(out / "sweep.csv", cells)
    print(f"sweep: {out / 'sweep.csv'} ({len(cells)} cells, {len(pairs)} pairs each)")


def cmd_evaluate(args, cfg):
    from .evaluate import evaluation_run

    model = _require(args.model, "model checkpoint")
    corpus = _require(args.corpus, "corpus directory")
    features = _require(args.features, "features directory")
    with _locked(Path(args.out)) as out:
        cfg.dump(out / "config.resolved")
        report = evaluation_run(
            model, corpus, features, out, cfg, args.seed,
            k=args.k, init=args.init, with_cost=not args.no_cost,
        )
    sys.stdout.write(report.summary_path.read_text())


def cmd_grad_check(args, cfg):
    from .distill import grad_check_suite

    results = grad_check_suite(seed=args.seed)
    rows = [f"{name},{value!r}" for name, value in results.items()]
    if args.out is not None:
        with _locked(Path(args.out)) as out:
            cfg.dump(out / "config.resolved")
            (out / "grad_check.csv").write_text("check,value\n" + "\n".join(rows) + "\n")
    for name, value in results.items():
        print(f"{name:<22} {value!r}")
    bad = [n for n, v in results.items() if n != "sg_teacher_max_grad" and v >= GRAD_TOLERANCE]
    if results["sg_teacher_max_grad"] != 0.0:
        bad.append("sg_teacher_max_grad")
    if bad:
        raise NumericError(f"gradient checks failed tolerance {GRAD_TOLERANCE}: {', '.join(bad)}")
    print(f"all gradient checks within {GRAD_TOLERANCE}; stop-gradient path exactly zero")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distillvc",
        description="Diffusion voice conversion distilled to one step: corpus, training, distillation, conversion, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=0, help="global seed; stages derive their own")
        p.add_argument("--preset", choices=("toy", "paper"), default=None, help="named scale preset")
        p.add_argument("--out", required=out_required, default=None, help="output directory")

    p = sub.add_parser("gen-corpus", help="generate the synthetic multi-speaker corpus")
    common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("extract-features", help="mel-extract a corpus and compute train-split stats")
    common(p)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train-vocoder", help="train the mel-to-waveform vocoder")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--features", required=True)
    p.set_defaults(func=cmd_train_vocoder)

    p = sub.add_parser("train-teacher", help="pretrain content encoder, then the multi-step denoiser")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--features", required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="adversarially distill the teacher into a one-step student")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--vocoder", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--features", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("convert", help="convert one utterance to a target voice")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--source", required=True, help="source utterance (WAV or mel file)")
    p.add_argument("--target-ref", required=True, help="target speaker reference (WAV or mel file)")
    p.add_argument("--k", type=int, default=None, help="reverse steps (default from config)")
    p.add_argument("--init", choices=("clean_source", "diffused_source", "pure_noise"), default=None)
    p.add_argument("--s1", type=int, default=None, help="lowest reverse step S_1")
    p.add_argument("--sk", type=int, default=None, help="starting reverse step S_K")
    p.add_argument("--wav", action="store_true", help="also vocode to a waveform (needs --vocoder)")
    p.add_argument("--vocoder", default=None, help="vocoder checkpoint for --wav")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("sweep-init", help="sweep one-step conversion over S_K and init mode")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--grid", default=None, help="start:stop:step, e.g. 50:1000:50")
    p.set_defaults(func=cmd_sweep_init)

    p = sub.add_parser("evaluate", help="proxy metrics on held-out conversion trials")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--init", choices=("clean_source", "diffused_source", "pure_noise"), default=None)
    p.add_argument("--no-cost", action="store_true", help="skip the timed K-sweep cost pass")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", help="finite-difference checks of every training loss")
    common(p, out_required=False)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.preset, args.config)
        if args.command == "convert" and args.wav and args.vocoder is None:
            raise ConfigError("--wav requires --vocoder CKPT")
        args.func(args, cfg)
        return EXIT_OK
    except (ConfigError, ParameterError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DataError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ContractError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
