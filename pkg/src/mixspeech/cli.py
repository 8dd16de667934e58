"""Command-line entry point.

Machine-readable results go to stdout as one JSON line; logs go to stderr.
Exit codes: 0 success, 2 usage or validation error, 3 training aborted.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .corpus import CorpusError, CorpusSpec, generate_corpus, parse_snr
from .model import ModelError

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3

log = logging.getLogger("mixspeech")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


def _prepare_out(path: Path, force: bool, is_dir: bool = True) -> None:
    if path.exists():
        occupied = path.is_file() or any(path.iterdir())
        if occupied and not force:
            raise UsageError(f"{path} exists and is not empty (use --force to replace it)")
        if occupied:
            shutil.rmtree(path) if path.is_dir() else path.unlink()
    if is_dir:
        path.mkdir(parents=True, exist_ok=True)


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {path} does not exist")
    return p


def cmd_gen_corpus(args) -> dict:
    spec_path = _require_file(args.spec, "spec file")
    try:
        data = json.loads(spec_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"spec file {spec_path}: invalid JSON ({exc})") from exc
    spec = CorpusSpec.from_dict(data)
    out = Path(args.out)
    _prepare_out(out, args.force)
    counts = generate_corpus(spec, out)
    return {"corpus": str(out), "counts": counts, "feature_dim": spec.feature_dim,
            "n_phonemes": spec.n_phonemes, "n_visemes": spec.n_visemes,
            "tgt_vocab": spec.tgt_vocab, "master_seed": spec.master_seed}


def _last_metrics(run_dir: Path) -> dict:
    lines = (run_dir / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
    evals = [json.loads(line) for line in lines if '"eval"' in line]
    return evals[-1]["eval"] if evals else {}


def cmd_pretrain(args) -> dict:
    from .train import pretrain_audio

    config = load_config(_require_file(args.config, "config file"))
    out = Path(args.out)
    _prepare_out(out, args.force)
    final = pretrain_audio(config, out)
    return {"stage": "pretrain", "checkpoint": str(final), "run_dir": str(out),
            "valid": _last_metrics(out)}


def cmd_train(args) -> dict:
    from .train import selflearn

    config = load_config(_require_file(args.config, "config file"))
    init = _require_file(args.init, "checkpoint")
    out = Path(args.out)
    _prepare_out(out, args.force)
    final = selflearn(config, init, out)
    return {"stage": "selflearn", "checkpoint": str(final), "run_dir": str(out),
            "valid": _last_metrics(out)}


def cmd_evaluate(args) -> dict:
    from .train import evaluate_checkpoint

    if args.modality == "mixed" and args.phi is None:
        raise UsageError("--modality mixed requires --phi")
    if args.phi is not None and not 0.0 <= args.phi <= 1.0:
        raise UsageError(f"--phi {args.phi} outside [0, 1]")
    try:
        snr = parse_snr(args.snr)
    except ValueError as exc:
        raise UsageError(f"--snr expects a number of dB or 'clean', got {args.snr!r}") from exc
    ckpt = _require_file(args.checkpoint, "checkpoint")
    manifest = _require_file(args.manifest, "manifest")
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=False)
    report = evaluate_checkpoint(ckpt, manifest, args.modality, out, phi=args.phi, snr_db=snr)
    return {"report": str(out), "modality": args.modality, "phi": args.phi,
            "snr_db": "clean" if math.isinf(snr) else snr,
            "corpus_wer": report["corpus_wer"], "corpus_bleu": report["corpus_bleu"],
            "n_utterances": report["n_utterances"]}


def cmd_ablate(args) -> dict:
    from .ablation import run_ablation

    config = load_config(_require_file(args.config, "config file"))
    out = Path(args.out)
    _prepare_out(out, args.force)
    result = run_ablation(config, out)
    return {"ablation": str(out / "ablation.json"), "table": str(out / "ablation.txt"),
            "n_runs": len(result["runs"]),
            "median_bleu": {k: v["bleu"] for k, v in result["medians"].items()},
            "gain_4_over_1": result["gain_4_over_1"],
            "ordering_4_3_2_1": result["ordering_4_3_2_1"], "flags": result["flags"]}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixspeech", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mixspeech {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate a synthetic audio/visual corpus")
    p.add_argument("--spec", required=True, help="JSON corpus spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="stage 1: audio pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="stage 2: visual training with mixed-speech regularization")
    p.add_argument("--config", required=True)
    p.add_argument("--init", required=True, help="pretrained (or stage-2, to resume) checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="greedy-decode a manifest and score WER/BLEU")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--modality", required=True, choices=("audio", "visual", "mixed"))
    p.add_argument("--phi", type=float, help="audio probability per frame (mixed only)")
    p.add_argument("--snr", default="clean", help="audio SNR in dB, or 'clean'")
    p.add_argument("--out", required=True, help="report path (*.report.json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="four loss configurations x three seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    for sp in sub.choices.values():
        sp.add_argument("--force", action="store_true", help="replace a non-empty --out")
    return parser


def main(argv=None) -> int:
    from .train import TrainingAborted

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(asctime)s %(name)s %(message)s")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(1):
            _emit(args.func(args))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CorpusError, CheckpointError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # anything else is a runtime failure, never a stray exit code
        log.exception("unexpected failure")
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
