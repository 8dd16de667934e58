#!/usr/bin/env python3
"""Evaluate one checkpoint on audio at each SNR of the grid (and on visual for reference).

    python scripts/snr_sweep.py --checkpoint runs/pre/checkpoints/step-4000.mxck \
        --manifest corpus/manifest.test.jsonl --out runs/snr

Writes one report per (modality, SNR) through the CLI's evaluate command and
prints a small table of BLEU per SNR.
"""
import argparse
import json
import sys
from pathlib import Path

from mixspeech.cli import main as cli

GRID = ["clean", "20", "10", "0", "-10", "-20"]


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--manifest", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--grid", nargs="+", default=GRID, help="SNRs in dB, or 'clean'")
    ap.add_argument("--force", action="store_true")
    return ap.parse_args()


def main() -> int:
    args = parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for modality in ("audio", "visual"):
        for snr in args.grid:
            report = out / f"{modality}.snr-{snr}.report.json"
            argv = ["evaluate", "--checkpoint", args.checkpoint, "--manifest", args.manifest,
                    "--modality", modality, "--snr", snr, "--out", str(report)]
            code = cli(argv + (["--force"] if args.force else []))
            if code:
                return code
            r = json.loads(report.read_text())
            rows.append((modality, snr, r["corpus_bleu"], r["corpus_wer"]))
    print(f"{'modality':>8} {'snr':>6} {'BLEU':>7} {'WER':>6}", file=sys.stderr)
    for modality, snr, bleu, wer in rows:
        print(f"{modality:>8} {snr:>6} {bleu:7.2f} {wer:6.3f}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
