#!/usr/bin/env python3
"""Generate the default corpus if needed, then run the 4-config x 3-seed loss ablation.

    MIXSPEECH_THREADS=4 python scripts/run_ablation.py --work runs/ablation-default

Results land in <work>/ablation/{ablation.json,ablation.txt}.
"""
import argparse
import json
import sys
from pathlib import Path

from mixspeech.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/ablation-default")
    ap.add_argument("--corpus-spec", default=str(ROOT / "configs" / "corpus.default.json"))
    ap.add_argument("--config", default=str(ROOT / "configs" / "train.default.json"))
    ap.add_argument("--force", action="store_true", help="replace an existing ablation directory")
    args = ap.parse_args()

    work = Path(args.work)
    corpus = work / "corpus"
    if not (corpus / "manifest.test.jsonl").is_file():
        code = cli(["gen-corpus", "--spec", args.corpus_spec, "--out", str(corpus)])
        if code:
            return code
    config = json.loads(Path(args.config).read_text())
    config["corpus_dir"] = str(corpus)
    resolved = work / "train.json"
    resolved.write_text(json.dumps(config, indent=2) + "\n")
    code = cli(["ablate", "--config", str(resolved), "--out", str(work / "ablation")]
               + (["--force"] if args.force else []))
    if code == 0:
        sys.stderr.write((work / "ablation" / "ablation.txt").read_text())
    return code


if __name__ == "__main__":
    sys.exit(main())
