#!/usr/bin/env python3
"""One seed end to end: corpus, audio pretraining, stage-2 training, test evaluation on both modalities.

    python scripts/run_pipeline.py --work runs/single --seed 0 --lambda1 1 --lambda2 1
"""
import argparse
import json
import sys
from pathlib import Path

from mixspeech.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/single")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lambda1", type=float, default=1.0)
    ap.add_argument("--lambda2", type=float, default=1.0)
    ap.add_argument("--stage1-steps", type=int)
    ap.add_argument("--stage2-steps", type=int)
    args = ap.parse_args()

    work = Path(args.work)
    corpus = work / "corpus"
    if not (corpus / "manifest.test.jsonl").is_file():
        if code := cli(["gen-corpus", "--spec", str(ROOT / "configs" / "corpus.default.json"),
                        "--out", str(corpus)]):
            return code
    config = json.loads((ROOT / "configs" / "train.default.json").read_text())
    config.update(corpus_dir=str(corpus), seed=args.seed)
    config["loss"] = {"lambda1": args.lambda1, "lambda2": args.lambda2}
    if args.stage1_steps is not None:
        config["stage1_steps"] = args.stage1_steps
    if args.stage2_steps is not None:
        config["stage2_steps"] = args.stage2_steps
    cfg_path = work / "train.json"
    cfg_path.write_text(json.dumps(config, indent=2) + "\n")

    steps1, steps2 = config["stage1_steps"], config["stage2_steps"]
    if code := cli(["pretrain", "--config", str(cfg_path), "--out", str(work / "pretrain")]):
        return code
    init = work / "pretrain" / "checkpoints" / f"step-{steps1}.mxck"
    if code := cli(["train", "--config", str(cfg_path), "--init", str(init),
                    "--out", str(work / "selflearn")]):
        return code
    final = work / "selflearn" / "checkpoints" / f"step-{steps2}.mxck"
    for modality in ("visual", "audio"):
        if code := cli(["evaluate", "--checkpoint", str(final), "--manifest",
                        str(corpus / "manifest.test.jsonl"), "--modality", modality,
                        "--out", str(work / "eval" / f"test.{modality}.report.json")]):
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
