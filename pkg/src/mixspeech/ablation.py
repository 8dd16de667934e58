"""Four-way loss ablation across seeds, and the audio SNR sweep on pretrained checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import TrainConfig, dump_config
from .corpus import load_manifest
from .losses import LossWeights
from .metrics import write_hypotheses, write_report
from .train import evaluate, load_model, pretrain_audio, selflearn

log = logging.getLogger(__name__)

# config id -> (lambda1, lambda2)
ABLATION_CONFIGS = {1: (0.0, 0.0), 2: (1.0, 0.0), 3: (0.0, 1.0), 4: (1.0, 1.0)}
N_SEEDS = 3
SNR_GRID = (math.inf, 20.0, 10.0, 0.0, -10.0, -20.0)
NEVER_FIRED = "scheduler never fired"


def worker_count() -> int:
    """MIXSPEECH_THREADS if set, else the number of usable cores."""
    env = os.environ.get("MIXSPEECH_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"MIXSPEECH_THREADS must be >= 1, got {env!r}")
        return n
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _single_thread_blas() -> None:
    # one BLAS thread per process keeps floating-point reduction order fixed
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs)),
                             initializer=_single_thread_blas) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def seed_configs(config: TrainConfig) -> list[TrainConfig]:
    return [dataclasses.replace(config, seed=config.seed + i) for i in range(N_SEEDS)]


def schedule_makespan(durations: list[float], workers: int) -> float:
    """Wall time of running jobs in order on ``workers`` slots, each job taking the next free slot."""
    slots = [0.0] * max(1, workers)
    for d in durations:
        i = slots.index(min(slots))
        slots[i] += d
    return max(slots)


def _pretrain_job(config: TrainConfig, run_dir: str) -> dict:
    start = time.perf_counter()
    path = str(pretrain_audio(config, run_dir))
    return {"seed": config.seed, "checkpoint": path, "seconds": time.perf_counter() - start}


def _stage2_job(config: TrainConfig, init: str, run_dir: str, cid: int) -> dict:
    start = time.perf_counter()
    final = selflearn(config, init, run_dir)
    model, meta = load_model(final)
    test = load_manifest(Path(config.corpus_dir) / "manifest.test.jsonl")
    report = evaluate(model, test, config.stage2_modality, seed=config.seed)
    mixed = config.loss.uses_mixed_branch
    fires = int(meta["mix_state"]["fires"])
    flags = [NEVER_FIRED] if mixed and fires == 0 else []
    report["config"].update({"checkpoint": str(final), "split": "test", "ablation_config": cid,
                             "scheduler_fires": fires, "flags": flags})
    eval_dir = Path(run_dir) / "eval"
    write_report(report, eval_dir / "test.report.json")
    write_hypotheses(report, eval_dir / "test.hyp.jsonl")
    return {"config": cid, "seed": config.seed, "lambda1": config.loss.lambda1,
            "lambda2": config.loss.lambda2, "bleu": report["corpus_bleu"],
            "wer": report["corpus_wer"], "final_phi": meta["mix_state"]["phi"],
            "scheduler_fires": fires, "flags": flags, "run_dir": str(run_dir),
            "seconds": time.perf_counter() - start}


def summarize(runs: list[dict]) -> dict:
    medians = {}
    for cid in ABLATION_CONFIGS:
        mine = [r for r in runs if r["config"] == cid]
        medians[cid] = {"bleu": statistics.median(r["bleu"] for r in mine),
                        "wer": statistics.median(r["wer"] for r in mine), "n": len(mine)}
    b = {cid: m["bleu"] for cid, m in medians.items()}
    return {
        "medians": {str(k): v for k, v in medians.items()},
        "gain_4_over_1": b[4] - b[1],
        "ordering_4_3_2_1": b[4] >= b[3] >= b[2] >= b[1],
        "flags": sorted({f"seed {r['seed']} config {r['config']}: {f}"
                         for r in runs for f in r["flags"]}),
    }


def format_table(runs: list[dict], summary: dict) -> str:
    seeds = sorted({r["seed"] for r in runs})
    head = ["config", "lambda1", "lambda2"] + [f"seed{s}" for s in seeds] + ["median", "fires"]
    rows = []
    for cid, (l1, l2) in ABLATION_CONFIGS.items():
        mine = {r["seed"]: r for r in runs if r["config"] == cid}
        cells = [f"#{cid}", f"{l1:g}", f"{l2:g}"]
        cells += [f"{mine[s]['bleu']:.2f}" if s in mine else "-" for s in seeds]
        cells.append(f"{summary['medians'][str(cid)]['bleu']:.2f}")
        cells.append(",".join(str(mine[s]["scheduler_fires"]) for s in seeds if s in mine))
        rows.append(cells)
    widths = [max(len(x) for x in col) for col in zip(head, *rows)]
    fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
    lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    lines.append(f"#4 - #1 median BLEU: {summary['gain_4_over_1']:+.2f}; "
                 f"ordering #4>=#3>=#2>=#1: {summary['ordering_4_3_2_1']}")
    lines.extend(f"flag: {f}" for f in summary["flags"])
    return "\n".join(lines) + "\n"


def run_ablation(config: TrainConfig, out_dir, workers: int | None = None) -> dict:
    """Pretrain once per seed, then train the four stage-2 variants from each pretrained model.

    Variants of one seed share that seed, so their data order is identical.
    Writes ``ablation.json`` and ``ablation.txt`` under ``out_dir``.
    """
    start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = worker_count() if workers is None else workers
    (out / "config.snapshot.json").write_text(dump_config(config), encoding="utf-8")
    seeds = seed_configs(config)
    log.info("ablation: pretraining %d seeds with %d workers", len(seeds), workers)
    pretrained = _map(_pretrain_job, [(c, str(out / f"seed-{c.seed}" / "pretrain")) for c in seeds],
                      workers)
    jobs = []
    for cfg, init in zip(seeds, (p["checkpoint"] for p in pretrained)):
        for cid, (l1, l2) in ABLATION_CONFIGS.items():
            variant = dataclasses.replace(cfg, loss=LossWeights(l1, l2))
            jobs.append((variant, init, str(out / f"seed-{cfg.seed}" / f"config-{cid}"), cid))
    log.info("ablation: %d stage-2 runs", len(jobs))
    runs = _map(_stage2_job, jobs, workers)
    summary = summarize(runs)
    durations = {"pretrain": [p["seconds"] for p in pretrained],
                 "stage2": [r["seconds"] for r in runs]}
    timing = {"workers": workers, "wall_seconds": time.perf_counter() - start,
              "cpu_seconds": sum(durations["pretrain"]) + sum(durations["stage2"]),
              # pretrains all finish before stage 2 starts
              "estimated_wall_4_workers": schedule_makespan(durations["pretrain"], 4)
              + schedule_makespan(durations["stage2"], 4)}
    result = {"runs": runs, "pretrain": pretrained, "timing": timing, **summary}
    (out / "ablation.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    (out / "ablation.txt").write_text(format_table(runs, summary), encoding="utf-8")
    return result


def snr_sweep(checkpoint, manifest, out_dir, snrs=SNR_GRID, seed: int = 0) -> dict:
    """Audio BLEU at each SNR plus visual BLEU with and without the noise flag.

    The same noise seed is used at every SNR, so lower SNR only rescales one
    fixed noise draw per utterance.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = load_model(checkpoint)
    utts = load_manifest(manifest)
    result: dict = {"checkpoint": str(checkpoint), "audio": [], "visual": []}
    for modality in ("audio", "visual"):
        for snr in snrs:
            report = evaluate(model, utts, modality, snr_db=snr, seed=seed)
            label = "clean" if math.isinf(snr) else f"{snr:g}"
            write_report(report, out / f"{modality}.snr-{label}.report.json")
            result[modality].append({"snr_db": label, "bleu": report["corpus_bleu"],
                                     "wer": report["corpus_wer"]})
    audio = [r["bleu"] for r in result["audio"]]
    visual = [r["bleu"] for r in result["visual"]]
    result["audio_non_increasing"] = all(a >= b for a, b in zip(audio, audio[1:]))
    result["visual_constant"] = len(set(visual)) == 1
    result["clean_audio_above_visual"] = audio[0] > visual[0]
    (out / "snr_sweep.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return result
