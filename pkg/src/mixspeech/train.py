"""Two-stage training: audio pretraining, then visual self-learning with mixed-speech regularization."""
from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, dump_config
from .corpus import PAD, CorpusSpec, Utterance, add_noise, load_manifest
from .losses import cross_entropy, jsd_loss, total_loss
from .metrics import score_report, write_hypotheses, write_report
from .mixing import (AUDIO, VISUAL, MixState, UncertaintyReading, concat_unimodal,
                     mix_streams, scheduler_update, uncertainty)
from .model import Model, ModelConfig

log = logging.getLogger(__name__)

PRETRAIN = "pretrain"
SELFLEARN = "selflearn"
_STAGE_IDS = {PRETRAIN: 1, SELFLEARN: 2}

# named RNG streams derived from the run seed
STREAM_DATA = 101
STREAM_MIX = 202
STREAM_INIT = 303
STREAM_NOISE = 404
STREAM_EVAL_MIX = 505

BUCKET_FACTOR = 8


class TrainingAborted(RuntimeError):
    pass


def stream_seed(*words: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(w) for w in words])


def init_model(config: TrainConfig) -> Model:
    seed = int(stream_seed(config.seed, STREAM_INIT).generate_state(1)[0])
    return Model(config.model, seed=seed)


def check_corpus_matches(config: TrainConfig) -> None:
    spec_path = Path(config.corpus_dir) / "corpus.spec.json"
    if not spec_path.is_file():
        return
    spec = CorpusSpec.from_dict(json.loads(spec_path.read_text(encoding="utf-8")))
    if spec.feature_dim != config.model.feature_dim or spec.tgt_vocab != config.model.tgt_vocab:
        raise ValueError(
            f"model feature_dim/tgt_vocab ({config.model.feature_dim}/{config.model.tgt_vocab}) "
            f"do not match corpus ({spec.feature_dim}/{spec.tgt_vocab})")


def collate(utts: list[Utterance]):
    """Pad a list of utterances: audio/visual (B,T,D), frame mask (B,T), PAD-filled targets (B,S+1)."""
    b = len(utts)
    t = max(u.n_frames for u in utts)
    d = utts[0].audio.shape[1]
    s = max(len(u.tgt_tokens) for u in utts)
    audio = np.zeros((b, t, d))
    visual = np.zeros((b, t, d))
    mask = np.zeros((b, t), dtype=bool)
    tgt = np.full((b, s), PAD, dtype=np.int64)
    for i, u in enumerate(utts):
        audio[i, :u.n_frames] = u.audio
        visual[i, :u.n_frames] = u.visual
        mask[i, :u.n_frames] = True
        tgt[i, :len(u.tgt_tokens)] = u.tgt_tokens
    return audio, visual, mask, tgt


def epoch_batches(lengths: np.ndarray, batch_size: int, seed) -> list[np.ndarray]:
    """Shuffled batches; within chunks of BUCKET_FACTOR batches, items are length-sorted to cut padding."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(lengths))
    chunk = batch_size * BUCKET_FACTOR
    batches = []
    for c in range(0, len(perm), chunk):
        idx = perm[c:c + chunk]
        idx = idx[np.argsort(lengths[idx], kind="stable")]
        batches.extend(idx[i:i + batch_size] for i in range(0, len(idx), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def _valid_steps(tgt: np.ndarray) -> np.ndarray:
    return tgt[:, 1:] != PAD


class Trainer:
    """Owns model, optimizer, mixing state and the step counter for one stage."""

    def __init__(self, config: TrainConfig, stage: str, train_utts: list[Utterance],
                 model: Model | None = None):
        if stage not in _STAGE_IDS:
            raise ValueError(f"unknown stage {stage!r}")
        if not train_utts:
            raise ValueError("empty training set")
        self.config = config
        self.stage = stage
        self.utts = train_utts
        self.model = model if model is not None else init_model(config)
        lr = config.optim.lr if stage == PRETRAIN else config.optim.stage2_lr
        self.opt = ad.Adam(self.model.params, lr=lr, beta1=config.optim.beta1,
                           beta2=config.optim.beta2, eps=config.optim.eps)
        m = config.mix
        self.mix_state = MixState(phi=m.phi_init, alpha=m.alpha, k=m.k, n=m.n,
                                  phi_min=m.phi_min, phi_max=m.phi_max)
        self.step = 0
        self._lengths = np.array([u.n_frames for u in train_utts])
        self._epoch_cache: tuple[int, list[np.ndarray]] | None = None

    @property
    def total_steps(self) -> int:
        return self.config.stage1_steps if self.stage == PRETRAIN else self.config.stage2_steps

    def lr_at(self, step: int) -> float:
        base = self.opt.lr
        if self.stage != PRETRAIN:
            return base
        warm = int(round(self.config.stage1_warmup_fraction * self.config.stage1_steps))
        if warm <= 0 or step >= warm:
            return base
        return base * (step + 1) / warm

    def batch_indices(self, step: int) -> np.ndarray:
        per_epoch = math.ceil(len(self.utts) / self.config.batch_size)
        epoch, pos = divmod(step, per_epoch)
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            seed = stream_seed(self.config.seed, STREAM_DATA, _STAGE_IDS[self.stage], epoch)
            self._epoch_cache = (epoch, epoch_batches(self._lengths, self.config.batch_size, seed))
        return self._epoch_cache[1][pos]

    def train_step(self) -> dict:
        cfg = self.config
        step = self.step
        audio, visual, mask, tgt = collate([self.utts[i] for i in self.batch_indices(step)])
        uni_modality = AUDIO if self.stage == PRETRAIN else cfg.stage2_modality
        uni_input = concat_unimodal(audio if uni_modality == AUDIO else visual, uni_modality)
        use_mix = self.stage == SELFLEARN and cfg.loss.uses_mixed_branch
        valid = _valid_steps(tgt)
        phi_used = self.mix_state.phi
        rec = {"stage": self.stage, "step": step + 1, "lr": self.lr_at(step)}

        self.model.zero_grad()
        with ad.Tape():
            p_uni = self.model.forward(uni_input, tgt, mask)
            ce_uni = cross_entropy(p_uni, tgt)
            ce_mix = jsd = p_mix = None
            if use_mix:
                mixed, _ = mix_streams(audio, visual, phi_used,
                                       stream_seed(cfg.seed, STREAM_MIX, step),
                                       orientation=cfg.mix.phi_orientation)
                p_mix = self.model.forward(mixed, tgt, mask)
                ce_mix = cross_entropy(p_mix, tgt)
                jsd = jsd_loss(p_mix, p_uni, mask=valid)
            loss = total_loss(ce_uni, ce_mix, jsd, cfg.loss) if use_mix else ce_uni
            if not np.isfinite(loss.data).all():
                raise TrainingAborted(f"non-finite loss at {self.stage} step {step + 1}")
            ad.backward(loss)
        self.opt.step(lr=rec["lr"])
        self.step += 1

        rec["ce_uni"] = float(ce_uni.data)
        rec["ce_mix"] = None if ce_mix is None else float(ce_mix.data)
        rec["jsd"] = None if jsd is None else float(jsd.data)
        rec["total"] = float(loss.data)
        rec["tokens"] = int(valid.sum())
        if use_mix:
            reading = UncertaintyReading(uncertainty(p_uni.data, valid),
                                         uncertainty(p_mix.data, valid))
            self.mix_state = scheduler_update(reading, self.mix_state)
            if not self.mix_state.phi_min <= self.mix_state.phi <= self.mix_state.phi_max:
                raise TrainingAborted(f"phi={self.mix_state.phi} left its bounds")
            rec["u_uni"], rec["u_mix"] = reading.u_uni, reading.u_mix
        else:
            rec["u_uni"] = rec["u_mix"] = None
        if self.stage == SELFLEARN:
            rec["phi"] = phi_used
            rec["streak"] = self.mix_state.streak
            rec["fires"] = self.mix_state.fires
        else:
            rec["phi"] = rec["streak"] = rec["fires"] = None
        return rec

    # --- checkpointing ---

    def meta(self) -> dict:
        return {"stage": self.stage, "step": self.step, "adam_t": self.opt.t,
                "mix_state": self.mix_state.to_dict(), "seed": self.config.seed,
                "model_config": self.config.model.to_dict(), "version": __version__}

    def save(self, path) -> None:
        arrays = dict(self.model.state_arrays())
        arrays.update(self.opt.state_arrays())
        save_checkpoint(path, arrays, self.meta())

    def restore(self, path) -> None:
        """Resume exactly: parameters, optimizer moments, mixing state and step."""
        arrays, meta = load_checkpoint(path)
        if meta.get("stage") != self.stage:
            raise ValueError(f"checkpoint stage {meta.get('stage')!r} != trainer stage {self.stage!r}")
        self.model.load_state_arrays(arrays)
        self.opt.load_state_arrays(arrays, int(meta["adam_t"]))
        self.mix_state = MixState(**meta["mix_state"])
        self.step = int(meta["step"])


def load_model(path, config: ModelConfig | None = None) -> tuple[Model, dict]:
    arrays, meta = load_checkpoint(path)
    if config is None:
        config = ModelConfig(**meta["model_config"])
    model = Model(config)
    model.load_state_arrays(arrays)
    return model, meta


# --- evaluation ---------------------------------------------------------------


def build_inputs(utts: list[Utterance], modality: str, phi: float | None = None,
                 snr_db: float = math.inf, seed: int = 0, offset: int = 0,
                 orientation: str = AUDIO):
    """Model inputs for a list of utterances; noise touches the audio stream only."""
    if modality == "mixed" and phi is None:
        raise ValueError("modality 'mixed' requires phi")
    if modality not in (AUDIO, VISUAL, "mixed"):
        raise ValueError(f"unknown modality {modality!r}")
    noisy = []
    for j, u in enumerate(utts):
        a = u.audio
        if modality != VISUAL and not math.isinf(snr_db):
            a = add_noise(a, snr_db, stream_seed(seed, STREAM_NOISE, offset + j))
        noisy.append(Utterance(u.id, a, u.visual, u.src_tokens, u.tgt_tokens))
    audio, visual, mask, _ = collate(noisy)
    if modality == AUDIO:
        return concat_unimodal(audio, AUDIO), mask
    if modality == VISUAL:
        return concat_unimodal(visual, VISUAL), mask
    feats = np.zeros((*audio.shape[:2], 2 * audio.shape[2]))
    for j in range(len(utts)):
        feats[j], _ = mix_streams(audio[j], visual[j], phi,
                                  stream_seed(seed, STREAM_EVAL_MIX, offset + j), orientation)
    return feats, mask


def decode_utterances(model: Model, utts: list[Utterance], modality: str, phi=None,
                      snr_db: float = math.inf, seed: int = 0, batch_size: int = 50,
                      orientation: str = AUDIO) -> list[list[int]]:
    max_len = min(model.config.max_positions, max(len(u.tgt_tokens) for u in utts) + 4)
    hyps: list[list[int]] = []
    for start in range(0, len(utts), batch_size):
        chunk = utts[start:start + batch_size]
        feats, mask = build_inputs(chunk, modality, phi, snr_db, seed, start, orientation)
        e_p = model.encode(model.fuse(feats), mask)
        hyps.extend(model.greedy_decode(e_p, max_len, mask))
    return hyps


def evaluate(model: Model, utts: list[Utterance], modality: str, phi: float | None = None,
             snr_db: float = math.inf, seed: int = 0, decoder=None,
             orientation: str = AUDIO) -> dict:
    """Greedy-decode every utterance and score corpus WER/BLEU on target tokens.

    ``decoder`` replaces model decoding with ``decoder(utts) -> hypotheses``
    (used to score references against themselves in tests).
    """
    if not utts:
        raise ValueError("evaluate: empty corpus")
    if modality == "mixed" and phi is None:
        raise ValueError("modality 'mixed' requires phi")
    if decoder is not None:
        hyps = decoder(utts)
    else:
        hyps = decode_utterances(model, utts, modality, phi, snr_db, seed, orientation=orientation)
    refs = [u.tgt_tokens[1:-1] for u in utts]
    snr_field = "clean" if math.isinf(snr_db) else snr_db
    return score_report([u.id for u in utts], refs, hyps,
                        {"modality": modality, "phi": phi, "snr_db": snr_field, "seed": seed})


# --- run orchestration --------------------------------------------------------


class RunDir:
    def __init__(self, path):
        self.path = Path(path)
        self.ckpt_dir = self.path / "checkpoints"
        self.eval_dir = self.path / "eval"
        self.metrics = self.path / "metrics.jsonl"

    def create(self, config: TrainConfig, extra: dict | None = None) -> None:
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        self.eval_dir.mkdir(parents=True, exist_ok=True)
        (self.path / "config.snapshot.json").write_text(dump_config(config), encoding="utf-8")
        manifest = {"tool": "mixspeech", "version": __version__,
                    "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                    "paths": {"metrics": "metrics.jsonl", "checkpoints": "checkpoints",
                              "eval": "eval"}}
        manifest.update(extra or {})
        (self.path / "run.manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                                     encoding="utf-8")
        self.metrics.write_text("", encoding="utf-8")

    def log(self, record: dict) -> None:
        with self.metrics.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    def checkpoint(self, step: int) -> Path:
        return self.ckpt_dir / f"step-{step}.mxck"

    def finish(self) -> None:
        path = self.path / "run.manifest.json"
        manifest = json.loads(path.read_text(encoding="utf-8"))
        manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _run_stage(trainer: Trainer, run: RunDir, valid: list[Utterance], eval_modality: str) -> Path:
    cfg = trainer.config
    if trainer.step == 0:
        trainer.save(run.checkpoint(0))
    while trainer.step < trainer.total_steps:
        try:
            rec = trainer.train_step()
        except TrainingAborted as exc:
            run.log({"stage": trainer.stage, "step": trainer.step + 1, "abort": str(exc)})
            raise
        run.log(rec)
        if trainer.step % cfg.eval_every == 0 or trainer.step == trainer.total_steps:
            if valid:
                report = evaluate(trainer.model, valid, eval_modality, seed=cfg.seed)
                run.log({"stage": trainer.stage, "step": trainer.step,
                         "eval": {"split": "valid", "modality": eval_modality,
                                  "wer": report["corpus_wer"], "bleu": report["corpus_bleu"]}})
                log.info("%s step %d: valid %s BLEU %.2f WER %.3f", trainer.stage, trainer.step,
                         eval_modality, report["corpus_bleu"], report["corpus_wer"])
            trainer.save(run.checkpoint(trainer.step))
    return run.checkpoint(trainer.step)


def _load_split(config: TrainConfig, split: str) -> list[Utterance]:
    path = Path(config.corpus_dir) / f"manifest.{split}.jsonl"
    return load_manifest(path) if path.is_file() else []


def pretrain_audio(config: TrainConfig, run_dir, init: str | Path | None = None) -> Path:
    """Stage 1: teacher-forced cross-entropy on audio-only inputs. Returns the final checkpoint path."""
    check_corpus_matches(config)
    run = RunDir(run_dir)
    run.create(config, {"stage": PRETRAIN, "init": str(init) if init else None})
    trainer = Trainer(config, PRETRAIN, _load_split(config, "train"))
    if init is not None:
        trainer.restore(init)
    final = _run_stage(trainer, run, _load_split(config, "valid"), AUDIO)
    run.finish()
    return final


def selflearn(config: TrainConfig, init_checkpoint, run_dir) -> Path:
    """Stage 2 from pretrained weights: uni-modal CE plus weighted mixed CE and JSD.

    A stage-2 checkpoint as ``init_checkpoint`` resumes that run exactly;
    anything else contributes parameters only.
    """
    check_corpus_matches(config)
    run = RunDir(run_dir)
    run.create(config, {"stage": SELFLEARN, "init": str(init_checkpoint)})
    arrays, meta = load_checkpoint(init_checkpoint)
    trainer = Trainer(config, SELFLEARN, _load_split(config, "train"))
    if meta.get("stage") == SELFLEARN:
        trainer.restore(init_checkpoint)
    else:
        trainer.model.load_state_arrays(arrays)
    final = _run_stage(trainer, run, _load_split(config, "valid"), config.stage2_modality)
    run.finish()
    return final


def evaluate_checkpoint(checkpoint, manifest, modality: str, out, phi: float | None = None,
                        snr_db: float = math.inf, seed: int = 0) -> dict:
    if modality == "mixed" and phi is None:
        raise ValueError("modality 'mixed' requires phi")
    model, _ = load_model(checkpoint)
    utts = load_manifest(manifest)
    report = evaluate(model, utts, modality, phi=phi, snr_db=snr_db, seed=seed)
    report["config"].update({"checkpoint": str(checkpoint), "manifest": str(manifest)})
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    write_hypotheses(report, out.with_name(out.name.replace(".report.json", "") + ".hyp.jsonl"))
    return report
