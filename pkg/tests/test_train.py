import json
import math

import numpy as np
import pytest

from mixspeech.checkpoint import (CheckpointError, decode_checkpoint, encode_checkpoint,
                                  load_checkpoint, save_checkpoint)
from mixspeech.config import ConfigError, MixConfig, TrainConfig, config_from_dict, dump_config
from mixspeech.corpus import CorpusSpec, generate_corpus, load_manifest
from mixspeech.losses import LossWeights
from mixspeech.model import Model, ModelConfig
from mixspeech.train import (PRETRAIN, SELFLEARN, Trainer, build_inputs, epoch_batches,
                             evaluate, evaluate_checkpoint, init_model, load_model,
                             pretrain_audio, selflearn)

TINY_MODEL = ModelConfig(feature_dim=4, model_dim=8, encoder_layers=1, decoder_layers=1,
                         attention_heads=2, ffn_dim=16, tgt_vocab=20)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    spec = CorpusSpec(n_phonemes=10, n_visemes=4, tgt_vocab=20, feature_dim=4, min_len=2,
                      max_len=5, n_train=24, n_valid=4, n_test=6, master_seed=7)
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(spec, out)
    return out


def _config(corpus, **kw):
    base = dict(corpus_dir=str(corpus), model=TINY_MODEL, stage1_steps=6, stage2_steps=6,
                batch_size=4, eval_every=3, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def _records(run):
    return [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]


# --- checkpoint container ---


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.standard_normal((3, 4)), "b": np.array([np.nan, -0.0, 1e-310]),
              "c": rng.standard_normal(())}
    save_checkpoint(tmp_path / "x.mxck", arrays, {"k": 1})
    back, meta = load_checkpoint(tmp_path / "x.mxck")
    assert meta == {"k": 1}
    for k in arrays:
        assert back[k].shape == np.shape(arrays[k])
        assert back[k].tobytes() == np.asarray(arrays[k], dtype="<f8").tobytes()


def test_checkpoint_corruption_errors():
    blob = encode_checkpoint({"w": np.ones((2, 2))})
    with pytest.raises(CheckpointError, match="bad magic"):
        decode_checkpoint(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(blob[:4] + (9).to_bytes(2, "little") + blob[6:])
    hlen = int.from_bytes(blob[6:10], "little")
    garbled = blob[:10] + b"{" * hlen + blob[10 + hlen:]
    with pytest.raises(CheckpointError, match="corrupted header"):
        decode_checkpoint(garbled)
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:-8])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(blob + b"\0" * 8)


def test_tiny_checkpoint_size_matches_header(tmp_path):
    model = Model(ModelConfig(feature_dim=4, model_dim=8, attention_heads=2, tgt_vocab=11))
    path = tmp_path / "m.mxck"
    save_checkpoint(path, model.state_arrays())
    blob = path.read_bytes()
    hlen = int.from_bytes(blob[6:10], "little")
    header = json.loads(blob[10:10 + hlen])
    payload = sum(8 * math.prod(e["shape"]) for e in header["tensors"])
    assert payload == 8 * model.n_parameters()
    last = header["tensors"][-1]
    assert last["offset"] + last["nbytes"] == payload
    assert len(blob) == 10 + hlen + payload


def test_load_model_names_bad_parameter(tmp_path):
    model = Model(TINY_MODEL)
    arrays = dict(model.state_arrays())
    arrays["dec.emb"] = np.zeros((3, 3))
    save_checkpoint(tmp_path / "bad.mxck", arrays, {"model_config": TINY_MODEL.to_dict()})
    with pytest.raises(ValueError, match="dec.emb"):
        load_model(tmp_path / "bad.mxck")


# --- config ---


def test_config_strict_and_round_trip():
    cfg = TrainConfig(loss=LossWeights(0.0, 1.0), mix=MixConfig(alpha=1.5))
    again = config_from_dict(json.loads(dump_config(cfg)))
    assert again == cfg
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"mix": {"beta": 1}})
    with pytest.raises(ConfigError, match="batch_size"):
        config_from_dict({"batch_size": 0})
    with pytest.raises(ConfigError):
        config_from_dict({"stage1_steps": "ten"})
    with pytest.raises(ConfigError):
        config_from_dict({"mix": {"phi_orientation": "sideways"}})


# --- data order ---


def test_epoch_batches_cover_everything_once():
    lengths = np.random.default_rng(0).integers(5, 50, size=101)
    batches = epoch_batches(lengths, 8, seed=4)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(101))
    again = epoch_batches(lengths, 8, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))


def test_data_order_independent_of_mixing(corpus):
    utts = load_manifest(corpus / "manifest.train.jsonl")
    base = Trainer(_config(corpus, loss=LossWeights(0, 0)), SELFLEARN, utts)
    mixed = Trainer(_config(corpus), SELFLEARN, utts)
    for step in range(10):
        np.testing.assert_array_equal(base.batch_indices(step), mixed.batch_indices(step))


def test_warmup_schedule(corpus):
    utts = load_manifest(corpus / "manifest.train.jsonl")
    t = Trainer(_config(corpus, stage1_steps=100), PRETRAIN, utts)
    assert t.lr_at(0) == pytest.approx(1e-4)
    assert t.lr_at(9) == pytest.approx(1e-3)
    assert t.lr_at(50) == 1e-3
    assert Trainer(_config(corpus), SELFLEARN, utts).lr_at(0) == 5e-4


# --- runs ---


def test_zero_step_checkpoint_equals_init(corpus, tmp_path):
    cfg = _config(corpus, stage1_steps=0)
    final = pretrain_audio(cfg, tmp_path / "run")
    arrays, meta = load_checkpoint(final)
    init = init_model(cfg)
    assert meta["step"] == 0
    for k, p in init.params.items():
        assert arrays[k].tobytes() == p.data.tobytes()


def test_pretrain_layout_and_loss_decrease(corpus, tmp_path):
    cfg = _config(corpus, stage1_steps=40, eval_every=20)
    final = pretrain_audio(cfg, tmp_path / "run")
    run = tmp_path / "run"
    assert (run / "config.snapshot.json").is_file()
    assert final == run / "checkpoints" / "step-40.mxck"
    assert {p.name for p in (run / "checkpoints").iterdir()} == {
        "step-0.mxck", "step-20.mxck", "step-40.mxck"}
    recs = [r for r in _records(run) if "ce_uni" in r]
    assert [r["step"] for r in recs] == list(range(1, 41))
    per_token = [r["ce_uni"] / r["tokens"] for r in recs]
    assert np.mean(per_token[-5:]) < np.mean(per_token[:5])
    assert all(r["phi"] is None and r["u_mix"] is None for r in recs)


def test_two_stage_runs_are_byte_identical(corpus, tmp_path):
    cfg = _config(corpus)
    outputs = []
    for name in ("a", "b"):
        ck = pretrain_audio(cfg, tmp_path / f"pre-{name}")
        selflearn(cfg, ck, tmp_path / f"self-{name}")
        outputs.append([(tmp_path / f"{stage}-{name}" / "metrics.jsonl").read_bytes()
                        for stage in ("pre", "self")])
    assert outputs[0] == outputs[1]


def test_resume_matches_uninterrupted(corpus, tmp_path):
    cfg = _config(corpus, mix=MixConfig(k=2.0, n=2))
    pre = pretrain_audio(cfg, tmp_path / "pre")
    selflearn(cfg, pre, tmp_path / "full")
    # restart from the mid-run checkpoint written at step 3
    selflearn(cfg, tmp_path / "full" / "checkpoints" / "step-3.mxck", tmp_path / "resumed")
    full = [r for r in _records(tmp_path / "full") if r["step"] > 3]
    resumed = _records(tmp_path / "resumed")
    assert full == resumed
    a, _ = load_checkpoint(tmp_path / "full" / "checkpoints" / "step-6.mxck")
    b, _ = load_checkpoint(tmp_path / "resumed" / "checkpoints" / "step-6.mxck")
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_baseline_keeps_phi_frozen(corpus, tmp_path):
    cfg = _config(corpus, loss=LossWeights(0.0, 0.0))
    selflearn(cfg, pretrain_audio(cfg, tmp_path / "pre"), tmp_path / "self")
    recs = [r for r in _records(tmp_path / "self") if "ce_uni" in r]
    assert {r["phi"] for r in recs} == {0.1}
    assert all(r["u_mix"] is None and r["ce_mix"] is None and r["jsd"] is None for r in recs)
    assert all(r["total"] == r["ce_uni"] for r in recs)


def test_mixed_run_logs_scheduler_trajectory(corpus, tmp_path):
    # k > 1 makes every step a trigger, so phi must climb by alpha every n steps
    cfg = _config(corpus, stage2_steps=9, mix=MixConfig(k=2.0, n=3))
    selflearn(cfg, pretrain_audio(cfg, tmp_path / "pre"), tmp_path / "self")
    recs = [r for r in _records(tmp_path / "self") if "ce_uni" in r]
    phis = [r["phi"] for r in recs]
    assert phis[0] == 0.1
    assert phis == pytest.approx([0.1] * 3 + [0.12] * 3 + [0.144] * 3)
    assert recs[-1]["fires"] == 3
    for r in recs:
        assert r["total"] == pytest.approx(r["ce_uni"] + r["ce_mix"] + r["jsd"])
        assert r["u_uni"] >= 0 and r["u_mix"] >= 0


def test_stage_mismatch_restore_errors(corpus, tmp_path):
    cfg = _config(corpus, stage1_steps=0)
    ck = pretrain_audio(cfg, tmp_path / "pre")
    t = Trainer(cfg, SELFLEARN, load_manifest(corpus / "manifest.train.jsonl"))
    with pytest.raises(ValueError, match="stage"):
        t.restore(ck)


# --- evaluation ---


def test_reference_hook_scores_perfectly(corpus):
    utts = load_manifest(corpus / "manifest.test.jsonl")
    report = evaluate(Model(TINY_MODEL), utts, "visual",
                      decoder=lambda us: [u.tgt_tokens[1:-1] for u in us])
    assert report["corpus_wer"] == 0.0 and report["corpus_bleu"] == 100.0


def test_visual_ignores_snr_and_audio_noise_is_seeded(corpus):
    utts = load_manifest(corpus / "manifest.test.jsonl")
    clean, _ = build_inputs(utts, "visual")
    noisy, _ = build_inputs(utts, "visual", snr_db=-20.0)
    assert clean.tobytes() == noisy.tobytes()
    a1, _ = build_inputs(utts, "audio", snr_db=0.0, seed=2)
    a2, _ = build_inputs(utts, "audio", snr_db=0.0, seed=2)
    a3, _ = build_inputs(utts, "audio")
    assert a1.tobytes() == a2.tobytes() != a3.tobytes()


def test_mixed_without_phi_errors(corpus):
    utts = load_manifest(corpus / "manifest.test.jsonl")
    with pytest.raises(ValueError, match="phi"):
        evaluate(Model(TINY_MODEL), utts, "mixed")


def test_evaluate_checkpoint_writes_report(corpus, tmp_path):
    cfg = _config(corpus, stage1_steps=0)
    ck = pretrain_audio(cfg, tmp_path / "pre")
    out = tmp_path / "eval" / "test.report.json"
    report = evaluate_checkpoint(ck, corpus / "manifest.test.jsonl", "mixed", out, phi=0.5)
    assert out.is_file() and (tmp_path / "eval" / "test.hyp.jsonl").is_file()
    assert report["n_utterances"] == 6
    assert report["config"]["phi"] == 0.5
