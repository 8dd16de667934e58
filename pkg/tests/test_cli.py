import json
import subprocess
import sys

import pytest

from mixspeech.cli import main

TINY_SPEC = {"n_phonemes": 10, "n_visemes": 4, "tgt_vocab": 20, "feature_dim": 4, "min_len": 2,
             "max_len": 5, "n_train": 16, "n_valid": 3, "n_test": 4, "master_seed": 11}
TINY_MODEL = {"feature_dim": 4, "model_dim": 8, "encoder_layers": 1, "decoder_layers": 1,
              "attention_heads": 2, "ffn_dim": 16, "tgt_vocab": 20}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if out else None), out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(TINY_SPEC))
    assert main(["gen-corpus", "--spec", str(root / "spec.json"), "--out", str(root / "corpus")]) == 0
    return root


def _write_config(root, name, **kw):
    cfg = {"corpus_dir": str(root / "corpus"), "model": TINY_MODEL, "stage1_steps": 4,
           "stage2_steps": 4, "batch_size": 4, "eval_every": 2, "seed": 1}
    cfg.update(kw)
    path = root / name
    path.write_text(json.dumps(cfg))
    return path


def test_gen_corpus_counts_and_determinism(workspace, tmp_path, capsys):
    code, summary, lines = run(capsys, "gen-corpus", "--spec", workspace / "spec.json",
                               "--out", tmp_path / "c2")
    assert code == 0 and len(lines) == 1
    assert summary["counts"] == {"train": 16, "valid": 3, "test": 4}
    for split, n in summary["counts"].items():
        assert len((tmp_path / "c2" / f"manifest.{split}.jsonl").read_text().splitlines()) == n
    tree = lambda root: {p.relative_to(root): p.read_bytes()  # noqa: E731
                         for p in sorted(root.rglob("*")) if p.is_file()}
    assert tree(tmp_path / "c2") == tree(workspace / "corpus")


def test_gen_corpus_invariant_violation(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"n_phonemes": 5, "n_visemes": 6}))
    code = main(["gen-corpus", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "n_visemes < n_phonemes" in capsys.readouterr().err


def test_refuses_non_empty_out_without_force(workspace, tmp_path, capsys):
    out = tmp_path / "taken"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["gen-corpus", "--spec", str(workspace / "spec.json"), "--out", str(out)]) == 2
    assert (out / "keep.txt").exists()
    assert main(["gen-corpus", "--spec", str(workspace / "spec.json"), "--out", str(out),
                 "--force"]) == 0
    assert not (out / "keep.txt").exists()


def test_pretrain_train_evaluate_flow(workspace, tmp_path, capsys):
    cfg = _write_config(workspace, "base.json", loss={"lambda1": 0.0, "lambda2": 0.0})
    code, pre, _ = run(capsys, "pretrain", "--config", cfg, "--out", tmp_path / "pre")
    assert code == 0 and pre["checkpoint"].endswith("step-4.mxck")
    code, st2, _ = run(capsys, "train", "--config", cfg, "--init", pre["checkpoint"],
                       "--out", tmp_path / "self")
    assert code == 0
    phis = {json.loads(line)["phi"] for line in (tmp_path / "self" / "metrics.jsonl").open()
            if '"eval"' not in line}
    assert phis == {0.1}
    manifest = workspace / "corpus" / "manifest.test.jsonl"
    code, r1, lines = run(capsys, "evaluate", "--checkpoint", st2["checkpoint"], "--manifest",
                          manifest, "--modality", "visual", "--snr", "clean",
                          "--out", tmp_path / "a.report.json")
    assert code == 0 and len(lines) == 1
    code, r2, _ = run(capsys, "evaluate", "--checkpoint", st2["checkpoint"], "--manifest",
                      manifest, "--modality", "visual", "--out", tmp_path / "b.report.json")
    a = json.loads((tmp_path / "a.report.json").read_text())
    b = json.loads((tmp_path / "b.report.json").read_text())
    assert a["utterances"] == b["utterances"] and a["corpus_bleu"] == b["corpus_bleu"]
    assert r1["corpus_bleu"] == r2["corpus_bleu"]


def test_identical_invocations_identical_metrics(workspace, tmp_path, capsys):
    cfg = _write_config(workspace, "det.json")
    for name in ("x", "y"):
        assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    assert ((tmp_path / "x" / "metrics.jsonl").read_bytes()
            == (tmp_path / "y" / "metrics.jsonl").read_bytes())


def test_usage_errors(workspace, tmp_path, capsys):
    cfg = _write_config(workspace, "u.json")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 2
    assert main(["evaluate", "--checkpoint", str(tmp_path / "missing.mxck"), "--manifest",
                 str(workspace / "corpus" / "manifest.test.jsonl"), "--modality", "visual",
                 "--out", str(tmp_path / "r.json")]) == 2
    assert main(["evaluate", "--checkpoint", "x", "--manifest", "y", "--modality", "mixed",
                 "--out", str(tmp_path / "r.json")]) == 2
    assert main(["pretrain", "--config", str(tmp_path / "nope.json"), "--out",
                 str(tmp_path / "p")]) == 2
    (tmp_path / "strict.json").write_text(json.dumps({"surprise": 1}))
    assert main(["pretrain", "--config", str(tmp_path / "strict.json"), "--out",
                 str(tmp_path / "p")]) == 2
    assert main(["no-such-command"]) == 2
    assert capsys.readouterr().out == ""


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exits_3(workspace, tmp_path, capsys):
    cfg = _write_config(workspace, "boom.json", optim={"lr": 1e300})
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 3
    lines = (tmp_path / "p" / "metrics.jsonl").read_text().splitlines()
    assert "abort" in json.loads(lines[-1])


def test_ablate_produces_twelve_runs(workspace, tmp_path, capsys):
    cfg = _write_config(workspace, "abl.json", stage1_steps=2, stage2_steps=2)
    code, summary, _ = run(capsys, "ablate", "--config", cfg, "--out", tmp_path / "abl")
    assert code == 0 and summary["n_runs"] == 12
    result = json.loads((tmp_path / "abl" / "ablation.json").read_text())
    assert sorted((r["config"], r["seed"]) for r in result["runs"]) == [
        (c, s) for c in (1, 2, 3, 4) for s in (1, 2, 3)]
    for r in result["runs"]:
        assert (tmp_path / "abl" / f"seed-{r['seed']}" / f"config-{r['config']}" /
                "config.snapshot.json").is_file()
    assert "#4" in (tmp_path / "abl" / "ablation.txt").read_text()


def test_module_entry_point_writes_json_line(workspace, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mixspeech.cli", "gen-corpus", "--spec",
                           str(workspace / "spec.json"), "--out", str(tmp_path / "c")],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert len(proc.stdout.splitlines()) == 1 and json.loads(proc.stdout)["master_seed"] == 11


def test_worker_count_does_not_change_results(workspace, tmp_path):
    from mixspeech.ablation import run_ablation
    from mixspeech.config import load_config

    cfg = load_config(_write_config(workspace, "par.json", stage1_steps=2, stage2_steps=2))
    serial = run_ablation(cfg, tmp_path / "one", workers=1)
    parallel = run_ablation(cfg, tmp_path / "two", workers=2)
    strip = lambda runs: [{k: v for k, v in r.items() if k not in ("run_dir", "seconds")}  # noqa: E731
                          for r in runs]
    assert strip(serial["runs"]) == strip(parallel["runs"])
    for r in serial["runs"]:
        rel = f"seed-{r['seed']}/config-{r['config']}/metrics.jsonl"
        assert (tmp_path / "one" / rel).read_bytes() == (tmp_path / "two" / rel).read_bytes()


def test_threads_env_is_validated(monkeypatch):
    from mixspeech.ablation import worker_count

    monkeypatch.setenv("MIXSPEECH_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("MIXSPEECH_THREADS", "0")
    with pytest.raises(ValueError):
        worker_count()
