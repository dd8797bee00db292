import json
import wave

import numpy as np
import pytest

from directvc.cli import main
from directvc.neural import load_checkpoint

TINY = ["--cbhg-units", "16", "--gru-units", "8", "--highway-layers", "1", "--conv-bank-k", "2",
        "--prenet-units", "8", "--mixtures", "2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-corpus", "--out", str(data), "--utterances", "2", "--seconds", "0.5", "--seed", "3"]) == 0
    m = str(data / "manifest.tsv")
    common = ["--manifest", m, "--epochs", "1", "--batch", "2", *TINY]
    assert main(["train", "--stage", "1", "--out", str(root / "n1.pvc"), "--speakers", "multi0,multi1",
                 "--phones", "8", *common]) == 0
    assert main(["train", "--stage", "2", "--out", str(root / "n2.pvc"), "--net1", str(root / "n1.pvc"),
                 "--speakers", "target", *common]) == 0
    assert main(["train", "--stage", "3", "--out", str(root / "n3.pvc"), "--net1", str(root / "n1.pvc"),
                 "--net2", str(root / "n2.pvc"), "--speakers", "multi0", *common]) == 0
    return root, data, common


def test_gen_corpus_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-corpus", "--out", str(tmp_path / d), "--utterances", "1", "--seconds", "0.5", "--seed", "7"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 6 * 2 + 2
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len({p.parent.name for p in (tmp_path / "a").rglob("*.wav")}) == 6


def test_gen_corpus_needs_out(capsys):
    assert main(["gen-corpus"]) == 2
    assert "--out" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["bench", "--bogus"])
    assert e.value.code == 2


def test_checkpoints_are_stage_tagged(workspace):
    root, _, _ = workspace
    for i in (1, 2, 3):
        _, stage = load_checkpoint(root / f"n{i}.pvc")
        assert stage == f"net{i}"
    log = (root / "n1.pvc.loss.tsv").read_text().splitlines()
    assert log[0] == "epoch\tloss" and len(log) == 2


def test_train_is_byte_reproducible(workspace, tmp_path):
    root, data, common = workspace
    out = tmp_path / "again.pvc"
    assert main(["train", "--stage", "1", "--out", str(out), "--speakers", "multi0,multi1", "--phones", "8", *common]) == 0
    assert out.read_bytes() == (root / "n1.pvc").read_bytes()


def test_stage3_without_prerequisites(workspace, tmp_path, capsys):
    _, _, common = workspace
    assert main(["train", "--stage", "3", "--out", str(tmp_path / "x.pvc"), *common]) == 1
    assert "net1" in capsys.readouterr().err


def test_stage2_rejects_wrong_stage_checkpoint(workspace, tmp_path, capsys):
    root, _, common = workspace
    assert main(["train", "--stage", "2", "--out", str(tmp_path / "x.pvc"), "--net1", str(root / "n2.pvc"), *common]) == 1
    assert "net1" in capsys.readouterr().err


def test_missing_checkpoint_named(workspace, tmp_path, capsys):
    _, _, common = workspace
    missing = str(tmp_path / "nope.pvc")
    assert main(["train", "--stage", "2", "--out", str(tmp_path / "x.pvc"), "--net1", missing, *common]) == 1
    assert "nope.pvc" in capsys.readouterr().err


def _src_wav(data):
    return str(next((data / "source").glob("*.wav")))


def test_convert_direct_and_cascade(workspace, tmp_path):
    root, data, _ = workspace
    outs = []
    for name, args in [("d", ["--mode", "direct", "--model", str(root / "n3.pvc")]),
                       ("c", ["--mode", "cascade", "--model", str(root / "n1.pvc"), str(root / "n2.pvc")])]:
        for rep in range(2):
            out = tmp_path / f"{name}{rep}.wav"
            assert main(["convert", *args, "--in", _src_wav(data), "--out", str(out), "--gl-iters", "2",
                         "--spec-out", str(tmp_path / f"{name}{rep}.npy")]) == 0
            outs.append(out)
        assert outs[-1].read_bytes() == outs[-2].read_bytes()
        assert np.load(tmp_path / f"{name}0.npy").shape[1] == 257
    with wave.open(str(outs[0])) as f:
        assert (f.getframerate(), f.getsampwidth(), f.getnchannels()) == (16000, 2, 1)


def test_convert_model_counts(workspace, tmp_path):
    root, data, _ = workspace
    base = ["--in", _src_wav(data), "--out", str(tmp_path / "o.wav")]
    assert main(["convert", "--mode", "direct", "--model", str(root / "n1.pvc"), str(root / "n2.pvc"), *base]) == 2
    assert main(["convert", "--mode", "cascade", "--model", str(root / "n3.pvc"), *base]) == 2
    assert main(["convert", "--mode", "direct", "--model", str(root / "n1.pvc"), *base]) == 1


def test_convert_missing_input(workspace, tmp_path):
    root, _, _ = workspace
    assert main(["convert", "--model", str(root / "n3.pvc"), "--in", str(tmp_path / "no.wav"),
                 "--out", str(tmp_path / "o.wav")]) == 1


def test_eval_identical_files(workspace, tmp_path, capsys):
    _, data, _ = workspace
    wav = _src_wav(data)
    assert main(["eval", "--target", wav, "--converted", wav, "--out", str(tmp_path / "r.tsv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[-2] == "mean\t0.000000"
    assert (tmp_path / "r.tsv").read_text().splitlines() == lines


def test_eval_pairs_file(workspace, tmp_path, capsys):
    _, data, _ = workspace
    pairs = tmp_path / "pairs.tsv"
    wavs = sorted((data / "source").glob("*.wav"))
    tgts = sorted((data / "target").glob("*.wav"))
    pairs.write_text("".join(f"{t}\t{s}\n" for t, s in zip(tgts, wavs)))
    assert main(["eval", "--pairs", str(pairs), "--align", "dtw"]) == 0
    out = capsys.readouterr().out
    assert float(out.splitlines()[-2].split("\t")[1]) > 0


def test_eval_needs_pairs():
    assert main(["eval"]) == 2


def test_bench_prints_table(tmp_path, capsys):
    out = tmp_path / "t.tsv"
    assert main(["bench", "--utterances", "2", "--seconds", "0.5", "--repeats", "1", "--out", str(out), *TINY]) == 0
    text = capsys.readouterr().out
    for row in ("Network 1", "Network 2", "Network 3", "Baseline (Network 1 + Network 2)", "Proposed (Network 3)",
                "Relative reduction (%)"):
        assert row in text
    assert out.read_text().startswith("model\tconversion_seconds")


def test_config_file_defaults_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"utterances": 1, "seconds": 0.5, "seed": 4}))
    assert main(["--config", str(cfg), "gen-corpus", "--out", str(tmp_path / "a")]) == 0
    assert len(list((tmp_path / "a").rglob("*.wav"))) == 6
    assert main(["--config", str(cfg), "gen-corpus", "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
    a = (tmp_path / "a" / "multi0" / "multi0_000.wav").read_bytes()
    b = (tmp_path / "b" / "multi0" / "multi0_000.wav").read_bytes()
    assert a != b
