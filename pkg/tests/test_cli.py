import json
import subprocess
import sys

import numpy as np
import pytest

from iconnet import cli
from iconnet.audio_io import Label, Waveform, generate_synthetic, resample, write_wav
from iconnet.model import load_model

SMALL_TRAIN = [
    "--synthetic", "--folds", "2",
    "--set", "data.n_per_class=4",
    "--set", "train.max_epochs=1", "--set", "train.segment_s=1", "--set", "train.train_hop_s=1",
    "--set", "model.block1_kernels=4", "--set", "model.block1_kernel_len=32",
    "--set", "model.block2_kernels=4", "--set", "model.block2_kernel_len=16",
    "--set", "model.ffn_hidden=8",
]


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------- dispatch

def test_no_subcommand_is_usage_error(capsys):
    code, _, err = run([], capsys)
    assert code == 1 and "usage" in err


def test_unknown_flag_lists_subcommand_flags(capsys):
    code, _, err = run(["gradcheck", "--bogus"], capsys)
    assert code == 1
    assert "--bogus" in err and "--epsilon" in err and "--tolerance" in err


def test_bad_choice_and_bad_set(capsys, tmp_path):
    assert run(["train", "--model", "resnet"], capsys)[0] == 1
    code, _, err = run(["train", "--synthetic", "--set", "train.nope=1", "--out", str(tmp_path)], capsys)
    assert code == 1 and "unknown key train.nope" in err
    code, _, err = run(["train", "--synthetic", "--set", "oops", "--out", str(tmp_path)], capsys)
    assert code == 1 and "section.key=value" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "iconnet", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("ingest", "synth-data", "train", "evaluate", "infer", "inspect-filters", "gradcheck"):
        assert name in proc.stdout


def test_missing_corpus_explains_download(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv(cli.DATA_ENV, raising=False)
    code, _, err = run(["train", "--out", str(tmp_path)], capsys)
    assert code == 2 and "physionet.org" in err
    code, _, err = run(["ingest", "--out", str(tmp_path / "m.csv")], capsys)
    assert code == 2 and "physionet.org" in err


# ---------------------------------------------------------------- train / evaluate

@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    codes = [cli.main(["train", *SMALL_TRAIN, "--seed", "7", "--out", str(base / name)]) for name in "ab"]
    return base, codes


def _run_dir(base):
    (d,) = [p for p in base.iterdir() if p.is_dir()]
    return d


def test_train_twice_byte_identical(two_runs):
    base, codes = two_runs
    assert codes == [0, 0]
    a, b = _run_dir(base / "a"), _run_dir(base / "b")
    assert a.name == b.name
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    for k in (0, 1):
        assert (a / f"model_fold{k}.icon").read_bytes() == (b / f"model_fold{k}.icon").read_bytes()


def test_run_directory_layout(two_runs):
    run_dir = _run_dir(two_runs[0] / "a")
    names = {p.name for p in run_dir.iterdir()}
    assert {"config.ini", "results.csv", "run.json", "model_fold0.icon", "model_fold1.icon",
            "interpret"} <= names
    doc = json.loads((run_dir / "run.json").read_text())
    assert doc["run_id"] == run_dir.name
    assert doc["seed"] == 7
    assert len(doc["dataset"]["sha256"]) == 64
    assert doc["parameters"]["published_total"] == 154180
    config = (run_dir / "config.ini").read_text()
    assert "seed = 7" in config and "block1_kernels = 4" in config
    assert (run_dir / "interpret" / "kernels.csv").is_file()
    meta = load_model(run_dir / "model_fold0.icon").metadata
    assert meta["segment_len"] == 16000 and meta["fold"] == 0


def test_train_refuses_overwrite(two_runs, capsys):
    base, _ = two_runs
    code, _, err = run(["train", *SMALL_TRAIN, "--seed", "7", "--out", str(base / "a")], capsys)
    assert code == 2 and "--force" in err
    assert run(["train", *SMALL_TRAIN, "--seed", "7", "--out", str(base / "a"), "--force"], capsys)[0] == 0


def test_evaluate_reproduces_results(two_runs, capsys, tmp_path):
    run_dir = _run_dir(two_runs[0] / "b")
    code, out, _ = run(["evaluate", "--run", str(run_dir), "--out", str(tmp_path / "r.csv")], capsys)
    assert code == 0
    assert out == (run_dir / "results.csv").read_text()
    assert (tmp_path / "r.csv").read_text() == out
    assert run(["evaluate", "--run", str(tmp_path)], capsys)[0] == 2


def test_config_file_and_set_precedence(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[train]\nmax_epochs = 3\nlearning_rate = 0.5\n")
    args = cli.build_parser().parse_args(["train", "--synthetic", "--config", str(ini),
                                          "--set", "train.max_epochs=2"])
    conf = cli.resolve_config(args)
    assert conf["train"]["max_epochs"] == 2
    assert conf["train"]["learning_rate"] == 0.5
    assert conf["model"]["block1_kernels"] == 32
    assert cli.run_id(conf) == cli.run_id(cli.resolve_config(args))


# ---------------------------------------------------------------- infer

@pytest.fixture(scope="module")
def held_out(tmp_path_factory):
    d = tmp_path_factory.mktemp("wav")
    corpus = generate_synthetic(99, 2)
    abnormal = next(e for e in corpus if e.label is Label.ABNORMAL)
    wf = abnormal.load()
    write_wav(wf, d / "abn_2k.wav", encoding="float32")
    write_wav(resample(wf, 16000), d / "abn_16k.wav", encoding="float32")
    write_wav(Waveform(np.zeros(0), 2000), d / "empty.wav")
    write_wav(Waveform(wf.samples[:1500], 2000), d / "short.wav")
    return d


def _infer(model_path, wav, capsys):
    code, out, err = run(["infer", "--model", str(model_path), "--wav", str(wav), "--json"], capsys)
    assert code == 0, err
    return json.loads(out)


def test_infer_abnormal_clip(trained_synthetic, held_out, capsys):
    _, model_path = trained_synthetic
    res = _infer(model_path, held_out / "abn_2k.wav", capsys)
    assert res["label"] == "Abnormal"
    assert res["probabilities"]["Abnormal"] > 0.9
    assert sum(res["probabilities"].values()) == pytest.approx(1.0)
    assert [s["offset_s"] for s in res["segments"]] == [5.0 * i for i in range(len(res["segments"]))]


def test_infer_rate_consistency(trained_synthetic, held_out, capsys):
    _, model_path = trained_synthetic
    a = _infer(model_path, held_out / "abn_2k.wav", capsys)
    b = _infer(model_path, held_out / "abn_16k.wav", capsys)
    assert a["label"] == b["label"]
    for k in a["probabilities"]:
        assert abs(a["probabilities"][k] - b["probabilities"][k]) < 1e-3


def test_infer_repeatable_and_plain_output(trained_synthetic, held_out, capsys):
    _, model_path = trained_synthetic
    args = ["infer", "--model", str(model_path), "--wav", str(held_out / "abn_2k.wav")]
    first = run(args, capsys)
    assert first == run(args, capsys)
    assert first[1].startswith("Abnormal")


def test_infer_degenerate_inputs(trained_synthetic, held_out, capsys, tmp_path):
    _, model_path = trained_synthetic
    code, out, err = run(["infer", "--model", str(model_path), "--wav", str(held_out / "empty.wav")], capsys)
    assert code == 2 and "no samples" in err and "Traceback" not in err
    code, _, err = run(["infer", "--model", str(model_path), "--wav", str(held_out / "short.wav")], capsys)
    assert code == 2 and "at least 1 s" in err
    bad = tmp_path / "bad.icon"
    bad.write_bytes(b"ICON\x01")
    code, _, err = run(["infer", "--model", str(bad), "--wav", str(held_out / "abn_2k.wav")], capsys)
    assert code == 2 and "offset" in err


# ---------------------------------------------------------------- data, filters, gradcheck

def test_synth_data_and_ingest_like_tree(tmp_path, capsys):
    code, out, _ = run(["synth-data", "--out", str(tmp_path / "syn"), "--n-per-class", "3"], capsys)
    assert code == 0 and "6 recordings" in out
    assert len(list((tmp_path / "syn").glob("*.wav"))) == 6
    assert run(["synth-data", "--out", str(tmp_path / "syn")], capsys)[0] == 2


def test_ingest_fake_corpus(tmp_path, capsys, monkeypatch):
    root = tmp_path / "corpus" / "training-a"
    root.mkdir(parents=True)
    rows = []
    for i, lab in enumerate([-1, -1, 1]):
        rid = f"a{i:04d}"
        write_wav(Waveform(np.sin(np.arange(4000) * 0.1) * 0.5, 2000), root / f"{rid}.wav")
        rows.append(f"{rid},{lab}")
    (root / "REFERENCE.csv").write_text("\n".join(rows) + "\n")
    monkeypatch.setenv(cli.DATA_ENV, str(tmp_path / "corpus"))
    code, out, _ = run(["ingest", "--out", str(tmp_path / "m.csv")], capsys)
    assert code == 0
    assert "Normal: 2" in out and "Abnormal: 1" in out and "total: 3" in out
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 4


def test_inspect_filters_initialized(tmp_path, capsys):
    code, out, _ = run(["inspect-filters", "--out", str(tmp_path / "f")], capsys)
    assert code == 0
    assert out.startswith("reference threshold: -20.0 dB")
    assert "643 +/- 134 Hz" in out
    assert len((tmp_path / "f" / "kernels.csv").read_text().splitlines()) == 1 + 128 + 32


def test_gradcheck_command(capsys):
    code, out, _ = run(["gradcheck"], capsys)
    assert code == 0 and "ok" in out
    assert run(["gradcheck", "--tolerance", "1e-30"], capsys)[0] == 2
