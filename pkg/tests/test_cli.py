import json
import subprocess
import sys

import pytest

from textrefiner.cli import build_parser, main

GEN = ["--d", "16", "--n-tokens", "6", "--n-base", "4", "--n-novel", "3", "--samples-per-class", "8",
       "--pool", "8", "--attrs-per-class", "2", "--distractors", "2"]
TRAIN = ["--epochs", "2", "--batch-size", "8", "--M", "4", "--k", "2"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    bundle, out = root / "bundle", root / "run"
    assert main(["gen", "--out", str(bundle), *GEN]) == 0
    assert main(["train", "--bundle", str(bundle), "--out", str(out), *TRAIN]) == 0
    return root, bundle, out


def test_help_shows_defaults():
    text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    assert "--gamma" in text and "(default: 0.8)" in text
    assert "--alpha" in text and "(default: 0.2)" in text
    assert "--lambda2" in text and "(default: 20.0)" in text


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "textrefiner.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen", "train", "eval", "bench", "sweep", "inspect-cache"):
        assert cmd in out.stdout


def test_gen_twice_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen", "--out", str(a), *GEN]) == 0
    assert main(["gen", "--out", str(b), *GEN]) == 0
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_train_outputs(run):
    _, _, out = run
    assert (out / "checkpoint.txrf").read_bytes()[:8] == b"TXRF0001"
    log = json.loads((out / "metrics.json").read_text())
    assert [e["epoch"] for e in log] == [1, 2]


def test_eval_report(run, capsys):
    _, bundle, out = run
    assert main(["eval", "--checkpoint", str(out / "checkpoint.txrf"), "--bundle", str(bundle), "--out", str(out)]) == 0
    line = json.loads(capsys.readouterr().out)
    rep = json.loads((out / "b2n_report.json").read_text())
    assert line == {"base": rep["base"], "novel": rep["novel"], "hm": rep["hm"]}


def test_eval_alpha_zero_equals_baseline(run, capsys):
    root, bundle, _ = run
    out = root / "a0"
    assert main(["train", "--bundle", str(bundle), "--out", str(out), *TRAIN, "--alpha", "0"]) == 0
    ck = str(out / "checkpoint.txrf")
    main(["eval", "--checkpoint", ck, "--bundle", str(bundle), "--out", str(out / "r")])
    main(["eval", "--checkpoint", ck, "--bundle", str(bundle), "--out", str(out / "b"), "--baseline"])
    assert (out / "r" / "b2n_report.json").read_bytes() == (out / "b" / "b2n_report.json").read_bytes()


def test_resume_matches(run):
    root, bundle, out = run
    mid = root / "mid"
    assert main(["train", "--bundle", str(bundle), "--out", str(mid), *TRAIN, "--save-every", "1"]) == 0
    res = root / "res"
    assert main(["train", "--bundle", str(bundle), "--out", str(res), *TRAIN,
                 "--resume", str(mid / "checkpoint_epoch001.txrf")]) == 0
    assert (res / "checkpoint.txrf").read_bytes() == (out / "checkpoint.txrf").read_bytes()


def test_resume_with_other_flags_is_config_error(run):
    root, bundle, out = run
    code = main(["train", "--bundle", str(bundle), "--out", str(root / "x"), *TRAIN, "--lr", "0.01",
                 "--resume", str(out / "checkpoint.txrf")])
    assert code == 2


def test_inspect_cache(run):
    _, bundle, out = run
    assert main(["inspect-cache", "--checkpoint", str(out / "checkpoint.txrf"), "--bundle", str(bundle),
                 "--out", str(out), "--format", "text"]) == 0
    info = json.loads((out / "cache.json").read_text())
    assert info["M"] == 4 and len(info["entries"]) == 4
    assert all(e["nearest_class"] for e in info["entries"])


def test_bench(run):
    _, bundle, out = run
    assert main(["bench", "--checkpoint", str(out / "checkpoint.txrf"), "--bundle", str(bundle), "--out", str(out),
                 "--repetitions", "3", "--queries", "20", "--classes", "16"]) == 0
    assert json.loads((out / "bench_report.json").read_text())["n_classes"] == 16


def test_sweep(run):
    root, bundle, _ = run
    out = root / "sweep"
    assert main(["sweep", "--bundle", str(bundle), "--out", str(out), *TRAIN, "--epochs", "1",
                 "--axis", "components", "--values", "baseline,refiner"]) == 0
    table = json.loads((out / "sweep.json").read_text())
    assert [r["value"] for r in table["rows"]] == ["baseline", "refiner"]
    assert (out / "sweep.csv").exists()


@pytest.mark.parametrize(
    "argv, code",
    [
        (["gen", "--out", "{tmp}/g", "--noise", "-1"], 2),
        (["train", "--bundle", "{bundle}", "--out", "{tmp}/t", "--gamma", "3"], 2),
        (["train", "--bundle", "{tmp}/missing", "--out", "{tmp}/t"], 3),
        (["eval", "--checkpoint", "{tmp}/nope.txrf", "--bundle", "{bundle}", "--out", "{tmp}/e"], 3),
        (["bench", "--checkpoint", "{ck}", "--bundle", "{bundle}", "--out", "{tmp}/b", "--repetitions", "1"], 2),
        (["sweep", "--bundle", "{bundle}", "--out", "{tmp}/s", "--axis", "M", "--values", "a,b"], 2),
    ],
)
def test_exit_codes(run, tmp_path, argv, code):
    _, bundle, out = run
    subs = {"tmp": str(tmp_path), "bundle": str(bundle), "ck": str(out / "checkpoint.txrf")}
    assert main([a.format(**subs) for a in argv]) == code


def test_corrupt_checkpoint_exit_code(run, tmp_path):
    _, bundle, _ = run
    bad = tmp_path / "bad.txrf"
    bad.write_bytes(b"garbage!" + b"\0" * 16)
    assert main(["eval", "--checkpoint", str(bad), "--bundle", str(bundle), "--out", str(tmp_path)]) == 3


def test_bad_thread_env(run, tmp_path, monkeypatch):
    monkeypatch.setenv("TEXTREFINER_THREADS", "lots")
    assert main(["gen", "--out", str(tmp_path / "g"), *GEN]) == 2


def test_thread_env_limits(tmp_path, monkeypatch):
    monkeypatch.setenv("TEXTREFINER_THREADS", "1")
    assert main(["gen", "--out", str(tmp_path / "g"), *GEN]) == 0


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["train"])
    assert err.value.code == 2
