import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from forgeryloc.cli import main
from forgeryloc.config import dump_config
from forgeryloc.corpus import MANIFEST_NAME, load_corpus, rasterize_labels
from helpers import small_corpus_config, tiny_config


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file() and not p.name.endswith(".run.json") and p.name != "run.json":
            h.update(p.relative_to(directory).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Config, corpus and a trained tiny FDN + PRN, all produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config()
    cfg.corpus = small_corpus_config()
    dump_config(cfg, root / "tiny.yaml")
    c = str(root / "tiny.yaml")
    assert main(["gen", "--config", c, "--out", str(root / "corpus")]) == 0
    assert main(["train-fdn", "--config", c, "--corpus", str(root / "corpus"),
                 "--out", str(root / "fdn.pt")]) == 0
    assert main(["train-prn", "--config", c, "--corpus", str(root / "corpus"),
                 "--fdn-ckpt", str(root / "fdn.pt"), "--out", str(root / "prn.pt")]) == 0
    return root


def test_gen_writes_clips_and_manifest(tmp_path, capsys):
    assert main(["gen", "--n-clips", "10", "--seed", "3", "--out", str(tmp_path / "c")]) == 0
    assert len(list((tmp_path / "c" / "audio").glob("*.wav"))) == 10
    lines = (tmp_path / "c" / MANIFEST_NAME).read_text().splitlines()
    assert len(lines) == 10
    assert "wrote 10 clips" in capsys.readouterr().out
    run = json.loads((tmp_path / "c" / "run.json").read_text())
    assert run["command"] == "gen" and run["seed"] == 3


def test_gen_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--n-clips", "4", "--seed", "11", "--out", str(tmp_path / name)]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    main(["gen", "--n-clips", "4", "--seed", "12", "--out", str(tmp_path / "c")])
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_unknown_config_key_exits_2(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text("model:\n  use_bafee: false\n")
    code = main(["gen", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "c")])
    assert code == 2
    assert "model.use_bafee" in capsys.readouterr().err


def test_train_prn_requires_fdn_checkpoint(workdir, tmp_path, capsys):
    code = main(["train-prn", "--corpus", str(workdir / "corpus"), "--out", str(tmp_path / "p.pt")])
    assert code == 2 and "--fdn-ckpt" in capsys.readouterr().err
    code = main(["train-prn", "--corpus", str(workdir / "corpus"),
                 "--fdn-ckpt", str(tmp_path / "nope.pt"), "--out", str(tmp_path / "p.pt")])
    assert code == 2 and "not found" in capsys.readouterr().err


def test_infer_missing_checkpoint_exits_2(workdir, tmp_path):
    code = main(["infer", "--fdn-ckpt", str(workdir / "fdn.pt"), "--prn-ckpt",
                 str(tmp_path / "missing.pt"), "--corpus", str(workdir / "corpus"),
                 "--out", str(tmp_path / "p.jsonl")])
    assert code == 2


def test_train_logs_written(workdir):
    rows = (workdir / "fdn.log.jsonl").read_text().splitlines()
    assert json.loads(rows[-1])["epoch"] == 1
    assert json.loads((workdir / "prn.pt.run.json").read_text())["command"] == "train-prn"


def test_infer_single_wav(workdir, tmp_path):
    wav = sorted((workdir / "corpus" / "audio").glob("*.wav"))[0]
    out = tmp_path / "one.jsonl"
    assert main(["infer", "--fdn-ckpt", str(workdir / "fdn.pt"), "--prn-ckpt",
                 str(workdir / "prn.pt"), "--input", str(wav), "--out", str(out)]) == 0
    (line,) = out.read_text().splitlines()
    row = json.loads(line)
    assert row["id"] == wav.stem
    assert set(row) == {"id", "frame_scores", "boundary_scores", "coarse_proposals", "proposals"}
    manifest = load_corpus(workdir / "corpus")
    rec = next(r for r in manifest.clips if r.id == wav.stem)
    assert len(row["frame_scores"]) == round(rec.duration_s / 0.02)


def oracle_predictions(corpus, path, drop=0):
    manifest = load_corpus(corpus)
    with open(path, "w") as fh:
        for r in manifest.clips[drop:]:
            y = rasterize_labels(r.segments, r.duration_s).y_fake.astype(float)
            segs = [{**s.to_json(), "score": 1.0} for s in r.segments]
            fh.write(json.dumps({"id": r.id, "frame_scores": y.tolist(),
                                 "boundary_scores": np.zeros_like(y).tolist(),
                                 "coarse_proposals": segs, "proposals": segs}) + "\n")


def test_eval_on_oracle_predictions(workdir, tmp_path):
    oracle_predictions(workdir / "corpus", tmp_path / "o.jsonl")
    args = ["--predictions", str(tmp_path / "o.jsonl"), "--corpus", str(workdir / "corpus")]
    assert main(["eval-pfd", *args, "--out", str(tmp_path / "pfd.json")]) == 0
    assert main(["eval-tfl", *args, "--out", str(tmp_path / "tfl.json")]) == 0
    pfd = json.loads((tmp_path / "pfd.json").read_text())
    tfl = json.loads((tmp_path / "tfl.json").read_text())
    assert pfd["eer"] == 0.0 and pfd["auc"] == 1.0
    assert tfl["map"] == 1.0 and tfl["ar_at_n"]["20"] == 1.0


def test_eval_id_mismatch_exits_2(workdir, tmp_path, capsys):
    oracle_predictions(workdir / "corpus", tmp_path / "o.jsonl", drop=1)
    code = main(["eval-tfl", "--predictions", str(tmp_path / "o.jsonl"),
                 "--corpus", str(workdir / "corpus"), "--out", str(tmp_path / "t.json")])
    assert code == 2
    first = load_corpus(workdir / "corpus").clips[0].id
    assert first in capsys.readouterr().err


def test_infer_eval_and_plot(workdir, tmp_path):
    preds = tmp_path / "p.jsonl"
    assert main(["infer", "--fdn-ckpt", str(workdir / "fdn.pt"), "--prn-ckpt",
                 str(workdir / "prn.pt"), "--corpus", str(workdir / "corpus"),
                 "--out", str(preds)]) == 0
    assert len(preds.read_text().splitlines()) == 4
    for cmd in ("eval-pfd", "eval-tfl"):
        assert main([cmd, "--predictions", str(preds), "--corpus", str(workdir / "corpus"),
                     "--out", str(tmp_path / f"{cmd}.json")]) == 0
    assert main(["eval-tfl", "--coarse", "--predictions", str(preds), "--corpus",
                 str(workdir / "corpus"), "--out", str(tmp_path / "coarse.json")]) == 0
    assert main(["plot", "--predictions", str(preds), "--corpus", str(workdir / "corpus"),
                 "--out", str(tmp_path / "fig")]) == 0
    assert len(list((tmp_path / "fig").glob("*.png"))) == 4


def test_plot_with_empty_proposals(tmp_path):
    row = {"id": "solo", "frame_scores": [0.1] * 50, "coarse_proposals": [], "proposals": []}
    (tmp_path / "p.jsonl").write_text(json.dumps(row) + "\n")
    assert main(["plot", "--predictions", str(tmp_path / "p.jsonl"),
                 "--out", str(tmp_path / "fig")]) == 0
    (png,) = (tmp_path / "fig").glob("*.png")
    assert png.name == "solo.png" and png.stat().st_size > 0


def test_grad_check_command(tmp_path, capsys):
    assert main(["grad-check", "--out", str(tmp_path / "g.json")]) == 0
    report = json.loads((tmp_path / "g.json").read_text())
    assert max(report["max_rel_err"].values()) < 1e-4
    assert main(["grad-check", "--tol", "0"]) == 1


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "forgeryloc.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
