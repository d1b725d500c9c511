import subprocess
import sys

import pytest

from chirpscope import cli
from chirpscope.chirpgen import Ranges, load_manifest
from chirpscope.vit import load_checkpoint

SMALL_CFG = """
# a tiny model for fast tests
image_size = 16
patch_size = 4
width = 18
layers = 2
heads = 3
ffn_dim = 16
head_hidden = 8
lora_rank = 2
batch_size = 8
epochs = 1
"""


def test_parse_flat_and_build_config(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text(SMALL_CFG + "tau = 0.7\ntrainable = all\n")
    rc = cli.build_config(f, epochs=3)
    assert rc.vit.width == 18 and rc.vit.heads == 3
    assert rc.train.epochs == 3 and rc.train.batch_size == 8 and rc.train.trainable == "all"
    assert rc.run["tau"] == 0.7
    assert cli.build_config().vit.width == 64


@pytest.mark.parametrize("text", ["nonsense", "bogus_key = 1", "width = wide", "heads = 5"])
def test_bad_config_files(tmp_path, text):
    f = tmp_path / "c.txt"
    f.write_text(text + "\n")
    with pytest.raises(cli.CliError):
        cli.build_config(f)


def test_ranges_file(tmp_path):
    f = tmp_path / "r.txt"
    f.write_text("start_time = 0.1, 0.5\nshapes = linear\n")
    r = cli.load_ranges(f)
    assert r.start_time == (0.1, 0.5) and r.shapes == ("linear",) and r.f_start == Ranges().f_start


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.txt").write_text(SMALL_CFG)
    assert cli.main(["--workers", "1", "gen", "--count", "24", "--seed", "2", "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--data", str(root / "data"), "--config", str(root / "cfg.txt"), "--out-ckpt", str(root / "ckpt" / "m.ckpt")]) == 0
    return root


def test_gen_writes_one_line_per_image(workdir):
    lines = (workdir / "data" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 1 + 24
    assert len(load_manifest(workdir / "data")) == 24


def test_train_writes_checkpoint_and_curve(workdir):
    ck = load_checkpoint(workdir / "ckpt" / "m.ckpt")
    assert ck.cfg.heads == 3 and "channel_mean" in ck.meta
    assert (workdir / "ckpt" / "curve.csv").read_text().startswith("epoch,train_mse,val_mse\n0,")


def test_ablate_emits_l_by_h_heatmap_and_is_idempotent(workdir):
    args = ["ablate", "--ckpt", str(workdir / "ckpt" / "m.ckpt"), "--data", str(workdir / "data"), "--split", "all"]
    assert cli.main(args + ["--out-dir", str(workdir / "ab1")]) == 0
    assert cli.main(args + ["--out-dir", str(workdir / "ab2")]) == 0
    lines = (workdir / "ab1" / "heatmap.csv").read_text().splitlines()
    assert lines[0] == "head0,head1,head2" and len(lines) == 3
    for p in (workdir / "ab1").iterdir():
        assert p.read_bytes() == (workdir / "ab2" / p.name).read_bytes()


def test_attn_by_index_and_by_path(workdir):
    ck = str(workdir / "ckpt" / "m.ckpt")
    assert cli.main(["attn", "--ckpt", ck, "--data", str(workdir / "data"), "--image-index", "3", "--out-dir", str(workdir / "at1")]) == 0
    img = workdir / "data" / "images" / "000003.png"
    assert cli.main(["attn", "--ckpt", ck, "--image-path", str(img), "--alpha", "0.3", "--out-dir", str(workdir / "at2")]) == 0
    assert len(list((workdir / "at1").glob("*.png"))) == 6
    assert (workdir / "at1" / "layer1_head2.csv").read_bytes() == (workdir / "at2" / "layer1_head2.csv").read_bytes()


def test_score(workdir):
    out = workdir / "sc"
    assert cli.main(["score", "--ckpt", str(workdir / "ckpt" / "m.ckpt"), "--data", str(workdir / "data"), "--split", "all", "--tau", "0.8", "--out-dir", str(out)]) == 0
    assert (out / "profiles.json").exists() and len(list((out / "gallery").glob("*.png"))) == 6


def test_errors_are_one_line_and_nonzero(workdir, capsys):
    code = cli.main(["ablate", "--ckpt", str(workdir / "missing.ckpt"), "--data", str(workdir / "data"), "--out-dir", str(workdir / "x")])
    err = capsys.readouterr().err
    assert code != 0
    assert err.count("\n") == 1 and err.startswith("chirpscope: error: ablate: ")
    code = cli.main(["attn", "--ckpt", str(workdir / "ckpt" / "m.ckpt"), "--image-index", "0", "--out-dir", str(workdir / "y")])
    assert code != 0 and "--data" in capsys.readouterr().err
    code = cli.main(["attn", "--ckpt", str(workdir / "ckpt" / "m.ckpt"), "--data", str(workdir / "data"), "--image-index", "99", "--alpha", "0.5", "--out-dir", str(workdir / "y")])
    assert code != 0


def test_pipeline_layout(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(SMALL_CFG)
    out = tmp_path / "run"
    assert cli.main(["pipeline", "--seed", "1", "--out-dir", str(out), "--config", str(cfg), "--count", "30"]) == 0
    assert sorted(p.name for p in out.iterdir()) == sorted(cli.LAYOUT)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "chirpscope", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "pipeline" in res.stdout
