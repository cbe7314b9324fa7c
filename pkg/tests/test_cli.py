import re

import numpy as np
import pytest

from graphsde.checkpoint import load_checkpoint
from graphsde.cli import main
from graphsde.evaluation import MmdReport
from graphsde.graphs import load_graphs
from graphsde.models import build_models
from graphsde.seeding import substream

TINY = """\
[dataset]
count = 12
[model_x]
hidden = 4
layers = 1
[model_a]
hidden = 4
blocks = 1
heads = 1
c_hidden = 2
c_final = 2
[loss]
batch_size = 8
[train]
epochs = 2
checkpoint_every = 1
[sampler]
steps = 20
"""


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_cfg):
    out = tmp_path_factory.mktemp("run")
    assert main(["--out", str(out), "train", "--config", str(tiny_cfg)]) == 0
    return out


def test_train_outputs(trained):
    for name in ("checkpoint.gsde", "metrics.tsv", "effective.cfg", "train_graphs.txt", "test_graphs.txt"):
        assert (trained / name).exists()
    assert len((trained / "metrics.tsv").read_text().splitlines()) == 3
    assert load_checkpoint(trained / "checkpoint.gsde").step > 0


def test_training_is_reproducible(tmp_path, tiny_cfg, trained):
    assert main(["--out", str(tmp_path), "train", "--config", str(tiny_cfg)]) == 0
    assert (tmp_path / "checkpoint.gsde").read_bytes() == (trained / "checkpoint.gsde").read_bytes()


def test_zero_epochs_store_initial_weights(tmp_path, tiny_cfg):
    assert main(["--out", str(tmp_path), "train", "--config", str(tiny_cfg), "--epochs", "0"]) == 0
    ck = load_checkpoint(tmp_path / "checkpoint.gsde")
    F = ck.config["data"]["F"]
    mx, _ = build_models(F, {"hidden": 4, "layers": 1},
                         {"hidden": 4, "blocks": 1, "powers": 2, "heads": 1, "c_hidden": 2, "c_final": 2},
                         substream(42, "init"))
    for k, v in mx.params.items():
        np.testing.assert_array_equal(ck.tensors[f"x/{k}"], v)


def test_sample_count_and_metadata(tmp_path, trained):
    ck = str(trained / "checkpoint.gsde")
    assert main(["--out", str(tmp_path), "sample", "--checkpoint", ck, "--count", "8"]) == 0
    text = (tmp_path / "samples.txt").read_text()
    assert len(re.findall(r"^g ", text, flags=re.M)) == 8
    assert len(load_graphs(tmp_path / "samples.txt")) == 8
    meta = (tmp_path / "samples.meta").read_text()
    assert "score_evals" in meta
    assert (tmp_path / "samples.cfg").exists()


def _evals(path):
    return int(re.search(r"score_evals\W+(\d+)", path.read_text()).group(1))


def test_score_eval_counts(tmp_path, trained):
    ck = str(trained / "checkpoint.gsde")
    for solver, name in (("S4", "s4.txt"), ("pc", "pc.txt")):
        assert main(["--out", str(tmp_path), "sample", "--checkpoint", ck, "--count", "2", "--steps", "1000",
                     "--solver", solver, "--name", name]) == 0
    assert _evals(tmp_path / "s4.meta") == 1000
    assert _evals(tmp_path / "pc.meta") == 2000


def test_sampling_is_reproducible(tmp_path, trained):
    ck = str(trained / "checkpoint.gsde")
    for name in ("a.txt", "b.txt"):
        assert main(["--out", str(tmp_path), "--seed", "7", "sample", "--checkpoint", ck, "--count", "4",
                     "--name", name]) == 0
    assert (tmp_path / "a.txt").read_text() == (tmp_path / "b.txt").read_text()


def test_eval_identical_sets(tmp_path, trained):
    test = str(trained / "test_graphs.txt")
    assert main(["--out", str(tmp_path), "eval", test, test]) == 0
    report = MmdReport.parse((tmp_path / "mmd_report.txt").read_text())
    assert report.as_dict() == {"degree": 0.0, "clustering": 0.0, "orbit": 0.0, "average": 0.0}
    assert (tmp_path / "orbit_breakdown.tsv").exists()


def test_eval_size_mismatch_noted(tmp_path, trained):
    with pytest.warns(UserWarning, match="subsampled"):
        assert main(["--out", str(tmp_path), "eval", str(trained / "train_graphs.txt"),
                     str(trained / "test_graphs.txt")]) == 0
    assert "#" in (tmp_path / "mmd_report.txt").read_text()


def test_exit_codes(tmp_path, tiny_cfg, trained):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nlearning_rate = 1\n")
    assert main(["--out", str(tmp_path), "train", "--config", str(bad)]) == 2
    assert main(["--out", str(tmp_path), "train", "--config", str(tmp_path / "absent.cfg")]) == 2
    broken = tmp_path / "broken.txt"
    broken.write_text("g 3 2\ne 0 1\ne zero 2\n")
    assert main(["--out", str(tmp_path), "eval", str(broken), str(broken)]) == 3
    junk = tmp_path / "junk.gsde"
    junk.write_bytes(b"junk")
    assert main(["--out", str(tmp_path), "sample", "--checkpoint", str(junk), "--count", "1"]) == 3
    other = tmp_path / "other.cfg"
    other.write_text(TINY.replace("hidden = 4\nlayers = 1", "hidden = 6\nlayers = 1"))
    assert main(["--out", str(tmp_path), "sample", "--config", str(other), "--checkpoint",
                 str(trained / "checkpoint.gsde"), "--count", "1"]) == 3


def test_toy_all_modes(tmp_path):
    args = ["--out", str(tmp_path), "toy", "--mode", "all", "--samples", "256", "--steps", "50"]
    assert main(args) == 0
    first = {m: (tmp_path / f"toy_points_{m}.tsv").read_text() for m in ("joint", "sequential", "independent")}
    for m in first:
        assert "within_mode_corr" in (tmp_path / f"toy_summary_{m}.txt").read_text()
    assert (tmp_path / "toy.cfg").exists()
    assert main(args) == 0
    for m, text in first.items():
        assert (tmp_path / f"toy_points_{m}.tsv").read_text() == text


def test_bench(tmp_path, trained):
    assert main(["--out", str(tmp_path), "bench", "--checkpoint", str(trained / "checkpoint.gsde"), "--count", "2",
                 "--steps", "10"]) == 0
    rows = [r.split("\t") for r in (tmp_path / "bench.tsv").read_text().splitlines()]
    assert rows[0] == ["solver", "steps", "score_evals", "wall_clock"]
    assert [(r[0], r[2]) for r in rows[1:]] == [("S4", "10"), ("PC(EM)", "20"), ("EM", "10"), ("Reverse", "10")]
