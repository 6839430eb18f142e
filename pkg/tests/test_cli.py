import numpy as np
import pytest

from fewgrain import cli, data


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "corpus"
    rc = run(["synth", "--classes", "10", "--per-class", "6",
              "--side", "32", "--seed", "7", "--out", str(root)])
    assert rc == 0
    return root


TINY_TRAIN = ["--iters", "2", "--meta-batch", "1", "--way", "3",
              "--shot", "2", "--queries", "1", "--channels", "8",
              "--side", "32", "--m", "3", "--seed", "0"]


def test_synth_missing_out_is_usage_error(capsys):
    assert run(["synth"]) == 2


def test_synth_reruns_identical(tmp_path):
    for sub in ("a", "b"):
        assert run(["synth", "--classes", "6", "--per-class", "2",
                    "--side", "16", "--seed", "3",
                    "--out", str(tmp_path / sub)]) == 0
    fa = sorted((tmp_path / "a").rglob("*.ppm"))
    fb = sorted((tmp_path / "b").rglob("*.ppm"))
    assert [f.read_bytes() for f in fa] == [f.read_bytes() for f in fb]


def test_train_eval_round_trip(corpus, tmp_path, capsys):
    ck = tmp_path / "ck.bin"
    assert run(["train", "--data", str(corpus), "--out", str(ck)]
               + TINY_TRAIN) == 0
    out = capsys.readouterr().out
    assert "iter=0 loss=" in out
    rep = tmp_path / "rep.txt"
    assert run(["eval", "--data", str(corpus), "--ckpt", str(ck),
                "--episodes", "4", "--way", "2", "--shot", "2",
                "--queries", "2", "--seed", "0", "--out", str(rep)]) == 0
    out = capsys.readouterr().out
    assert "acc=" in out and "±" in out
    text = rep.read_text()
    assert text.startswith("episodes=4\n")


def test_eval_jobs_bit_identical_reports(corpus, tmp_path):
    ck = tmp_path / "ck.bin"
    assert run(["train", "--data", str(corpus), "--out", str(ck)]
               + TINY_TRAIN) == 0
    bodies = []
    for jobs in ("1", "8"):
        rep = tmp_path / f"rep{jobs}.txt"
        assert run(["eval", "--data", str(corpus), "--ckpt", str(ck),
                    "--episodes", "6", "--way", "2", "--shot", "2",
                    "--queries", "2", "--seed", "0", "--jobs", jobs,
                    "--out", str(rep)]) == 0
        bodies.append(rep.read_bytes())
    assert bodies[0] == bodies[1]


def test_train_alpha_zero_checkpoint_equals_init(corpus, tmp_path):
    cks = []
    for tag, iters in (("a", "2"), ("b", "0")):
        ck = tmp_path / f"{tag}.bin"
        args = ["train", "--data", str(corpus), "--out", str(ck),
                "--alpha", "0"] + TINY_TRAIN
        args[args.index("--iters") + 1] = iters
        assert run(args) == 0
        cks.append(data.load_checkpoint(ck))
    for name in cks[0].params:
        if name.endswith(("bn_mean", "bn_var")):
            continue  # running stats move even when alpha = 0
        assert np.array_equal(cks[0].params[name], cks[1].params[name]), name


def test_checkpoint_round_trip_restores_model(corpus, tmp_path):
    ck = tmp_path / "ck.bin"
    assert run(["train", "--data", str(corpus), "--out", str(ck)]
               + TINY_TRAIN) == 0
    model = cli.load_model(ck)
    back = data.load_checkpoint(ck)
    from fewgrain import pipeline
    again = pipeline.state_dict(model)
    for name, arr in back.params.items():
        assert np.array_equal(arr, again[name]), name


def test_config_file_merge_and_flag_priority(corpus, tmp_path, capsys):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("iters=1\nway=3\nchannels=8\nside=32\nm=3\n"
                       "meta-batch=1\nshot=2\nqueries=1\n# comment\n")
    ck = tmp_path / "ck.bin"
    assert run(["train", "--data", str(corpus), "--out", str(ck),
                "--config", str(cfgfile), "--iters", "2"]) == 0
    out = capsys.readouterr().out
    assert "iter=1 " in out  # flag beat the file's iters=1
    assert "iter=2 " not in out


def test_config_file_unknown_key_is_usage_error(tmp_path):
    cfgfile = tmp_path / "bad.cfg"
    cfgfile.write_text("bogus_key=1\n")
    assert run(["gradcheck", "--config", str(cfgfile)]) == 2


def test_select_freq_deterministic_and_distinct(corpus, tmp_path, capsys):
    outs = []
    for tag in ("a", "b"):
        fs = tmp_path / f"fs_{tag}.txt"
        assert run(["select-freq", "--data", str(corpus), "--out", str(fs),
                    "--m", "3", "--budget", "2", "--select-iters", "1",
                    "--way", "2", "--shot", "2", "--queries", "1",
                    "--channels", "8", "--side", "32", "--seed", "5"]) == 0
        outs.append(fs.read_text())
    assert outs[0] == outs[1]
    grid_lines = [ln for ln in capsys.readouterr().out.splitlines()
                  if ln and ln[0].isdigit() and " " in ln and "." in ln]
    assert len(grid_lines) >= 2  # 2x2 grid printed at side 32
    from fewgrain.mfn import FrequencyIndexSet
    fset = FrequencyIndexSet.load(tmp_path / "fs_a.txt")
    assert fset.M == 3
    assert len({(i, j) for i, j, _ in fset.entries}) == 3


def test_eval_bad_checkpoint_is_runtime_error(corpus, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint")
    assert run(["eval", "--data", str(corpus), "--ckpt", str(bad)]) == 1


def test_gradcheck_subset_exit_zero(capsys):
    rc = run(["gradcheck", "--precision", "64", "--ops", "matmul",
              "maxpool2d", "--max-elements", "8"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "matmul: worst_rel_err=" in out
    assert "worst=" in out
