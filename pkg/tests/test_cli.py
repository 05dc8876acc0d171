import numpy as np
import pytest

from darkstream.anonymizer import read_embedding, write_config, write_embedding
from darkstream.audio import AudioBuffer, read_wav, write_wav
from darkstream.cli import EXIT_EXHAUSTED, EXIT_FORMAT, EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE, main
from darkstream.metrics import TrialScores, write_scores

from conftest import small_config


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Small-pipeline config, weights, toy GAN, sources and a 1 s input."""
    d = tmp_path_factory.mktemp("cli")
    write_config(d / "small.cfg", small_config(la_frames=7))
    assert main(["init-weights", "--config", str(d / "small.cfg"), "--seed", "42", "--out", str(d / "w.dstw")]) == 0
    gan_args = ["init-weights", "--kind", "gan", "--gan-size", "toy", "--seed", "1"]
    assert main(gan_args + ["--out", str(d / "gan.dstw")]) == 0
    rng = np.random.default_rng(0)
    (d / "src").mkdir()
    for i in range(3):
        write_embedding(d / "src" / f"s{i}.emb", rng.normal(size=2))
    write_embedding(d / "target.emb", rng.normal(size=16))
    write_wav(d / "in.wav", AudioBuffer(0.3 * np.sin(np.arange(16000) * 0.05) + 0.05 * rng.normal(size=16000)))
    return d


def base(d):
    return ["--config", str(d / "small.cfg"), "--weights", str(d / "w.dstw")]


def test_anonymize_writes_same_length(workdir, capsys):
    out = workdir / "out.wav"
    code = main(["anonymize", *base(workdir), "--in", str(workdir / "in.wav"), "--out", str(out),
                 "--target-emb", str(workdir / "target.emb"), "--report"])
    assert code == EXIT_OK
    assert len(read_wav(out)) == 16000
    assert '"algorithmic_ms": 200' in capsys.readouterr().out


def test_anonymize_deterministic(workdir):
    outs = []
    for i in range(2):
        out = workdir / f"det{i}.wav"
        main(["anonymize", *base(workdir), "--in", str(workdir / "in.wav"), "--out", str(out),
              "--target-emb", str(workdir / "target.emb"), "--seed", "3"])
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_anonymize_missing_weights(workdir, capsys):
    code = main(["anonymize", "--config", str(workdir / "small.cfg"), "--in", str(workdir / "in.wav"),
                 "--out", str(workdir / "x.wav"), "--target-emb", str(workdir / "target.emb")])
    assert code == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err
    assert not (workdir / "x.wav").exists()


def test_anonymize_needs_a_target(workdir):
    code = main(["anonymize", *base(workdir), "--in", str(workdir / "in.wav"), "--out", str(workdir / "y.wav")])
    assert code == EXIT_USAGE and not (workdir / "y.wav").exists()


def test_anonymize_format_error(workdir):
    bad = workdir / "bad.wav"
    bad.write_bytes(b"RIFF0000WAVEjunk")
    code = main(["anonymize", *base(workdir), "--in", str(bad), "--out", str(workdir / "z.wav"),
                 "--target-emb", str(workdir / "target.emb")])
    assert code == EXIT_FORMAT and not (workdir / "z.wav").exists()


def test_bad_flag_values_exit_2(workdir):
    with pytest.raises(SystemExit) as exc:
        main(["anonymize", *base(workdir), "--la-ms", "30"])
    assert exc.value.code == EXIT_USAGE


def test_bench_table(workdir, capsys):
    assert main(["bench", *base(workdir), "--in", str(workdir / "in.wav"), "--chunk-ms", "60"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    rows = [line.split() for line in lines[1:]]
    assert [r[1] for r in rows] == ["60", "200", "340"]
    assert all(float(r[4]) > 0 for r in rows)


def test_compare(workdir, capsys):
    args = ["compare", *base(workdir), "--in", str(workdir / "in.wav")]
    assert main(args) == EXIT_OK
    assert main(args + ["--tolerance", "0"]) == EXIT_TOLERANCE
    assert "FAIL" in capsys.readouterr().out.splitlines()[-1]


def test_compare_single_chunk(workdir, capsys):
    """A chunk spanning the whole input leaves nothing to stream incrementally."""
    assert main(["compare", *base(workdir), "--in", str(workdir / "in.wav"), "--chunk-ms", "1000",
                 "--tolerance", "1e-12"]) == EXIT_OK


def test_fit_kmeans_from_wav(workdir, capsys):
    out = workdir / "cb.dstw"
    assert main(["fit-kmeans", *base(workdir), "--in", str(workdir / "in.wav"), "--k", "4", "--out", str(out)]) == 0
    assert capsys.readouterr().out.startswith("k 4 frames 50")
    again = workdir / "cb2.dstw"
    main(["fit-kmeans", *base(workdir), "--in", str(workdir / "in.wav"), "--k", "4", "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()
    code = main(["anonymize", *base(workdir), "--kmeans", str(out), "--use-kmeans", "--in", str(workdir / "in.wav"),
                 "--out", str(workdir / "k.wav"), "--target-emb", str(workdir / "target.emb")])
    assert code == EXIT_OK


def test_fit_kmeans_from_npy(workdir, capsys):
    np.save(workdir / "frames.npy", np.random.default_rng(0).normal(size=(50, 3)))
    assert main(["fit-kmeans", "--in", str(workdir / "frames.npy"), "--k", "5", "--out", str(workdir / "n.dstw")]) == 0


def test_sample_speaker(workdir, capsys):
    out = workdir / "pseudo.emb"
    args = ["sample-speaker", "--gan-weights", str(workdir / "gan.dstw"), "--sources-dir", str(workdir / "src")]
    assert main(args + ["--threshold", "1.0", "--out", str(out)]) == EXIT_OK
    assert "after 0 rejections" in capsys.readouterr().out
    assert read_embedding(out, 2).values.shape == (2,)
    assert main(args + ["--threshold", "-1.0", "--max-tries", "3", "--out", str(workdir / "none.emb")]) == EXIT_EXHAUSTED
    assert not (workdir / "none.emb").exists()


def test_eer_hand_case(workdir, capsys):
    write_scores(workdir / "s.txt", TrialScores([0.9, 0.8, 0.7], [0.75, 0.2, 0.1]))
    assert main(["eer", "--scores", str(workdir / "s.txt")]) == EXIT_OK
    assert capsys.readouterr().out.startswith("EER 33.33%")


def test_eer_bad_file(workdir):
    (workdir / "bad.txt").write_text("genuine x\n")
    assert main(["eer", "--scores", str(workdir / "bad.txt")]) == EXIT_FORMAT
    assert main(["eer", "--scores", str(workdir / "missing.txt")]) == EXIT_USAGE


def test_init_weights_deterministic(workdir):
    paths = [workdir / f"i{i}.dstw" for i in range(2)]
    for p in paths:
        main(["init-weights", "--config", str(workdir / "small.cfg"), "--variant", "mel", "--seed", "9", "--out", str(p)])
    assert paths[0].read_bytes() == paths[1].read_bytes()
