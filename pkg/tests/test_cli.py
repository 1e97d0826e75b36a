import json
import re
import subprocess
import sys

import numpy as np
import pytest

from hybridfuse import data_io
from hybridfuse.cli import main
from hybridfuse.evaluation import read_gate_trace, read_scores, write_gate_trace
from hybridfuse.fusion import GateTrace
from hybridfuse.synth import SynthRecipe, synth_clip
from hybridfuse.training import load_model, read_metrics


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained_run(small_corpus, tmp_path_factory):
    root, _, _ = small_corpus
    out = tmp_path_factory.mktemp("cli-train")
    code = main(
        ["train", "--manifest", str(root / "train.tsv"), "--eval-manifest", str(root / "eval.tsv"),
         "--strategy", "gating", "--epochs", "3", "--batch-size", "8", "--out", str(out), "--log-level", "WARNING"]
    )
    assert code == 0
    return root, out


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------


class TestExtract:
    def test_single_wav(self, tmp_path, capsys):
        data_io.write_wav(tmp_path / "a.wav", synth_clip(SynthRecipe(1)))
        code, out, _ = run(capsys, "extract", "--wav", str(tmp_path / "a.wav"), "--out", str(tmp_path / "a.sff"))
        assert code == 0 and "402x60" in out
        assert data_io.read_features(tmp_path / "a.sff").shape == (402, 60)
        assert (tmp_path / "extract_config.json").is_file()

    @pytest.mark.parametrize("kind,cols", [("lfcc", 60), ("cqcc", 60)])
    def test_other_kinds(self, tmp_path, capsys, kind, cols):
        data_io.write_wav(tmp_path / "a.wav", synth_clip(SynthRecipe(2)))
        code, _, _ = run(capsys, "extract", "--wav", str(tmp_path / "a.wav"), "--feature", kind,
                         "--out", str(tmp_path / "a.sff"))
        assert code == 0 and data_io.read_features(tmp_path / "a.sff").shape[1] == cols

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "extract", "--wav", str(tmp_path / "nope.wav"))
        assert code == 2 and "not found" in err

    def test_manifest(self, tmp_path, capsys):
        entries = []
        for i in range(3):
            data_io.write_wav(tmp_path / f"u{i}.wav", synth_clip(SynthRecipe(i, data_io.LABELS[i % 2])))
            entries.append(data_io.ManifestEntry(f"u{i}", f"u{i}.wav", "synth", data_io.LABELS[i % 2], "t"))
        data_io.write_manifest(tmp_path / "m.tsv", data_io.Manifest(entries))
        code, _, _ = run(capsys, "extract", "--manifest", str(tmp_path / "m.tsv"), "--out", str(tmp_path / "f"))
        assert code == 0
        assert sorted(p.name for p in (tmp_path / "f").glob("*.sff")) == [f"u{i}.mfcc.sff" for i in range(3)]

    def test_manifest_with_missing_wav(self, tmp_path, capsys):
        (tmp_path / "m.tsv").write_text("u\tgone.wav\tsynth\tspoof\tt\n")
        code, _, err = run(capsys, "extract", "--manifest", str(tmp_path / "m.tsv"), "--out", str(tmp_path / "f"))
        assert code == 2 and "gone.wav" in err

    def test_malformed_manifest(self, tmp_path, capsys):
        (tmp_path / "m.tsv").write_text("u\tonly-two\n")
        code, _, err = run(capsys, "extract", "--manifest", str(tmp_path / "m.tsv"))
        assert code == 1 and ":1:" in err

    def test_global_flags_after_subcommand(self, tmp_path, capsys):
        data_io.write_wav(tmp_path / "a.wav", synth_clip(SynthRecipe(1)))
        code, _, _ = run(capsys, "extract", "--wav", str(tmp_path / "a.wav"), "--out-dir", str(tmp_path / "o"),
                         "--log-level", "ERROR")
        assert code == 0 and (tmp_path / "o" / "features" / "a.mfcc.sff").is_file()


# ---------------------------------------------------------------------------
# synth-data / train / eval
# ---------------------------------------------------------------------------


class TestPipeline:
    def test_synth_data(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth-data", "--n-train", "2", "--n-eval", "2", "--out", str(tmp_path / "c"))
        assert code == 0 and "2 train / 2 eval" in out
        assert len(data_io.read_manifest(tmp_path / "c" / "train.tsv")) == 2
        assert json.loads((tmp_path / "c" / "synth-data_config.json").read_text())["n_train"] == 2

    def test_train_outputs(self, trained_run):
        _, out = trained_run
        for name in ("model.ckpt", "trainer.ckpt", "metrics.csv", "train_config.json"):
            assert (out / name).is_file()
        hist = read_metrics(out / "metrics.csv")
        assert [r.epoch for r in hist] == [0, 1, 2]
        best = [r.best_eer for r in hist]
        assert best == sorted(best, reverse=True)
        assert load_model(out / "model.ckpt").config.strategy == "gating"
        snap = json.loads((out / "train_config.json").read_text())
        assert snap["train_config"]["epochs"] == 3 and snap["strategy"] == "gating"

    def test_zero_epochs(self, small_corpus, tmp_path, capsys):
        root, _, _ = small_corpus
        code, _, _ = run(capsys, "train", "--manifest", str(root / "train.tsv"), "--strategy", "nofusion-sf",
                         "--epochs", "0", "--out", str(tmp_path / "t"))
        assert code == 0 and read_metrics(tmp_path / "t" / "metrics.csv") == []

    def test_unknown_strategy(self, small_corpus, capsys):
        root, _, _ = small_corpus
        with pytest.raises(SystemExit) as e:
            main(["train", "--manifest", str(root / "train.tsv"), "--strategy", "average"])
        assert e.value.code == 2
        assert "nofusion-sf" in capsys.readouterr().err

    def test_single_class_manifest(self, tmp_path, capsys):
        (tmp_path / "m.tsv").write_text("u\tsynth:seed=1,label=spoof\tsynth\tspoof\tt\n")
        code, _, err = run(capsys, "train", "--manifest", str(tmp_path / "m.tsv"), "--strategy", "concat")
        assert code == 1 and "both" in err

    def test_eval_and_gates(self, trained_run, tmp_path, capsys):
        root, out = trained_run
        code, stdout, _ = run(capsys, "eval", "--checkpoint", str(out / "model.ckpt"), "--manifest",
                              str(root / "eval.tsv"), "--scores-out", str(tmp_path / "s.csv"),
                              "--traces-dir", str(tmp_path / "traces"))
        assert code == 0
        assert re.match(r"EER: \d+\.\d\d% \(threshold ", stdout)
        assert len(read_scores(tmp_path / "s.csv")) == 16
        traces = sorted((tmp_path / "traces" / "mfcc").glob("*/*.csv"))
        assert len(traces) == 16 and read_gate_trace(traces[0]).weights.shape == (201, 2)

        code, stdout, _ = run(capsys, "analyze-gates", "--traces", str(tmp_path / "traces"),
                              "--out", str(tmp_path / "g.csv"))
        assert code == 0
        rows = (tmp_path / "g.csv").read_text().splitlines()
        assert rows[0] == "feature,dataset,w_sf,w_ssl" and len(rows) == 3
        for row in rows[1:]:
            _, _, a, b = row.split(",")
            assert abs(float(a) + float(b) - 1) <= 1e-6

    def test_eval_shape_mismatch(self, trained_run, tmp_path, capsys):
        root, out = trained_run
        data_io.write_features(tmp_path / "bad.sff", np.zeros((100, 1024)))
        (tmp_path / "m.tsv").write_text(
            f"u\t{root / 'wav' / 'eval_00000.wav'}\t{tmp_path / 'bad.sff'}\tbonafide\tt\n"
        )
        code, _, err = run(capsys, "eval", "--checkpoint", str(out / "model.ckpt"), "--manifest", str(tmp_path / "m.tsv"))
        assert code == 1 and "100x1024" in err and "201x1024" in err

    def test_missing_checkpoint(self, small_corpus, tmp_path, capsys):
        root, _, _ = small_corpus
        code, _, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--manifest", str(root / "eval.tsv"))
        assert code == 2


# ---------------------------------------------------------------------------
# analyze-gates / gradcheck
# ---------------------------------------------------------------------------


class TestTools:
    def test_gates_all_half(self, tmp_path, capsys):
        d = tmp_path / "tr" / "lfcc" / "eval-a"
        d.mkdir(parents=True)
        for i in range(3):
            write_gate_trace(d / f"u{i}.csv", GateTrace(np.full((5, 2), 0.5)))
        code, out, _ = run(capsys, "analyze-gates", "--traces", str(tmp_path / "tr"), "--out", str(tmp_path / "g.csv"))
        assert code == 0 and "w_sf=0.5000 w_ssl=0.5000" in out
        assert (tmp_path / "g.csv").read_text().splitlines()[1] == "lfcc,eval-a,0.5,0.5"

    def test_gates_missing_dir(self, tmp_path, capsys):
        code, _, _ = run(capsys, "analyze-gates", "--traces", str(tmp_path / "none"))
        assert code == 2

    def test_gates_empty_dir(self, tmp_path, capsys):
        code, _, err = run(capsys, "analyze-gates", "--traces", str(tmp_path))
        assert code == 1 and "no gate traces" in err

    def test_gradcheck(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--strategy", "xattn", "--n-seeds", "3")
        assert code == 0 and "(ok)" in out

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "hybridfuse.cli", "--version"], capture_output=True, text=True)
        assert res.returncode == 0 and res.stdout.strip() == "0.1.0"
