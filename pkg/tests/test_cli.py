"""Command line driver: subcommands, exit codes, run records."""

import json

import numpy as np
import pytest

from padkit.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, dispatch
from padkit.datasyn import SynthConfig, synth_dataset
from padkit.diffcore import load_checkpoint
from padkit.metrics import read_score_file


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("clicorpus")
    cfg = SynthConfig(subjects_per_ethnicity=5, clip_len=10, frame_size=16, seed=2)
    manifest, entries = synth_dataset(cfg, out)
    return out, manifest, entries


class TestDispatchBasics:
    def test_unknown_flag_is_usage_error(self):
        assert dispatch(["selftest", "--bogus"]) == EXIT_USAGE

    def test_unknown_subcommand_is_usage_error(self):
        assert dispatch(["frobnicate"]) == EXIT_USAGE

    def test_unknown_protocol_names_id(self, corpus, tmp_path, capsys):
        _, manifest, _ = corpus
        rc = dispatch(["split", "--protocol", "9_9", "--manifest", str(manifest),
                       "--out", str(tmp_path)])
        assert rc == EXIT_DATA
        assert "9_9" in capsys.readouterr().err

    def test_missing_manifest_is_data_error(self, tmp_path):
        rc = dispatch(["split", "--protocol", "1_1", "--manifest",
                       str(tmp_path / "nope.csv"), "--out", str(tmp_path)])
        assert rc == EXIT_DATA


class TestSynthAndSplit:
    def test_synth_writes_corpus_and_record(self, tmp_path):
        out = tmp_path / "c"
        rc = dispatch(["synth", "--out", str(out), "--subjects", "5",
                       "--clip-len", "8", "--frame-size", "12", "--seed", "4"])
        assert rc == EXIT_OK
        assert (out / "manifest.csv").exists()
        record = json.loads((out / "run_record.json").read_text())
        assert record["seed"] == 4
        assert record["outputs"]

    def test_synth_rerun_is_byte_identical(self, tmp_path):
        args = ["--subjects", "5", "--clip-len", "8", "--frame-size", "12",
                "--seed", "4"]
        assert dispatch(["synth", "--out", str(tmp_path / "a")] + args) == EXIT_OK
        assert dispatch(["synth", "--out", str(tmp_path / "b")] + args) == EXIT_OK
        m1 = (tmp_path / "a" / "manifest.csv").read_bytes()
        m2 = (tmp_path / "b" / "manifest.csv").read_bytes()
        assert m1 == m2
        clip = "A/A0001_real_R.vid"
        assert ((tmp_path / "a" / clip).read_bytes()
                == (tmp_path / "b" / clip).read_bytes())

    def test_split_emits_three_lists(self, corpus, tmp_path):
        _, manifest, _ = corpus
        out = tmp_path / "split"
        rc = dispatch(["split", "--protocol", "2_1", "--manifest", str(manifest),
                       "--out", str(out)])
        assert rc == EXIT_OK
        for name in ("train", "valid", "test"):
            assert (out / f"{name}.csv").exists()


class TestDynimg:
    def test_writes_png_and_raw_tensor(self, corpus, tmp_path):
        root, _, _ = corpus
        out = tmp_path / "dyn"
        rc = dispatch(["dynimg", "--video", str(root / "A/A0001_real_R.vid"),
                       "--out", str(out), "--window", "7"])
        assert rc == EXIT_OK
        assert (out / "dyn_0009.png").exists()
        raw = load_checkpoint(out / "dyn_0009.ckpt")
        assert raw["dynamic_image"].shape == (16, 16, 3)

    def test_static_clip_yields_zero_tensor(self, corpus, tmp_path):
        root, _, _ = corpus
        out = tmp_path / "dynzero"
        rc = dispatch(["dynimg", "--video", str(root / "A/A0001_print_indoor_R.vid"),
                       "--out", str(out), "--index", "5"])
        assert rc == EXIT_OK
        raw = load_checkpoint(out / "dyn_0005.ckpt")
        assert np.all(raw["dynamic_image"] == 0.0)


class TestTrainEvalReport:
    def test_pipeline(self, corpus, tmp_path):
        root, manifest, _ = corpus
        run = tmp_path / "run"
        rc = dispatch(["train", "--manifest", str(manifest), "--root", str(root),
                       "--protocol", "1_1", "--out", str(run),
                       "--variant", "sdnet", "--modalities", "r",
                       "--epochs", "2", "--lr", "0.002", "--batch-size", "8",
                       "--seed", "7"])
        assert rc == EXIT_OK
        assert (run / "final.ckpt").exists()
        log_lines = (run / "train_log.jsonl").read_text().splitlines()
        first = json.loads(log_lines[0])
        assert {"epoch", "step", "lr", "loss", "components"} <= set(first)

        scores = tmp_path / "scores.csv"
        rc = dispatch(["eval", "--checkpoint", str(run / "final.ckpt"),
                       "--manifest", str(manifest), "--root", str(root),
                       "--protocol", "1_1", "--out", str(scores),
                       "--variant", "sdnet", "--modalities", "r", "--seed", "7"])
        assert rc == EXIT_OK
        scored = read_score_file(scores)
        assert scored.subprotocol == "1_1"
        assert scored.scores.size == 16    # 2 test ethnicities x 2 subjects x 4 clips

        report_out = tmp_path / "report.kv"
        rc = dispatch(["report", "--scores", str(scores), "--out", str(report_out)])
        assert rc == EXIT_OK
        assert "acer" in report_out.read_text()

    def test_train_determinism_same_seed(self, corpus, tmp_path):
        root, manifest, _ = corpus
        logs = []
        for name in ("r1", "r2"):
            run = tmp_path / name
            rc = dispatch(["train", "--manifest", str(manifest), "--root", str(root),
                           "--protocol", "1_1", "--out", str(run),
                           "--variant", "sdnet", "--modalities", "d",
                           "--epochs", "1", "--lr", "0.002", "--batch-size", "4",
                           "--seed", "11"])
            assert rc == EXIT_OK
            logs.append([json.loads(l)["loss"]
                         for l in (run / "train_log.jsonl").read_text().splitlines()
                         if "loss" in json.loads(l)])
        assert logs[0] == logs[1]
        a = load_checkpoint(tmp_path / "r1" / "final.ckpt")
        b = load_checkpoint(tmp_path / "r2" / "final.ckpt")
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


def test_report_aggregates_three_subprotocols(tmp_path, capsys):
    rng = np.random.default_rng(0)
    from padkit.metrics import ScoredSet, write_score_file
    for i in range(3):
        bona = rng.uniform(size=40) < 0.5
        bona[0], bona[1] = True, False
        scored = ScoredSet(rng.uniform(size=40), bona, subprotocol=f"1_{i + 1}")
        write_score_file(tmp_path / f"s{i}.csv", scored)
    out = tmp_path / "report.kv"
    rc = dispatch(["report", "--scores"] + [str(tmp_path / f"s{i}.csv") for i in range(3)]
                  + ["--out", str(out)])
    assert rc == EXIT_OK
    printed = capsys.readouterr().out
    assert printed.count("1_") == 3
    assert "avg+-std" in printed
    kv = out.read_text()
    assert "avg.acer = " in kv and "avg.acer.std = " in kv


class TestSelftestAndAblation:
    def test_selftest_passes(self, capsys):
        assert dispatch(["selftest"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.count("PASS") == 4

    def test_ablation_variant_axis_runs_three(self, corpus, tmp_path, capsys):
        root, manifest, _ = corpus
        out = tmp_path / "abl"
        rc = dispatch(["ablation", "--manifest", str(manifest), "--root", str(root),
                       "--protocol", "1_1", "--out", str(out),
                       "--axes", "variant", "--epochs", "1", "--seed", "3"])
        assert rc == EXIT_OK
        table = (out / "ablation.txt").read_text()
        rows = [l for l in table.splitlines()[2:] if l.strip()]
        assert len(rows) == 3
        for tag in ("nhf", "psmm-wobf", "psmm"):
            assert tag in table

    def test_ablation_records_failures_and_continues(self, corpus, tmp_path):
        root, manifest, _ = corpus
        out = tmp_path / "abl2"
        # protocol 3_1 trains on a single modality: the three-modality cells
        # cannot assemble recordings and must be recorded as errors
        rc = dispatch(["ablation", "--manifest", str(manifest), "--root", str(root),
                       "--protocol", "3_1", "--out", str(out),
                       "--axes", "modalities", "--epochs", "1", "--seed", "3",
                       "--variant", "sdnet"])
        assert rc == EXIT_OK
        table = (out / "ablation.txt").read_text()
        assert "error" in table
