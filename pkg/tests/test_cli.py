import csv
import json

import pytest

from hct.cli import main
from hct.data import payload_checksum
from hct.model import load_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "ds"
    assert main(["synth", "--seed", "3", "--patients", "5", "--slices", "1", "--size", "32", "--out", str(d)]) == 0
    return d


TINY_MODEL = ["--d-embed", "8", "--depth", "1", "--heads", "2", "--widths", "2,2,2,2"]


class TestSynth:
    def test_counts_and_checksum(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--seed", 7, "--patients", 20, "--slices", 4, "--size", 64,
                           "--out", tmp_path / "a")
        assert code == 0
        assert "80 samples" in out
        assert len(list((tmp_path / "a").glob("pet_*.f32"))) == 80
        run(capsys, "synth", "--seed", 7, "--patients", 20, "--slices", 4, "--size", 64, "--out", tmp_path / "b")
        assert payload_checksum(tmp_path / "a") == payload_checksum(tmp_path / "b")
        assert payload_checksum(tmp_path / "a") in out

    def test_bad_size(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--size", 60, "--out", tmp_path)
        assert code == 2
        assert "multiple of 16" in err

    def test_unwritable(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, err = run(capsys, "synth", "--patients", 1, "--slices", 1, "--size", 16, "--out", blocker / "sub")
        assert code == 2 and "cannot write" in err


class TestTrain:
    def test_bogus_variant(self, small_dataset, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--dataset", small_dataset, "--out", tmp_path, "--variant", "bogus")
        assert code == 2
        assert "HCT" in err and "EF-TN" in err

    def test_missing_dataset(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--dataset", tmp_path / "nope", "--out", tmp_path / "o")
        assert code == 2 and "does not exist" in err

    def test_loss_decreases_and_rerun_identical(self, small_dataset, tmp_path, capsys):
        args = ["train", "--dataset", small_dataset, *TINY_MODEL, "--epochs", 5, "--lr", "1e-3",
                "--augment", "false", "--seed", 1]
        assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
        assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
        with open(tmp_path / "a" / "train_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert float(rows[-1]["mean_loss"]) < float(rows[0]["mean_loss"])
        strip = lambda p: [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]  # noqa: E731
        assert strip(tmp_path / "a" / "train_log.csv") == strip(tmp_path / "b" / "train_log.csv")
        _, arrays_a, _ = load_checkpoint(tmp_path / "a" / "final.ckpt")
        _, arrays_b, _ = load_checkpoint(tmp_path / "b" / "final.ckpt")
        assert arrays_a.keys() == arrays_b.keys()
        for name in arrays_a:
            assert arrays_a[name].tobytes() == arrays_b[name].tobytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_exit_code(self, small_dataset, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--dataset", small_dataset, *TINY_MODEL,
                           "--lr", "1e30", "--epochs", 3, "--out", tmp_path)
        assert code == 3
        assert "step" in err

    def test_config_file_and_flag_override(self, small_dataset, tmp_path, capsys):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"epochs": 1, "d_embed": 8, "depth": 1, "n_heads": 2,
                                   "backbone_widths": [2, 2, 2, 2], "seed": 5}))
        code, _, _ = run(capsys, "train", "--config", cfg, "--dataset", small_dataset, "--seed", 6,
                         "--out", tmp_path / "o")
        assert code == 0
        used = json.loads((tmp_path / "o" / "run_config.json").read_text())
        assert used["seed"] == 6 and used["epochs"] == 1 and used["d_embed"] == 8

    def test_unknown_config_key(self, small_dataset, tmp_path, capsys):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"epochz": 1}))
        code, _, err = run(capsys, "train", "--config", cfg, "--dataset", small_dataset, "--out", tmp_path)
        assert code == 2 and "epochz" in err

    def test_dataset_not_mutated(self, small_dataset, tmp_path, capsys):
        before = payload_checksum(small_dataset)
        meta = (small_dataset / "meta.json").read_bytes()
        run(capsys, "train", "--dataset", small_dataset, *TINY_MODEL, "--epochs", 1, "--out", tmp_path)
        assert payload_checksum(small_dataset) == before
        assert (small_dataset / "meta.json").read_bytes() == meta


class TestEval:
    def test_overfit_checkpoint(self, tmp_path, capsys):
        # a small quick-to-fit model; the raised learning rate only keeps this wiring test fast
        data = tmp_path / "ds"
        main(["synth", "--seed", "7", "--patients", "4", "--slices", "1", "--size", "64", "--out", str(data)])
        code, _, _ = run(capsys, "train", "--dataset", data, "--d-embed", 32, "--depth", 1, "--epochs", 150,
                         "--lr", "1e-3", "--augment", "false", "--out", tmp_path / "run")
        assert code == 0
        code, out, _ = run(capsys, "eval", "--dataset", data, "--checkpoint", tmp_path / "run" / "final.ckpt",
                           "--out", tmp_path / "eval")
        assert code == 0
        with open(tmp_path / "eval" / "metrics.csv") as fh:
            row = next(csv.DictReader(fh))
        assert float(row["dsc"]) >= 95.0, out
        assert (tmp_path / "eval" / "pr_HCT.csv").is_file()

    def test_shape_mismatch_exit_2(self, small_dataset, tmp_path, capsys):
        run(capsys, "train", "--dataset", small_dataset, *TINY_MODEL, "--epochs", 1, "--out", tmp_path / "run")
        code, _, err = run(capsys, "eval", "--dataset", small_dataset, "--checkpoint", tmp_path / "run" / "final.ckpt",
                           "--d-embed", 16, "--out", tmp_path / "eval")
        assert code == 2 and "does not match" in err

    def test_corrupt_checkpoint(self, small_dataset, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        code, _, _ = run(capsys, "eval", "--dataset", small_dataset, "--checkpoint", bad, "--out", tmp_path / "e")
        assert code == 2


class TestAblate:
    def test_rows_and_summary(self, small_dataset, tmp_path, capsys):
        code, out, _ = run(capsys, "ablate", "--dataset", small_dataset, *TINY_MODEL, "--epochs", 1,
                           "--variants", "EF-TN,LF-TN,HCT", "--seed", 2, "--out", tmp_path)
        assert code == 0
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 15
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["config"]["variants"] == ["EF-TN", "LF-TN", "HCT"]
        assert summary["config"]["seed"] == 2 and summary["config"]["d_embed"] == 8
        assert "fusion ordering" in out

    def test_bogus_variant_in_list(self, small_dataset, tmp_path, capsys):
        code, _, _ = run(capsys, "ablate", "--dataset", small_dataset, "--variants", "HCT,nope", "--out", tmp_path)
        assert code == 2


class TestGradcheck:
    def test_subset_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--ops", "layer_norm,softmax", "--seeds", 2)
        assert code == 0
        assert out.count("ok") == 2

    def test_injected_fault(self, capsys):
        code, out, err = run(capsys, "gradcheck", "--ops", "softmax,gelu", "--inject-fault", "gelu")
        assert code == 1
        assert "gelu" in err and "softmax" not in err

    def test_unknown_op(self, capsys):
        assert run(capsys, "gradcheck", "--ops", "nope")[0] == 2

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
