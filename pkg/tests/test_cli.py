import numpy as np
import pytest

from vesselseg.checkpoint import encode_checkpoint
from vesselseg.cli import ABLATION_VARIANTS, read_dataset, run_cli, write_dataset
from vesselseg.model import ModelConfig, build_model
from vesselseg.phantom import PhantomSpec, gen_dataset
from vesselseg.volume_io import build_nifti, read_vseg, write_vseg

TINY = ["base_width=4", "levels=2", "epochs=1", "patch=8x8x8", "batch_size=2", "val_overlap=0"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    (root / "spec.txt").write_text("shape=16,16,16\nr_min=2\nr_max=3\n")
    assert run_cli(["generate", "--out", str(root), "--n-train", "2", "--n-val", "1", "--n-test", "2",
                    "--spec", str(root / "spec.txt")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run_cli(["train", "--data", str(data_dir), "--out", str(out), "--quiet"] + TINY) == 0
    return out


class TestUsage:
    def test_unknown_flag(self, capsys):
        assert run_cli(["gradcheck", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_subcommand(self):
        assert run_cli([]) == 1

    def test_help(self):
        assert run_cli(["--help"]) == 0

    def test_bad_override_syntax(self, data_dir, tmp_path):
        assert run_cli(["train", "--data", str(data_dir), "--out", str(tmp_path), "epochs"]) == 1


class TestGenerate:
    def test_dataset_layout(self, data_dir):
        entries, splits = read_dataset(data_dir)
        assert [len(splits[k]) for k in ("train", "val", "test")] == [2, 1, 2]
        assert splits["train"][0].image.shape == (16, 16, 16)
        assert entries["seed"] == "0"

    def test_matches_library(self, data_dir):
        spec = PhantomSpec(shape=(16, 16, 16), r_min=2.0, r_max=3.0)
        tr, _, _ = gen_dataset(spec, 2, 1, 2, base_seed=0)
        img, _ = read_vseg(data_dir / f"{tr[0].case_id}.image.vseg")
        assert np.array_equal(img, tr[0].image)

    def test_write_read_round_trip(self, tmp_path):
        spec = PhantomSpec(shape=(16, 16, 16), r_min=2.0, r_max=3.0)
        tr, va, te = gen_dataset(spec, 1, 1, 1, base_seed=3)
        write_dataset(tmp_path, spec, {"train": tr, "val": va, "test": te}, 3)
        _, splits = read_dataset(tmp_path)
        assert np.array_equal(splits["test"][0].mask, te[0].mask)

    def test_missing_manifest(self, tmp_path):
        assert run_cli(["eval", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "x"),
                        "--report", str(tmp_path / "r.csv")]) == 2


class TestTrainEvalPredict:
    def test_train_outputs(self, trained):
        assert (trained / "best.bgck").read_bytes()[:4] == b"BGCK"
        assert (trained / "train_log.csv").read_text().startswith("epoch,lr,train_loss,val_dice\n")

    def test_unknown_config_key(self, data_dir, tmp_path, capsys):
        assert run_cli(["train", "--data", str(data_dir), "--out", str(tmp_path), "nonsense=1"]) == 2
        assert "unknown config keys: nonsense" in capsys.readouterr().err

    def test_config_file_and_override_precedence(self, data_dir, tmp_path):
        (tmp_path / "c.txt").write_text("# tiny\n" + "\n".join(TINY) + "\nepochs=5\n")
        assert run_cli(["train", "--data", str(data_dir), "--out", str(tmp_path / "o"), "--quiet",
                        "--config", str(tmp_path / "c.txt"), "epochs=1"]) == 0
        assert len((tmp_path / "o" / "train_log.csv").read_text().splitlines()) == 2

    def test_eval_report(self, data_dir, trained, tmp_path):
        report = tmp_path / "r.csv"
        assert run_cli(["eval", "--data", str(data_dir), "--checkpoint", str(trained / "best.bgck"),
                        "--report", str(report)]) == 0
        lines = report.read_text().splitlines()
        assert lines[0] == "case_id,dice,iou,precision,recall,hd95_mm" and len(lines) == 5
        assert lines[-2].startswith("mean,") and lines[-1].startswith("std,")

    def test_eval_config_conflict(self, data_dir, tmp_path, capsys):
        model = build_model(ModelConfig(base_width=4, levels=2))
        ck = tmp_path / "m.bgck"
        ck.write_bytes(encode_checkpoint(model, {"train.spacing": "2.0x1.0x1.0", "train.patch": "8,8,8"}))
        assert run_cli(["eval", "--data", str(data_dir), "--checkpoint", str(ck),
                        "--report", str(tmp_path / "r.csv")]) == 2
        assert "config conflict: spacing" in capsys.readouterr().err

    def test_predict_vseg_and_nifti(self, data_dir, trained, tmp_path):
        _, splits = read_dataset(data_dir)
        case = splits["test"][0]
        src = data_dir / f"{case.case_id}.image.vseg"
        assert run_cli(["predict", "--in", str(src), "--checkpoint", str(trained / "best.bgck"),
                        "--out", str(tmp_path / "p.vseg")]) == 0
        mask, spacing = read_vseg(tmp_path / "p.vseg")
        assert mask.shape == case.image.shape and mask.dtype == np.uint8 and spacing == case.spacing
        (tmp_path / "v.nii").write_bytes(build_nifti(case.image))
        assert run_cli(["predict", "--in", str(tmp_path / "v.nii"), "--checkpoint", str(trained / "best.bgck"),
                        "--out", str(tmp_path / "q.vseg")]) == 0
        # NIfTI input is min-max normalised on read; predict on the same normalisation via VSEG
        img = case.image
        norm = ((img - img.min()) / (img.max() - img.min())).astype(np.float32)
        write_vseg(norm, case.spacing, tmp_path / "n.vseg")
        assert run_cli(["predict", "--in", str(tmp_path / "n.vseg"), "--checkpoint", str(trained / "best.bgck"),
                        "--out", str(tmp_path / "r.vseg")]) == 0
        assert np.array_equal(read_vseg(tmp_path / "q.vseg")[0], read_vseg(tmp_path / "r.vseg")[0])

    def test_corrupt_checkpoint(self, data_dir, tmp_path):
        (tmp_path / "bad.bgck").write_bytes(b"nope")
        assert run_cli(["predict", "--in", str(data_dir / "x.vseg"), "--checkpoint", str(tmp_path / "bad.bgck"),
                        "--out", str(tmp_path / "o.vseg")]) == 2


class TestGradcheckAndBench:
    def test_gradcheck_loss(self, capsys):
        assert run_cli(["gradcheck", "--module", "loss"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_bench_csv(self, tmp_path):
        out = tmp_path / "b.csv"
        assert run_cli(["bench", "--depths", "2", "4", "--channels", "4", "--height", "2", "--width", "2",
                        "--repeats", "1", "--warmup", "0", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "method,depth,mean_s,std_s,peak_bytes" and len(lines) == 5

    def test_bench_rejects_unsorted(self):
        assert run_cli(["bench", "--depths", "8", "4"]) == 2


class TestAblate:
    def test_table_layout(self, data_dir, tmp_path):
        assert run_cli(["ablate", "--data", str(data_dir), "--out", str(tmp_path)] + TINY) == 0
        lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert lines[0] == "variant,dice,iou,recall,precision,hd95_mm"
        assert [l.split(",")[0] for l in lines[1:]] == [v[0] for v in ABLATION_VARIANTS]
        assert [v[0] for v in ABLATION_VARIANTS] == ["B", "B+BiM", "B+GeoAttn", "B+BiM+GeoAttn"]
        assert all(len(l.split(",")) == 6 for l in lines)
