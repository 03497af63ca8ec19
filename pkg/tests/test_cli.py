import csv
import subprocess
import sys

import numpy as np
import pytest

from cpaseg import cli
from cpaseg import data as D
from cpaseg.gradcheck import CheckResult


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small generated dataset plus a briefly trained cpa checkpoint."""
    root = tmp_path_factory.mktemp("ws")
    data, out = root / "data", root / "run"
    assert cli.run(["gen-data", "--data-root", str(data), "--scenes", "7", "--regions", "mixed,suburb"]) == 0
    code = cli.run(
        ["train", "--data-root", str(data), "--out", str(out), "--epochs", "1", "--batch", "2",
         "--regions", "mixed,suburb", "--seed", "3"]
    )
    assert code == 0
    return data, out


def test_help_lists_every_flag(capsys):
    assert cli.run(["train", "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ["--config", "--seed", "--variant", "--backbone", "--data-root", "--out", "--epochs",
                 "--batch", "--crop", "--stride", "--threads"]:
        assert flag in text


def test_top_level_help_lists_commands(capsys):
    cli.run(["--help"])
    text = capsys.readouterr().out
    assert all(cmd in text for cmd in cli.COMMANDS)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "cpaseg", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout


class TestConfig:
    def test_every_flag_has_a_config_key(self, tmp_path):
        values = {"seed": "9", "variant": "sa", "epochs": "3", "lr": "0.01", "regions": "downtown", "out": "x"}
        cfg = tmp_path / "a.cfg"
        cfg.write_text("# comment\n" + "".join(f"{k} = {v}\n" for k, v in values.items()))
        from_file, explicit = cli.resolve(cli.build_parser().parse_args(["train", "--config", str(cfg)]))
        from_flags, _ = cli.resolve(cli.build_parser().parse_args(
            ["train"] + [a for k, v in values.items() for a in (f"--{k}", v)]
        ))
        assert from_file == from_flags and explicit == set(values)

    def test_flag_overrides_file(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text("seed=4\n")
        opts, _ = cli.resolve(cli.build_parser().parse_args(["eval", "--config", str(cfg), "--seed", "5"]))
        assert opts["seed"] == 5

    def test_written_config_reads_back(self, tmp_path):
        opts, _ = cli.resolve(cli.build_parser().parse_args(["train", "--lr", "0.5"]))
        cli.write_config_file(tmp_path / "run.cfg", opts)
        again, _ = cli.resolve(cli.build_parser().parse_args(["train", "--config", str(tmp_path / "run.cfg")]))
        assert again == opts

    @pytest.mark.parametrize(
        "argv",
        [["train", "--variant", "crf"], ["train", "--batch", "0"], ["train", "--regions", "mars"],
         ["train", "--config", "/nonexistent.cfg"]],
    )
    def test_usage_errors(self, argv, capsys):
        assert cli.run(argv) == 2
        assert "error" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("colour=red\n")
        assert cli.run(["train", "--config", str(tmp_path / "bad.cfg")]) == 2
        assert "colour" in capsys.readouterr().err


class TestWorkflow:
    def test_gen_data_layout(self, workspace):
        data, _ = workspace
        assert len(list((data / "mixed" / "images").glob("*.ppm"))) == 7
        assert (data / "suburb" / "gt" / "suburb7.pgm").is_file()

    def test_train_outputs(self, workspace):
        _, out = workspace
        assert {p.name for p in out.iterdir()} >= {"checkpoint.bin", "run.cfg", "loss_curve.txt", "train_log.txt"}
        losses = [float(v) for v in (out / "loss_curve.txt").read_text().split()]
        assert len(losses) == 2 and all(np.isfinite(losses))

    def test_train_is_reproducible(self, workspace, tmp_path):
        data, out = workspace
        cli.run(["train", "--config", str(out / "run.cfg"), "--out", str(tmp_path)])
        assert (tmp_path / "loss_curve.txt").read_text() == (out / "loss_curve.txt").read_text()
        assert (tmp_path / "checkpoint.bin").read_bytes() == (out / "checkpoint.bin").read_bytes()

    def test_eval(self, workspace, capsys):
        data, out = workspace
        assert cli.run(["eval", "--data-root", str(data), "--out", str(out), "--regions", "mixed,suburb"]) == 0
        text = (out / "metrics.txt").read_text()
        assert "iou.overall=" in text and "acc.mixed=" in text
        assert capsys.readouterr().out.strip() == text.strip()

    def test_eval_wrong_variant(self, workspace):
        data, out = workspace
        assert cli.run(["eval", "--data-root", str(data), "--out", str(out), "--variant", "sa"]) == 2

    def test_infer(self, workspace, tmp_path, capsys):
        _, out = workspace
        scene = D.generate_scene(1, "mixed", 1, D.SceneConfig(extent=96))
        D.write_image(tmp_path / "big.ppm", scene.image)
        code = cli.run(["infer", "--checkpoint", str(out / "checkpoint.bin"), "--image", str(tmp_path / "big.ppm"),
                        "--out", str(tmp_path), "--crop", "64", "--stride", "32"])
        assert code == 0
        mask = D.read_mask(tmp_path / "big_mask.pgm")
        assert mask.shape == (96, 96)
        assert "processed 4 crops" in capsys.readouterr().out

    def test_attn_export(self, workspace, tmp_path):
        _, out = workspace
        code = cli.run(["attn-export", "--checkpoint", str(out / "checkpoint.bin"), "--out", str(tmp_path),
                        "--extent", "128", "--query", "3,5"])
        assert code == 0
        sizes = {name: D.read_gray(tmp_path / f"{name}.pgm").shape
                 for name in ("attention_s1", "attention_s2", "attention_s4", "attention_high", "attention_low")}
        assert sizes["attention_s1"] == sizes["attention_high"] == (16, 16)
        assert sizes["attention_s4"] == sizes["attention_low"] == (4, 4)
        assert D.read_mask(tmp_path / "prediction.pgm").shape == (128, 128)

    def test_attn_export_bad_query(self, workspace, tmp_path):
        _, out = workspace
        assert cli.run(["attn-export", "--checkpoint", str(out / "checkpoint.bin"), "--out", str(tmp_path),
                        "--extent", "128", "--query", "16,0"]) == 2


def test_ablate_table(tmp_path, capsys):
    code = cli.run(["ablate", "--data-root", str(tmp_path / "none"), "--out", str(tmp_path), "--scenes", "6",
                    "--regions", "mixed", "--epochs", "1", "--batch", "1", "--runs", "1", "--crop", "32"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["model", "Accuracy", "IoU"]
    assert [l.split()[0] for l in lines[1:]] == ["baseline", "sa", "cpa"]
    assert "iou.cpa.0=" in (tmp_path / "ablation.txt").read_text()


def test_bench_small_tile(tmp_path, capsys):
    assert cli.run(["bench", "--extent", "128", "--crop", "64", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split()[0] for l in lines[1:]] == ["tiny", "small", "small-se"]
    rows = list(csv.DictReader(open(tmp_path / "timing.csv")))
    assert [r["crops"] for r in rows] == ["4", "4", "4"]


def test_gradcheck_reports_and_exit_code(monkeypatch, capsys):
    fake = [CheckResult("conv2d", 3e-9, 10), CheckResult("model.decoder", 2e-3, 4)]
    monkeypatch.setattr(cli.gradcheck, "run_all", lambda seed: fake)
    assert cli.run(["gradcheck"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "1/2 groups" in out
    monkeypatch.setattr(cli.gradcheck, "run_all", lambda seed: fake[:1])
    assert cli.run(["gradcheck"]) == 0
