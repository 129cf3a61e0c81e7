import csv
import json
import re

import numpy as np
import pytest

from octcodec.cli import EXIT_DATA, EXIT_MISMATCH, EXIT_OK, EXIT_USAGE, UsageError, main, parse_grid
from octcodec.imageio import ImageFile, read_image, write_image
from octcodec.network import ArchConfig, CodecModel, save_checkpoint
from octcodec.toydata import toy_image


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    model = CodecModel(ArchConfig(M=8, N=8), seed=3)
    save_checkpoint(root / "model.octc", model, {"seed": 3})
    save_checkpoint(root / "other.octc", CodecModel(ArchConfig(M=8, N=8), seed=4), {"seed": 4})
    data = root / "data"
    data.mkdir()
    for i in range(2):
        write_image(data / f"img{i}.ppm", toy_image(i, 128, 128))
    write_image(root / "odd.png", toy_image(9, 250, 250))
    (root / "one").mkdir()
    write_image(root / "one" / "only.ppm", toy_image(5, 128, 128))
    return root


def _bpp(text):
    return float(re.search(r"bpp ([0-9.]+)", text).group(1))


def test_encode_decode_round_trip(workspace, capsys, tmp_path):
    bit = tmp_path / "odd.ocm"
    assert main(["encode", "--model", str(workspace / "model.octc"), "--in", str(workspace / "odd.png"),
                 "--out", str(bit)]) == EXIT_OK
    printed = _bpp(capsys.readouterr().out)
    assert printed == pytest.approx(8 * bit.stat().st_size / (250 * 250), abs=1e-6)
    assert (tmp_path / "odd.ocm.manifest.json").exists()

    outs = []
    for name in ("a.ppm", "b.ppm"):
        assert main(["decode", "--model", str(workspace / "model.octc"), "--in", str(bit),
                     "--out", str(tmp_path / name), "--ref", str(workspace / "odd.png")]) == EXIT_OK
        outs.append((tmp_path / name).read_bytes())
    line = capsys.readouterr().out
    assert "PSNR" in line and "MS-SSIM_dB" in line
    assert outs[0] == outs[1]
    assert (read_image(tmp_path / "a.ppm").width, read_image(tmp_path / "a.ppm").height) == (250, 250)


def test_decode_with_wrong_model_reports_both_digests(workspace, capsys, tmp_path):
    bit = tmp_path / "x.ocm"
    main(["encode", "--model", str(workspace / "model.octc"), "--in", str(workspace / "one" / "only.ppm"),
          "--out", str(bit)])
    code = main(["decode", "--model", str(workspace / "other.octc"), "--in", str(bit), "--out",
                 str(tmp_path / "y.ppm")])
    assert code == EXIT_MISMATCH
    err = capsys.readouterr().err
    assert len(re.findall(r"[0-9a-f]{16}", err)) == 2


def test_damaged_stream_is_a_data_error(workspace, tmp_path):
    bit = tmp_path / "bad.ocm"
    bit.write_bytes(b"OCMF" + bytes(10))
    assert main(["decode", "--model", str(workspace / "model.octc"), "--in", str(bit),
                 "--out", str(tmp_path / "y.ppm")]) == EXIT_DATA


def test_missing_inputs_are_data_errors(workspace, tmp_path):
    assert main(["encode", "--model", str(tmp_path / "none.octc"), "--in", "x.ppm", "--out", "y"]) == EXIT_DATA
    assert main(["eval", "--model", str(workspace / "model.octc"), "--dir", str(tmp_path),
                 "--csv", str(tmp_path / "e.csv")]) == EXIT_DATA


def test_eval_single_image_and_agrees_with_encode(workspace, capsys, tmp_path):
    table = tmp_path / "eval.csv"
    args = ["eval", "--model", str(workspace / "model.octc"), "--dir", str(workspace / "one"), "--csv", str(table)]
    assert main(args) == EXIT_OK
    rows = list(csv.DictReader(table.open()))
    assert [r["image"] for r in rows] == ["only.ppm", "mean"]
    assert rows[0]["bpp"] == rows[1]["bpp"]
    first = table.read_bytes()
    assert main(args) == EXIT_OK and table.read_bytes() == first

    capsys.readouterr()
    main(["encode", "--model", str(workspace / "model.octc"), "--in", str(workspace / "one" / "only.ppm"),
          "--out", str(tmp_path / "o.ocm")])
    assert _bpp(capsys.readouterr().out) == pytest.approx(float(rows[0]["bpp"]), abs=1e-6)


def test_eval_worker_pool_keeps_row_order(workspace, tmp_path):
    serial, pooled = tmp_path / "s.csv", tmp_path / "p.csv"
    base = ["eval", "--model", str(workspace / "model.octc"), "--dir", str(workspace / "data")]
    assert main(base + ["--csv", str(serial)]) == EXIT_OK
    assert main(base + ["--csv", str(pooled), "--workers", "2"]) == EXIT_OK
    assert serial.read_bytes() == pooled.read_bytes()
    rows = list(csv.DictReader(serial.open()))
    assert float(rows[-1]["psnr"]) == pytest.approx((float(rows[0]["psnr"]) + float(rows[1]["psnr"])) / 2)


def test_train_is_reproducible_and_writes_artifacts(workspace, tmp_path):
    logs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--data", str(workspace / "data"), "--lambda", "100", "--channels", "4",
                     "--steps", "3", "--batch", "1", "--crop", "128", "--lr", "1e-3", "--seed", "1",
                     "--out", str(out)]) == EXIT_OK
        logs.append((out / "metrics.csv").read_bytes())
        assert (out / "final.octc").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 1 and manifest["command"][:2] == ["octcodec", "train"]
    assert logs[0] == logs[1]


def test_train_rejects_single_band_model(workspace, capsys, tmp_path):
    code = main(["train", "--data", str(workspace / "data"), "--lambda", "0.01", "--alpha", "0",
                 "--out", str(tmp_path)])
    assert code == EXIT_USAGE
    assert "alpha" in capsys.readouterr().err


def test_train_without_images_is_a_data_error(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["train", "--data", str(tmp_path / "empty"), "--lambda", "1", "--out", str(tmp_path / "o")]) \
        == EXIT_DATA


def _flops_total(capsys, *extra):
    assert main(["flops", *extra]) == EXIT_OK
    line = [l for l in capsys.readouterr().out.splitlines() if l.strip().startswith("total")][0]
    return float(line.split()[-1])


def test_flops_command(capsys):
    base = _flops_total(capsys, "--channels", "32")
    assert _flops_total(capsys, "--channels", "32", "--width", "1536", "--height", "1024") == pytest.approx(4 * base)
    assert _flops_total(capsys, "--channels", "32", "--orgoct") < base


def test_flops_usage_errors():
    assert main(["flops", "--width", "100"]) == EXIT_USAGE
    assert main(["flops", "--orgoct", "--actout"]) == EXIT_USAGE
    assert main(["flops", "--alpha", "1.5"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_parse_grid():
    assert parse_grid("0.25, actout,orgoct:0.75") == [("goconv", 0.25), ("actout", 0.5), ("orgoct", 0.75)]
    for bad in ("0", "fancy", "0.5,,0.75", "actout:x", "0.5:0.5"):
        with pytest.raises(UsageError):
            parse_grid(bad)


def test_ablate_two_variants(tmp_path, capsys):
    assert main(["ablate", "--grid", "0.5,orgoct", "--steps", "2", "--channels", "4", "--train-images", "1",
                 "--test-images", "1", "--out", str(tmp_path)]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "ablation.csv").open()))
    assert [r["variant"] for r in rows] == ["goconv", "orgoct", "mean"]
    for r in rows[:-1]:
        assert int(r["bits_hf"]) + int(r["bits_lf"]) == int(r["bits"])
        assert float(r["bpp_hf"]) + float(r["bpp_lf"]) == float(r["bpp"])
    assert (tmp_path / "ablation.csv.manifest.json").exists()
    assert main(["ablate", "--grid", "nonsense", "--out", str(tmp_path)]) == EXIT_USAGE


def test_float_image_round_trip_through_cli_types():
    x = np.linspace(0, 1, 3 * 4 * 4, dtype=np.float32).reshape(3, 4, 4)
    assert np.abs(ImageFile.from_float(x).to_float() - x).max() <= 0.5 / 255 + 1e-7
