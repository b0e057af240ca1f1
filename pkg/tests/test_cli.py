import json
import os

import numpy as np
import pytest

from deepcount import cli
from deepcount import formats as F


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--count", "4", "--seed", "1", "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--epochs", "1"]) == 0
    return root


def test_flops_preset_prints_the_total(capsys):
    code, out, _ = run(capsys, "flops", "--preset", "csrnet-backend")
    assert code == 0
    assert out.strip().splitlines()[-1].split()[:2] == ["Total", "26500"]
    code, out, _ = run(capsys, "flops", "--preset", "branch2", "--csv")
    assert out.splitlines()[-1].split(",")[12] == "2152"


def test_flops_from_config_and_detached(capsys, tmp_path):
    cfg = tmp_path / "net.cfg"
    cfg.write_text("input_hw = 384x512\ndepth = 5\nchannel_scale = 1\n")
    code, full, _ = run(capsys, "flops", "--config", str(cfg))
    code2, det, _ = run(capsys, "flops", "--config", str(cfg), "--detached")
    assert code == code2 == 0
    assert "branch1.head" in full and "branch1" not in det
    assert run(capsys, "flops")[0] == 1
    cfg.write_text("deepness = 5\n")
    assert run(capsys, "flops", "--config", str(cfg))[0] == 2


def test_snr_ratios(capsys):
    code, out, _ = run(capsys, "snr", "--mu0", "1", "--sigma0", "1", "--levels", "3", "--trials", "100000")
    assert code == 0
    ratios = [float(v) for v in out.splitlines()[-1].split()[1:]]
    assert len(ratios) == 3 and all(abs(r - 4) < 0.4 for r in ratios)


def test_usage_errors_exit_1(capsys):
    assert run(capsys)[0] == 1
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "snr", "--mu0", "x", "--sigma0", "1")[0] == 1
    assert run(capsys, "--help")[0] == 0


def test_train_outputs(trained):
    run_dir = trained / "run"
    assert {"weights.dcwt", "backbone.dcwt", "train_log.csv", "config.txt", "manifest.json"} <= set(os.listdir(run_dir))
    man = json.loads((run_dir / "manifest.json").read_text())
    assert man["command"] == "train" and man["seed"] == 0 and man["spec"]["depth"] == 3
    assert len((run_dir / "train_log.csv").read_text().splitlines()) == 2


def test_infer_and_out_map(capsys, trained):
    img = str(trained / "data" / "images" / "scene_0000.png")
    out = trained / "infer"
    code, text, _ = run(capsys, "infer", "--weights", str(trained / "run" / "weights.dcwt"), "--image", img,
                        "--source", "branch1", "--out", str(out), "--out-map", "b1.dcdm")
    assert code == 0
    m = F.read_dcdm(out / "b1.dcdm")
    assert m.shape == (12, 16)
    assert float(text.split()[1]) == pytest.approx(float(m.astype(np.float64).sum()), rel=1e-5)


def test_infer_on_detached_weights_needs_the_backbone(capsys, trained):
    img = str(trained / "data" / "images" / "scene_0000.png")
    code, _, err = run(capsys, "infer", "--weights", str(trained / "run" / "backbone.dcwt"), "--image", img,
                       "--source", "branch1")
    assert code == 2 and "branch unavailable" in err
    code, out, _ = run(capsys, "infer", "--weights", str(trained / "run" / "backbone.dcwt"), "--image", img)
    assert code == 0 and out.startswith("count ")


def test_outputs_stay_inside_out(capsys, trained):
    img = str(trained / "data" / "images" / "scene_0000.png")
    code, _, err = run(capsys, "infer", "--weights", str(trained / "run" / "weights.dcwt"), "--image", img,
                       "--source", "branch1", "--out", str(trained / "o"), "--out-map", "../escape.dcdm")
    assert code == 2 and "outside" in err
    assert not (trained / "escape.dcdm").exists()


def test_eval_writes_csv(capsys, trained):
    code, out, _ = run(capsys, "eval", "--weights", str(trained / "run" / "weights.dcwt"),
                       "--data", str(trained / "data"), "--out", str(trained / "eval"))
    assert code == 0 and out.startswith("MAE ")
    lines = (trained / "eval" / "eval.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 + 2


def test_missing_inputs_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--weights", str(tmp_path / "none.dcwt"), "--data", str(tmp_path),
                       "--out", str(tmp_path / "o"))
    assert code == 2 and err


def test_finetune_from_init_weights(capsys, trained):
    code, _, _ = run(capsys, "train", "--data", str(trained / "data"), "--out", str(trained / "ft"),
                     "--epochs", "1", "--init-weights", str(trained / "run" / "weights.dcwt"))
    assert code == 0
    a = F.read_dcwt(trained / "run" / "weights.dcwt")
    b = F.read_dcwt(trained / "ft" / "weights.dcwt")
    assert list(a) == list(b) and not all(np.array_equal(a[k], b[k]) for k in a)


def test_gen_gt(capsys, tmp_path):
    ann = tmp_path / "ann"
    ann.mkdir()
    (ann / "x.json").write_text(json.dumps({"width": 100, "height": 70, "points": [[5, 5], [50.5, 30.25]]}))
    code, out, _ = run(capsys, "gen-gt", "--annotations", str(ann), "--out", str(tmp_path / "gt"), "--levels", "5")
    assert code == 0 and "128x128" not in out
    base = F.read_dcdm(tmp_path / "gt" / "x.L0.dcdm")
    assert base.shape == (96, 128) and abs(base.sum() - 2) < 1e-5
    assert F.read_dcdm(tmp_path / "gt" / "x.L5.dcdm").shape == (3, 4)


def test_ablate(capsys, trained):
    code, out, _ = run(capsys, "ablate", "--data", str(trained / "data"), "--eval-data", str(trained / "data"),
                       "--out", str(trained / "abl"), "--epochs", "1")
    assert code == 0
    rows = (trained / "abl" / "ablation.csv").read_text().splitlines()
    assert rows[0] == "ablation,mae,rmse" and len(rows) == 5
