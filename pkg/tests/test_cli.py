import csv
import json

import numpy as np
import pytest

from kirby import cli
from kirby.classifier import read_checkpoint
from kirby.config import default_layout
from kirby.data import export_image, read_image
from kirby.synthetic import write_proxy_corpus


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_proxy_corpus(root / "data", n_train=120, n_test=60, seed=3)
    cfg = default_layout("data", proxy=True)
    cfg["data"].update(train_size=120, image_size=16)
    cfg["classifier"] = {"epochs": 1, "widths": [4, 8]}
    cfg["rejector"] = {"hidden": 16, "epochs": 2}
    cfg["output_dir"] = "out"
    path = root / "run.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["train-classifier", "--config", str(path)]) == 0
    return root, path


def rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_train_classifier_is_reproducible(workspace, tmp_path):
    root, cfg = workspace
    first = (root / "out" / "classifier.krby").read_bytes()
    assert cli.main(["train-classifier", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "classifier.krby").read_bytes() == first
    assert "test_accuracy" in json.loads((tmp_path / "train_log.json").read_text())


def test_missing_dataset_exits_2_and_names_path(workspace, tmp_path, capsys):
    root, cfg = workspace
    d = json.loads(cfg.read_text())
    d["data"]["ood_tests"][0]["images"] = "nowhere/images-idx3-ubyte"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    assert cli.main(["train-classifier", "--config", str(bad)]) == 2
    assert "nowhere" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["train-classifier", "--config", str(tmp_path / "none.json")]) == 2


def test_construct_ood_and_lambda_coverage(workspace, tmp_path, capsys):
    root, cfg = workspace
    ckpt = str(root / "out" / "classifier.krby")
    cov = {}
    for lam in (0.1, 0.9):
        out = tmp_path / f"sur{lam}"
        assert cli.main(["construct-ood", "--config", str(cfg), "--checkpoint", ckpt,
                         "--lambda", str(lam), "--out", str(out)]) == 0
        manifest = rows(out / "manifest.csv")
        assert len(manifest) == 120
        cov[lam] = np.mean([float(r["mask_coverage"]) for r in manifest])
    assert cov[0.9] < cov[0.1]
    assert "degenerate" in capsys.readouterr().out


@pytest.fixture(scope="module")
def staged(workspace):
    root, cfg = workspace
    ckpt = root / "out" / "classifier.krby"
    sur = root / "out" / "surrogates"
    assert cli.main(["construct-ood", "--config", str(cfg), "--checkpoint", str(ckpt), "--no-export"]) == 0
    for mode in ("M", "B"):
        assert cli.main(["train-rejector", "--config", str(cfg), "--checkpoint", str(ckpt),
                         "--surrogates", str(sur), "--mode", mode]) == 0
    return root, cfg, ckpt, sur


def test_train_rejector_widths_and_frozen_classifier(staged, capsys):
    from kirby.rejection import load_with_classifier

    root, cfg, ckpt, sur = staged
    classifier_params = read_checkpoint(ckpt).params
    for mode, width in (("M", 11), ("B", 2)):
        model, head = load_with_classifier(root / "out" / f"rejector-{mode}.krby")
        assert head.out_width == width
        for k, v in classifier_params.items():
            assert np.array_equal(model.params[k].data, v)


def test_evaluate_requires_rejector_for_kirby(staged, capsys):
    root, cfg, ckpt, sur = staged
    assert cli.main(["evaluate", "--config", str(cfg), "--checkpoint", str(ckpt), "--methods", "kirby-m"]) == 2
    assert "rejector" in capsys.readouterr().err


def test_evaluate_rows(staged, tmp_path):
    root, cfg, ckpt, sur = staged
    assert cli.main(["evaluate", "--config", str(cfg), "--checkpoint", str(ckpt),
                     "--rejector", str(root / "out" / "rejector-M.krby"),
                     "--methods", "kirby-m", "msp", "energy", "--surrogates", str(sur),
                     "--out", str(tmp_path)]) == 0
    got = rows(tmp_path / "report.csv")
    assert len(got) == 6
    assert {r["method"] for r in got} == {"kirby-m", "msp", "energy"}
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag["erased"] >= 0 and diag["inpainted"] >= 0


def test_evaluate_seeds_adds_mean_rows(staged, tmp_path):
    root, cfg, ckpt, sur = staged
    assert cli.main(["evaluate", "--config", str(cfg), "--checkpoint", str(ckpt),
                     "--rejector", str(root / "out" / "rejector-M.krby"), "--methods", "kirby-m", "msp",
                     "--surrogates", str(sur), "--seeds", "3", "--out", str(tmp_path)]) == 0
    got = rows(tmp_path / "report.csv")
    assert len(got) == 2 * 2 * 3 + 2 * 2
    assert sum(r["seed"] == "mean" for r in got) == 4


def test_evaluate_is_byte_reproducible(staged, tmp_path):
    root, cfg, ckpt, sur = staged
    args = ["evaluate", "--config", str(cfg), "--checkpoint", str(ckpt), "--methods", "msp", "mahalanobis"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()


def test_sweep_lambda(staged, tmp_path, capsys):
    root, cfg, ckpt, sur = staged
    assert cli.main(["sweep-lambda", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 0
    got = rows(tmp_path / "lambda_sweep.csv")
    assert len(got) == 9 * 2
    cov = [float(r["mask_coverage"]) for r in got[::2]]
    assert all(a >= b for a, b in zip(cov, cov[1:]))
    assert [r["lambda"] for r in got if r["default_lambda"] == "1"] == ["0.3", "0.3"]
    assert "(default)" in capsys.readouterr().out
    assert cli.main(["sweep-lambda", "--config", str(cfg), "--checkpoint", str(ckpt), "--values", "0,0.5"]) == 2


def test_inpaint_demo(tmp_path):
    mask = np.ones((1, 12, 12))
    mask[0, 3:8, 4:9] = 0
    export_image(mask, tmp_path / "mask.pgm")
    export_image(np.full((1, 12, 12), 0.4), tmp_path / "flat.pgm")
    assert cli.main(["inpaint-demo", "--image", str(tmp_path / "flat.pgm"), "--mask", str(tmp_path / "mask.pgm"),
                     "--out", str(tmp_path / "flat_out.pgm")]) == 0
    out = read_image(tmp_path / "flat_out.pgm")
    assert np.allclose(out, read_image(tmp_path / "flat.pgm"))
    export_image(np.random.default_rng(0).uniform(0, 1, (1, 12, 12)), tmp_path / "noise.pgm")
    for method in ("fm", "mean"):
        assert cli.main(["inpaint-demo", "--image", str(tmp_path / "noise.pgm"), "--mask",
                         str(tmp_path / "mask.pgm"), "--method", method, "--out", str(tmp_path / f"{method}.pgm")]) == 0
    assert (tmp_path / "fm.pgm").read_bytes() != (tmp_path / "mean.pgm").read_bytes()
    assert cli.main(["inpaint-demo", "--image", str(tmp_path / "noise.pgm"), "--mask", str(tmp_path / "no.pgm"),
                     "--out", str(tmp_path / "x.pgm")]) == 2


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as err:
        cli.main(["evaluate"])
    assert err.value.code == 2
