import json

import numpy as np
import pytest
import torch

from mose_pipeline.cli import build_parser, _config_tokens, main
from mose_pipeline.data_io import save_frame, save_mask, scan_dataset
from mose_pipeline.network import NetConfig, VOSModel, save_weights

TINY = NetConfig(n_blocks=1, n_queries=4, key_dim=4, value_dim=6, model_dim=8, hidden_dim=4, heads=2,
                 query_dims=(2, 3, 4, 5), mask_dims=(2, 2, 3, 3))


def write_records(root, classes):
    manifest = {}
    for i, cls in enumerate(classes):
        image_id = f"img{i}"
        frame = np.full((16, 16, 3), 0.1 * (i + 1), np.float32)
        save_frame(frame, root / image_id / "image.png")
        m = np.zeros((16, 16), np.int32)
        m[2 + i:8 + i, 3:9] = 1
        save_mask(m, root / image_id / f"1_{cls}.png")
        manifest[image_id] = [cls]
    (root / "manifest.json").write_text(json.dumps(manifest))
    return root


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
            and p.name != "manifest.json"}


def test_datagen_filters_records(tmp_path, capsys):
    write_records(tmp_path / "rec", ["person", "kite", "dog"])
    code = main(["datagen", "--records", str(tmp_path / "rec"), "--classes", "person,dog",
                 "--out", str(tmp_path / "out")])
    assert code == 0
    assert "kept 2 / 3" in capsys.readouterr().out
    assert len(scan_dataset(tmp_path / "out").sequences) == 2
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["command"] == "datagen" and manifest["seed"] == 0


def test_datagen_no_matches_exit_2(tmp_path, capsys):
    write_records(tmp_path / "rec", ["kite", "kite"])
    code = main(["datagen", "--records", str(tmp_path / "rec"), "--classes", "person",
                 "--out", str(tmp_path / "out")])
    assert code == 2
    assert "kept 0 / 2" in capsys.readouterr().out


def test_datagen_nothing_requested(tmp_path):
    assert main(["datagen", "--out", str(tmp_path / "out")]) == 2


def test_datagen_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["datagen", "--toy-videos", "2", "--toy-size", "32", "--toy-frames", "3",
                     "--seed", "5", "--out", str(tmp_path / name)]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_config_precedence(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[infer]\nscales = 100,200\ntmax = 7\nflip = false\n")
    parser = build_parser()
    base = ["infer", "--config", str(ini), "--data", "d", "--weights", "w", "--out", "o"]
    args = parser.parse_args(_config_tokens(parser, base))
    assert (args.scales, args.tmax, args.flip, args.interval) == ("100,200", 7, False, None)
    args = parser.parse_args(_config_tokens(parser, base + ["--tmax", "3", "--flip"]))
    assert (args.tmax, args.flip) == (3, True)


def test_config_unknown_key(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[eval]\nbogus = 1\n")
    assert main(["eval", "--config", str(ini), "--pred", "p", "--gt", "g"]) == 2


def test_missing_weights_exit_2(tmp_path):
    assert main(["infer", "--data", str(tmp_path), "--weights", str(tmp_path / "none.pt"),
                 "--out", str(tmp_path / "o")]) == 2


def test_bad_flag_exit_2():
    assert main(["eval", "--no-such-flag"]) == 2


@pytest.fixture
def toy_setup(tmp_path):
    data = tmp_path / "data"
    assert main(["datagen", "--toy-videos", "1", "--toy-size", "32", "--toy-frames", "3", "--out", str(data)]) == 0
    torch.manual_seed(0)
    weights = tmp_path / "w.pt"
    save_weights(VOSModel(TINY), weights)
    return data, weights


def test_infer_then_eval(toy_setup, tmp_path, capsys):
    data, weights = toy_setup
    out = tmp_path / "pred"
    assert main(["infer", "--data", str(data), "--weights", str(weights), "--scales", "16,32",
                 "--out", str(out), "--dump-probs"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["weights_sha256"]) == 64
    assert main(["eval", "--pred", str(out), "--gt", str(data), "--csv", str(tmp_path / "r.csv")]) == 0
    printed = capsys.readouterr().out
    assert "J&F" in printed
    assert (tmp_path / "r.csv").read_text().splitlines()[-1].startswith("GLOBAL")


def test_eval_missing_frames_exit_2(toy_setup, tmp_path, capsys):
    data, _ = toy_setup
    (tmp_path / "empty" / "toy0").mkdir(parents=True)
    assert main(["eval", "--pred", str(tmp_path / "empty"), "--gt", str(data)]) == 2
    assert "missing predicted frames" in capsys.readouterr().err


def test_ablate_missing_variant(toy_setup, tmp_path, capsys):
    data, weights = toy_setup
    code = main(["ablate", "--data", str(data), "--baseline-weights", str(weights),
                 "--out", str(tmp_path / "abl")])
    assert code == 2
    assert "+DA" in capsys.readouterr().err


def test_ablate_table(toy_setup, tmp_path, capsys, monkeypatch):
    data, weights = toy_setup
    monkeypatch.setenv("MOSE_PIPELINE_CACHE", str(tmp_path / "cache"))
    code = main(["ablate", "--data", str(data), "--baseline-weights", str(weights), "--da-weights", str(weights),
                 "--scales", "16,32"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["Method", "J", "F", "J&F"]
    assert [l.split()[0] for l in lines[1:]] == ["Baseline", "+DA", "+DA+TTA+MS"]
    for line in lines[1:]:
        j, f, jf = map(float, line.split()[1:])
        assert abs(jf - (j + f) / 2) <= 1e-4
    assert (tmp_path / "cache" / "ablate" / "ablation.txt").exists()


def test_train_short_run(toy_setup, tmp_path, capsys):
    data, _ = toy_setup
    out = tmp_path / "run"
    code = main(["train", "--stage", "both", "--data", str(data), "--out", str(out), "--iters", "2",
                 "--batch", "1", "--crop", "32", "--checkpoint-every", "1"])
    assert code == 0
    assert (out / "pretrain.pt").exists() and (out / "main.pt").exists() and (out / "weights.pt").exists()
    assert (out / "main_loss.csv").read_text().startswith("iteration,lr,loss")
    assert main(["describe", "--weights", str(out / "weights.pt")]) == 0
    assert "total" in capsys.readouterr().out
