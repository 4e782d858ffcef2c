import json

import numpy as np
import pytest
import yaml

from soundit.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from soundit.datakit import read_manifest
from soundit.encoders import read_image
from soundit.synthetic import make_corpus, make_media_dir

TINY = {
    "model": {"depth": 1, "dim": 16, "heads": 2, "num_experts": 2, "top_k": 1, "query_rank": 4,
              "slrcm_rank": 4},
    "schedule": {"T": 20},
    "train": {"steps": 4, "batch_size": 4, "checkpoint_every": 2, "log_every": 1},
    "ablation": {"steps": 2, "variants": ["full", "no_slrcm"], "experts": [2, 4]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    manifest = make_corpus(root / "data", n_pairs=4, seconds=2.0)
    assert main(["train", "--config", str(root / "tiny.yaml"), "--manifest", str(manifest),
                 "--out", str(root / "run")]) == EXIT_OK
    return root, manifest


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "run"
    for name in ("last.pt", "ckpt_000002.pt", "ckpt_000004.pt", "loss.png", "train_log.csv",
                 "train_summary.json"):
        assert (run / name).exists(), name
    assert (run / "train_log.csv").read_text().splitlines()[0] == "step,loss"
    assert len((run / "train_log.csv").read_text().splitlines()) == 5
    assert json.loads((run / "train_summary.json").read_text())["steps"] == 4


def test_train_is_reproducible(workspace, tmp_path):
    root, manifest = workspace
    assert main(["train", "--config", str(root / "tiny.yaml"), "--manifest", str(manifest),
                 "--out", str(tmp_path)]) == EXIT_OK
    for name in ("train_log.csv", "train_summary.json", "loss.png"):
        assert (tmp_path / name).read_bytes() == (root / "run" / name).read_bytes(), name


def test_resume_matches_straight_run(workspace, tmp_path):
    root, manifest = workspace
    assert main(["train", "--config", str(root / "tiny.yaml"), "--manifest", str(manifest),
                 "--resume", str(root / "run" / "ckpt_000002.pt"), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "train_log.csv").read_bytes() == (root / "run" / "train_log.csv").read_bytes()


def test_sample_from_audio(workspace, tmp_path):
    root, manifest = workspace
    args = ["sample", "--checkpoint", str(root / "run" / "last.pt"),
            "--audio", str(root / "data" / "audio" / "pair-0000.wav")]
    assert main([*args, "--scene", "park", "--out", str(tmp_path / "a.png")]) == EXIT_OK
    assert main([*args, "--scene", "park", "--out", str(tmp_path / "b.png")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "null.png")]) == EXIT_OK
    assert read_image(tmp_path / "a.png").shape == (32, 32, 3)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert np.array_equal(np.load(tmp_path / "a.latent.npy"), np.load(tmp_path / "b.latent.npy"))


def test_sample_evaluate_round(workspace, tmp_path):
    root, manifest = workspace
    gen = tmp_path / "gen"
    assert main(["sample", "--checkpoint", str(root / "run" / "last.pt"), "--manifest", str(manifest),
                 "--out", str(gen)]) == EXIT_OK
    assert sorted(p.name for p in gen.glob("*.png")) == [f"pair-000{i}.png" for i in range(4)]
    report = tmp_path / "report.json"
    assert main(["evaluate", "--manifest", str(manifest), "--generated", str(gen),
                 "--out", str(report)]) == EXIT_OK
    data = json.loads(report.read_text())
    assert data["summary"]["n_evaluated"] == 4
    assert report.with_suffix(".rows.csv").exists() and report.with_suffix(".png").exists()
    again = tmp_path / "again.json"
    main(["evaluate", "--manifest", str(manifest), "--generated", str(gen), "--out", str(again)])
    assert again.read_bytes() == report.read_bytes()
    assert again.with_suffix(".png").read_bytes() == report.with_suffix(".png").read_bytes()


def test_evaluate_mismatched_generated_dir(workspace, tmp_path, capsys):
    _, manifest = workspace
    (tmp_path / "gen").mkdir()
    code = main(["evaluate", "--manifest", str(manifest), "--generated", str(tmp_path / "gen"),
                 "--out", str(tmp_path / "r.json")])
    assert code == EXIT_RUNTIME
    assert "missing generated image" in capsys.readouterr().err


def test_pair(tmp_path):
    media = make_media_dir(tmp_path / "media", [{"id": "rec", "seconds": 35, "images": 2}])
    out = tmp_path / "pairs" / "manifest.jsonl"
    assert main(["pair", "--media", str(media), "--out", str(out)]) == EXIT_OK
    assert len(read_manifest(out)) == 3


def test_ablate(workspace, tmp_path):
    root, manifest = workspace
    assert main(["ablate", "--config", str(root / "tiny.yaml"), "--manifest", str(manifest),
                 "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("variant,config_hash,params_total,params_expert")
    assert [ln.split(",")[0] for ln in lines[1:]] == ["full", "no_slrcm", "experts_2", "experts_4"]
    assert (tmp_path / "ablation.png").exists()


@pytest.mark.parametrize("argv", [[], ["train"], ["evaluate", "--out", "x"], ["frobnicate"],
                                  ["evaluate", "--manifest", "m", "--generated", "g", "--out", "o", "-k", "3"]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == EXIT_USAGE


def test_bad_config_is_usage_error(workspace, tmp_path):
    _, manifest = workspace
    (tmp_path / "bad.yaml").write_text("model:\n  not_a_key: 1\n")
    assert main(["train", "--config", str(tmp_path / "bad.yaml"), "--manifest", str(manifest),
                 "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_missing_inputs_are_runtime_errors(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == EXIT_RUNTIME
    assert main(["sample", "--checkpoint", str(tmp_path / "nope.pt"), "--audio", "x.wav",
                 "--out", str(tmp_path / "x.png")]) == EXIT_RUNTIME
