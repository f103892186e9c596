"""End-to-end runs of every subcommand through main()."""

import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from uli.cli import main
from uli.harness import load_coco_subset, parse_caption
from uli.model import load_checkpoint

FIXTURE = str(Path(__file__).parent / "fixtures" / "coco_tiny.json")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One tiny training run shared by the decode/eval tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "train.ini"
    cfg.write_text("[profile.desk]\n"
                   "iterations = 2\nbatch_size = 1\nseed = 1\n"
                   "checkpoint_every = 0\ntasks = det, caption\n")
    code = main(["train", "--config", str(cfg),
                 "--out-dir", str(root / "run")])
    assert code == 0
    code = main(["gen", "--n", "2", "--seed", "5",
                 "--out-dir", str(root / "scenes")])
    assert code == 0
    return root


class TestVocab:
    def test_dump_format(self, capsys):
        assert main(["vocab", "build", "--task", "det"]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        for i, line in enumerate(lines):
            ident, kind, surface = line.split("\t")
            assert int(ident) == i
            assert kind in ("base", "concept", "coord", "background")
            assert surface
        assert lines[-1].endswith("[background]")

    def test_categories_file(self, tmp_path, capsys):
        cats = tmp_path / "cats.txt"
        cats.write_text("red square\n")
        assert main(["vocab", "build", "--task", "det",
                     "--categories", str(cats)]) == 0
        out = capsys.readouterr().out
        assert "red_square" in out and "green_triangle" not in out

    def test_out_file(self, tmp_path):
        target = tmp_path / "vocab.tsv"
        assert main(["vocab", "build", "--task", "caption",
                     "--out", str(target)]) == 0
        assert "\tbase\t" in target.read_text()


class TestEncode:
    def test_detection_from_coco(self, capsys):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert main(["encode", "--task", "det", "--coco", FIXTURE,
                         "--image-id", "3"]) == 0
        out = capsys.readouterr().out.strip().split("\n")
        assert out[0].startswith("# task=det")
        assert out[1].startswith("# points:")
        tracks = out[2:]
        assert len(tracks) == 2                  # two matched boxes
        assert all(len(t.split()) == 5 for t in tracks)

    def test_caption_text(self, capsys):
        assert main(["encode", "--task", "caption",
                     "--text", "a red square"]) == 0
        body = capsys.readouterr().out.strip().split("\n")[-1].split()
        assert len(body) == 20
        assert body[:3] == ["a", "red", "square"]
        assert body[-1] == "[end]"

    def test_grounding_box(self, capsys):
        assert main(["encode", "--task", "grounding",
                     "--box", "4,4,40,40"]) == 0
        body = capsys.readouterr().out.strip().split("\n")[-1].split()
        assert len(body) == 4

    def test_semseg_rejected(self):
        assert main(["encode", "--task", "semseg"]) == 2

    def test_missing_args(self):
        assert main(["encode", "--task", "det"]) == 2
        assert main(["encode", "--task", "grounding"]) == 2

    def test_unknown_image_id(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert main(["encode", "--task", "det", "--coco", FIXTURE,
                         "--image-id", "999"]) == 2


class TestInspect:
    def test_mask_pbm(self, capsys):
        assert main(["inspect", "mask", "--task", "det"]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert lines[0] == "P1"
        assert lines[1].startswith("# task=det")
        w, h = map(int, lines[2].split())
        assert w == h == 64 + 16 * 7            # patches + 16 tracks of 2+5
        assert set("".join(lines[3:])) <= {"0", "1", " "}

    def test_mask_dimensions_vary_by_task(self, capsys):
        assert main(["inspect", "mask", "--task", "caption"]) == 0
        w, h = map(int, capsys.readouterr().out.strip().split("\n")[2].split())
        assert w == h == 64 + 22                # patches + one track of 2+20

    def test_assign_dump(self, capsys):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert main(["inspect", "assign", "--task", "det", "--coco",
                         FIXTURE, "--image-id", "3"]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert len(lines) == 1 + 16
        matched = [l for l in lines if "-> box" in l]
        assert len(matched) == 2
        assert all("cost" in l for l in matched)

    def test_assign_needs_coco(self):
        assert main(["inspect", "assign", "--task", "det"]) == 2


class TestDecodeCli:
    def test_detection_json(self, workdir, tmp_path):
        out = tmp_path / "det.json"
        code = main(["decode", "--task", "det",
                     "--image", str(workdir / "scenes" / "scene_0000.png"),
                     "--ckpt", str(workdir / "run" / "final.ckpt"),
                     "--out", str(out)])
        assert code == 0
        data = json.loads(out.read_text())
        assert data["task"] == "det"
        for entry in data["boxes"]:
            assert len(entry["bbox"]) == 4
            assert 0.0 <= entry["score"] <= 1.0
            assert isinstance(entry["category"], str)

    def test_caption_json(self, workdir, capsys):
        code = main(["decode", "--task", "caption",
                     "--image", str(workdir / "scenes" / "scene_0001.png"),
                     "--ckpt", str(workdir / "run" / "final.ckpt")])
        assert code == 0
        data = json.loads(capsys.readouterr().out)
        assert isinstance(data["caption"], str)

    def test_caption_beam(self, workdir, capsys):
        code = main(["decode", "--task", "caption", "--beam", "2",
                     "--image", str(workdir / "scenes" / "scene_0001.png"),
                     "--ckpt", str(workdir / "run" / "final.ckpt")])
        assert code == 0
        assert "caption" in json.loads(capsys.readouterr().out)

    def test_semseg_writes_mask(self, workdir, tmp_path):
        from PIL import Image
        out = tmp_path / "sem.json"
        code = main(["decode", "--task", "semseg",
                     "--image", str(workdir / "scenes" / "scene_0000.png"),
                     "--ckpt", str(workdir / "run" / "final.ckpt"),
                     "--out", str(out)])
        assert code == 0
        data = json.loads(out.read_text())
        with Image.open(data["mask_png"]) as im:
            assert im.size == (64, 64)

    def test_grounding_box(self, workdir, capsys):
        code = main(["decode", "--task", "grounding",
                     "--phrase", "the red square",
                     "--image", str(workdir / "scenes" / "scene_0000.png"),
                     "--ckpt", str(workdir / "run" / "final.ckpt")])
        assert code == 0
        data = json.loads(capsys.readouterr().out)
        assert len(data["boxes"]) == 1
        assert len(data["boxes"][0]["bbox"]) == 4

    def test_grounding_needs_phrase(self, workdir):
        assert main(["decode", "--task", "grounding",
                     "--image", str(workdir / "scenes" / "scene_0000.png"),
                     "--ckpt", str(workdir / "run" / "final.ckpt")]) == 2

    def test_missing_image(self, workdir):
        assert main(["decode", "--task", "det", "--image", "/no/such.png",
                     "--ckpt", str(workdir / "run" / "final.ckpt")]) == 2

    def test_accelerated_flag(self, workdir, capsys):
        code = main(["decode", "--task", "det", "--accelerated",
                     "--image", str(workdir / "scenes" / "scene_0000.png"),
                     "--ckpt", str(workdir / "run" / "final.ckpt")])
        assert code == 0
        json.loads(capsys.readouterr().out)


class TestTrainCli:
    def test_checkpoint_carries_categories(self, workdir):
        _, _, extra = load_checkpoint(str(workdir / "run" / "final.ckpt"))
        assert "red square" in extra["categories"]
        assert extra["iteration"] == 2

    def test_unknown_task_rejected(self, workdir):
        cfg = workdir / "train.ini"
        assert main(["train", "--config", str(cfg),
                     "--tasks", "semseg"]) == 2

    def test_uli_seed_env(self, tmp_path, monkeypatch, capsys):
        logs = []
        for _ in range(2):
            monkeypatch.setenv("ULI_SEED", "77")
            assert main(["train", "--iterations", "1", "--tasks", "det"]) == 0
            logs.append(capsys.readouterr().out)
        assert logs[0] == logs[1]


class TestEvalCli:
    def test_report_written(self, workdir, tmp_path):
        out = tmp_path / "report.json"
        code = main(["eval", "--ckpt", str(workdir / "run" / "final.ckpt"),
                     "--tasks", "det,caption", "--n", "2",
                     "--out", str(out)])
        assert code == 0
        data = json.loads(out.read_text())
        assert set(data) == {"det_ap", "det_ap50", "det_ap75", "bleu4"}
        assert all(0.0 <= v <= 1.0 for v in data.values())

    def test_grounding_metric(self, workdir, capsys):
        code = main(["eval", "--ckpt", str(workdir / "run" / "final.ckpt"),
                     "--tasks", "grounding", "--n", "2"])
        assert code == 0
        assert "grounding_acc" in json.loads(capsys.readouterr().out)


class TestGen:
    def test_round_trips_through_loader(self, workdir):
        ds = load_coco_subset(str(workdir / "scenes" / "scenes.json"))
        assert len(ds.records) == 2
        for rec in ds.records:
            assert (workdir / "scenes" / rec.file_name).exists()
            for box, poly in zip(rec.boxes, rec.polygons):
                assert poly is not None
                assert box[0] < box[2] and box[1] < box[3]
        payload = json.loads((workdir / "scenes" / "scenes.json").read_text())
        for caption in payload["captions"].values():
            parse_caption(caption)

    def test_semantic_maps_saved(self, workdir):
        sem = np.load(workdir / "scenes" / "scene_0000_sem.npy")
        assert sem.shape == (64, 64)

    def test_seed_determinism(self, tmp_path):
        for d in ("a", "b"):
            assert main(["gen", "--n", "1", "--seed", "9",
                         "--out-dir", str(tmp_path / d)]) == 0
        a = (tmp_path / "a" / "scene_0000.png").read_bytes()
        assert a == (tmp_path / "b" / "scene_0000.png").read_bytes()


def test_unknown_subcommand_exits_two():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2
