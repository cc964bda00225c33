import json
import subprocess
import sys

import pytest
import yaml

from conftest import MOVERS, SENSOR_PATH
from helpers import room_dict
from occlabel.cli import main
from occlabel.formats import list_scans, read_labels


@pytest.fixture(scope="module")
def seq(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scene = root / "scene.yaml"
    scene.write_text(yaml.safe_dump(room_dict(rows=32, cols=512, duration=2.0, noise=0.02, movers=MOVERS,
                                              sensor_path=SENSOR_PATH, seed=1)))
    assert main(["simulate", "--scene", str(scene), "--out", str(root / "seq")]) == 0
    assert main(["label", "--scans", str(root / "seq" / "scans"), "--trajectory",
                 str(root / "seq" / "trajectory.txt"), "--out", str(root / "labels")]) == 0
    return root


def test_simulate_layout(seq):
    s = seq / "seq"
    assert len(list_scans(s / "scans")) == 20
    assert len(list((s / "ground_truth").glob("*.label"))) == 20
    assert len(list((s / "instances").glob("*.label"))) == 20
    assert (s / "trajectory.txt").is_file()
    assert json.loads((s / "manifest.json").read_text())["scan_count"] == 20


def test_label_outputs(seq):
    out = seq / "labels"
    assert len(list(out.glob("*.label"))) == 20
    for name in ("manifest.json", "summary.json", "timing.csv", "timing.png"):
        assert (out / name).stat().st_size > 0, name
    header = (out / "timing.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "scan_id" and "total" in header and len(header) > 3
    assert any(read_labels(p, 32, 512).any() for p in out.glob("*.label"))


def test_label_flag_overrides(seq, tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("window = 3\nratio_threshold = 0.5\n")
    rc = main(["label", "--scans", str(seq / "seq" / "scans"), "--trajectory", str(seq / "seq" / "trajectory.txt"),
               "--out", str(tmp_path / "o"), "--config", str(cfg), "--window", "2", "--no-feedback"])
    assert rc == 0
    c = json.loads((tmp_path / "o" / "manifest.json").read_text())["config"]
    assert (c["window"], c["ratio_threshold"], c["feedback"]) == (2, 0.5, False)


def test_eval_outputs(seq, tmp_path, capsys):
    rep = tmp_path / "report.json"
    assert main(["eval", "--pred", str(seq / "labels"), "--truth", str(seq / "seq" / "ground_truth"),
                 "--report", str(rep)]) == 0
    data = json.loads(rep.read_text())
    assert data["summary"]["scans"] == 20 and 0.0 <= data["summary"]["sequence_iou"] <= 1.0
    assert len(data["scans"]) == 20
    assert rep.with_suffix(".csv").stat().st_size > 0 and rep.with_suffix(".png").stat().st_size > 0
    assert "sequence IoU" in capsys.readouterr().out
    txt = tmp_path / "report.txt"
    assert main(["eval", "--pred", str(seq / "labels"), "--truth", str(seq / "seq" / "ground_truth"),
                 "--report", str(txt)]) == 0
    lines = txt.read_text().splitlines()
    assert any(l.startswith("sequence_iou: ") for l in lines)
    assert "scan_id tp fp fn iou" in lines and len(lines[lines.index("scan_id tp fp fn iou") + 1:]) == 20


def test_clean_map_outputs(seq, tmp_path):
    out = tmp_path / "map"
    assert main(["clean-map", "--scans", str(seq / "seq" / "scans"), "--labels", str(seq / "labels"),
                 "--trajectory", str(seq / "seq" / "trajectory.txt"), "--out", str(out)]) == 0
    for name in ("static_map.ply", "dynamic_layer.ply", "map_summary.csv", "map_topdown.png"):
        assert (out / name).stat().st_size > 0, name
    assert (out / "static_map.ply").read_bytes().startswith(b"ply\n")


def test_export_ply(seq, tmp_path):
    scan = list_scans(seq / "seq" / "scans")[5]
    out = tmp_path / "one.ply"
    assert main(["export-ply", "--scan", str(scan), "--labels", str(seq / "labels" / (scan.stem + ".label")),
                 "--trajectory", str(seq / "seq" / "trajectory.txt"), "--out", str(out)]) == 0
    head = out.read_bytes()[:400].decode("ascii", "replace")
    assert "red" in head and "label" in head


def test_exit_code_bad_config(seq, tmp_path, capsys):
    rc = main(["label", "--scans", str(seq / "seq" / "scans"), "--trajectory", str(seq / "seq" / "trajectory.txt"),
               "--out", str(tmp_path / "o"), "--voxel-size", "-1"])
    assert rc == 1
    assert "invalid input" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_exit_code_unknown_preset(tmp_path):
    assert main(["simulate", "--scene", "no-such-preset", "--out", str(tmp_path / "x")]) == 2


def test_exit_code_missing_file(seq, tmp_path):
    rc = main(["label", "--scans", str(seq / "seq" / "scans"), "--trajectory", str(tmp_path / "missing.txt"),
               "--out", str(tmp_path / "o")])
    assert rc == 2


def test_exit_code_corrupt_scan(seq, tmp_path):
    import shutil

    scans = tmp_path / "scans"
    shutil.copytree(seq / "seq" / "scans", scans)
    (scans / "000003.bin").write_bytes(b"NOPE" + bytes(40))
    rc = main(["label", "--scans", str(scans), "--trajectory", str(seq / "seq" / "trajectory.txt"),
               "--out", str(tmp_path / "o")])
    assert rc == 2


def test_exit_code_misaligned(seq, tmp_path):
    import shutil

    labels = tmp_path / "labels"
    shutil.copytree(seq / "labels", labels)
    (labels / "000004.label").unlink()
    assert main(["eval", "--pred", str(labels), "--truth", str(seq / "seq" / "ground_truth"),
                 "--report", str(tmp_path / "r.json")]) == 1
    assert main(["clean-map", "--scans", str(seq / "seq" / "scans"), "--labels", str(labels),
                 "--trajectory", str(seq / "seq" / "trajectory.txt"), "--out", str(tmp_path / "m")]) == 1


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "occlabel", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "clean-map" in r.stdout
    r = subprocess.run([sys.executable, "-m", "occlabel", "label"], capture_output=True, text=True)
    assert r.returncode == 2  # argparse usage error
