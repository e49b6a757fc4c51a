import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from avstore.cli import main


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and " " not in line)


@pytest.fixture
def roots(tmp_path):
    return ["--hot-root", str(tmp_path / "hot"), "--cold-root", str(tmp_path / "cold")]


def test_ingest_archive_get_roundtrip(tmp_path, roots, capsys):
    assert main(["ingest", *roots, "--duration", "2", "--seed", "1"]) == 0
    out = kv(capsys.readouterr().out)
    assert out["ingest.image.frames_in"] == "20" and out["ingest.gps.frames_in"] == "100"

    assert main(["usage", *roots]) == 0
    usage = kv(capsys.readouterr().out)
    assert usage["lidar.items"] == "20" and usage["oldest_day"] == "2024-06-01"

    assert main(["archive", *roots, "--before", "2024/06/02", "--dry-run"]) == 0
    dry = capsys.readouterr().out
    assert "dry_run=1" in dry and dry.count("plan modality=") == 3
    assert main(["archive", *roots, "--before", "2024/06/02"]) == 0
    assert kv(capsys.readouterr().out)["days"] == "3"

    for modality, raw, ext in (("lidar", False, ".bin"), ("lidar", True, ".apc"),
                               ("image", False, ".png"), ("gps", False, ".csv")):
        out_dir = tmp_path / f"{modality}-{raw}"
        args = ["get", *roots, "--modality", modality, "--from", "2024-06-01T12:00:00Z",
                "--to", "1717243200999", "--out", str(out_dir)] + (["--raw"] if raw else [])
        assert main(args) == 0
        got = kv(capsys.readouterr().out)
        files = sorted(out_dir.iterdir())
        assert int(got["items"]) == len(files) == int(got["cold_items"]) > 0
        assert all(p.suffix == ext for p in files)
    # 10 fixes per 200 ms at 50 Hz: ts 0..980 in the first second
    assert len(list((tmp_path / "gps-False").iterdir())) == 50


def test_reduce_and_dedup_commands(tmp_path, roots, capsys):
    velo = tmp_path / "velo"
    velo.mkdir()
    pts = np.array([[0, 0, 0, 1], [0.1, 0, 0, 1], [5, 5, 5, 0]], dtype="<f4")
    (velo / "000000.bin").write_bytes(pts.tobytes())
    assert main(["reduce", *roots, str(velo), "--leaf", "0.2", "--out", str(tmp_path / "r")]) == 0
    out = kv(capsys.readouterr().out)
    assert (out["points_in"], out["points_out"]) == ("3", "2")
    assert (tmp_path / "r" / "000000.bin").stat().st_size == 32

    imgs = tmp_path / "imgs"
    imgs.mkdir()
    a = np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    for i in range(4):
        Image.fromarray(a).save(imgs / f"{i:06d}.png")
    assert main(["dedup", *roots, str(imgs), "--tau", "2"]) == 0
    out = kv(capsys.readouterr().out)
    assert (out["frames"], out["kept"], out["dropped"]) == ("4", "1", "3")


def test_exit_codes(tmp_path, roots, capsys):
    assert main(["bench", "retrieve", *roots]) == 3
    assert main(["usage", *roots, "--set", "voxel_leaf_m=-1"]) == 1
    assert main(["get", *roots, "--modality", "image", "--from", "5", "--to", "4",
                 "--out", str(tmp_path / "o")]) == 1
    assert main(["archive", *roots, "--before", "not-a-day"]) == 1
    bad = tmp_path / "bad.conf"
    bad.write_text("mystery=1\n")
    assert main(["usage", "--config", str(bad), *roots]) == 1
    capsys.readouterr()


def test_config_file_and_flag_precedence(tmp_path, capsys):
    conf = tmp_path / "avs.conf"
    conf.write_text(f"hot_root={tmp_path / 'from_file'}\n")
    assert main(["usage", "--config", str(conf)]) == 0
    assert (tmp_path / "from_file" / "db").is_dir()
    assert main(["usage", "--config", str(conf), "--hot-root", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "db").is_dir()
    capsys.readouterr()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "avstore.cli", "usage", "--hot-root", str(tmp_path)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "total_bytes=0" in proc.stdout
