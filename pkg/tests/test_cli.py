import socket
import subprocess
import sys
import threading

import numpy as np
import pytest

from stochimg import formats
from stochimg.cli import main
from stochimg.experiments import synthetic_image
from stochimg.image import read_image, write_image


def run(*args):
    return main([str(a) for a in args])


def test_plan_uniform(tmp_path):
    assert run("plan", "--out", tmp_path) == 0
    kv = formats.read_kv(tmp_path / "plan.txt")
    assert kv["N"] == "576" and kv["K"] == "1"
    header, rows = formats.read_table(tmp_path / "plan.csv")
    assert len(rows) == 576
    assert all(float(r[1]) == pytest.approx(1 / 576, abs=1e-15) for r in rows)


def test_plan_from_heatmap(tmp_path):
    freq = np.arange(576) % 7
    formats.write_block_column(tmp_path / "h.csv", "heatmap", "frequency", freq)
    assert run("plan", "--heatmap", tmp_path / "h.csv", "--floor", 0, "--out", tmp_path) == 0
    _, rows = formats.read_table(tmp_path / "plan.csv")
    p = np.array([float(r[1]) for r in rows])
    assert np.allclose(p, freq / freq.sum(), rtol=0, atol=1e-15)


def test_plan_infeasible_requirements_exit_one(tmp_path, capsys):
    formats.write_block_column(tmp_path / "r.csv", "requirements", "required", [0.999] * 576)
    assert run("plan", "--requirements", tmp_path / "r.csv", "--ratio", 0.01,
               "--out", tmp_path) == 1
    assert "infeasible" in capsys.readouterr().out
    assert formats.read_kv(tmp_path / "plan.txt")["feasible"] == "0"


def test_plan_feasible_requirements_report_minima(tmp_path):
    formats.write_block_column(tmp_path / "r.csv", "requirements", "required", [0.5] * 576)
    assert run("plan", "--requirements", tmp_path / "r.csv", "--ratio", 2, "--loss", 0.1,
               "--out", tmp_path) == 0
    header, rows = formats.read_table(tmp_path / "plan.csv")
    col = header.index("arrival_probability")
    assert all(float(r[col]) >= 0.5 - 1e-9 for r in rows)


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("loss = 0.5\nratio = 2\nblock = 16x16\n")
    assert run("plan", "--config", cfg, "--loss", 0.25, "--out", tmp_path) == 0
    kv = formats.read_kv(tmp_path / "plan.txt")
    assert (kv["loss"], kv["ratio"], kv["blocks"]) == ("0.25", "2.0", "144")
    cfg.write_text("trials = 5\n")
    assert run("plan", "--config", cfg) == 2


def test_simulate_rows_and_determinism(tmp_path):
    args = ["simulate", "--losses", "0,0.25,0.5", "--ratios", "0.5,1,2", "--trials", 100]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    _, rows = formats.read_table(tmp_path / "a" / "trials.csv")
    assert len(rows) == 900
    for name in ("trials.csv", "cells.csv", "blocks.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_then_metrics(tmp_path):
    assert run("simulate", "--losses", "0.25", "--trials", 10, "--save-images", 10,
               "--values", "gaussian", "--out", tmp_path) == 0
    assert run("metrics", tmp_path) == 0
    _, rows = formats.read_table(tmp_path / "metrics.csv")
    assert len(rows) == 10


def test_metrics_on_complete_image(tmp_path):
    img = synthetic_image(64, 32, 1, seed=3)
    write_image(tmp_path / "original.pgm", img)
    write_image(tmp_path / "copy.pgm", img)
    assert run("metrics", tmp_path, "--out", tmp_path / "m.csv") == 0
    _, rows = formats.read_table(tmp_path / "m.csv")
    assert rows[0][2] == "1.0"


def test_metrics_empty_directory(tmp_path):
    assert run("metrics", tmp_path) == 2


def test_send_scripted_drop_all_gives_fill_only_image(tmp_path):
    (tmp_path / "d.txt").write_text(" ".join(str(i) for i in range(1, 700)))
    assert run("send", "--channel", "scripted", "--drop-script", tmp_path / "d.txt",
               "--fill", 17, "--out", tmp_path) == 0
    assert set(read_image(tmp_path / "received.pgm").pixels) == {17}
    _, log = formats.read_table(tmp_path / "send_log.csv")
    assert len(log) == 576


def test_send_in_process_simulated_channel(tmp_path):
    assert run("send", "--channel", "sim-packet", "--loss", 0.25, "--out", tmp_path) == 0
    kv = formats.read_kv(tmp_path / "reception.txt")
    assert 0 < int(kv["unique_blocks"]) < 576


def free_port():
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_udp_loopback_lossless_round_trip(tmp_path):
    img = synthetic_image(64, 32, 3, seed=8)
    write_image(tmp_path / "in.ppm", img)
    port = free_port()
    codes = {}
    rx = threading.Thread(target=lambda: codes.update(recv=run(
        "recv", "--listen", f"127.0.0.1:{port}", "--guard", 2000, "--agreement-wait", 10,
        "--out", tmp_path / "rx")))
    rx.start()
    codes["send"] = run("send", "--image", tmp_path / "in.ppm", "--peer", f"127.0.0.1:{port}",
                        "--ratio", 20, "--interval-us", 100, "--out", tmp_path / "tx")
    rx.join(30)
    assert codes == {"send": 0, "recv": 0}
    assert read_image(tmp_path / "rx" / "received.ppm") == img


def test_send_without_receiver_fails_agreement(tmp_path, monkeypatch):
    import stochimg.protocol as proto
    orig = proto.Sender.__init__

    def fast(self, *a, **kw):
        kw["ack_timeout"] = 0.01
        orig(self, *a, **kw)

    monkeypatch.setattr(proto.Sender, "__init__", fast)
    assert run("send", "--peer", f"127.0.0.1:{free_port()}", "--out", tmp_path) == 1


@pytest.mark.parametrize("args", [
    ["plan", "--block", "7x8"],
    ["plan", "--block", "abc"],
    ["plan", "--ratio", "-1"],
    ["send"],
    ["send", "--channel", "scripted"],
    ["simulate", "--channel", "udp"],
    ["simulate", "--values", "heatmap"],
    ["plan", "--heatmap", "a.csv", "--requirements", "b.csv"],
    ["bogus"],
])
def test_usage_errors_exit_two(tmp_path, monkeypatch, args):
    monkeypatch.chdir(tmp_path)
    assert main(args) == 2


def test_help_and_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "stochimg.cli", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "simulate" in out.stdout
