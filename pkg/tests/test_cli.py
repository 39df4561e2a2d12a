import json
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dat_ctta import segnet
from dat_ctta.cli import checkpoint, commands
from dat_ctta.cli import config as config_mod
from dat_ctta.cli.main import run
from dat_ctta.errors import ConfigError, ContractError, LoadError

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.conf"


@pytest.fixture(scope="module")
def smoke_source(tmp_path_factory):
    out = tmp_path_factory.mktemp("pretrain")
    assert run(["pretrain", "--config", str(SMOKE), "--out", str(out)]) == 0
    return out / "source.datc"


# config

def test_defaults_reference_file_is_current():
    assert (ROOT / "configs" / "defaults.conf").read_text() == config_mod.dumps(config_mod.Config())


def test_config_roundtrip_and_overrides():
    cfg = config_mod.loads("pau.rho = 0.002\nstream.domains = fog, snow\nstream.severities = 0.1, 0.2\n"
                           "run.timing = false  # trailing comment\n")
    assert cfg.pau.rho == 0.002 and cfg.stream.domains == ("fog", "snow") and cfg.run.timing is False
    assert config_mod.loads(config_mod.dumps(cfg)) == cfg
    assert config_mod.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("text,match", [
    ("pau.rhoo = 0.1", "unknown key"),
    ("bogus.x = 1", "unknown namespace"),
    ("rho = 0.1", "namespace"),
    ("pau.rho 0.1", "key = value"),
    ("pau.accumulation_frames = ten", "cannot parse"),
    ("run.timing = yes", "cannot parse"),
    ("pau.rho = 0.5", "rho"),
    ("scene.H = 60", "divisible"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        config_mod.loads(text)


# checkpoint

def test_checkpoint_roundtrips_bitwise(tmp_path, rng):
    for i in range(100):
        records = []
        for j in range(int(rng.integers(1, 5))):
            shape = tuple(int(d) for d in rng.integers(1, 5, size=int(rng.integers(0, 4))))
            data = rng.standard_normal(shape).astype(np.float32)
            records.append((f"t{j}.é", data))
        blob = checkpoint.encode(records)
        back = checkpoint.decode(blob)
        assert [n for n, _ in back] == [n for n, _ in records]
        assert all(a.tobytes() == b.tobytes() and a.shape == b.shape for (_, a), (_, b) in zip(records, back))
        assert checkpoint.encode(back) == blob


def test_checkpoint_layout_and_corruption(tmp_path, rng):
    blob = checkpoint.encode([("w", np.arange(6, dtype=np.float32).reshape(2, 3))])
    assert blob[:12] == b"DATC" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert int.from_bytes(blob[-4:], "little") == zlib.crc32(blob[:-4])
    bad = bytearray(blob)
    bad[20] ^= 0xFF
    with pytest.raises(LoadError, match="checksum"):
        checkpoint.decode(bytes(bad))
    with pytest.raises(LoadError, match="magic"):
        checkpoint.decode(b"NOPE" + blob[4:])


def test_checkpoint_model_layout_mismatch(tmp_path):
    small = segnet.build_model(segnet.ModelConfig(base_width=4, depth=2))
    path = checkpoint.save_model(tmp_path / "m.datc", small)
    other = segnet.build_model(segnet.ModelConfig(base_width=8, depth=2))
    with pytest.raises(ContractError, match="layout"):
        checkpoint.load_into(other, checkpoint.load(path))
    same = segnet.build_model(segnet.ModelConfig(base_width=4, depth=2, seed=9))
    checkpoint.load_into(same, checkpoint.load(path))
    assert same.params.tobytes() == small.params.tobytes()


# pretrain

def test_pretrain_zero_epochs_is_init_and_deterministic(tmp_path):
    cfg = config_mod.load(SMOKE)
    zero = replace(cfg, pretrain=replace(cfg.pretrain, epochs=0))
    commands.cmd_pretrain(zero, tmp_path / "a")
    init = segnet.build_model(cfg.model)
    loaded = commands.load_source(cfg, tmp_path / "a" / "source.datc")
    assert loaded.params.tobytes() == init.params.tobytes()
    commands.cmd_pretrain(cfg, tmp_path / "b")
    commands.cmd_pretrain(cfg, tmp_path / "c")
    assert (tmp_path / "b" / "source.datc").read_bytes() == (tmp_path / "c" / "source.datc").read_bytes()
    info = json.loads((tmp_path / "b" / "pretrain.json").read_text())
    assert 0 <= info["heldout_miou"] <= 1
    assert (tmp_path / "b" / "pretrain_loss.csv").read_text().startswith("epoch,step,loss\n")


# adapt / report

def test_adapt_outputs(tmp_path, smoke_source):
    out = tmp_path / "dat"
    assert run(["adapt", "--config", str(SMOKE), "--checkpoint", str(smoke_source), "--out", str(out)]) == 0
    text = (out / "metrics.csv").read_text()
    assert text.split("\n", 1)[0] == ("run_id,method,round,domain,frame,miou_running,acc_running,loss,"
                                      "g_h_count,g_l_count,dsp_count,trp_count,seconds")
    rows = commands.read_metrics_csv(out / "metrics.csv")
    assert len(rows) == 4 * 4 * 2
    for a, b in zip(rows, rows[1:]):
        if b["domain"] == a["domain"] and b["round"] == a["round"]:
            assert b["dsp_count"] >= a["dsp_count"]
    k = int(0.01 * segnet.build_model(config_mod.load(SMOKE).model).num_params)
    assert all(r["dsp_count"] <= k for r in rows if r["frame"] % 4 == 0)
    info = json.loads((out / "run.json").read_text())
    assert info["csv_schema"] == 1 and len(info["manifest_sha256"]) == 64 and len(info["cells"]) == 8
    again = tmp_path / "dat2"
    assert run(["adapt", "--config", str(SMOKE), "--checkpoint", str(smoke_source), "--out", str(again)]) == 0
    assert (again / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_source_run_keeps_checkpoint_and_report_gain(tmp_path, smoke_source, capsys):
    out = tmp_path / "src"
    assert run(["adapt", "--config", str(SMOKE), "--checkpoint", str(smoke_source), "--out", str(out),
                "--method", "source"]) == 0
    assert (out / "final.datc").read_bytes() == smoke_source.read_bytes()
    text, rows = commands.cmd_report([out])
    assert rows[0].gain == 0.0
    assert "Round 1" in text and "Gain" in text


def test_report_hand_fixture(tmp_path, caplog):
    lines = [commands.CSV_HEADER]
    vals = {(1, "fog"): 0.5, (1, "snow"): 0.7, (2, "fog"): 0.6, (2, "snow"): 0.9}
    for f, ((r, d), v) in enumerate(vals.items()):
        lines.append(f"x,dat,{r},{d},{2 * f},0.1,0.1,0,0,0,0,0,0")
        lines.append(f"x,dat,{r},{d},{2 * f + 1},{v},0.9,0,0,0,0,0,0")
    path = tmp_path / "m.csv"
    path.write_text("\n".join(lines) + "\n")
    text, rows = commands.cmd_report([path])
    assert rows[0].result.mean_miou == pytest.approx(np.mean(list(vals.values())))
    assert len(rows[0].result.cells) == 4 and rows[0].gain is None
    assert "Gain" not in text and "no source run" in caplog.text


def test_report_rejects_unknown_schema_and_mixed_protocols(tmp_path, smoke_source):
    bad = tmp_path / "bad.csv"
    bad.write_text("run_id,method,round\nx,dat,1\n")
    with pytest.raises(LoadError, match="schema"):
        commands.cmd_report([bad])
    assert run(["report", str(bad)]) == 4
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["adapt", "--config", str(SMOKE), "--checkpoint", str(smoke_source), "--out", str(a),
                "--method", "source"]) == 0
    assert run(["adapt", "--config", str(SMOKE), "--checkpoint", str(smoke_source), "--out", str(b),
                "--method", "source", "--seed", "1"]) == 0
    with pytest.raises(ContractError, match="protocol"):
        commands.cmd_report([a, b])


# ablate / sweep

def test_ablate_shares_stream_and_ex1_is_source(tmp_path, smoke_source):
    out = tmp_path / "abl"
    assert run(["ablate", "--config", str(SMOKE), "--checkpoint", str(smoke_source), "--out", str(out)]) == 0
    summary = json.loads((out / "ablate.json").read_text())
    runs = [summary["source"], *summary["table3"].values(), *summary["table4"].values()]
    assert len({r["manifest_sha256"] for r in runs}) == 1
    src = (out / "runs" / "source" / "metrics.csv").read_text().splitlines()[1:]
    ex1 = (out / "runs" / "ex_none" / "metrics.csv").read_text().splitlines()[1:]
    strip = lambda lines: [l.split(",", 2)[2].rsplit(",", 6)[0] for l in lines]
    assert strip(src) == strip(ex1)
    no_pau = commands.read_metrics_csv(out / "runs" / "uncertainty_no_pau" / "metrics.csv")
    first = {}
    for r in no_pau:
        key = (r["round"], r["domain"])
        first.setdefault(key, r["dsp_count"])
        assert r["dsp_count"] == first[key]
    assert (out / "table3.md").exists() and (out / "table4.md").exists()


def test_sweep_rows_and_zero_budget(tmp_path, smoke_source):
    cfg = config_mod.load(SMOKE)
    rows = commands.cmd_sweep(cfg, smoke_source, tmp_path / "sw", budgets=(0.0, 0.05))
    assert [b for b, _ in rows] == [0.0, 0.05]
    src, _ = commands.run_adapt(replace(cfg, adapt=replace(cfg.adapt, method="source")),
                                commands.load_source(cfg, smoke_source))
    assert rows[0][1] == src.mean_miou
    text = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert text[0] == "budget,mean_miou" and len(text) == 3
    with pytest.raises(ConfigError):
        commands.cmd_sweep(cfg, smoke_source, tmp_path / "sw2", budgets=(0.6,))


# exit codes

def test_exit_codes(tmp_path, smoke_source):
    conf = tmp_path / "bad.conf"
    conf.write_text("pau.nope = 1\n")
    assert run(["adapt", "--config", str(conf), "--checkpoint", str(smoke_source), "--out", str(tmp_path)]) == 2
    assert run(["adapt", "--config", str(SMOKE), "--checkpoint", str(tmp_path / "missing.datc"),
                "--out", str(tmp_path / "x")]) == 4
    assert run(["pretrain", "--config", str(tmp_path / "missing.conf")]) == 4
    wide = tmp_path / "wide.conf"
    wide.write_text(SMOKE.read_text() + "model.base_width = 8\n")
    assert run(["adapt", "--config", str(wide), "--checkpoint", str(smoke_source), "--out", str(tmp_path / "y")]) == 2
