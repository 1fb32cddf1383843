import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from splatmask.cli import ConfigError, RunConfig, main, read_ppm, to_ppm
from splatmask.renderer import render
from splatmask.scene import load_scene, synth_scene

DATA = Path(__file__).parent / "data"

SMALL = {
    "seed": 3,
    "scene": {"synth": {"n": 40, "layout": "head_like"}},
    "camera": {"width": 32, "height": 32},
    "attack": {"epsilon": 0.1, "t_max": 2, "k_viewpoints": 1},
    "eval": {"queries": 2, "grid": [2, 2],
             "protocol": {"identities": 2, "views": 3, "n_primitives": 40}},
}


def _config(tmp_path, extra=None, name="run.yaml"):
    raw = json.loads(json.dumps(SMALL))
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(raw.get(k), dict):
            raw[k].update(v)
        else:
            raw[k] = v
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def test_ppm_round_trip_and_rounding(tmp_path):
    px = np.array([[[0.0, 0.5, 1.0], [1.5 / 255, 2.49 / 255, -1.0]]])
    data = to_ppm(px)
    assert data.startswith(b"P6\n2 1\n255\n")
    (tmp_path / "x.ppm").write_bytes(data)
    assert read_ppm(tmp_path / "x.ppm").tolist() == [[[0, 128, 255], [2, 2, 0]]]


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("colour: 1\n")
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.load(str(bad))
    bad.write_text("seed: [\n")
    with pytest.raises(ConfigError, match="malformed"):
        RunConfig.load(str(bad))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["synth", "--config", str(tmp_path / "missing.yaml")]) == 2
    missing_scene = _config(tmp_path, {"scene": {"file": "nope.json"}})
    assert main(["render", "--config", missing_scene]) == 2


def test_config_hash_ignores_out_and_workers(tmp_path):
    a = RunConfig.load(_config(tmp_path), out="a")
    b = RunConfig.load(_config(tmp_path, {"attack": {"workers": 4}}, "b.yaml"), out="b")
    c = RunConfig.load(_config(tmp_path), out="a", seed=9)
    assert a.hash == b.hash != c.hash


def test_synth_and_render(tmp_path, capsys):
    cfg = _config(tmp_path)
    out = tmp_path / "o"
    assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "primitives=40" in text and "regions=eyes:" in text
    assert load_scene(out / "scene.json").equals(synth_scene(3, 40, "head_like"))
    assert main(["render", "--config", cfg, "--out", str(out)]) == 0
    img = read_ppm(out / "render.ppm")
    assert img.shape == (32, 32, 3)
    assert main(["render", "--config", cfg, "--out", str(out), "--grid", "2x3"]) == 0
    assert len(list(out.glob("render_r*_c*.ppm"))) == 6
    assert main(["render", "--config", cfg, "--out", str(out), "--grid", "0x3"]) == 2
    assert main(["render", "--config", cfg, "--out", str(out), "--view", "nonsense"]) == 2


def test_render_golden(tmp_path):
    cfg = _config(tmp_path)
    assert main(["render", "--config", cfg, "--out", str(tmp_path), "--view", "0.1,-0.2"]) == 0
    assert (tmp_path / "render.ppm").read_bytes() == (DATA / "golden_render.ppm").read_bytes()


def test_render_ppm_matches_renderer(tmp_path):
    cfg = _config(tmp_path)
    main(["render", "--config", cfg, "--out", str(tmp_path)])
    rc = RunConfig.load(cfg)
    img, _ = render(rc.scene(), rc.base_view())
    assert np.array_equal(read_ppm(tmp_path / "render.ppm"), np.floor(img.pixels * 255 + 0.5))


def test_mask_then_eval(tmp_path):
    cfg = _config(tmp_path, {"attack": {"epsilon": [0.05, 0.1]}, "seed": 0,
                             "scene": {"synth": {"n": 40, "seed": 0}}})
    out = tmp_path / "o"
    assert main(["mask", "--config", cfg, "--out", str(out)]) == 0
    for tag in ("0.05", "0.1"):
        assert (out / f"masked_eps{tag}.json").exists()
        recs = [json.loads(x) for x in (out / f"trace_eps{tag}.jsonl").read_text().splitlines()]
        assert [r["t"] for r in recs] == [1, 2]
        summary = json.loads((out / f"summary_eps{tag}.json").read_text())
        assert summary["iterations"] == 2 and summary["param_class"] == "dc_color"
    assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
    report = (out / "report.txt").read_text()
    assert "[unmasked]" in report and "[masked_eps0.1]" in report and "tau_eer=" in report
    assert (out / "grid_masked_eps0.05.csv").read_text().count("\n") == 5


def test_eval_rejects_foreign_scene(tmp_path):
    cfg = _config(tmp_path)  # seed 3: scene seed 3 is not 1000*3 + i
    assert main(["eval", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_mask_abort_exit_code(tmp_path, monkeypatch):
    import splatmask.attack as attack_mod

    def boom(*args, **kw):
        return float("nan"), np.zeros((40, 3)), 0.0

    monkeypatch.setattr(attack_mod, "eot_loss_and_grad", boom)
    assert main(["mask", "--config", _config(tmp_path), "--out", str(tmp_path)]) == 3
    assert (tmp_path / "trace.jsonl").read_text() == ""


def test_calibrate_toy_pairs(tmp_path):
    cfg = _config(tmp_path, {"calibrate": {"pairs": {"positives": [0.9, 0.8], "negatives": [0.1, 0.2]}}})
    assert main(["calibrate", "--config", cfg, "--out", str(tmp_path)]) == 0
    tau = json.loads((tmp_path / "tau.json").read_text())
    assert tau["eer"] == 0.0 and tau["positives"] == 2
    empty = _config(tmp_path, {"calibrate": {"pairs": {"positives": [0.9]}}}, "e.yaml")
    assert main(["calibrate", "--config", empty, "--out", str(tmp_path)]) == 2


def test_gradcheck_passes_and_detects_corruption(tmp_path, capsys):
    cfg = _config(tmp_path, {"gradcheck": {"n": 8, "size": 20}})
    assert main(["gradcheck", "--config", cfg, "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "gradcheck.json").read_text())["results"]
    assert {r["check"] for r in res} >= {"dc_color", "position", "chain_dc_color"}
    bad = _config(tmp_path, {"gradcheck": {"n": 8, "size": 20, "corrupt": "scale"}}, "bad.yaml")
    assert main(["gradcheck", "--config", bad, "--out", str(tmp_path)]) == 1
    assert "FAIL scale" in capsys.readouterr().out
