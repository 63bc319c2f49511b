import json

import numpy as np
import pytest

from restuner.cli import main
from restuner.config import ConfigError, load_run_config, parse_sections

TOY_CONFIG = """
# toy run
[backbone]
dim = 16
depth = 2
heads = 2
patch = 4
image = 8
channels = 1
classes = 4
seed = 0

[tuner]
kind = res_attn
op = mha
blocks = all
rank = 2
heads = 2

[train]
optimizer = adamw
lr = 0.01
epochs = 6
batch = 16
seed = 0

[data]
size = 64
train_fraction = 0.75
seed = 0
signal = 3.0

[output]
dir = {out}
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TOY_CONFIG.format(out=tmp_path / "run"))
    return path


# -- config parsing -----------------------------------------------------


def test_parse_sections_basic():
    sections = parse_sections("[a]\nx = 1\n# comment\n[b]\ny = two\n")
    assert sections == [("a", {"x": "1"}), ("b", {"y": "two"})]


def test_parse_rejects_stray_key():
    with pytest.raises(ConfigError, match="outside any"):
        parse_sections("x = 1")


def test_parse_rejects_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_sections("[a]\nx = 1\nx = 2\n")


def test_unknown_key_is_hard_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[backbone]\ndim = 16\ndeepness = 2\n")
    with pytest.raises(ConfigError, match="deepness"):
        load_run_config(path)


def test_unknown_section_is_hard_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[backbone]\ndim = 16\n[extra]\nx = 1\n")
    with pytest.raises(ConfigError, match=r"\[extra\]"):
        load_run_config(path)


def test_tuner_blocks_expansion(config_path):
    run = load_run_config(config_path)
    assert [s.block_index for s in run.tuner_specs] == [0, 1]
    assert all(s.kind == "res_attn" and s.options == {"rank": 2, "heads": 2}
               for s in run.tuner_specs)


def test_missing_backbone_section(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[train]\nlr = 0.1\n")
    with pytest.raises(ConfigError, match="backbone"):
        load_run_config(path)


# -- commands -----------------------------------------------------------


def test_cmd_train_and_eval(config_path, tmp_path, capsys):
    assert main(["train", "--config", str(config_path)]) == 0
    out = tmp_path / "run"
    assert (out / "model.rtck").exists()
    assert (out / "metrics.jsonl").exists()
    capsys.readouterr()

    rc = main(["eval", "--checkpoint", str(out / "model.rtck"),
               "--data", str(out / "eval.rtds")])
    assert rc == 0
    printed = json.loads(capsys.readouterr().out.strip())
    records = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    last_eval = [r for r in records if r["split"] == "eval"][-1]
    assert printed["accuracy"] == last_eval["accuracy"]
    assert abs(printed["loss"] - last_eval["loss"]) < 1e-12


def test_cmd_eval_missing_file(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "no.rtck"),
                 "--data", str(tmp_path / "no.rtds")]) == 2


def test_cmd_train_malformed_config(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("[backbone]\ndim = 16\nbogus_key = 3\n")
    assert main(["train", "--config", str(path)]) == 2
    assert "bogus_key" in capsys.readouterr().err


def test_cmd_train_seed_override_changes_metrics(config_path, tmp_path, capsys):
    out1, out2, out3 = (tmp_path / n for n in ("o1", "o2", "o3"))
    main(["train", "--config", str(config_path), "--out", str(out1)])
    main(["train", "--config", str(config_path), "--out", str(out2)])
    main(["train", "--config", str(config_path), "--out", str(out3), "--seed", "1"])
    capsys.readouterr()

    def metrics_wo_time(p):
        recs = [json.loads(l) for l in (p / "metrics.jsonl").read_text().splitlines()]
        return [{k: v for k, v in r.items() if k != "elapsed_sec"} for r in recs]

    assert metrics_wo_time(out1) == metrics_wo_time(out2)
    assert metrics_wo_time(out1) != metrics_wo_time(out3)
    assert (out1 / "model.rtck").read_bytes() == (out2 / "model.rtck").read_bytes()


def test_cmd_count_params_toy(config_path, capsys):
    assert main(["count-params", "--config", str(config_path), "--json"]) == 0
    result = json.loads(capsys.readouterr().out.strip())
    # dim=16, r=2, h=2, no biases: per tuner 16*12 + 4*16 = 256
    assert result["total"] == 2 * 256
    assert result["analytic_total"] == result["total"]


def test_cmd_count_params_empty_tuners(tmp_path, capsys):
    path = tmp_path / "plain.cfg"
    path.write_text("[backbone]\ndim = 16\ndepth = 2\nheads = 2\npatch = 4\nimage = 8\n")
    assert main(["count-params", "--config", str(path), "--json"]) == 0
    result = json.loads(capsys.readouterr().out.strip())
    assert result["total"] == 0


def test_cmd_grad_check_pass_and_corrupt(config_path, capsys):
    assert main(["grad-check", "--config", str(config_path), "--tol", "1e-4"]) == 0
    out = capsys.readouterr().out
    assert "eps=1e-05" in out and "tol=0.0001" in out
    assert "RESULT: PASS" in out

    import restuner.tensor as T

    orig = T._gelu_grad
    try:
        assert main(["grad-check", "--config", str(config_path), "--corrupt-backward"]) == 1
    finally:
        T._gelu_grad = orig


def test_cmd_matrix_smoke(tmp_path, capsys):
    path = tmp_path / "m.cfg"
    path.write_text(
        "[backbone]\ndim = 8\ndepth = 1\nheads = 2\npatch = 4\nimage = 8\nclasses = 4\n"
        "[train]\nepochs = 2\nbatch = 16\nlr = 0.01\n"
        "[data]\nsize = 32\nsignal = 3.0\n"
        f"[output]\ndir = {tmp_path / 'mx'}\n"
    )
    assert main(["matrix", "--config", str(path)]) == 0
    payload = json.loads((tmp_path / "mx" / "matrix.json").read_text())
    assert len(payload["single"]) == 12
    assert len(payload["dual"]) == 16
    assert all(v["zero_init_identity"] for v in payload["single"].values())
