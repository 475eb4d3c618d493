import csv
import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from cobra_bfa import cli, pipeline
from cobra_bfa.container import load_model
from cobra_bfa.corpus import CorpusSpec, calibration_batch, entropy_rate, heldout_batch, sample_streams, transition_table
from cobra_bfa.errors import ConfigError, StageError
from cobra_bfa.fault_injector import FlipSet, apply_flips_destructive
from cobra_bfa.pipeline import RunConfig, evaluate, generate, run_attack, strip_timings
from cobra_bfa.sensitivity import SensitivityConfig
from cobra_bfa.ssm_model import ModelConfig
from cobra_bfa.training import TrainConfig, train


@pytest.fixture(scope="module")
def attack(victim, run_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("attack")
    report, reduced = run_attack(victim, run_cfg, out_dir=str(out))
    return report, reduced, out


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

def test_corpus_is_deterministic_and_valid():
    s = CorpusSpec()
    a, b = sample_streams(s, 8, 5), sample_streams(s, 8, 5)
    assert np.array_equal(a, b) and a.shape == (8, 33)
    assert a.min() >= 0 and a.max() < 32
    np.testing.assert_allclose(transition_table(s).sum(axis=-1), 1.0, rtol=1e-12)
    assert math.log(1) < entropy_rate(s) < math.log(2)


def test_heldout_disjoint_from_calibration():
    s = CorpusSpec()
    cal = {tuple(r) for r in calibration_batch(s).sequences}
    held = heldout_batch(s)
    assert held.shape[0] > 0
    assert not cal & {tuple(r) for r in held.sequences}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_run_config_roundtrip(tmp_path):
    cfg = RunConfig(storage_format="int4", gradient_free=True, graybox_last_k=2,
                    sensitivity=SensitivityConfig(alpha=0.3, visible_layers=["lm_head"]))
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    back = RunConfig.load(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.digest() == cfg.digest()
    assert RunConfig().digest() != cfg.digest()


def test_run_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig(storage_format="int2")
    with pytest.raises(ConfigError):
        RunConfig(model=ModelConfig(vocab_size=16))
    with pytest.raises(ConfigError):
        SensitivityConfig(alpha=1.5)


def test_effective_sensitivity_modes():
    cfg = RunConfig(gradient_free=True, graybox_last_k=2)
    sens = cfg.effective_sensitivity()
    assert sens.alpha == 0.0 and sens.visible_layers == 2
    assert cfg.sensitivity.alpha == 0.5


# ---------------------------------------------------------------------------
# generate / train
# ---------------------------------------------------------------------------

def test_generate_deterministic():
    assert generate(RunConfig()).checksum() == generate(RunConfig()).checksum()
    other = RunConfig(model=ModelConfig(seed=9))
    assert generate(other).checksum() != generate(RunConfig()).checksum()


def test_lr_zero_leaves_parameters_unchanged():
    m = generate(RunConfig())
    p, losses = train(m.decoded(), calibration_batch(CorpusSpec()), TrainConfig(steps=3, lr=0.0))
    for k, v in m.decoded().named_tensors().items():
        assert np.array_equal(v, p.named_tensors()[k])
    assert losses[0] == losses[-1]


def test_pinned_training_curve(trained, run_cfg):
    _, losses = trained
    assert run_cfg.train.steps <= 2000
    assert losses[-1] <= 1.5
    reach = next(i for i, l in enumerate(losses) if l <= 1.5)
    assert reach <= 2000
    for i in range(len(losses) - 100):
        assert losses[i + 100] <= losses[i]


def test_training_deterministic(run_cfg):
    cfg = RunConfig(train=TrainConfig(steps=20))
    a, la = pipeline.train_model(generate(cfg), cfg)
    b, lb = pipeline.train_model(generate(cfg), cfg)
    assert la == lb and a.checksum() == b.checksum()


# ---------------------------------------------------------------------------
# attack pipeline
# ---------------------------------------------------------------------------

def test_attack_artifacts(attack):
    report, reduced, out = attack
    for name in ("attack_report.json", "layer_sensitivity.csv", "optimization_trace.csv", "flipset.json",
                 "attacked_model.cobr"):
        assert (out / name).exists()
    assert not [p for p in os.listdir(out) if p.startswith(".")]
    doc = json.loads((out / "attack_report.json").read_text(encoding="utf-8"))
    assert doc == json.loads(pipeline.dump_report(report))
    assert FlipSet.from_json((out / "flipset.json").read_text()) == reduced
    rows = list(csv.reader((out / "optimization_trace.csv").open()))
    assert rows[0] == ["t", "subset_size", "loss"]
    rows = list(csv.reader((out / "layer_sensitivity.csv").open()))
    assert rows[0][:5] == ["layer_id", "type", "k", "loss", "efficiency"]


def test_report_arithmetic_and_integrity(attack, victim):
    report, reduced, _ = attack
    assert report["flip_count"] == len(reduced) == len(report["I_red"])
    total = sum(t.size * t.fmt.width for t in victim.tensors.values())
    assert report["total_bits"] == total
    assert report["flipped_bit_fraction"] == len(reduced) / total
    i_init = {(d["tensor"], d["index"], d["bit"]) for d in report["I_init"]}
    assert {(d["tensor"], d["index"], d["bit"]) for d in report["I_red"]} <= i_init
    ranked = {r["layer_id"] for r in report["layer_ranking"]}
    assert {t for t, _, _ in i_init} <= ranked
    assert report["config_digest"] == RunConfig.from_dict(report["config"]).digest()


def test_attacked_container_and_evaluation(attack, victim, run_cfg):
    report, reduced, out = attack
    attacked = load_model(out / "attacked_model.cobr")
    assert attacked.checksum() == apply_flips_destructive(victim.copy(), reduced).checksum()
    before = evaluate(victim, run_cfg.corpus)
    after = evaluate(attacked, run_cfg.corpus)
    assert after == evaluate(victim, run_cfg.corpus, reduced)
    assert evaluate(attacked, run_cfg.corpus) == after
    ppl_after = math.inf if after["perplexity"] == "inf" else after["perplexity"]
    assert ppl_after > before["perplexity"]
    assert report["baseline"] == before and report["post_attack"] == after


def test_saturated_metrics_serialize_as_strings(attack):
    report, _, _ = attack
    post = report["post_attack"]
    if post["loss_nonfinite"]:
        assert post["loss"] == "inf" and post["perplexity"] == "inf" and post["perplexity_nonfinite"]
    block = pipeline.metric_block(math.inf, 0.0)
    assert block["loss"] == "inf" and block["loss_nonfinite"] is True
    assert pipeline.json_number(math.nan) == "nan"


def test_attack_reproducible(victim, run_cfg, attack):
    report, _, _ = attack
    again, _ = run_attack(victim, run_cfg)
    assert pipeline.dump_report(strip_timings(again)) == pipeline.dump_report(strip_timings(report))


def test_gradient_free_never_calls_backward(victim, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("backward called in gradient-free mode")
    monkeypatch.setattr(pipeline, "backward", boom)
    report, _ = run_attack(victim, RunConfig(gradient_free=True))
    assert report["gradient_mode"] == "gradient_free" and report["alpha_used"] == 0.0


def test_graybox_restricts_locations(victim):
    report, _ = run_attack(victim, RunConfig(graybox_last_k=1))
    assert all(r["layer_id"].startswith("blocks.1.") for r in report["layer_ranking"])
    assert all(d["tensor"].startswith("blocks.1.") for d in report["I_init"] + report["I_red"])


def test_gradient_unavailable_falls_back(victim):
    broken = apply_flips_destructive(victim.copy(), [("blocks.0.A_log", 0, 14)])
    report, _ = run_attack(broken, RunConfig())
    assert report["gradient_mode"] == "fallback_alpha0" and report["alpha_used"] == 0.0


def test_stage_error_keeps_partial_artifacts(victim, monkeypatch, tmp_path):
    def fail(*a, **k):
        raise RuntimeError("injected")
    monkeypatch.setattr(pipeline, "reduce_subset", fail)
    with pytest.raises(StageError) as info:
        run_attack(victim, RunConfig(), out_dir=str(tmp_path))
    assert info.value.stage == "reduce"
    assert (tmp_path / "layer_sensitivity.csv").exists()
    assert not (tmp_path / "attack_report.json").exists()


def test_bit_override(victim):
    report, _ = run_attack(victim, RunConfig(attack_bit_override=15))
    assert report["attack_bit"] == 15
    assert all(d["bit"] == 15 for d in report["I_init"])


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    gen, tr, atk, rep, fl = (str(tmp_path / d) for d in ("gen", "tr", "atk", "rep", "fl"))
    assert cli.main(["generate", "--out", gen]) == 0
    out = capsys.readouterr().out
    assert "parameters 3152" in out and "bits 50432" in out
    assert cli.main(["train", "--model", os.path.join(gen, "model.cobr"), "--steps", "5", "--lr", "0.05",
                     "--out", tr]) == 0
    log_rows = (tmp_path / "tr" / "train_log.csv").read_text().splitlines()
    assert log_rows[0] == "step,loss" and len(log_rows) == 7
    model = os.path.join(tr, "model.cobr")
    assert cli.main(["attack", "--model", model, "--format", "int8", "--alpha", "0.25", "--rate", "0.2",
                     "--threshold", "8", "--epsilon", "0.5", "--nmax", "10", "--seed", "3", "--bit-pos", "7",
                     "--graybox-last", "1", "--out", atk]) == 0
    report = json.loads((tmp_path / "atk" / "attack_report.json").read_text())
    c = report["config"]
    assert report["storage_format"] == "int8" and report["attack_bit"] == 7
    assert c["sensitivity"]["alpha"] == 0.25 and c["sensitivity"]["rate_r"] == 0.2
    assert c["sensitivity"]["loss_threshold"] == 8 and c["reduction"]["epsilon"] == 0.5
    assert c["reduction"]["max_iterations"] == 10 and c["reduction"]["rng_seed"] == 3
    assert c["graybox_last_k"] == 1
    capsys.readouterr()
    assert cli.main(["evaluate", "--model", model, "--format", "int8",
                     "--flips", os.path.join(atk, "flipset.json")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics == report["post_attack"]
    assert cli.main(["flip", "--model", model, "--format", "int8", "--flips", os.path.join(atk, "flipset.json"),
                     "--out", fl]) == 0
    assert load_model(os.path.join(fl, "attacked_model.cobr")).checksum() == \
        load_model(os.path.join(atk, "attacked_model.cobr")).checksum()
    assert cli.main(["report", "--report", os.path.join(atk, "attack_report.json"), "--out", rep]) == 0
    assert (tmp_path / "rep" / "layer_sensitivity.csv").read_text().splitlines()[0].startswith("layer_id,type,k")


def test_cli_gradient_free_flag(tmp_path, victim):
    from cobra_bfa.container import save_model
    path = tmp_path / "v.cobr"
    save_model(victim, path)
    assert cli.main(["attack", "--model", str(path), "--gradient-free", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "attack_report.json").read_text())
    assert report["config"]["gradient_free"] and report["alpha_used"] == 0.0


def test_cli_config_file(tmp_path, capsys):
    cfg = RunConfig(model=ModelConfig(seed=5))
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert cli.main(["generate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 0
    assert load_model(tmp_path / "model.cobr").checksum() == generate(cfg).checksum()


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["evaluate", "--model", str(tmp_path / "missing.cobr")]) == 1
    (tmp_path / "junk.cobr").write_bytes(b"not a container")
    assert cli.main(["evaluate", "--model", str(tmp_path / "junk.cobr")]) == 1
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["attack", "--model", "x", "--format", "int2"])


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "cobra_bfa", "generate", "--format", "int4", "--out", str(tmp_path)],
                         capture_output=True, text=True, check=True).stdout
    assert "parameters 3152" in out and "bits 12608" in out
    assert load_model(tmp_path / "model.cobr").kind.value == "int4"


def test_numpy_backend_flag(tmp_path):
    code = "from cobra_bfa import kernels; print(kernels.backend())"
    env = dict(os.environ, COBRA_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True).stdout
    assert out.strip() == "numpy"
