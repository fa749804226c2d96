import dataclasses
import json
import struct

import numpy as np
import pytest

from pamnet import engine as E
from pamnet.checkpoint import (
    CheckpointFormatError,
    CheckpointVersionError,
    decode,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from pamnet.cli import main
from pamnet.config import ExperimentConfig, default_cycle_length, dump_config, parse_config
from pamnet.data import SynthSpec, WindowBatch, load_csv
from pamnet.engine import ConfigError, DimensionError, Tensor
from pamnet.experiment import (
    ABLATIONS,
    MetricReport,
    apply_ablation,
    evaluate,
    mae,
    mse,
    prepare_data,
    read_predictions,
    run_experiment,
    run_seed,
)
from pamnet.model import ModelConfig, init_params, predict
from pamnet.training import LossConfig, OptimConfig, time_mae


def small_config(tmp_path, **kw) -> ExperimentConfig:
    cfg = ExperimentConfig(
        synth=SynthSpec(T=400, N=2, cycle_len=12, seed=1),
        model=ModelConfig(lookback=24, horizon=6, channels=2, embed_dim=8, cycle_len=12, dropout_rate=0.1),
        optim=OptimConfig(max_epochs=2, batch_size=32),
        output_dir=str(tmp_path / "run"),
    )
    return dataclasses.replace(cfg, **kw)


# ------------------------------------------------------------------ metrics


def test_metric_examples():
    assert mse([1, 3], [1, 3]) == 0 and mae([1, 3], [1, 3]) == 0
    assert mse([1, 3], [2, 1]) == 2.5
    assert mae([1, 3], [2, 1]) == 1.5
    Y = np.random.default_rng(0).normal(size=(4, 3))
    assert mse(Y, Y + 0.5) == pytest.approx(0.25)
    assert mae(Y, Y - 0.5) == pytest.approx(0.5)
    with pytest.raises(DimensionError):
        mse(np.zeros(3), np.zeros(4))


def test_metric_mae_agrees_with_training_loss():
    rng = np.random.default_rng(1)
    Y, Yhat = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    with E.precision(np.float64):
        assert mae(Y, Yhat) == time_mae(Tensor(Y), Tensor(Yhat)).item()


def test_evaluate_target_channel_and_oracle(monkeypatch):
    cfg = ModelConfig(lookback=8, horizon=3, channels=1, embed_dim=4, cycle_len=4)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(0)
    batch = WindowBatch(rng.normal(size=(5, 8, 1)), rng.normal(size=(5, 3, 1)), np.arange(7, 12))
    metrics, _ = evaluate(params, cfg, batch, ["x"], target_channel="x")
    assert metrics["target_mse"] == metrics["mse"] and metrics["target_mae"] == metrics["mae"]
    with pytest.raises(ConfigError):
        evaluate(params, cfg, batch, ["x"], target_channel="y")

    import pamnet.experiment as X

    # an oracle predictor: look the truth up by window end index
    truth = {int(t): y for t, y in zip(batch.tau_end, batch.Y)}
    monkeypatch.setattr(X, "predict", lambda p, c, Xs, taus: np.stack([truth[int(t)] for t in taus]))
    metrics, _ = evaluate(params, cfg, batch, ["x"], target_channel="x", batch_size=2)
    assert all(v == 0 for v in metrics.values())


def test_evaluate_is_batch_size_invariant():
    cfg = ModelConfig(lookback=8, horizon=3, channels=2, embed_dim=4, cycle_len=4)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(0)
    batch = WindowBatch(rng.normal(size=(9, 8, 2)), rng.normal(size=(9, 3, 2)), np.arange(7, 16))
    a, pa = evaluate(params, cfg, batch, batch_size=256)
    b, pb = evaluate(params, cfg, batch, batch_size=4)
    assert np.array_equal(pa, pb)


def test_metric_report_aggregate_matches_hand_computation():
    rows = [{"seed": s, "status": "ok", "mse": m, "mae": a} for s, m, a in [(0, 1.0, 0.5), (1, 2.0, 1.0), (2, 4.0, 3.0)]]
    agg = MetricReport(horizon=6, seeds=rows).aggregate()
    assert agg["mse_mean"] == pytest.approx(7 / 3)
    assert agg["mse_std"] == pytest.approx(np.sqrt(((1 - 7 / 3) ** 2 + (2 - 7 / 3) ** 2 + (4 - 7 / 3) ** 2) / 3))
    assert agg["mae_median"] == 1.0
    one = MetricReport(horizon=6, seeds=rows[:1]).aggregate()
    assert "mse_std" not in one and one["mse_mean"] == 1.0
    failed = MetricReport(horizon=6, seeds=rows[:2] + [{"seed": 9, "status": "failed", "error": "x"}]).aggregate()
    assert failed["n_ok"] == 2 and failed["n_failed"] == 1


# --------------------------------------------------------------- registry


def test_cycle_length_table():
    assert default_cycle_length("ETTh1") == 24
    assert default_cycle_length("PEMS03") == 288
    assert default_cycle_length("ECL") == 168
    assert default_cycle_length("Weather") == 144
    assert default_cycle_length("ETTm2") == 96
    with pytest.raises(KeyError, match="ETTh1"):
        default_cycle_length("M4")


def test_ablation_registry_contents():
    assert sorted(ABLATIONS) == sorted(
        ["full", "act_tanh", "act_sigmoid", "act_relu", "act_gelu", "no_EA", "no_EP", "sinusoidal", "no_modulator", "loss_mse", "loss_mae"]
    )
    with pytest.raises(ConfigError, match="registered"):
        apply_ablation(ModelConfig(), LossConfig(), "w/o everything")


def test_apply_ablation_semantics():
    m, l = ModelConfig(), LossConfig()
    assert apply_ablation(m, l, "loss_mse") == (m, LossConfig(mode="mse"))
    assert apply_ablation(m, l, "act_gelu")[0].activation == "gelu"
    assert not apply_ablation(m, l, "no_EP")[0].use_phase
    assert not apply_ablation(m, l, "no_EA")[0].use_amplitude
    assert apply_ablation(m, l, "sinusoidal")[0].sinusoidal_carriers
    assert not apply_ablation(m, l, "no_modulator")[0].use_modulator
    assert apply_ablation(m, l, "full") == (m, l)


def test_sinusoidal_carriers_stay_frozen_through_fit(tmp_path):
    cfg = small_config(tmp_path, ablation="sinusoidal")
    data = prepare_data(cfg)
    from pamnet.experiment import resolved_configs
    from pamnet.training import fit

    model_cfg, loss_cfg = resolved_configs(cfg, data.frame.N)
    params = init_params(model_cfg, 0)
    before = {k: v.copy() for k, v in params.snapshot().items()}
    fit(params, model_cfg, data.train, data.val, loss_cfg, cfg.optim, seed=0)
    for p in (params.carriers.phase, params.carriers.amplitude):
        assert p.frozen and not p.grad.any()
        assert np.array_equal(p.data, before[p.name])
    assert not np.array_equal(params.W.data, before["tokenizer.W"])


# -------------------------------------------------------------- checkpoint


@pytest.mark.parametrize("tag", ["full", "no_EP", "no_modulator", "sinusoidal"])
def test_checkpoint_round_trip(tmp_path, tag):
    cfg, _ = apply_ablation(ModelConfig(lookback=10, horizon=4, channels=3, embed_dim=6, cycle_len=5), LossConfig(), tag)
    params = init_params(cfg, 3)
    path = tmp_path / "a.pamn"
    save_checkpoint(path, params, cfg, {"seed": 3, "best_epoch": 7})
    loaded, cfg2, meta = load_checkpoint(path)
    assert cfg2 == cfg and meta == {"seed": 3, "best_epoch": 7}
    for k, v in params.snapshot().items():
        assert np.array_equal(loaded.snapshot()[k], v)
    save_checkpoint(tmp_path / "b.pamn", loaded, cfg2, meta)
    assert (tmp_path / "b.pamn").read_bytes() == path.read_bytes()
    X = np.random.default_rng(0).normal(size=(3, 10, 3))
    assert np.array_equal(predict(loaded, cfg2, X, [4, 5, 6]), predict(params, cfg, X, [4, 5, 6]))


def test_no_modulator_checkpoint_has_no_carriers():
    cfg = ModelConfig(lookback=10, horizon=4, channels=3, embed_dim=6, cycle_len=5, use_modulator=False)
    params, _, _ = decode(encode(init_params(cfg, 0), cfg))
    assert not any(name.startswith("carrier") for name in params.named())


def test_checkpoint_format_errors():
    cfg = ModelConfig(lookback=10, horizon=4, channels=3, embed_dim=6, cycle_len=5)
    blob = encode(init_params(cfg, 0), cfg)
    with pytest.raises(CheckpointFormatError, match="offset"):
        decode(blob[:-5])
    with pytest.raises(CheckpointFormatError, match="magic"):
        decode(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointVersionError):
        decode(blob[:8] + struct.pack("<I", 2) + blob[12:])
    with pytest.raises(CheckpointFormatError, match="trailing"):
        decode(blob + b"\0")
    # a config that disagrees with the stored tensor shapes
    other = ModelConfig(lookback=10, horizon=4, channels=3, embed_dim=7, cycle_len=5)
    with pytest.raises(CheckpointFormatError, match="shape"):
        decode(encode(init_params(cfg, 0), other))


# ------------------------------------------------------------------ config


def test_config_parse_and_aliases():
    cfg = parse_config(
        """
        # comment line
        model.d = 64
        model.L=48
        loss.alpha=0.5
        data.split=0.6,0.2,0.2
        corrupt.p=0.1
        corrupt.mode=noise
        seeds=1,2,3
        ablation=no_EA
        target_channel=OT
        data.dataset=ECL
        """
    )
    assert cfg.model.embed_dim == 64 and cfg.model.lookback == 48
    assert cfg.loss.alpha == 0.5 and cfg.split.fractions == (0.6, 0.2, 0.2)
    assert cfg.corrupt.p == 0.1 and cfg.corrupt.mode == "noise"
    assert cfg.seeds == [1, 2, 3] and cfg.ablation == "no_EA" and cfg.target_channel == "OT"
    assert cfg.model.cycle_len == 168
    assert parse_config("data.dataset=ECL\nmodel.c=12").model.cycle_len == 12


@pytest.mark.parametrize("line", ["model.bogus=1", "nonsense", "model.d=abc", "loss.alpha=2", "wat.x=1"])
def test_config_errors(line):
    with pytest.raises(ConfigError):
        parse_config(line)


def test_config_dump_round_trip(tmp_path):
    cfg = small_config(tmp_path, seeds=[4, 5], ablation="no_EP", target_channel="ch1")
    again = parse_config(dump_config(cfg))
    assert again == dataclasses.replace(cfg, synth=dataclasses.replace(cfg.synth, phases=None))
    assert dump_config(again) == dump_config(cfg)


# -------------------------------------------------------------- experiments


def test_run_experiment_artifacts_reparse(tmp_path):
    cfg = small_config(tmp_path, seeds=[0], target_channel="ch1")
    report = run_experiment(cfg)
    out = tmp_path / "run"
    metrics = json.loads((out / "metrics.json").read_text())
    row = metrics["seeds"][0]
    assert row["status"] == "ok" and row == report.seeds[0]
    Y, Yhat, names = read_predictions(out / "predictions_0.csv")
    assert names == ["ch0", "ch1"]
    assert mse(Y, Yhat) == pytest.approx(row["mse"], rel=1e-12)
    assert mae(Y, Yhat) == pytest.approx(row["mae"], rel=1e-12)
    assert mse(Y[..., 1], Yhat[..., 1]) == pytest.approx(row["target_mse"], rel=1e-12)
    params, mcfg, meta = load_checkpoint(out / "seed_0" / "checkpoint.pamn")
    assert meta["seed"] == 0 and meta["best_epoch"] == row["best_epoch"]
    data = prepare_data(cfg)
    assert np.array_equal(predict(params, mcfg, data.test.X, data.test.tau_end).astype(np.float64), Yhat)
    phase = np.loadtxt(out / "seed_0" / "carriers_phase.csv", delimiter=",")
    amp = np.loadtxt(out / "seed_0" / "carriers_amplitude.csv", delimiter=",")
    assert phase.shape == (12, 8) and amp.shape == (12, 2 * 8)
    assert np.allclose(phase, params.carriers.phase.data, rtol=1e-6, atol=0)
    lines = (out / "seed_0" / "train_report.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,best" and len(lines) == 1 + row["epochs"]


def test_repeated_seed_gives_identical_rows(tmp_path):
    report = run_experiment(small_config(tmp_path, seeds=[7, 7]), write=False)
    a, b = report.seeds
    assert a == b


def test_no_modulator_run_writes_no_carriers(tmp_path):
    cfg = small_config(tmp_path, ablation="no_modulator")
    run_experiment(cfg)
    sdir = tmp_path / "run" / "seed_0"
    assert not (sdir / "carriers_phase.csv").exists()
    params, _, _ = load_checkpoint(sdir / "checkpoint.pamn")
    assert params.carriers.phase is None and params.carriers.amplitude is None


def test_failed_seeds_are_recorded(tmp_path):
    report = run_experiment(small_config(tmp_path, seeds=[0, 1], target_channel="missing"), write=False)
    assert [r["status"] for r in report.seeds] == ["failed", "failed"]
    assert "missing" in report.seeds[0]["error"]


def test_corruption_changes_training_only(tmp_path):
    from pamnet.data import CorruptionSpec

    clean = run_seed(small_config(tmp_path), 0, write=False)
    dirty = run_seed(small_config(tmp_path, corrupt=CorruptionSpec(p=0.3)), 0, write=False)
    assert clean["mse"] != dirty["mse"]


# --------------------------------------------------------------------- cli


def write_cfg(tmp_path, text):
    p = tmp_path / "exp.cfg"
    p.write_text(text)
    return str(p)


BASE_CFG = """
synth.T=400
synth.N=2
synth.c=12
model.L=24
model.H=6
model.d=8
model.c=12
optim.epochs=2
"""


def test_cli_generate_and_train_and_eval(tmp_path, capsys):
    csv_path = tmp_path / "s.csv"
    assert main(["generate", "-o", str(csv_path), "--set", "synth.T=400", "--set", "synth.N=2", "--set", "synth.c=12"]) == 0
    assert load_csv(csv_path).values.shape == (400, 2)

    cfg = write_cfg(tmp_path, BASE_CFG + f"data.csv={csv_path}\nseeds=0\n")
    assert main(["train", cfg, "-o", str(tmp_path / "t")]) == 0
    row = json.loads((tmp_path / "t" / "metrics.json").read_text())["seeds"][0]

    out = tmp_path / "eval.json"
    assert main(["eval", str(tmp_path / "t" / "seed_0" / "checkpoint.pamn"), str(csv_path), "-o", str(out)]) == 0
    again = json.loads(out.read_text())["seeds"][0]
    assert again["mse"] == row["mse"] and again["mae"] == row["mae"]

    assert main(["eval", str(tmp_path / "t" / "seed_0" / "checkpoint.pamn"), str(csv_path), "--target-channel", "ch0"]) == 0
    assert "target_mse" in capsys.readouterr().out


def test_cli_train_all_seeds_failing_exits_nonzero(tmp_path):
    cfg = write_cfg(tmp_path, BASE_CFG + "target_channel=nope\nseeds=0,1\n")
    assert main(["train", cfg, "-o", str(tmp_path / "t")]) != 0


def test_cli_ablate(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE_CFG + "optim.epochs=1\n")
    assert main(["ablate", cfg, "--tags", "full,no_modulator", "-o", str(tmp_path / "a")]) == 0
    table = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert table[0].startswith("tag,mse_mean") and [l.split(",")[0] for l in table[1:]] == ["full", "no_modulator"]
    assert (tmp_path / "a" / "no_modulator" / "metrics.json").exists()
    assert main(["ablate", cfg, "--tags", "bogus", "-o", str(tmp_path / "b")]) == 2


def test_cli_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 3
    assert main(["gradcheck", "--loss", "mse", "--tol", "1e-30"]) == 1


def test_cli_defaults_reparse(capsys):
    assert main(["defaults"]) == 0
    assert parse_config(capsys.readouterr().out) == ExperimentConfig()
