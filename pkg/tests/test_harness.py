import struct

import pytest
import torch

import crosslayer.harness.trainer as trainer_mod
from crosslayer.cli import main
from crosslayer.errors import (
    BadMagicError,
    ConfigError,
    CrossLayerError,
    LeakageError,
    NoDataError,
    NumericalError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from crosslayer.fusion import GateTrace
from crosslayer.harness.ablation import COMPONENT_VARIANTS, AblationReport, run_ablation, variant_config
from crosslayer.harness.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from crosslayer.harness.config import RunConfig
from crosslayer.harness.gates import export_gates, read_gates
from crosslayer.harness.trainer import build_model, evaluate, train
from crosslayer.synth import make_batch

from .conftest import randomize_


def tiny(**train) -> RunConfig:
    cfg = RunConfig()
    cfg.train.steps = 4
    cfg.train.batch_size = 8
    cfg.train.eval_every = 2
    cfg.train.eval_samples = 16
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg.validate()


@pytest.fixture(scope="module")
def trained():
    return train(tiny(), stream=None)


# -- config ---------------------------------------------------------------


def test_config_text_round_trip(tmp_path):
    cfg = RunConfig().apply_overrides(["fusion.mode=single_k", "fusion.single_k=3", "train.lr=0.01", "model.bottleneck_layer=none"])
    path = tmp_path / "run.cfg"
    path.write_text("# comment\n" + cfg.to_text())
    back = RunConfig.load(path)
    assert back == cfg
    assert back.fusion.single_k == 3 and back.model.bottleneck_layer is None and back.train.lr == 0.01


@pytest.mark.parametrize(
    "override",
    ["fusion.nope=1", "train.steps=abc", "nosection.x=1", "justakey", "train.optimizer=rmsprop", "fusion.mode=weird"],
)
def test_bad_overrides_rejected(override):
    with pytest.raises(ConfigError):
        RunConfig().apply_overrides([override]).validate()


# -- training -------------------------------------------------------------


def test_metric_line_format(trained):
    assert len(trained.lines) == 2
    for line in trained.lines:
        keys = [kv.split("=")[0] for kv in line.split()]
        assert keys == ["step", "loss", "acc_detail", "acc_semantic", "acc_comp"]


def test_same_seed_same_stream(trained):
    again = train(tiny(), stream=None)
    assert again.lines == trained.lines
    for k, v in trained.final.state.items():
        assert torch.equal(v, again.final.state[k])


def test_different_seed_different_stream(trained):
    assert train(tiny(seed=1), stream=None).lines != trained.lines


def test_zero_steps_is_initialisation():
    cfg = tiny(steps=0)
    res = train(cfg, stream=None)
    init = build_model(cfg).state_dict()
    assert res.checkpoint.step == 0 and len(res.lines) == 1
    for k, v in init.items():
        assert torch.equal(v, res.checkpoint.state[k])


def test_divergence_aborts_with_last_good(monkeypatch):
    real = trainer_mod.cross_entropy_loss
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        loss = real(*args)
        return loss * float("nan") if calls["n"] == 3 else loss

    monkeypatch.setattr(trainer_mod, "cross_entropy_loss", flaky)
    with pytest.raises(NumericalError) as info:
        train(tiny(), stream=None)
    assert "step 3" in str(info.value)
    assert info.value.checkpoint is not None and info.value.checkpoint.step == 2


def test_eval_on_training_seeds_is_leakage(trained):
    with pytest.raises(LeakageError):
        evaluate(trained.checkpoint, None, "detail", 16, 10)
    cfg = tiny()
    cfg.train.val_seed_start = 8
    with pytest.raises(LeakageError):
        train(cfg, stream=None)


@pytest.mark.parametrize("kind", ["semantic", "compositional"])
def test_untrained_model_is_at_chance(kind):
    cfg = tiny()
    res = evaluate(build_model(cfg), cfg, kind, 2048, cfg.train.test_seed_start)
    assert abs(res.accuracy - 0.125) <= 0.03


def test_memorising_model_scores_perfectly_on_its_seeds():
    cfg = tiny()
    cfg.fusion.mode = "none"
    model = build_model(cfg)
    seeds = range(16)
    batch = make_batch(seeds, ["semantic"] * 16, cfg.model.vocab)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=3e-3)
    for _ in range(150):
        logits = model(batch.patches, batch.text)
        loss = trainer_mod.cross_entropy_loss(logits[:, 16:], batch.targets, batch.answer_mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
    res = evaluate(model, cfg, "semantic", 16, 0, check_leakage=False)
    assert res.accuracy == 1.0


def test_eval_trace_count(trained):
    ckpt = trained.checkpoint
    res = evaluate(ckpt, None, "detail", 40, ckpt.config.train.test_seed_start, batch_size=16)
    plan = ckpt.build_model().plan
    assert len(res.trace) == len(plan.injection_layers) * len(plan.sampled_vision_layers) * 40
    assert sorted({r.batch_index for r in res.trace}) == list(range(40))


# -- checkpoints ----------------------------------------------------------


def test_checkpoint_round_trip_is_bitwise(trained, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained.final, path)
    back = load_checkpoint(path)
    assert back.step == trained.final.step and back.config == trained.final.config
    assert back.rng_state == trained.final.rng_state
    b = make_batch(range(5000, 5010), ["detail", "semantic"] * 5)
    with torch.no_grad():
        a = trained.final.build_model()(b.patches, b.text)
        c = back.build_model()(b.patches, b.text)
    assert torch.equal(a, c)
    start = trained.final.config.train.test_seed_start
    assert evaluate(back, None, "semantic", 64, start).accuracy == evaluate(trained.final, None, "semantic", 64, start).accuracy


def _saved(trained, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained.final, path)
    return path, path.read_bytes()


@pytest.mark.parametrize(
    "corrupt, error, code",
    [
        (lambda b: b"XLIK" + b[4:], BadMagicError, 5),
        (lambda b: b[: len(b) // 2], TruncatedCheckpointError, 6),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], VersionMismatchError, 7),
        (lambda b: b + b"\0", TruncatedCheckpointError, 6),
    ],
)
def test_corrupt_checkpoints_rejected(trained, tmp_path, corrupt, error, code):
    path, good = _saved(trained, tmp_path)
    bad = corrupt(good)
    path.write_bytes(bad)
    with pytest.raises(error) as info:
        load_checkpoint(path)
    assert info.value.exit_code == code
    assert path.read_bytes() == bad  # loading never rewrites the file


def test_error_codes_are_distinct():
    codes = [BadMagicError.exit_code, TruncatedCheckpointError.exit_code, VersionMismatchError.exit_code]
    assert len(set(codes)) == 3


def test_float64_checkpoint_narrows_with_warning(tmp_path):
    cfg = tiny(precision="float64")
    model = randomize_(build_model(cfg), scale=0.05)
    path = tmp_path / "wide.ckpt"
    save_checkpoint(Checkpoint.from_model(model, cfg), path)
    with pytest.warns(RuntimeWarning, match="narrowing"):
        narrow = load_checkpoint(path, precision="float32")
    assert all(v.dtype == torch.float32 for v in narrow.state.values() if v.is_floating_point())
    b = make_batch(range(7000, 7032), ["compositional"] * 32)
    with torch.no_grad():
        wide_logits = model(b.patches, b.text)
        narrow_logits = narrow.build_model()(b.patches, b.text)
    assert (wide_logits - narrow_logits.double()).abs().max() <= 1e-4


# -- gates ----------------------------------------------------------------


def test_gate_csv_round_trip(trained, tmp_path):
    ckpt = trained.checkpoint
    res = evaluate(ckpt, None, "compositional", 32, ckpt.config.train.test_seed_start)
    path = tmp_path / "gates.csv"
    n = export_gates(res.trace, path)
    rows = read_gates(path)
    means = res.trace.means()
    assert n == len(rows) == len(means)
    assert path.read_text().splitlines()[0] == "decoder_layer,vision_layer,weight"
    keys = [(r["decoder_layer"], r["vision_layer"]) for r in rows]
    assert keys == sorted(keys)
    for r in rows:
        assert abs(r["weight"] - means[(r["decoder_layer"], r["vision_layer"])]) <= 1e-6

    raw = tmp_path / "raw.csv"
    assert export_gates(res.trace, raw, "raw") == len(res.trace)
    assert raw.read_text().splitlines()[0] == "decoder_layer,vision_layer,batch,step,weight"


def test_closed_gates_export_zeros(tmp_path):
    trace = GateTrace()
    for dl in (4, 8):
        for vl in (4, 8):
            trace.record(dl, vl, torch.zeros(3))
    path = tmp_path / "zero.csv"
    export_gates(trace, path)
    assert [line.split(",")[-1] for line in path.read_text().splitlines()[1:]] == ["0.000000"] * 4


def test_empty_trace_is_no_data(tmp_path):
    with pytest.raises(NoDataError):
        export_gates(GateTrace(), tmp_path / "x.csv")
    with pytest.raises(ConfigError):
        trace = GateTrace()
        trace.record(1, 1, torch.ones(1))
        export_gates(trace, tmp_path / "x.csv", "median")


# -- ablation -------------------------------------------------------------


@pytest.fixture(scope="module")
def component_report():
    return run_ablation(tiny(steps=1, eval_every=1), "components", seeds=(0,), eval_samples=16, stream=None)


def test_components_sweep_has_six_rows(component_report):
    assert [r.name for r in component_report.rows] == list(COMPONENT_VARIANTS)
    assert len(component_report.rows) == 6
    assert "AMP+AGF" in component_report.format()


def test_parameter_ratios(component_report):
    ratio = {r.name: r.parameter_ratio for r in component_report.rows}
    assert ratio["baseline"] == pytest.approx(100.0, abs=1e-12)
    assert ratio["AMP+AGF"] > ratio["AGF-only"] > 100.0
    assert ratio["AMP-only"] > 100.0


def test_variant_configs_match_cells():
    base = tiny()
    amp_only = variant_config(base, COMPONENT_VARIANTS["AMP-only"])
    assert (amp_only.fusion.amp, amp_only.fusion.agf) == (True, False)
    model = build_model(amp_only)
    assert model.agf is None and model.amp is not None
    full = build_model(variant_config(base, COMPONENT_VARIANTS["FullProj+AGF"]))
    assert full.dedicated is not None and full.agf is not None


def test_incomplete_report_fails():
    with pytest.raises(CrossLayerError):
        AblationReport("components", [0], []).check_complete()


def test_density_sweep_rows():
    calls = []

    def fake_train(cfg):
        calls.append(cfg.fusion.density)
        return train(cfg.apply_overrides(["train.steps=0"]), stream=None)

    report = run_ablation(tiny(), "density", eval_samples=8, stream=None, train_fn=fake_train)
    assert [r.name for r in report.rows] == ["2/2", "4/4", "8/7", "12/14", "single-14"] == calls


# -- command line ---------------------------------------------------------


def test_cli_train_eval_export(tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    sets = ["--set", "train.steps=2", "--set", "train.eval_every=2", "--set", "train.eval_samples=8", "--set", "train.batch_size=4"]
    assert main(["train", *sets, "--out", str(ckpt)]) == 0
    assert "step=2 loss=" in capsys.readouterr().out
    assert main(["eval", str(ckpt), "--task", "detail", "--samples", "16", "--gates", str(tmp_path / "g_{task}.csv")]) == 0
    assert "task=detail accuracy=" in capsys.readouterr().out
    assert (tmp_path / "g_detail.csv").exists()
    assert main(["export-gates", str(ckpt), "--out", str(tmp_path / "g.csv"), "--samples", "8"]) == 0
    assert len(read_gates(tmp_path / "g.csv")) == 2 * 2  # default toy plan


def test_cli_exit_codes(tmp_path, trained):
    assert main(["train", "--set", "fusion.bogus=1"]) == ConfigError.exit_code
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(trained.final, ckpt)
    assert main(["eval", str(ckpt), "--seed-start", "0", "--samples", "8"]) == LeakageError.exit_code
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"nope")
    assert main(["eval", str(junk)]) == BadMagicError.exit_code
    none_cfg = variant_config(tiny(), COMPONENT_VARIANTS["baseline"])
    save_checkpoint(Checkpoint.from_model(build_model(none_cfg), none_cfg), tmp_path / "none.ckpt")
    assert main(["export-gates", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "g.csv")]) == NoDataError.exit_code


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--coords", "16", "--batch", "3"]) == 0
