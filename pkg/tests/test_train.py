import math

import numpy as np
import pytest

from rgbtfuse import cli, data, experiments, losses, metrics, netpbm
from rgbtfuse import train as tr
from rgbtfuse.errors import CheckpointError, ConfigError, DataError, TrainingDiverged
from rgbtfuse.model import ModelConfig, RGBTSegmenter
from rgbtfuse.tensor import Parameter, Tensor, no_grad

from conftest import toy_config


def tiny_samples(n=2, seed=0, k=3):
    return data.make_dataset(n, data.SceneConfig(seed=seed, height=32, width=32, num_classes=k))


def tiny_cfg(**kw):
    base = dict(max_steps=2, batch_size=2, base_width=4, num_classes=3)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def overfit_run():
    return experiments.overfit()


# -- configuration ------------------------------------------------------------------


def test_defaults():
    c = tr.TrainConfig()
    assert (c.lr_backbone, c.lr_fusion, c.lr_decoder, c.layer_decay) == (5e-5, 2e-4, 3e-4, 0.9)
    assert (c.beta1, c.beta2, c.adam_eps, c.weight_decay) == (0.9, 0.999, 1e-8, 0.05)
    assert (c.ema_decay, c.flip_prob, c.min_lr_factor) == (0.999, 0.5, 0.01)
    assert c.restart_period == 2 and tr.TrainConfig(epochs=3).restart_period == 1


def test_parse_config_round_trip():
    cfg = tr.parse_config("epochs = 3  # short\nema=false\nfusion=freq,freq,freq,freq\nmax_steps=None\n"
                          "lr_scale=2.5\n")
    assert cfg.epochs == 3 and cfg.ema is False and cfg.model.fusion == ("freq",) * 4 and cfg.lr_scale == 2.5
    text = "\n".join(f"{k}={v}" for k, v in tr.format_config(cfg).items())
    assert tr.parse_config(text) == cfg


@pytest.mark.parametrize("text", ["bogus=1", "epochs", "epochs=abc", "ema=maybe", "epochs=None", "epochs=0"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        tr.parse_config(text)


# -- learning-rate groups ----------------------------------------------------------------


def test_layer_decay_values():
    lrs = tr.param_lrs(RGBTSegmenter(toy_config()), tr.TrainConfig())
    assert lrs["rgb_encoder.stages.3.down.weight"] == 5e-5
    assert math.isclose(lrs["ir_encoder.stages.2.down.weight"], 4.5e-5, rel_tol=1e-15)
    assert math.isclose(lrs["rgb_encoder.stages.0.down.weight"], 5e-5 * 0.9 ** 3, rel_tol=1e-15)
    assert lrs["fusions.0.gate.weight"] == 2e-4 and lrs["decoder.head.weight"] == 3e-4


@pytest.mark.parametrize("variant", ["full", "all_freq", "fpn", "rgb_only"])
def test_group_assignment_total(variant):
    model = RGBTSegmenter(toy_config().variant(variant))
    groups = [tr.param_group(n)[0] for n, _ in model.named_parameters()]
    assert set(groups) == set(tr.GROUPS)
    assert len(tr.param_lrs(model, tr.TrainConfig())) == len(model.parameters())
    with pytest.raises(ConfigError):
        tr.param_group("head.weight")


def test_weight_decay_exemptions():
    model = RGBTSegmenter(toy_config())
    opt = tr.AdamW(list(model.named_parameters()), tr.param_lrs(model, tr.TrainConfig()))
    wd = dict(zip(opt.names, opt.wd))
    assert wd["fusions.2.gamma"] == 0 and wd["decoder.head.bias"] == 0 and wd["decoder.agg1_bn.weight"] == 0
    assert wd["decoder.head.weight"] == 0.05


# -- optimiser, schedule, EMA --------------------------------------------------------------


def test_adamw_matches_manual_update():
    rng = np.random.default_rng(0)
    w = Parameter(rng.standard_normal((3, 2)))
    b = Parameter(rng.standard_normal(3))
    w0, b0 = w.data.copy(), b.data.copy()
    opt = tr.AdamW([("w", w), ("b", b)], {"w": 0.1, "b": 0.2}, weight_decay=0.05)
    m_w = v_w = 0.0
    want_w, want_b = w0.copy(), b0.copy()
    m_b = v_b = 0.0
    for t in (1, 2, 3):
        gw, gb = rng.standard_normal((3, 2)), rng.standard_normal(3)
        w.grad, b.grad = gw, gb
        opt.step(0.5)
        m_w = 0.9 * m_w + 0.1 * gw
        v_w = 0.999 * v_w + 0.001 * gw ** 2
        want_w = want_w * (1 - 0.05 * 0.05) - 0.05 * (m_w / (1 - 0.9 ** t)) / (np.sqrt(v_w / (1 - 0.999 ** t)) + 1e-8)
        m_b = 0.9 * m_b + 0.1 * gb
        v_b = 0.999 * v_b + 0.001 * gb ** 2
        want_b = want_b - 0.1 * (m_b / (1 - 0.9 ** t)) / (np.sqrt(v_b / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(w.data, want_w, rtol=1e-13)
    np.testing.assert_allclose(b.data, want_b, rtol=1e-13)
    m, v = opt.moment_state()
    opt2 = tr.AdamW([("w", w), ("b", b)], {"w": 0.1, "b": 0.2})
    opt2.load_moments(m, v, 3)
    assert opt2.step_count == 3 and np.array_equal(opt2.m[0], opt.m[0])


def test_cosine_restart_schedule():
    f = lambda s: tr.cosine_restart_factor(s, 10, 0.01)
    assert f(0) == 1.0 and f(10) == 1.0 and f(20) == 1.0
    assert math.isclose(f(5), 0.505, rel_tol=1e-14)
    vals = [f(s) for s in range(10)]
    assert all(a > b for a, b in zip(vals, vals[1:])) and min(vals) > 0.01


def test_ema_one_step_definition():
    model = RGBTSegmenter(toy_config())
    init = model.state_dict()
    ema = tr.EMA(model, 0.999)
    for p in model.parameters():
        p.data = p.data + np.float32(1.0)
    model.decoder.agg1_bn.running_mean[:] = 3.0
    ema.update(model)
    name = "decoder.head.weight"
    want = (0.999 * init[name] + 0.001 * model.state_dict()[name]).astype(np.float32)
    np.testing.assert_array_equal(ema.state_dict()[name], want)
    np.testing.assert_array_equal(ema.state_dict()["decoder.agg1_bn.running_mean"], 3.0)


def test_ema_decay_zero_tracks_weights():
    model = RGBTSegmenter(toy_config())
    ema = tr.EMA(model, 0.0)
    for p in model.parameters():
        p.data = p.data * np.float32(1.5) + np.float32(0.25)
    ema.update(model)
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(ema.state_dict()[k], v)


# -- training loop ---------------------------------------------------------------------------


def test_train_history_and_log():
    lines = []
    res = tr.train(tiny_cfg(max_steps=3), tiny_samples(4), lines.append)
    assert res.steps == 3 and [h["step"] for h in res.history] == [2, 3]
    assert {"loss", "ce", "dice", "lovasz", "ohem", "boundary", "focal", "aux", "deep4", "miou",
            "pixel_acc"} <= set(res.history[0])
    assert lines[0].startswith("epoch=1 step=2 loss=")
    assert not res.model.training


def test_train_rejects_bad_data():
    with pytest.raises(DataError):
        tr.train(tiny_cfg(), [])
    s = tiny_samples(1)[0]
    with pytest.raises(DataError):
        tr.train(tiny_cfg(), [s._replace(labels=s.labels + 7)])


def test_single_position_batch_rejected():
    with pytest.raises(ConfigError, match="stride-32"):
        tr.train(tiny_cfg(batch_size=1), tiny_samples(2))


def test_divergence_reports_epoch_and_step():
    model = RGBTSegmenter(tiny_cfg().model)
    model.decoder.head.bias.data[0] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        tr.train(tiny_cfg(), tiny_samples(2), model=model)
    assert exc.value.epoch == 1 and exc.value.step == 1
    assert "epoch=1 step=1" in str(exc.value)


def test_no_deepsup_total_is_main():
    res = tr.train(tiny_cfg(deep_supervision=False), tiny_samples(2))
    h = res.history[-1]
    assert "aux" not in h and "deep1" not in h
    assert math.isclose(h["loss"], h["main"], rel_tol=1e-15)


def test_fpn_total_is_main():
    model = RGBTSegmenter(toy_config().variant("fpn")).train()
    s = tiny_samples(2)
    rgb, ir, lab = tr.batch_arrays(s, [0, 1])
    out = model(Tensor(rgb), Tensor(ir))
    assert out.deep == () and out.aux is None
    _, b = losses.composite_loss(out.logits, lab, deep_supervision=False)
    assert b.total == b.main


def test_batch_flip_mirrors_all_three():
    s = tiny_samples(2)
    rgb, ir, lab = tr.batch_arrays(s, [0, 1], [True, False])
    np.testing.assert_array_equal(rgb[0], s[0].rgb[0][..., ::-1])
    np.testing.assert_array_equal(ir[0], s[0].thermal[0][..., ::-1])
    np.testing.assert_array_equal(lab[0], s[0].labels[..., ::-1])
    np.testing.assert_array_equal(lab[1], s[1].labels)


# -- evaluation, inference, ablation --------------------------------------------------------


@pytest.mark.slow
def test_overfit_evaluate_and_ema(overfit_run):
    model, samples = overfit_run["result"].model, overfit_run["samples"]
    rep = tr.evaluate(model, samples, tta=True)
    assert rep["miou"] > 0.9 and "tta_miou" in rep
    cm = tr.confusion(model, samples)
    direct = metrics.ConfusionMatrix(5)
    with no_grad():
        for s in samples:
            direct.accumulate(model.predict(Tensor(s.rgb), Tensor(s.thermal)).data.argmax(axis=1)[0], s.labels)
    np.testing.assert_array_equal(cm.counts, direct.counts)
    shadow = tr.ema_model(overfit_run["result"], overfit_run["result"].ema)
    assert any(not np.array_equal(a, b) for a, b in
               zip(shadow.state_dict().values(), model.state_dict().values()))


@pytest.mark.slow
def test_overfit_infer_reproduces_labels(overfit_run, tmp_path):
    model, s = overfit_run["result"].model, overfit_run["samples"][0]
    netpbm.write_raw(tmp_path / "rgb.ppm", netpbm.to_uint8(s.rgb))
    netpbm.write_raw(tmp_path / "ir.pgm", netpbm.to_uint8(s.thermal))
    labels, color = tr.infer(model, tmp_path / "rgb.ppm", tmp_path / "ir.pgm", tmp_path / "out.pgm")
    back = netpbm.read_labels(tmp_path / "out.pgm")
    assert back.shape == s.labels.shape
    np.testing.assert_array_equal(back, labels)
    assert (back == s.labels).mean() >= 0.95
    assert color.name == "out_color.ppm"
    np.testing.assert_array_equal(netpbm.read_raw(color), tr.palette(5)[labels])


def test_infer_misaligned(tmp_path):
    netpbm.write_image(tmp_path / "rgb.ppm", np.zeros((3, 32, 32)))
    netpbm.write_image(tmp_path / "ir.pgm", np.zeros((1, 64, 32)))
    with pytest.raises(DataError):
        tr.infer(RGBTSegmenter(toy_config()), tmp_path / "rgb.ppm", tmp_path / "ir.pgm", tmp_path / "o.pgm")


def test_palette_deterministic():
    a, b = tr.palette(7), tr.palette(7)
    np.testing.assert_array_equal(a, b)
    assert a[0].tolist() == [0, 0, 0] and len({tuple(c) for c in a}) == 7
    np.testing.assert_array_equal(tr.palette(3), a[:3])


def test_ablate_reports():
    base = ModelConfig(base_width=4, num_classes=3)
    rows = {v: tr.ablate(base, v) for v in tr.ABLATIONS}
    assert rows["all_freq"]["params"] > rows["full"]["params"] > rows["fpn"]["params"]
    assert rows["fpn"]["decoder_params"] < rows["no_deepsup"]["decoder_params"]
    assert rows["no_deepsup"]["deep_supervision"] == 0 and rows["full"]["delta"] == 0
    with pytest.raises(ConfigError):
        tr.ablate(base, "rgb_only")


# -- command line -----------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    d = tmp_path / "data"
    assert cli.main(["generate", "--out", str(d), "--split", "train", "--n", "2", "--size", "32",
                     "--num-classes", "3"]) == 0
    assert cli.main(["generate", "--out", str(d), "--split", "test", "--n", "2", "--size", "32",
                     "--num-classes", "3", "--seed", "1", "--night-fraction", "0.5"]) == 0
    cfg = tmp_path / "c.cfg"
    cfg.write_text("max_steps=2\nbase_width=4\nnum_classes=3\n")
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--data", str(d), "--out", str(run)]) == 0
    assert (run / "model.ckpt").exists() and (run / "train.log").read_text().startswith("epoch=1")
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", str(run / "model.ckpt"), "--data", str(d), "--tta", "--ema",
                     "--ignore-class", "0"]) == 0
    out = capsys.readouterr().out
    assert "mIoU (present)" in out and "tta_miou=" in out
    s = d / "test"
    assert cli.main(["infer", "--ckpt", str(run / "model.ckpt"), "--rgb", str(s / "00000_rgb.ppm"),
                     "--ir", str(s / "00000_ir.pgm"), "--out", str(tmp_path / "pred.pgm")]) == 0
    assert netpbm.read_labels(tmp_path / "pred.pgm").shape == (32, 32)
    assert cli.main(["ablate", "--variant", "fpn", "--base-width", "4"]) == 0
    assert "variant=fpn" in capsys.readouterr().out


def test_cli_errors_exit_2(tmp_path, capsys):
    assert cli.main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) == 2
    assert "CheckpointError" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["ablate", "--variant", "unet"])


def test_model_from_checkpoint_restores_config(tmp_path):
    cfg = tiny_cfg()
    res = tr.train(cfg, tiny_samples(2))
    tr.save_result(tmp_path / "m.ckpt", cfg, res)
    m = tr.model_from_checkpoint(tmp_path / "m.ckpt")
    assert m.cfg == cfg.model
    for a, b in zip(m.state_dict().values(), res.model.state_dict().values()):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        from rgbtfuse.checkpoint import load_checkpoint, restore_model
        restore_model(load_checkpoint(tmp_path / "m.ckpt"), RGBTSegmenter(toy_config(base_width=6)))
