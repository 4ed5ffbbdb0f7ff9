"""Acceptance criteria, one test per criterion.

Run ``pytest tests/test_acceptance.py`` for a PASS/FAIL line per criterion in
the terminal summary.
"""
import dataclasses
import time

import numpy as np
import pytest

from conftest import toy_config
from rgbtfuse import checkpoint, experiments, losses, metrics, netpbm, ops
from rgbtfuse.decoder import modulation
from rgbtfuse.freq_fusion import (FreqFusion, adaptive_frequency_gate, confidence, dual_branch_attention,
                                  freq_fuse, frequency_decompose)
from rgbtfuse.gradcheck import grad_check
from rgbtfuse.model import RGBTSegmenter
from rgbtfuse.sem_fusion import SemFusion, cross_modal_gate, gates, sem_fuse
from rgbtfuse.tensor import Tensor, backward, no_grad
from rgbtfuse.train import TrainConfig, train

criterion = pytest.mark.criterion


# -- 1 -----------------------------------------------------------------------

@criterion(1, "frequency bands reconstruct the projected thermal map bit-exactly")
def test_criterion_01_reconstruction_identity():
    rng = np.random.default_rng(1)
    for i in range(100):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 5)),
                 int(rng.integers(1, 24)), int(rng.integers(1, 24)))
        scale = 10.0 ** rng.uniform(-3, 3)
        tp = (rng.standard_normal(shape) * scale).astype(np.float32)
        low, high = frequency_decompose(Tensor(tp))
        recon = low.data + high.data
        assert np.array_equal(recon, tp.astype(recon.dtype)), f"tensor {i}"
        assert np.array_equal(recon.astype(np.float32), tp), f"tensor {i}"


# -- 2 -----------------------------------------------------------------------

def _weighted_sum(out, w):
    return ops.sum(out * w)


def _loss_terms():
    return {
        "ce": lambda x, lab, cw: losses.smoothed_weighted_ce(x, lab, cw),
        "dice": lambda x, lab, cw: losses.soft_dice(x, lab),
        "lovasz": lambda x, lab, cw: losses.lovasz_softmax(x, lab),
        "ohem": lambda x, lab, cw: losses.ohem_ce(x, lab, cw),
        "focal": lambda x, lab, cw: losses.focal_loss(x, lab),
        "boundary": lambda x, lab, cw: losses.boundary_loss(x, lab),
    }


MODEL_STEPS = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)
BIASES_BEFORE_BN = {"proj.conv.bias", "refine1.bias"}


def _randomize_zero_tails(model, rng):
    for m in model.modules():
        if isinstance(m, FreqFusion):
            m.refine2.weight.data = (0.1 * rng.standard_normal(m.refine2.weight.shape)).astype(
                m.refine2.weight.dtype)


@criterion(2, "gradient oracle: losses < 1e-3, fusion modules < 5e-3, toy model < 1e-2")
def test_criterion_02_gradient_oracle():
    t0 = time.perf_counter()
    worst = {"losses": 0.0, "fusion": 0.0, "model": 0.0}
    for seed in range(10):
        rng = np.random.default_rng(seed)
        lab = rng.integers(0, 3, (2, 8, 8))
        lab[0, 0, :2] = losses.IGNORE_INDEX
        cw = rng.uniform(0.5, 2.0, 3)
        for name, fn in _loss_terms().items():
            x = Tensor(rng.standard_normal((2, 3, 8, 8)), dtype=np.float64)
            err = grad_check(lambda t: fn(t, lab, cw), x, eps=1e-6, max_coords=48, seed=seed)
            assert err < 1e-3, (name, seed, err)
            worst["losses"] = max(worst["losses"], err)

        for cls in (FreqFusion, SemFusion):
            mod = cls(4, 4, np.random.default_rng(seed)).to(np.float64)
            _randomize_zero_tails(mod, rng)
            r = Tensor(rng.standard_normal((2, 4, 8, 8)), dtype=np.float64)
            t = Tensor(rng.standard_normal((2, 4, 8, 8)), dtype=np.float64)
            w = rng.standard_normal((2, 4, 8, 8))
            for training in (True, False):
                mod.train(training)
                targets = [(r, lambda v: _weighted_sum(mod(v, t), w)),
                           (t, lambda v: _weighted_sum(mod(r, v), w))]
                for name, p in mod.named_parameters():
                    if training and name in BIASES_BEFORE_BN:
                        # batch statistics cancel any constant shift: the true gradient is 0
                        mod.zero_grad()
                        backward(_weighted_sum(mod(r, t), w))
                        assert np.max(np.abs(p.grad)) < 1e-12
                        continue
                    targets.append((p, lambda _: _weighted_sum(mod(r, t), w)))
                for x, f in targets:
                    err = grad_check(f, x, eps=1e-5, max_coords=8, seed=seed)
                    assert err < 5e-3, (cls.__name__, training, seed, err)
                    worst["fusion"] = max(worst["fusion"], err)

        model = RGBTSegmenter(toy_config(seed=seed)).to(np.float64)
        _randomize_zero_tails(model, rng)
        model.eval()
        rgb = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)), dtype=np.float64)
        ir = Tensor(rng.uniform(0, 1, (1, 1, 32, 32)), dtype=np.float64)
        mlab = rng.integers(0, 3, (1, 32, 32))

        def loss_of(a, b):
            return losses.composite_loss(model.predict(a, b), mlab, deep_supervision=False)[0]

        params = list(model.named_parameters())
        picks = [params[i][1] for i in rng.choice(len(params), 4, replace=False)]
        # gradients deep in the network span 1e-12..1e-1: no single step suits them all
        targets = [(rgb, lambda v: loss_of(v, ir)), (ir, lambda v: loss_of(rgb, v))]
        targets += [(p, lambda _: loss_of(rgb, ir)) for p in picks]
        for x, f in targets:
            err = grad_check(f, x, eps=MODEL_STEPS, max_coords=6, seed=seed)
            assert err < 1e-2, ("model", seed, err)
            worst["model"] = max(worst["model"], err)
    elapsed = time.perf_counter() - t0
    print(f"worst relative errors {worst}, {elapsed:.1f}s")
    assert elapsed < 300


# -- 3 -----------------------------------------------------------------------

@criterion(3, "identity at init: zero refine tail and gamma = 0")
def test_criterion_03_identity_at_init():
    rng = np.random.default_rng(3)
    for c in (4, 8):
        ff = FreqFusion(c, c, np.random.default_rng(c))
        sf = SemFusion(c, c, np.random.default_rng(c))
        sf.gamma.data[:] = 0.0
        for _ in range(5):
            r = Tensor(rng.standard_normal((2, c, 16, 16)).astype(np.float32))
            t = Tensor(rng.standard_normal((2, c, 16, 16)).astype(np.float32))
            assert np.array_equal(freq_fuse(r, t, ff).data, r.data)
            gated = cross_modal_gate(r, sf.proj(t), sf)
            assert np.array_equal(sem_fuse(r, t, sf).data, gated.data)


# -- 4 -----------------------------------------------------------------------

def _open_unit(x):
    return bool(np.all(x > 0.0) and np.all(x < 1.0))


@criterion(4, "sigmoid gates in (0, 1); decoder modulation in (0.5, 1.0)")
def test_criterion_04_bound_invariants():
    rng = np.random.default_rng(4)
    ff = FreqFusion(8, 8, np.random.default_rng(0))
    sf = SemFusion(8, 8, np.random.default_rng(1))
    with no_grad():
        for _ in range(20):
            r = Tensor((rng.standard_normal((2, 8, 16, 16)) * rng.uniform(0.1, 3)).astype(np.float32))
            t = Tensor((rng.standard_normal((2, 8, 16, 16)) * rng.uniform(0.1, 3)).astype(np.float32))
            low, high = frequency_decompose(ff.proj(t))
            low, high = ops.cast(low, np.float32), ops.cast(high, np.float32)
            assert _open_unit(ff.attn_low.mask(low).data) and _open_unit(ff.attn_high.mask(high).data)
            a_low, a_high = dual_branch_attention(low, high, ff)
            pooled = ops.global_avg_pool(ops.abs(ops.concat([a_low, a_high], axis=1)))
            assert _open_unit(ops.sigmoid(ff.gate(pooled)).data)
            assert _open_unit(confidence(r, ff).data)
            g_rgb, g_ir = gates(r, sf.proj(t), sf)
            assert _open_unit(g_rgb.data) and _open_unit(g_ir.data)
            assert _open_unit(sf.sa.mask(r).data)
        c = rng.normal(0.0, 2.0, size=(1000, 8, 1, 1)).astype(np.float32)
        f = modulation(Tensor(c)).data
    assert np.all(f > 0.5) and np.all(f < 1.0)


# -- 5 -----------------------------------------------------------------------

@criterion(5, "loss composition with unit components totals 1.25 + lambda_aux * 2.0")
def test_criterion_05_loss_composition():
    ones = {k: 1.0 for k in losses.MAIN_TERMS}
    for lam in (0.4, 0.0, 0.25, 1.0, 0.7):
        w = losses.LossWeights(lambda_aux=lam)
        assert w.deep == (0.1, 0.2, 0.3, 0.4)
        b = losses.assemble(ones, w, aux=1.0, deep=(1.0, 1.0, 1.0, 1.0))
        assert b.main == 1.25
        assert b.total == 1.25 + lam * 2.0


# -- 6 -----------------------------------------------------------------------

def _jaccard_loss(fg: set, errors: set) -> float:
    # errors = mispredicted pixels; Jaccard loss of the resulting prediction
    if not fg and not errors:
        return 0.0
    return 1.0 - len(fg - errors) / len(fg | errors)


def _lovasz_choquet(m: np.ndarray, fg: set) -> float:
    """Lovasz extension as the Choquet integral  int_0^1 Delta({i : m_i >= t}) dt."""
    levels = sorted(set(m.tolist()) | {0.0})
    total = 0.0
    for lo, hi in zip(levels[:-1], levels[1:]):
        active = {i for i, v in enumerate(m) if v >= hi}
        total += (hi - lo) * _jaccard_loss(fg, active)
    return total


def _brute_force_lovasz(probs: np.ndarray, labels: np.ndarray) -> float:
    vals = []
    for c in range(probs.shape[0]):
        fg = {i for i, l in enumerate(labels) if l == c}
        if not fg:
            continue
        m = np.where(labels == c, 1.0 - probs[c], probs[c])
        vals.append(_lovasz_choquet(m, fg))
    return sum(vals) / len(vals)


@criterion(6, "Lovasz-softmax matches a brute-force Lovasz-extension evaluator")
def test_criterion_06_lovasz_oracle():
    rng = np.random.default_rng(6)
    for i in range(50):
        k = int(rng.integers(2, 4))
        n = int(rng.integers(1, 9))
        logits = rng.standard_normal((1, k, 1, n)) * rng.uniform(0.5, 3)
        labels = rng.integers(0, k, (1, 1, n))
        got = losses.lovasz_softmax(Tensor(logits, dtype=np.float64), labels).item()
        p = np.exp(logits[0, :, 0] - logits[0, :, 0].max(axis=0))
        p /= p.sum(axis=0)
        want = _brute_force_lovasz(p, labels[0, 0])
        assert abs(got - want) < 1e-6, (i, got, want)


# -- 7 -----------------------------------------------------------------------

@pytest.mark.slow
@criterion(7, "toy model overfits 4 scenes to >= 95% pixel accuracy within 300 steps")
def test_criterion_07_overfit():
    res = experiments.overfit(steps=300)
    print(f"pixel_acc={res['pixel_acc']:.4f} seconds={res['seconds']:.1f}")
    assert res["steps"] <= 300
    assert res["pixel_acc"] >= 0.95
    assert res["seconds"] < 600


# -- 8 -----------------------------------------------------------------------

@pytest.mark.slow
@criterion(8, "thermal input beats the RGB-only ablation at night by >= 10 mIoU points")
def test_criterion_08_night_advantage():
    res = experiments.night_advantage(n_train=200, steps=2000)
    print(" ".join(f"{k}={v:.4f}" for k, v in res.items()))
    assert res["advantage_points"] >= 10.0


# -- 9 -----------------------------------------------------------------------

@criterion(9, "parameter ordering all_freq > full > fpn at every width")
def test_criterion_09_parameter_ordering():
    rows = experiments.parameter_ordering(widths=(2, 4, 8, 12, 16, 24, 32, 64))
    assert all(r["ordered"] for r in rows), rows
    for c in (2, 8):
        base = toy_config(base_width=c)
        counts = {v: RGBTSegmenter(base.variant(v)).num_parameters() for v in ("all_freq", "full", "fpn")}
        assert counts["all_freq"] > counts["full"] > counts["fpn"]


# -- 10 ----------------------------------------------------------------------

@criterion(10, "fixed-seed training is bit-reproducible; checkpoint and image round-trips exact")
def test_criterion_10_determinism_and_round_trips(tmp_path):
    from rgbtfuse.data import SceneConfig, make_dataset
    samples = make_dataset(4, SceneConfig(seed=5, height=32, width=32, num_classes=3))
    cfg = TrainConfig(max_steps=6, base_width=4, num_classes=3, lr_scale=10.0, seed=3)
    a, b = train(cfg, samples), train(cfg, samples)
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert a.history == b.history
    assert all(np.array_equal(a.ema.shadow[k], b.ema.shadow[k]) for k in sa)

    path = tmp_path / "m.ckpt"
    checkpoint.save_checkpoint(path, a.model, 1, a.optimizer, a.ema)
    ck = checkpoint.load_checkpoint(path)
    fresh = checkpoint.restore_model(ck, RGBTSegmenter(cfg.model)).eval()
    x = np.random.default_rng(0).uniform(0, 1, (2, 4, 32, 32)).astype(np.float32)
    with no_grad():
        want = a.model.eval().predict(Tensor(x[:, :3]), Tensor(x[:, 3:])).data
        got = fresh.predict(Tensor(x[:, :3]), Tensor(x[:, 3:])).data
    assert np.array_equal(want, got)
    assert ck.has_section("ema")

    rng = np.random.default_rng(10)
    for shape in ((7, 5), (9, 4, 3)):
        img = rng.integers(0, 256, shape, dtype=np.uint8)
        netpbm.write_raw(tmp_path / "x.pnm", img)
        assert np.array_equal(netpbm.read_raw(tmp_path / "x.pnm"), img)
    f = rng.uniform(0, 1, (1, 3, 8, 6)).astype(np.float32)
    netpbm.write_image(tmp_path / "f.ppm", f)
    assert np.array_equal(netpbm.read_image(tmp_path / "f.ppm"),
                          (np.round(f.astype(np.float64) * 255) / 255).astype(np.float32))


# -- 11 ----------------------------------------------------------------------

@criterion(11, "flip TTA equals the flip-average oracle; symmetric inputs give symmetric predictions")
def test_criterion_11_tta_contract():
    rng = np.random.default_rng(11)
    model = RGBTSegmenter(toy_config(seed=7))
    _randomize_zero_tails(model, rng)
    model.eval()
    for _ in range(3):
        rgb = rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32)
        ir = rng.uniform(0, 1, (1, 1, 32, 32)).astype(np.float32)
        with no_grad():
            a = model.predict(Tensor(rgb), Tensor(ir)).data
            b = model.predict(Tensor(rgb[..., ::-1].copy()), Tensor(ir[..., ::-1].copy())).data[..., ::-1]
        oracle = 0.5 * (a + b)
        assert np.max(np.abs(metrics.tta_flip_infer(model, rgb, ir) - oracle)) < 1e-6

        sym_rgb = 0.5 * (rgb + rgb[..., ::-1])
        sym_ir = 0.5 * (ir + ir[..., ::-1])
        tta = metrics.tta_flip_infer(model, sym_rgb, sym_ir)
        assert np.array_equal(tta, tta[..., ::-1])
        pred = tta.argmax(axis=1)
        assert np.array_equal(pred, pred[..., ::-1])
