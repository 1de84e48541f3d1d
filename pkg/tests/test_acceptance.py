"""Acceptance criteria, one test per criterion at the stated tolerance.

Each test records a PASS/FAIL line (see the ``acceptance criteria`` section
of the terminal summary) and then asserts it.
"""
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from hresformer.attention import (GRAttention, LocalWindowAttention, MsaConfig, WindowSpec,
                                  gr_msa, l3d_msa, msa, tokens, window_partition,
                                  window_reverse)
from hresformer.backbone2d import Backbone2d, predict_volume_2d
from hresformer.checkpoint import from_bytes, load_checkpoint, to_bytes
from hresformer.complexity import analytic_flops, gr_qk_flops
from hresformer.config import ModelConfig, tiny_config
from hresformer.flops import FlopCounter
from hresformer.gradcheck import block_suite, tolerance
from hresformer.hlgm import GlobalMutualFusion, HLGMBlock, LocalMutualFusion, lmf
from hresformer.losses import ce_loss, dice_loss, dsc_metric, DICE_EPS
from hresformer.model import HResFormer, measure_flops
from hresformer.phantom import make_split, read_manifest, write_dataset
from hresformer.tensor import Tensor, conv2d, conv3d, default_dtype, interpolate, mul, reshape, tsum
from hresformer.train import evaluate, load_cases, load_config, parse_config, train

REPO = Path(__file__).resolve().parents[1]


def _t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def _randomise(module, rng, scale=0.5):
    for p in module.params().values():
        p.data = scale * rng.standard_normal(p.shape)


def _zero_conv(c):
    c.weight.data[:] = 0
    c.bias.data[:] = 0


# 1 -------------------------------------------------------------------------------------------
def test_criterion_1_gradient_suite(verdict):
    start = time.perf_counter()
    worst = {}
    for seed in (0, 1, 2):
        for block, err in block_suite(seed).items():
            worst[block] = max(err, worst.get(block, 0.0))
    elapsed = time.perf_counter() - start
    failing = [b for b, e in worst.items() if not e <= tolerance(b)]
    expected = {"conv_patch_embed", "gr_block", "l3d_sl3d_pair", "lmf", "gmf", "cpff",
                "hlgm_block", "ce_dice_loss", "end_to_end"}
    ok = not failing and set(worst) == expected and elapsed < 300
    top = max(worst, key=worst.get)
    assert verdict(1, ok, f"{len(worst)} blocks x 3 seeds, worst {top} {worst[top]:.2e}, "
                          f"failing {failing}, {elapsed:.0f}s"), worst


# 2 -------------------------------------------------------------------------------------------
def _degeneracies(rng):
    cfg = MsaConfig(4, 2)
    out = {}

    gr = GRAttention(cfg, 1, rng)
    _randomise(gr, rng)
    gr.reduce.set_identity()
    _zero_conv(gr.dw)
    f = rng.standard_normal((1, 4, 4, 4))
    flat = _t(f.reshape(1, 16, 4))
    out["gr r=1 == msa"] = np.array_equal(gr_msa(_t(f), gr).data,
                                          msa(flat, flat, gr.attn).data.reshape(f.shape))

    f3 = _t(rng.standard_normal((1, 4, 4, 4, 4)))
    plain = LocalWindowAttention(cfg, WindowSpec(2), rng)
    _randomise(plain, rng)
    shifted = LocalWindowAttention(cfg, WindowSpec(2, 1), rng)
    shifted.load_params({k: v.data for k, v in plain.params().items()})
    shifted.window = WindowSpec(2, 0)
    out["sl3d shift 0 == l3d"] = np.array_equal(shifted(f3).data, plain(f3).data)

    full = LocalWindowAttention(cfg, WindowSpec((2, 3, 4)), rng)
    _randomise(full, rng)
    _zero_conv(full.dw)
    g = rng.standard_normal((1, 2, 3, 4, 4))
    flat = _t(g.reshape(1, 24, 4))
    out["l3d full window == msa"] = np.array_equal(
        l3d_msa(_t(g), full).data, msa(flat, flat, full.attn).data.reshape(g.shape))

    region = LocalMutualFusion(cfg, (2, 3, 4), rng)
    _randomise(region, rng)
    q, kv = _t(rng.standard_normal((1, 2, 3, 4, 4))), _t(rng.standard_normal((1, 2, 3, 4, 4)))
    out["lmf full region == cross msa"] = np.array_equal(
        lmf(q, kv, region).data, reshape(msa(tokens(q), tokens(kv), region.attn), q.shape).data)

    blk = HLGMBlock(cfg, (1, 2, 2), 2, 2, rng)
    for p in blk.params().values():
        p.data = np.zeros_like(p.data)
    f_p, f_v = _t(rng.standard_normal((1, 2, 4, 4, 4))), _t(rng.standard_normal((1, 2, 4, 4, 4)))
    o_p, o_v = blk(f_p, f_v)
    out["zero hlgm block == identity"] = (np.array_equal(o_p.data, f_p.data)
                                          and np.array_equal(o_v.data, f_v.data))
    return out


def test_criterion_2_degeneracies(verdict):
    with default_dtype(np.float64):
        checks = _degeneracies(np.random.default_rng(2))
    bad = [k for k, v in checks.items() if not v]
    assert verdict(2, not bad, f"{len(checks)} bit-exact equalities, failing {bad}"), checks


# 3 -------------------------------------------------------------------------------------------
def _structural(rng):
    out = {}
    f = rng.standard_normal((2, 4, 6, 5, 3))
    trips = []
    for wd in ((2, 2, 2), (2, 4, 4), (4, 3, 5)):
        for shift in np.ndindex(*wd):
            win, meta = window_partition(Tensor(f), WindowSpec(wd, shift))
            trips.append(np.array_equal(window_reverse(win, meta).data, f))
    out[f"window roundtrip ({len(trips)} shifts)"] = all(trips)

    net = Backbone2d(tiny_config(num_classes=3), rng)
    x = _t(rng.standard_normal((1, 4, 16, 16, 1)), True)
    y = predict_volume_2d(net, x)[0]
    w = np.zeros(y.shape)
    w[:, 2] = 1.0
    tsum(mul(y, _t(w))).backward()
    per_slice = np.abs(x.grad[0]).reshape(4, -1).sum(-1)
    out["slice independence"] = per_slice[2] > 0 and np.all(per_slice[[0, 1, 3]] == 0)

    def support(layer):
        _randomise(layer, rng)
        q = _t(rng.standard_normal((1, 4, 4, 4, 4)))
        kv = _t(rng.standard_normal((1, 4, 4, 4, 4)), True)
        tsum(layer(q, kv)[:, 0, 0, 0]).backward()
        return np.abs(kv.grad[0]).sum(-1) > 0

    local = support(LocalMutualFusion(MsaConfig(4, 1), (2, 2, 2), rng))
    inside = np.zeros((4, 4, 4), bool)
    inside[:2, :2, :2] = True
    out["lmf region-confined"] = np.array_equal(local, inside)
    out["gmf global"] = bool(support(GlobalMutualFusion(MsaConfig(4, 1), 2, rng)).all())

    model = HResFormer(tiny_config(num_classes=3))
    pyr = model(rng.standard_normal((1, 4, 16, 16)))
    out["residual identity"] = all(
        np.array_equal(r.data, interpolate(pyr.p2d[0], r.shape[1:4], "linear").data)
        for r in pyr.p3d_res)
    return out


def test_criterion_3_structural_invariants(verdict):
    with default_dtype(np.float64):
        checks = _structural(np.random.default_rng(3))
    bad = [k for k, v in checks.items() if not v]
    assert verdict(3, not bad, f"{', '.join(checks)}; failing {bad}"), checks


# 4 -------------------------------------------------------------------------------------------
def test_criterion_4_complexity(verdict):
    cfg, shape = ModelConfig(), (1, 16, 64, 64)
    measured = {k: v for k, v in measure_flops(HResFormer(cfg), shape).entries.items() if v}
    expected = analytic_flops(cfg, shape)
    layer_ok = measured == expected
    rng = np.random.default_rng(4)
    qk = {}
    for r in (1, 2, 4):
        block = GRAttention(MsaConfig(16, 2), r, rng)
        with FlopCounter() as counter:
            block(Tensor(rng.standard_normal((1, 16, 16, 16)).astype(np.float32)))
        qk[r] = counter.get("attn", "qk")
    ratios_ok = (all(qk[r] == gr_qk_flops(1, 16, 16, 16, 2, r) for r in qk)
                 and qk[1] == 4 * qk[2] == 16 * qk[4])
    ok = layer_ok and ratios_ok
    assert verdict(4, ok, f"{len(expected)} per-layer entries match={layer_ok}, "
                          f"total {sum(measured.values())}; qk r=1,2,4: {qk[1]}, {qk[2]}, {qk[4]}")


# 5 -------------------------------------------------------------------------------------------
def _oracles(rng):
    errs = {}
    x = rng.standard_normal((1, 2, 6, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = conv2d(_t(x), _t(w), _t(b), stride=(2, 1), padding=1).data
    errs["conv2d"] = np.abs(got - oracles.conv_direct(x, w, b, (2, 1), 1, 1)).max()
    x = rng.standard_normal((1, 4, 8, 8, 8))
    w = rng.standard_normal((4, 2, 3, 3, 3))
    got = conv3d(_t(x), _t(w), None, stride=2, padding=1, groups=2).data
    errs["conv3d"] = np.abs(got - oracles.conv_direct(x, w, None, 2, 1, 2)).max()

    logits = 3 * rng.standard_normal((4, 5, 3))
    labels = rng.integers(0, 3, (4, 5))
    errs["ce"] = abs(ce_loss(_t(logits), labels).item()
                     - oracles.ce_direct(logits.reshape(-1, 3), labels.reshape(-1)))

    pred = rng.integers(0, 3, (4, 6, 6))
    true = rng.integers(0, 3, (4, 6, 6))
    hard = _t(np.eye(3)[pred] * 1e4)
    terms = []
    for c in (1, 2):
        inter, n_p, n_g = oracles.overlap_counts(pred, true, c)
        terms.append((2 * inter + DICE_EPS) / (n_p + n_g + DICE_EPS))
    errs["dice_loss"] = abs(dice_loss(hard, true).item() - (1 - sum(terms) / 2))
    per, _ = dsc_metric(pred, true, 3)
    errs["dsc_metric"] = max(abs(p - oracles.dice_counts(pred, true, c)) for p, c in zip(per, (1, 2)))
    return errs


def test_criterion_5_oracles(verdict):
    with default_dtype(np.float64):
        errs = _oracles(np.random.default_rng(5))
    tol = {"conv2d": 1e-12, "conv3d": 1e-12, "ce": 1e-12, "dice_loss": 1e-15, "dsc_metric": 0.0}
    bad = [k for k in errs if not errs[k] <= tol[k]]
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert verdict(5, not bad, f"{detail}; failing {bad}"), errs


# 6 -------------------------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_6_desk_training(verdict, tmp_path):
    settings = load_config(REPO / "configs" / "desk.cfg")
    t, m = settings.train, settings.model
    split = make_split(settings.phantom, t.n_train, t.n_val, t.n_test, t.seed)
    manifest = write_dataset(settings.phantom, split, tmp_path / "data")
    start = time.perf_counter()
    model, _ = train(settings, manifest, tmp_path / "run")
    test_cases = load_cases(read_manifest(manifest)["test"])
    hybrid = evaluate(model, test_cases, m.num_classes)[-1][-1]
    two_d = evaluate(model, test_cases, m.num_classes, two_d=True)[-1][-1]
    elapsed = time.perf_counter() - start
    shape_ok = (m.channels2d == (16, 32, 64, 128) and settings.phantom.shape == (16, 64, 64)
                and m.num_classes == 3 and (t.n_train, t.n_val, t.n_test) == (20, 5, 5)
                and t.epochs <= 100)
    ok = shape_ok and hybrid >= 0.90 and hybrid > two_d and elapsed <= 1800
    assert verdict(6, ok, f"{t.epochs} epochs, test mean DSC hybrid {hybrid:.4f} vs 2D {two_d:.4f}, "
                          f"{elapsed:.0f}s"), (hybrid, two_d, elapsed)


# 7 -------------------------------------------------------------------------------------------
_TINY = """
epochs = 3
n_train = 2
n_val = 1
n_test = 1
volume_shape = 4, 16, 16
semi_axes_min = 1.0, 2.0, 2.0
semi_axes_max = 1.5, 4.0, 4.0
channels2d = 4, 4, 8, 8
ratios2d = 2, 2, 1, 1
heads2d = 1, 1, 2, 2
channels3d = 4, 4, 8, 8
heads3d = 1, 1, 2, 2
depths3d = 2, 0, 0, 0
window3d = 2, 2, 2
hlgm_dim = 4
hlgm_heads = 1
hlgm_region = 1, 2, 2
"""


def test_criterion_7_reproducibility(verdict, tmp_path):
    s = parse_config(_TINY)
    split = make_split(s.phantom, s.train.n_train, s.train.n_val, s.train.n_test, s.train.seed)
    manifest = write_dataset(s.phantom, split, tmp_path / "data")
    for run in ("a", "b"):
        train(s, manifest, tmp_path / run)
    files = ("metrics.csv", "last.ckpt", "best.ckpt")
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    raw = (tmp_path / "a" / "last.ckpt").read_bytes()
    ckpt = load_checkpoint(tmp_path / "a" / "last.ckpt")
    roundtrip = to_bytes(from_bytes(raw)) == raw and len(ckpt.momentum) == len(ckpt.params)

    train(s, manifest, tmp_path / "r", stop_after=2)
    train(s, manifest, tmp_path / "r", resume=tmp_path / "r" / "last.ckpt", stop_after=1)
    resumed = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "r" / f).read_bytes()
                  for f in ("metrics.csv", "last.ckpt"))
    ok = same and roundtrip and resumed
    assert verdict(7, ok, f"identical runs {same}, checkpoint round-trip {roundtrip}, "
                          f"resume == uninterrupted {resumed}")
