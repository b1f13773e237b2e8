"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary
(see ``conftest.pytest_terminal_summary``).
"""

import time

import numpy as np
import pytest

import oracles
from conftest import distinct, kink_free, t32, t64
from focalfuse import ops
from focalfuse.architectures import ModelConfig, encoder_forward, focal_fuse_forward, init_params, model_forward
from focalfuse.cli import main
from focalfuse.data import VolumeSample, write_volume
from focalfuse.gradcheck import check_gradients
from focalfuse.metrics import average_surface_distance, dice_ce_loss, dice_score, hausdorff_distance
from focalfuse.ops import ConvSpec
from focalfuse.tensor import Tensor, add, channel_slice, mul, sub, sum_all
from focalfuse.training import TrainLog, cyclic_lr, load_checkpoint, save_checkpoint

RESULTS = []


def verdict(number, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    RESULTS.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------- 1

def _oracle_cases(rng):
    """Yield (op name, fast result, oracle result) for 20 shapes per op."""
    for _ in range(20):
        n, cin = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        sp = tuple(int(v) for v in rng.integers(1, 7, size=3))
        x = rng.uniform(-1, 1, (n, cin) + sp).astype(np.float32)

        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2)) if k == 3 else 0
        groups = int(rng.choice([g for g in (1, cin) if cin % g == 0]))
        xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
        if min(xp.shape[2:]) < k:
            xp = x = rng.uniform(-1, 1, (n, cin, 6, 6, 6)).astype(np.float32)
            pad = 0
        cout = groups * int(rng.integers(1, 3))
        fan = cin // groups * k ** 3
        w = (rng.uniform(-1, 1, (cout, cin // groups, k, k, k)) / np.sqrt(fan)).astype(np.float32)
        b = rng.uniform(-1, 1, cout).astype(np.float32)
        spec = ConvSpec.make(k, stride, pad, groups)
        yield "conv3d", ops.conv3d(Tensor(x), Tensor(w), Tensor(b), spec).data, \
            oracles.conv3d_loop(x, w, b, stride, pad, groups)

        k = int(rng.choice([2, 3]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2)) if k == 3 else 0
        op = int(rng.integers(0, stride))
        wt = (rng.uniform(-1, 1, (cin, int(rng.integers(1, 3)), k, k, k)) / np.sqrt(k ** 3)).astype(np.float32)
        bt = rng.uniform(-1, 1, wt.shape[1]).astype(np.float32)
        spec = ConvSpec.make(k, stride, pad, 1, op)
        yield "conv_transpose3d", ops.conv_transpose3d(Tensor(x), Tensor(wt), Tensor(bt), spec).data, \
            oracles.conv_transpose3d_loop(x, wt, bt, stride, pad, op)

        even = tuple(int(v) for v in rng.choice([2, 4, 6], size=3))
        xe = rng.uniform(-1, 1, (n, cin) + even).astype(np.float32)
        kind = "max" if rng.random() < 0.5 else "avg"
        yield f"pool3d[{kind}]", ops.pool3d(Tensor(xe), kind).data, oracles.pool3d_loop(xe, kind)

        wl = (rng.uniform(-1, 1, (cout, cin)) / np.sqrt(cin)).astype(np.float32)
        yield "linear", ops.linear(Tensor(x), Tensor(wl), Tensor(b)).data, oracles.linear_loop(x, wl, b)

        xi = x if np.prod(sp) >= 2 else rng.uniform(-1, 1, (n, cin, 2, 3, 1)).astype(np.float32)
        g = rng.uniform(0.5, 1.5, cin).astype(np.float32)
        be = rng.uniform(-1, 1, cin).astype(np.float32)
        yield "instance_norm", ops.instance_norm(Tensor(xi), Tensor(g), Tensor(be)).data, \
            oracles.instance_norm_loop(xi, g, be)

        yield "global_avg_pool", ops.global_avg_pool(Tensor(x)).data, oracles.global_avg_pool_loop(x)


def test_criterion_01_oracle_equivalence():
    start = time.perf_counter()
    worst = {}
    for name, got, ref in _oracle_cases(np.random.default_rng(2024)):
        assert got.dtype == np.float32 and got.shape == ref.shape, name
        key = name.split("[")[0]
        worst[key] = max(worst.get(key, 0.0), float(np.abs(got.astype(np.float64) - ref).max()))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-6 and elapsed < 30 and len(worst) == 6
    verdict(1, "primitive/oracle equivalence within 1e-6 (32-bit), 20 shapes per op", ok,
            f"max abs err {max(worst.values()):.2e}, {elapsed:.1f}s")
    assert ok, worst


# ---------------------------------------------------------------- 2

def _primitive_checks(rng):
    r = lambda shape: t64(rng.standard_normal(shape))
    proj = lambda out, w: sum_all(out * w)
    x = r((1, 2, 4, 4, 3))
    w = t64(rng.standard_normal((3, 2, 3, 3, 3)) / 5)
    b = r((3,))
    r0 = r((1, 3, 2, 2, 2))
    yield "conv3d", lambda: proj(ops.conv3d(x, w, b, ConvSpec.make(3, 2, 1)), r0), [x, w, b]
    wd = r((2, 1, 3, 3, 3))
    r1 = r((1, 2, 4, 4, 3))
    yield "conv3d[depthwise]", lambda: proj(ops.conv3d(x, wd, None, ConvSpec.make(3, 1, 1, 2)), r1), [x, wd]
    wt = r((2, 3, 3, 3, 3))
    r2 = r((1, 3, 8, 8, 6))
    yield "conv_transpose3d", lambda: proj(ops.conv_transpose3d(x, wt, b, ConvSpec.make(3, 2, 1, 1, 1)), r2), \
        [x, wt, b]
    xm = t64(distinct(rng, (1, 2, 4, 4, 2)))
    r3 = r((1, 2, 2, 2, 1))
    yield "pool3d[max]", lambda: proj(ops.pool3d(xm, "max"), r3), [xm]
    yield "pool3d[avg]", lambda: proj(ops.pool3d(xm, "avg"), r3), [xm]
    r4 = r((1, 2, 1, 1, 1))
    yield "global_avg_pool", lambda: proj(ops.global_avg_pool(x), r4), [x]
    r5 = r((1, 2, 7, 5, 3))
    yield "resize_trilinear", lambda: proj(ops.resize_trilinear(x, (7, 5, 3)), r5), [x]
    wl = r((3, 2))
    r6 = r((1, 3, 4, 4, 3))
    yield "linear", lambda: proj(ops.linear(x, wl, b), r6), [x, wl, b]
    g, be = r((2,)), r((2,))
    r7 = r((1, 2, 4, 4, 3))
    yield "instance_norm", lambda: proj(ops.instance_norm(x, g, be), r7), [x, g, be]
    xk = t64(kink_free(rng, (1, 2, 4, 4, 3)))
    yield "relu", lambda: proj(ops.relu(xk), r7), [xk]
    yield "gelu", lambda: proj(ops.gelu(x), r7), [x]
    yield "softmax_channel", lambda: proj(ops.softmax_channel(x), r7), [x]
    y = r((1, 2, 4, 4, 3))
    r8 = r((1, 4, 4, 4, 3))
    yield "concat_channels", lambda: proj(ops.concat_channels([x, y]), r8), [x, y]
    r9 = r((1, 1, 4, 4, 3))
    yield "channel_slice", lambda: proj(channel_slice(x, 1, 2), r9), [x]
    c = r((1, 2, 1, 1, 1))
    yield "add/sub/mul", lambda: proj(mul(sub(add(x, c), y), c), r7), [x, y, c]
    labels = rng.integers(0, 2, size=(1, 4, 4, 3))
    yield "dice_ce_loss", lambda: dice_ce_loss(x, labels), [x]


def test_criterion_02_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    errs = {name: check_gradients(fn, ts) for name, fn, ts in _primitive_checks(rng)}

    cfg = ModelConfig(base_channels=4, focal_levels=2)
    params = init_params(cfg, 0, np.float64)
    streams = [t64(rng.standard_normal((1, cfg.channels(a)) + (8 // 2 ** (a - 1),) * 3)) for a in range(1, 5)]
    weights = [t64(rng.standard_normal(s.shape)) for s in streams]

    def block_loss():
        total = None
        for y, w in zip(focal_fuse_forward(cfg, params, streams), weights):
            term = sum_all(y * w)
            total = term if total is None else add(total, term)
        return total

    fuse_params = [t for n, t in params.items() if n.startswith("fuse.")]
    errs["focal-fuse block (base 4, 8^3, N=2)"] = check_gradients(
        block_loss, fuse_params + streams, samples=2, rng=rng)
    elapsed = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-3 and elapsed < 300
    verdict(2, f"finite-difference gradients, {len(errs)} checks incl. focal-fuse block", ok,
            f"worst {worst} {errs[worst]:.2e}, {elapsed:.1f}s")
    assert ok, errs


# ---------------------------------------------------------------- 3

def test_criterion_03_shape_schedule():
    x = t32(np.random.default_rng(0).standard_normal((1, 1, 32, 32, 32)))
    ok = True
    widths = None
    for variant in ("focal_fuse", "msf3d"):
        cfg = ModelConfig(variant=variant, base_channels=16)
        params = init_params(cfg, 0)
        feats = encoder_forward(cfg, params, x)
        widths = [t.shape[1] for t in feats.streams + [feats.bottleneck]]
        ok &= widths == [16, 32, 64, 128, 256]
        ok &= model_forward(cfg, params, x).shape[2:] == (32, 32, 32)
    verdict(3, "encoder widths 16..256 at base 16, logits extents = input, both variants", ok,
            f"widths {widths}")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_04_focal_context():
    extent = 32
    cfg = ModelConfig(base_channels=2, focal_levels=2)
    params = init_params(cfg, 0, np.float64)
    rng = np.random.default_rng(3)
    streams = [t64(rng.standard_normal((1, cfg.channels(a)) + (extent // 2 ** (a - 1),) * 3))
               for a in range(1, 5)]
    _, before = focal_fuse_forward(cfg, params, streams, return_state=True)
    streams[0].data[0, :, 0, 0, 0] += 5.0
    _, after = focal_fuse_forward(cfg, params, streams, return_state=True)

    target = (extent - 1,) * 3
    reach = oracles.support_after_levels(extent, 2)
    margin = target[0] - reach
    at = lambda t: t.data[(0, slice(None)) + target]
    local_same = all(np.array_equal(at(before.levels[l][0]), at(after.levels[l][0])) for l in (1, 2))
    out_diff = float(np.abs(at(after.outputs[0]) - at(before.outputs[0])).max())
    ok = margin >= 10 and local_same and out_diff > 0
    verdict(4, "far perturbation leaves level-1/2 features exact, moves output via global level", ok,
            f"margin {margin} voxels, output change {out_diff:.2e}")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_05_gate_annihilation():
    cfg = ModelConfig(base_channels=4, focal_levels=2)
    params = init_params(cfg, 1)
    for n in params:
        if ".gate." in n or ".proj." in n:
            params[n].data[...] = 0
    rng = np.random.default_rng(5)
    streams = [t32(rng.standard_normal((1, cfg.channels(a)) + (16 // 2 ** (a - 1),) * 3)) for a in range(1, 5)]
    outs = focal_fuse_forward(cfg, params, streams)
    ok = all(not y.data.any() for y in outs)
    verdict(5, "zero gate and projection parameters give Y_a == 0 at every scale", ok)
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_06_cyclic_lr():
    half = 100
    lrs = np.array([cyclic_lr(i, half_cycle=half) for i in range(6 * half + 1)])
    ends = cyclic_lr(0, half_cycle=half) == 0.0005 and cyclic_lr(half, half_cycle=half) == 0.003
    periodic = np.array_equal(lrs[:4 * half + 1], lrs[2 * half:])
    d = np.diff(lrs[:2 * half + 1])
    slope = (0.003 - 0.0005) / half
    linear = np.allclose(d[:half], slope, rtol=1e-9, atol=0) and np.allclose(d[half:], -slope, rtol=1e-9, atol=0)
    ok = ends and periodic and linear
    verdict(6, "lr(0)=0.0005, lr(half_cycle)=0.003 exactly; triangular and periodic", ok)
    assert ok


# ---------------------------------------------------------------- 7

def _overfit(variant, base, tmp):
    data = tmp / "data"
    run = tmp / f"run_{variant}"
    assert main(["gen-data", "--count", "4", "--seed", "0", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(run), "--variant", variant,
                 "--base-channels", str(base), "--epochs", "50", "--seed", "0", "--val-every", "0"]) == 0
    preds = tmp / f"pred_{variant}"
    preds.mkdir()
    for f in sorted(data.glob("*.mvol")):
        assert main(["infer", "--checkpoint", str(run / "model.ckpt"), "--data", str(f),
                     "--out", str(preds / f.name)]) == 0
    assert main(["eval", "--pred", str(preds), "--truth", str(data), "--out", str(tmp / f"eval_{variant}")]) == 0
    agg = (tmp / f"eval_{variant}" / "aggregate.csv").read_text().splitlines()[-1].split(",")
    return float(agg[1]), TrainLog.read(run / "trainlog.tsv")


@pytest.mark.slow
def test_criterion_07_overfit(tmp_path):
    start = time.perf_counter()
    dsc_focal, log_focal = _overfit("focal_fuse", 8, tmp_path)
    t_focal = time.perf_counter() - start
    dsc_msf, log_msf = _overfit("msf3d", 8, tmp_path)
    t_msf = time.perf_counter() - start - t_focal
    ok = (len(log_focal.records) == 200 and len(log_msf.records) == 200
          and dsc_focal >= 0.90 and dsc_msf >= 0.85 and t_focal < 900 and t_msf < 900)
    verdict(7, "200-iteration overfit on 4 phantoms (base 8): focal_fuse >= 0.90, msf3d >= 0.85", ok,
            f"focal_fuse {dsc_focal:.4f} in {t_focal:.0f}s, msf3d {dsc_msf:.4f} in {t_msf:.0f}s")
    final = log_focal.losses()[-1]
    print(f"[INFO] focal_fuse final train loss {final:.4f} "
          f"(mean of last 20: {np.mean(log_focal.losses()[-20:]):.4f}); msf3d final {log_msf.losses()[-1]:.4f}")
    RESULTS.append(f"[INFO] criterion  7: focal_fuse final train loss {final:.4f} (train example asks < 0.15)")
    for name, lg in (("focal_fuse", log_focal), ("msf3d", log_msf)):
        blocks = np.asarray(lg.losses()).reshape(-1, 50).mean(axis=1)
        RESULTS.append(f"[INFO] criterion  7: {name} 50-iteration mean losses "
                       f"{np.round(blocks, 4).tolist()} non-increasing={bool(np.all(np.diff(blocks) <= 0))}")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_08_metric_oracles():
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(50):
        shape = tuple(int(v) for v in rng.integers(2, 17, size=3))
        spacing = tuple(float(v) for v in rng.choice([0.5, 0.8, 1.0, 2.0, 3.0], size=3))
        masks = []
        for _ in range(2):
            m = np.zeros(shape, bool)
            lo = [int(rng.integers(0, s)) for s in shape]
            hi = [int(rng.integers(l, s)) + 1 for l, s in zip(lo, shape)]
            m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
            m ^= rng.random(shape) < 0.05
            m[tuple(lo)] = True
            masks.append(m)
        a, b = masks
        mismatches += hausdorff_distance(a, b, spacing) != oracles.hausdorff_loop(a, b, spacing)
        mismatches += average_surface_distance(a, b, spacing) != oracles.asd_loop(a, b, spacing)
    x = np.zeros(4, int)
    y = np.zeros(4, int)
    x[[0, 1]] = 1
    y[[1, 2]] = 1
    far = np.zeros(4, int)
    far[3] = 1
    edges = (dice_score(x, x, 1) == 1.0 and dice_score(x, far, 1) == 0.0 and dice_score(x, y, 1) == 0.5)
    ok = mismatches == 0 and edges
    verdict(8, "HD/ASD equal brute force exactly on 50 mask pairs; dice edge cases exact", ok,
            f"{mismatches} mismatches")
    assert ok


# ---------------------------------------------------------------- 9

def test_criterion_09_determinism(tmp_path):
    data = tmp_path / "data"
    spec = tmp_path / "spec.txt"
    spec.write_text("num_classes = 3\n")
    main(["gen-data", "--spec", str(spec), "--count", "2", "--seed", "4", "--out", str(data)])
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--data", str(data), "--out", str(out), "--base-channels", "2",
                     "--epochs", "2", "--seed", "11", "--half-cycle", "2", "--epoch-checkpoints"]) == 0
        runs.append(out)
    files = ("trainlog.tsv", "model.ckpt", "latest.ckpt", "config.cfg")
    same = all((runs[0] / f).read_bytes() == (runs[1] / f).read_bytes() for f in files)
    params, state, cfg = load_checkpoint(runs[0] / "model.ckpt")
    save_checkpoint(params, state, cfg, tmp_path / "again.ckpt")
    round_trip = (tmp_path / "again.ckpt").read_bytes() == (runs[0] / "model.ckpt").read_bytes()
    ok = same and round_trip
    verdict(9, "identical train invocations give bitwise-identical logs/checkpoints; exact round-trip", ok)
    assert ok


# ---------------------------------------------------------------- 10

EXPECTED_TABLE = """\
Volume    | Mean DSC | Mean HD | Mean ASD | DSC 1  | DSC 2  | DSC 3
----------+----------+---------+----------+--------+--------+-------
case0     | 0.8889   | 0.3333  | 0.1111   | 0.6667 | 1.0000 | 1.0000
aggregate | 0.8889   | 0.3333  | 0.1111   | 0.6667 | 1.0000 | 1.0000
"""


def test_criterion_10_report_fidelity(tmp_path, capsys):
    truth = np.zeros((6, 2, 2), np.uint8)
    truth[0], truth[2], truth[4] = 1, 2, 3
    pred = truth.copy()
    pred[1] = 1
    for d, lab in (("p", pred), ("t", truth)):
        (tmp_path / d).mkdir()
        write_volume(VolumeSample(None, lab, (1.0, 1.0, 1.0), "case0", 4), tmp_path / d / "case0.mvol")
    code = main(["eval", "--pred", str(tmp_path / "p"), "--truth", str(tmp_path / "t"),
                 "--out", str(tmp_path / "r")])
    out = capsys.readouterr().out
    ok = code == 0 and out == EXPECTED_TABLE and (tmp_path / "r" / "report.txt").read_text() == EXPECTED_TABLE
    verdict(10, "eval table: Mean DSC, Mean HD, Mean ASD, then per-class DSC (snapshot)", ok)
    assert ok, out
