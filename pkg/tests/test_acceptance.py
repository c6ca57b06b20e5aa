"""End-to-end acceptance suite.

Each test exercises one project-level guarantee: pipeline invertibility,
gradient correctness, selector algebra, metric oracles, gray-world
idempotence, EMA bookkeeping, a scaled-down overfit run, reference
sensitivity across two synthetic sensors, split-protocol determinism,
and seed reproducibility of the command-line entry points.
"""

import filecmp
import json
import time

import numpy as np
import pytest

from srisp import autodiff as ad
from srisp import blocks, pseudo
from srisp.autodiff import Tape, Tensor
from srisp.blocks import (
    PipelineParams,
    cc_apply,
    column_normalize,
    gc_apply,
    gg_apply,
    pipeline_forward,
    pipeline_reverse,
    wb_apply,
)
from srisp.cli import main
from srisp.gradcheck import check_gradients, check_gradients_directional
from srisp.imageio import Manifest, ManifestEntry, RawSidecar, save_raw, save_rgb
from srisp.metrics import (
    HistogramSet,
    angular_error,
    histogram_intersection,
    psnr,
    split_protocol,
)
from srisp.model import ALL_HEADS, Model, ModelConfig
from srisp.selector import select_all, select_parameter
from srisp.trainer import (
    OptimizerState,
    TrainConfig,
    adam_step,
    ema_update,
    total_loss,
)


# ---------------------------------------------------------------------------
# shared synthetic data
# ---------------------------------------------------------------------------


def sinusoid_textures(rng, n, size=64):
    """Smooth procedural RGB textures in [0.08, 0.8]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = []
    for _ in range(n):
        f1, f2 = rng.uniform(2, 8, 2)
        ph = rng.uniform(0, 2 * np.pi, 3)
        img = np.stack(
            [0.5 + 0.5 * np.sin(2 * np.pi * (f1 * xx + f2 * yy) + ph[c]) for c in range(3)],
            axis=-1,
        )
        img = 0.2 + 0.6 * img * rng.uniform(0.4, 1.0, (1, 1, 3))
        out.append(np.clip(img, 0, 1).astype(np.float32))
    return out


def hidden_isp_pairs(tints, scenes, gain=1.3):
    """Render (rgb, raw) pairs through a fixed, exactly-representable ISP.

    The sensor tint is baked into the RAW target; the hidden forward ISP
    removes it with white balance, applies a global gain, and encodes
    with gamma 2.2 — all operations the learned pipeline can express.
    """
    pairs = []
    for tint in tints:
        t = np.asarray(tint, dtype=np.float32)
        for s in scenes:
            y = np.clip(s * 0.45 * t, 0, 1).astype(np.float32)
            x = np.power(np.clip(gain * y / t, 1e-8, 1), 1 / 2.2).astype(np.float32)
            pairs.append((x, y))
    return pairs


def run_overfit(pairs, lr, seed, steps=300):
    """Full-batch training on a fixed pair set; returns the fitted model."""
    cfg = TrainConfig(
        epochs=1,
        warmup_epochs=10**9,  # teacher pairs off for this scale
        batch_size=len(pairs),
        pp_rand_per_batch=len(pairs),
        pp_mt_per_batch=0,
        learning_rate=lr,
        input_size=pairs[0][0].shape[0],
        seed=seed,
    )
    model = Model.build(ModelConfig(select_size=64, use_dtm=False), seed=seed)
    opt = OptimizerState.for_model(model)
    first = None
    loss_value = None
    for _ in range(steps):
        with Tape() as tape:
            loss, _ = total_loss(model, pairs, [], cfg, 0)
            grads = tape.gradients(loss, list(model.params.values()))
        loss_value = loss.item()
        if first is None:
            first = loss_value
        adam_step(model, grads, opt, lr)
    return model, first, loss_value


def reconstruction_psnrs(model, pairs):
    out = []
    for x, y in pairs:
        sel = select_all(model, x, y)
        raw = np.clip(pipeline_reverse(Tensor(x), sel.params).data, 0, 1)
        out.append(psnr(y, raw))
    return out


@pytest.fixture(scope="module")
def single_sensor_overfit():
    rng = np.random.default_rng(42)
    scenes = sinusoid_textures(rng, 8)
    pairs = hidden_isp_pairs([(1.0, 1.0, 1.0)], scenes)
    start = time.monotonic()
    model, first, last = run_overfit(pairs, lr=1e-3, seed=3)
    return {
        "model": model,
        "pairs": pairs,
        "first_loss": first,
        "last_loss": last,
        "elapsed": time.monotonic() - start,
    }


@pytest.fixture(scope="module")
def two_sensor_overfit():
    rng = np.random.default_rng(42)
    scenes = sinusoid_textures(rng, 4)
    tints = [(2.0, 1.0, 1.0), (1.0, 1.0, 2.0)]
    pairs = hidden_isp_pairs(tints, scenes)
    # low learning rate keeps the dictionary softmax soft for the whole
    # run, so the selection weights stay responsive to the reference
    model, _, _ = run_overfit(pairs, lr=1e-4, seed=5)
    return {"model": model, "pairs": pairs}


# ---------------------------------------------------------------------------
# 1. invertibility
# ---------------------------------------------------------------------------


def test_invertibility_suite():
    """forward(reverse(x)) == x per block and for the full pipeline.

    Draws stay inside the exact-inversion region: every stage keeps the
    per-pixel channel mean below the 0.9 highlight knee, which the test
    asserts explicitly before comparing.
    """
    rng = np.random.default_rng(0)
    start = time.monotonic()
    for _ in range(100):
        x = Tensor(rng.uniform(0.02, 0.85, (32, 32, 3)).astype(np.float32))
        gain = Tensor(np.float32(rng.uniform(1.0, 1.6)))
        wb = Tensor(rng.uniform(1.0, 1.9, 3).astype(np.float32))
        ccm = column_normalize(
            Tensor((np.eye(3) + 0.05 * rng.standard_normal((3, 3))).astype(np.float32))
        )
        gamma = Tensor(np.float32(rng.uniform(1.7, 2.7)))

        for rev, fwd in [
            (lambda v: gg_apply(v, gain, "rev"), lambda v: gg_apply(v, gain, "fwd")),
            (lambda v: wb_apply(v, wb, "rev"), lambda v: wb_apply(v, wb, "fwd")),
            (lambda v: cc_apply(v, ccm, "rev"), lambda v: cc_apply(v, ccm, "fwd")),
            (lambda v: gc_apply(v, gamma, "rev"), lambda v: gc_apply(v, gamma, "fwd")),
        ]:
            mid = rev(x)
            assert mid.data.mean(axis=-1).max() < 0.9
            back = fwd(mid)
            assert np.abs(back.data - x.data).max() <= 1e-4

        params = PipelineParams(gain=gain, wb_gains=wb, ccm=ccm, gamma=gamma)
        raw = pipeline_reverse(x, params)
        assert raw.data.mean(axis=-1).max() < 0.9
        back = pipeline_forward(raw, params)
        assert np.abs(back.data - x.data).max() <= 1e-4
    assert time.monotonic() - start < 10.0


# ---------------------------------------------------------------------------
# 2. gradients
# ---------------------------------------------------------------------------


def test_gradient_suite():
    start = time.monotonic()
    rng = np.random.default_rng(7)

    primitives = [
        ("add", lambda a, b: ad.mean_(a + b), [(3, 3), (3, 3)]),
        ("sub", lambda a, b: ad.mean_(a - b), [(3, 3), (3, 3)]),
        ("mul", lambda a, b: ad.mean_(a * b), [(3, 3), (3, 3)]),
        ("div", lambda a, b: ad.mean_(a / (b + 2.0)), [(3, 3), (3, 3)]),
        ("pow", lambda a, b: ad.mean_(ad.pow_(a + 1.5, b + 1.2)), [(3, 3), (1,)]),
        ("maximum", lambda a, b: ad.mean_(ad.maximum(a, b + 5.0)), [(3, 3), (3, 3)]),
        ("abs", lambda a, b: ad.mean_(ad.absolute(a + 2.0) * b), [(3, 3), (3, 3)]),
        ("clamp", lambda a, b: ad.mean_(ad.clamp(a, 0.0, 10.0) * b), [(4,), (4,)]),
        ("exp", lambda a, b: ad.mean_(ad.exp(a) * b), [(4,), (4,)]),
        ("log", lambda a, b: ad.mean_(ad.log(a + 2.0) * b), [(4,), (4,)]),
        ("relu", lambda a, b: ad.mean_(ad.relu(a + 3.0) * b), [(4,), (4,)]),
        ("sum", lambda a, b: ad.sum_(a * b) / 16.0, [(4, 4), (4, 4)]),
        ("mean", lambda a, b: ad.mean_(a) * ad.mean_(b), [(4, 4), (4, 4)]),
        ("reshape", lambda a, b: ad.mean_(ad.reshape(a, (9,)) * ad.reshape(b, (9,))), [(3, 3), (3, 3)]),
        ("concat", lambda a, b: ad.mean_(ad.concat([a, b], axis=0)), [(3,), (4,)]),
        ("matmul", lambda a, b: ad.mean_(ad.matmul(a, b)), [(3, 4), (4, 2)]),
        ("affine", lambda a, b: ad.mean_(ad.affine(a, b, a)), [(3,), (3, 3)]),
        ("inv3", lambda a, b: ad.mean_(ad.inv3(a + 2.0 * Tensor(np.eye(3))) * b), [(3, 3), (3, 3)]),
        ("softmax", lambda a, b: ad.mean_(ad.softmax(a) * b), [(5,), (5,)]),
        ("dict_mix", lambda a, b: ad.mean_(ad.dict_mix(a, ad.softmax(b))), [(5, 3), (5,)]),
        ("take", lambda a, b: ad.mean_(ad.take(a, 1) * b), [(4,), (1,)]),
        (
            "conv2d",
            lambda a, b: ad.mean_(ad.conv2d(a, b, Tensor(np.zeros(2)), stride=2)),
            [(6, 6, 2), (3, 3, 2, 2)],
        ),
        ("gap", lambda a, b: ad.mean_(ad.global_avg_pool(a) * b), [(4, 4, 2), (2,)]),
        # resize_bilinear is preprocessing-only (gradients are not
        # tracked through it), so it is deliberately absent here
    ]
    for name, fn, shapes in primitives:
        params = [
            Tensor(rng.uniform(0.1, 0.9, s), requires_grad=True) for s in shapes
        ]
        report = check_gradients(
            lambda fn=fn, params=params: fn(*params),
            params,
            rel_tol=1e-3,
            max_coords=6,
            rng=rng,
        )
        assert report.ok, (name, report.failed)

    # end-to-end: the training loss on an 8x8 pair, one random direction
    # per parameter tensor
    model = Model.build(ModelConfig(select_size=8), seed=1)
    x = rng.uniform(0.1, 0.8, (8, 8, 3)).astype(np.float32)
    y = rng.uniform(0.1, 0.8, (8, 8, 3)).astype(np.float32)
    cfg = TrainConfig(warmup_epochs=10**9, batch_size=1, pp_rand_per_batch=1,
                      pp_mt_per_batch=0, input_size=8)
    report = check_gradients_directional(
        lambda: total_loss(model, [(x, y)], [], cfg, 0)[0],
        list(model.params.values()),
        rel_tol=1e-2,
        directions=1,
        rng=np.random.default_rng(2),
    )
    assert report.ok, report.failed
    assert time.monotonic() - start < 60.0


# ---------------------------------------------------------------------------
# 3. selector algebra
# ---------------------------------------------------------------------------


def test_selector_algebra():
    rng = np.random.default_rng(3)
    model = Model.build(ModelConfig(select_size=16), seed=5)
    x = rng.uniform(0.1, 0.9, (16, 16, 3)).astype(np.float32)
    y = rng.uniform(0.1, 0.9, (16, 16, 3)).astype(np.float32)
    sel = select_all(model, x, y)
    assert set(sel.weights) == set(ALL_HEADS)
    for head, w in sel.weights.items():
        assert abs(float(np.sum(w.data)) - 1.0) <= 1e-6, head

    candidates = Tensor(np.array([1.7, 1.95, 2.2, 2.45, 2.7], dtype=np.float32))
    one_hot = Tensor(np.array([0.0, 0.0, 1.0, 0.0, 0.0], dtype=np.float32))
    assert float(select_parameter(candidates, one_hot).data) == float(candidates.data[2])

    uniform = Tensor(np.full(5, 0.2, dtype=np.float32))
    assert float(select_parameter(candidates, uniform).data) == pytest.approx(2.2, abs=1e-6)

    ccm = sel.params.ccm.data
    np.testing.assert_allclose(ccm.sum(axis=0), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# 4. metric oracles
# ---------------------------------------------------------------------------


def test_metric_oracles():
    a = np.array([[[1.0, 0.0, 0.0]]])
    b = np.array([[[0.0, 1.0, 0.0]]])
    assert angular_error(a, b) == pytest.approx(90.0, abs=1e-4)

    rng = np.random.default_rng(4)
    ref = rng.uniform(0.2, 0.8, (16, 16, 3))
    noisy = ref + 0.1  # MSE exactly 0.01
    assert psnr(ref, noisy) == pytest.approx(20.0, abs=1e-4)

    lab = rng.uniform(-120, 120, (16, 3))
    h = HistogramSet.from_lab(lab)
    assert histogram_intersection(h, h) == 1.0

    sets = [rng.uniform(-140, 140, (16, 3)) for _ in range(3)]
    hists = [HistogramSet.from_lab(s) for s in sets]
    edges = np.linspace(-150.0, 150.0, 513)
    for i in range(3):
        for j in range(3):
            expected = 0.0
            for c in range(3):
                ca = np.histogram(sets[i][:, c], bins=edges)[0] / 16.0
                cb = np.histogram(sets[j][:, c], bins=edges)[0] / 16.0
                expected += np.minimum(ca, cb).sum() / 3.0
            got = histogram_intersection(hists[i], hists[j])
            assert got == pytest.approx(expected, abs=1e-6)


# ---------------------------------------------------------------------------
# 5. gray-world idempotence
# ---------------------------------------------------------------------------


def test_grayworld_idempotence():
    rng = np.random.default_rng(5)
    for _ in range(50):
        pattern = rng.uniform(0.05, 0.5, (16, 16))
        tint = rng.uniform(0.7, 1.4, 3)
        y = (pattern[..., None] * tint).astype(np.float32)
        gains = pseudo.grayworld_gains(y)
        corrected = wb_apply(Tensor(y), Tensor(gains), "fwd").data
        assert corrected.max() < 1.0  # clamp must stay inactive
        regains = pseudo.grayworld_gains(corrected)
        np.testing.assert_allclose(regains, 1.0, atol=1e-4)


# ---------------------------------------------------------------------------
# 6. EMA correctness
# ---------------------------------------------------------------------------


def test_ema_recurrence():
    decay = 0.999
    student = Model.build(ModelConfig(select_size=8), seed=6)
    teacher = student.detached_copy()
    oracle = {k: t.data.astype(np.float64) for k, t in teacher.params.items()}
    rng = np.random.default_rng(6)
    for _ in range(1000):
        for name, t in student.params.items():
            t.data += rng.normal(0, 1e-3, t.data.shape).astype(np.float32)
        ema_update(teacher, student, decay)
        for name, t in student.params.items():
            oracle[name] = decay * oracle[name] + (1 - decay) * t.data
    for name, t in teacher.params.items():
        assert np.abs(t.data - oracle[name]).max() <= 1e-5, name


# ---------------------------------------------------------------------------
# 7. overfit smoke test
# ---------------------------------------------------------------------------


def test_overfit_fits_fixed_isp(single_sensor_overfit):
    run = single_sensor_overfit
    assert run["last_loss"] <= 0.5 * run["first_loss"]
    scores = reconstruction_psnrs(run["model"], run["pairs"])
    assert min(scores) >= 30.0, scores
    assert run["elapsed"] < 600.0


# ---------------------------------------------------------------------------
# 8. reference sensitivity
# ---------------------------------------------------------------------------


def test_reference_steers_white_balance(two_sensor_overfit):
    model = two_sensor_overfit["model"]
    pairs = two_sensor_overfit["pairs"]
    ref_a = pairs[0][1]  # sensor A raw: red-rich tint (2,1,1)
    ref_b = pairs[4][1]  # sensor B raw: blue-rich tint (1,1,2)
    rng = np.random.default_rng(99)
    rgb = np.clip(0.2 + 0.6 * sinusoid_textures(rng, 1)[0], 0, 1).astype(np.float32)

    def rb_ratio(reference):
        sel = select_all(model, rgb, reference)
        raw = np.clip(pipeline_reverse(Tensor(rgb), sel.params).data, 0, 1)
        mean = raw.reshape(-1, 3).mean(axis=0)
        return float(mean[0] / max(mean[2], 1e-8))

    assert rb_ratio(ref_a) > rb_ratio(ref_b)


# ---------------------------------------------------------------------------
# 9. split-protocol determinism
# ---------------------------------------------------------------------------


def test_split_protocol_exactness(tmp_path):
    sidecar = RawSidecar(black_level=0, white_level=65535, ccm=np.eye(3))
    rng = np.random.default_rng(9)
    entries = []
    for i in range(3):
        # values on the 8-bit grid survive both containers exactly
        raw = np.round(rng.uniform(0.1, 0.8, (16, 32, 3)) * 255) / 255
        raw = raw.astype(np.float32)
        rp, mp, gp = (tmp_path / f"{n}{i}.{e}" for n, e in
                      (("raw", "png"), ("raw", "json"), ("rgb", "png")))
        save_raw(raw, sidecar, rp)
        sidecar.save(mp)
        save_rgb(raw, gp)
        entries.append(ManifestEntry(raw_path=str(rp), meta_path=str(mp),
                                     rgb_path=str(gp), camera_id="c"))

        ref, top, bottom = split_protocol(raw)
        rebuilt = np.concatenate([top, bottom], axis=0)
        assert np.array_equal(np.concatenate([ref, rebuilt], axis=1), raw)

    mpath = tmp_path / "manifest.json"
    Manifest.save(mpath, entries)
    out = tmp_path / "ev"
    assert main(["eval-paired", "--manifest", str(mpath), "--out", str(out)]) == 0
    report = json.loads((out / "eval_paired.json").read_text())
    assert len(report["rows"]) == 6  # two eval units per image
    for row in report["rows"]:
        assert row["psnr"] == 99.0
        assert row["angular_error"] == 0.0


# ---------------------------------------------------------------------------
# 10. seed reproducibility
# ---------------------------------------------------------------------------


def _raw_manifest(tmp_path, n=3, size=12):
    sidecar = RawSidecar(black_level=0, white_level=65535, ccm=np.eye(3))
    rng = np.random.default_rng(10)
    entries = []
    for i in range(n):
        raw = rng.uniform(0.1, 0.8, (size, size, 3)).astype(np.float32)
        rp, mp = tmp_path / f"raw{i}.png", tmp_path / f"raw{i}.json"
        save_raw(raw, sidecar, rp)
        sidecar.save(mp)
        entries.append(ManifestEntry(raw_path=str(rp), meta_path=str(mp), camera_id="c"))
    mpath = tmp_path / "manifest.json"
    Manifest.save(mpath, entries)
    return mpath


def test_seed_reproducibility(tmp_path):
    mpath = _raw_manifest(tmp_path)

    logs = []
    for name in ("t1", "t2"):
        out = tmp_path / name
        rc = main(["train", "--raw-manifest", str(mpath), "--out", str(out),
                   "--epochs", "1", "--steps-per-epoch", "2", "--batch-size", "2",
                   "--pp-rand", "2", "--input-size", "12", "--seed", "7"])
        assert rc == 0
        logs.append((out / "metrics.ndjson").read_bytes())
    assert logs[0] == logs[1]

    outs = []
    for name in ("g1", "g2"):
        out = tmp_path / name
        rc = main(["gen-pseudo", "--raw-manifest", str(mpath), "--out", str(out),
                   "--seed", "5"])
        assert rc == 0
        outs.append(out)
    files = sorted(p.name for p in outs[0].glob("pp_rand_*.png"))
    assert files
    for name in files:
        assert filecmp.cmp(outs[0] / name, outs[1] / name, shallow=False)
