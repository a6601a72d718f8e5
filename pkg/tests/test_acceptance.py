"""Acceptance suite: one recorded pass/fail line per criterion (see the terminal summary).

Criteria 6, 7 and 9 train the full desk-scale pipeline and take several minutes on CPU.
"""
import math
import os
import time

import numpy as np
import pytest
import torch

from vtryon.adversarial import psad_d_loss, psad_g_loss
from vtryon.dataset import (CATEGORIES, DRESS_CODE_TEST, DRESS_CODE_TRAIN, NUM_CLASSES, GarmentCategory,
                            build_agnostic, read_split, unpair, write_pairs)
from vtryon.geometry import TPS_RIDGE, _tps_basis, apply_tps, tps_grid, warp, warp_loss
from vtryon.metrics import fid, inception_score, kid, ssim
from vtryon.parsing import parse_loss, pixel_accuracy
from vtryon.pipeline import (ablate, load_bundle, load_checkpoint, load_config, multi_garment, save_checkpoint,
                             stage_path, train_stage, tryon_once)
from vtryon.pipeline.data import TryOnSamples, collate
from vtryon.pipeline.train import ABLATION_MODES, load_frozen
from vtryon.synthetic import synthetic_pairs

from oracles import fake_channel_nll, finite_difference_grad, relative_error, tps_dense_solve, weighted_pixel_ce

DESK_PAIRS = 16
WINDOW = 20


def drop(series, window=WINDOW):
    first, last = np.mean(series[:window]), np.mean(series[-window:])
    return 1.0 - last / first


# --- shared desk-scale runs ---------------------------------------------------

@pytest.fixture(scope="session")
def desk_records():
    return synthetic_pairs(DESK_PAIRS, (64, 48), seed=0)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory, desk_records):
    cfg = load_config("desk")
    ckpt = tmp_path_factory.mktemp("desk")
    results, seconds = {}, {}
    for stage in ("warp", "parse", "tryon"):
        t0 = time.perf_counter()
        results[stage] = train_stage(stage, cfg, desk_records, ckpt, "psad")
        seconds[stage] = time.perf_counter() - t0
    return cfg, ckpt, results, seconds


@pytest.fixture(scope="session")
def ablation_run(tmp_path_factory, desk_records):
    cfg = load_config("desk")
    out = tmp_path_factory.mktemp("ablation")
    held_out = synthetic_pairs(12, (64, 48), seed=1)
    t0 = time.perf_counter()
    result = ablate(desk_records, cfg, out, ABLATION_MODES, eval_records=held_out)
    return result, time.perf_counter() - t0


# --- 1-5: exact properties ----------------------------------------------------

def test_c1_tps_identity(acceptance):
    image = torch.rand(1, 3, 256, 192, dtype=torch.float64)
    _tps_basis.cache_clear()
    t0 = time.perf_counter()
    out = apply_tps(image, tps_grid(torch.zeros(1, 2, 5, 5, dtype=torch.float64), (256, 192)))
    seconds = time.perf_counter() - t0
    err = float((out - image).abs().max())
    ok = err < 1e-5 and seconds < 1.0
    assert acceptance(1, "TPS identity", ok, f"max abs error {err:.2e}, {seconds:.3f} s at 256x192 (cold cache)")


def test_c2_tps_oracle(acceptance):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        theta = rng.uniform(-0.3, 0.3, (2, 5, 5))
        ours = tps_grid(torch.from_numpy(theta)[None], (64, 48))[0].numpy()
        worst = max(worst, float(np.abs(ours - tps_dense_solve(theta, 64, 48)).max()))
    assert acceptance(2, "TPS oracle", worst < 1e-5,
                      f"max deviation from an unregularised dense 25-point solve {worst:.2e} over 20 random theta")


def _fd_check(loss, x0):
    x = x0.clone().requires_grad_(True)
    loss(x).backward()
    numeric = finite_difference_grad(lambda z: float(loss(torch.as_tensor(z))), x0.numpy(), eps=1e-7)
    return relative_error(x.grad.numpy(), numeric)


def test_c3_gradient_checks(acceptance):
    g = torch.Generator().manual_seed(3)
    img = torch.rand(1, 3, 16, 12, generator=g, dtype=torch.float64)
    target = torch.rand(1, 3, 16, 12, generator=g, dtype=torch.float64)
    theta0 = (torch.rand(1, 2, 5, 5, generator=g, dtype=torch.float64) - 0.5) * 0.2
    labels = torch.randint(0, NUM_CLASSES, (1, 16, 12), generator=g)
    logits18 = torch.randn(1, NUM_CLASSES, 16, 12, generator=g, dtype=torch.float64)
    real = torch.randn(1, NUM_CLASSES + 1, 16, 12, generator=g, dtype=torch.float64)
    fake = torch.randn(1, NUM_CLASSES + 1, 16, 12, generator=g, dtype=torch.float64)
    w = torch.rand(NUM_CLASSES, generator=g, dtype=torch.float64) + 0.1
    ident = lambda x: x
    errors = {
        "warp_loss": _fd_check(lambda t: warp_loss(warp(img, t), target, t), theta0),
        "parse_loss": _fd_check(lambda z: parse_loss(z, labels), logits18),
        "psad_d_loss": _fd_check(lambda z: psad_d_loss(ident, real, z, labels, w), fake),
        "psad_g_loss": _fd_check(lambda z: psad_g_loss(ident, z, labels, w), fake),
    }
    ok = all(e < 1e-3 for e in errors.values())
    assert acceptance(3, "gradient checks", ok, ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + " at 16x12")


def test_c4_psad_equivalence(acceptance):
    worst, homog = 0.0, 0.0
    ident = lambda x: x
    for seed in range(50):
        g = torch.Generator().manual_seed(seed)
        real = torch.randn(1, 19, 4, 4, generator=g, dtype=torch.float64) * 3
        fake = torch.randn(1, 19, 4, 4, generator=g, dtype=torch.float64) * 3
        labels = torch.randint(0, NUM_CLASSES, (1, 4, 4), generator=g)
        w = torch.rand(NUM_CLASSES, generator=g, dtype=torch.float64) * 4
        ours = float(psad_d_loss(ident, real, fake, labels, w))
        brute = weighted_pixel_ce(real.numpy(), labels.numpy(), w.numpy()) + fake_channel_nll(fake.numpy(), 18)
        worst = max(worst, abs(ours - brute))
        k = 0.5 + seed / 10
        _, a = psad_d_loss(ident, real, fake, labels, w, return_parts=True)
        _, b = psad_d_loss(ident, real, fake, labels, k * w, return_parts=True)
        homog = max(homog, abs(float(b["real"]) - k * float(a["real"])) / max(abs(k * float(a["real"])), 1e-12))
    ok = worst < 1e-6 and homog < 1e-9
    assert acceptance(4, "PSAD loss equivalence", ok,
                      f"max |ours - brute force| {worst:.1e} over 50 4x4 instances, homogeneity rel. error {homog:.1e}")


def test_c5_metric_sanity(acceptance):
    rng = np.random.default_rng(5)
    x = rng.random((64, 48, 3))
    a = rng.standard_normal((200, 8))
    v = rng.standard_normal(8)
    kids = [abs(kid(np.random.default_rng(s).standard_normal((100, 2048)),
                    np.random.default_rng(s + 100).standard_normal((100, 2048)), seed=s)) for s in range(5)]
    checks = {
        "ssim(x,x)": abs(ssim(x, x) - 1) <= 1e-6,
        "fid(A,A)": fid(a, a) <= 1e-6,
        "mean-offset fid": abs(fid(a, a + v) - v @ v) <= 1e-6,
        "|kid| n=100": max(kids) <= 0.01,
        "IS uniform": abs(inception_score(np.full((50, 6), 1 / 6)) - 1) < 1e-9,
        "IS one-hot": abs(inception_score(np.eye(6)[np.arange(60) % 6]) - 6) < 1e-9,
    }
    detail = ", ".join(f"{k} {'ok' if ok else 'BAD'}" for k, ok in checks.items())
    assert acceptance(5, "metric sanity", all(checks.values()), f"{detail} (max |kid| {max(kids):.4f}, 2048-d)")


# --- 6: desk-scale overfit ----------------------------------------------------

def _parse_accuracy(cfg, ckpt, records):
    warp_net, parse_net = load_frozen("warp", cfg, ckpt), load_frozen("parse", cfg, ckpt)
    batch = collate([TryOnSamples(records, cfg.pose_mode, cfg.dilation_radius)[i] for i in range(len(records))])
    with torch.no_grad():
        theta = warp_net(batch["garment"], batch["agnostic"], batch["pose"])
        warped = apply_tps(batch["garment"], tps_grid(theta, batch["garment"].shape[-2:]))
        logits = parse_net(warped, batch["pose"], batch["masked_parse"])
    return pixel_accuracy(logits, batch["parse"])


def test_c6_desk_overfit(acceptance, desk_run, desk_records):
    cfg, ckpt, results, seconds = desk_run
    warp_drop = drop(results["warp"].trace["l1"])
    tryon_drop = drop(results["tryon"].trace["l1"])
    accuracy = _parse_accuracy(cfg, ckpt, desk_records)
    bundle = load_bundle(ckpt)
    ssims = [ssim(tryon_once(bundle, r, r), r.model_image) for r in desk_records]
    total = sum(seconds.values())
    ok = warp_drop >= 0.80 and accuracy > 0.95 and tryon_drop >= 0.60 and np.mean(ssims) > 0.85 and total <= 900
    detail = (f"warp L1 drop {warp_drop:.1%}, parse accuracy {accuracy:.1%}, try-on L1 drop {tryon_drop:.1%}, "
              f"SSIM {np.mean(ssims):.3f}, {total:.0f} s total "
              f"(warp {seconds['warp']:.0f}, parse {seconds['parse']:.0f}, try-on {seconds['tryon']:.0f})")
    assert acceptance(6, "desk-scale overfit", ok, detail)


# --- 7: ablation --------------------------------------------------------------

def test_c7_ablation(acceptance, ablation_run):
    result, seconds = ablation_run
    rows = {mode: result.reports[mode].rows.get("all") for mode in (m.value for m in ABLATION_MODES)
            if mode in result.reports}
    complete = len(rows) == 4 and all(
        r is not None and all(v is not None and math.isfinite(v) for v in (r.ssim, r.fid, r.kid, r.inception_score))
        for r in rows.values())
    ok = complete and seconds <= 45 * 60
    print(result.table())
    assert acceptance(7, "ablation harness", ok,
                      f"{len(rows)} modes x (SSIM, FID, KID, IS) {'complete' if complete else 'INCOMPLETE'}, "
                      f"{seconds:.0f} s")


# --- 8: protocol fidelity -----------------------------------------------------

def _manifest_root(root):
    for category in CATEGORIES:
        (root / category.value).mkdir(parents=True)
        train = [f"{category.value[:2]}{i:06d}" for i in range(DRESS_CODE_TRAIN[category])]
        test = [f"{category.value[:2]}t{i:06d}" for i in range(DRESS_CODE_TEST[category])]
        write_pairs(root, category, "train", train)
        write_pairs(root, category, "test", test)
    return root


def _protocol_checks(root):
    split = read_split(root)
    pairs = unpair(split.test_ids)
    test_of = {i: c for c, ids in split.test_ids.items() for i in ids}
    return {
        "train 48,392": split.total("train") == 48392,
        "test 5,400": split.total("test") == 5400,
        "1,800 per category": all(n == 1800 for n in split.counts("test").values()),
        "5,400 unpaired": len(pairs) == 5400,
        "fixed-point-free": all(m != g for m, g in pairs),
        "within category": all(test_of[m] == test_of[g] for m, g in pairs),
    }


def _multi_garment_probe(ckpt, records):
    bundle = load_bundle(ckpt)
    person = next(r for r in records if r.category == GarmentCategory.UPPER_BODY)
    upper = next(r for r in records if r.category == GarmentCategory.UPPER_BODY and r is not person)
    lower = next(r for r in records if r.category == GarmentCategory.LOWER_BODY)
    trace = {}
    multi_garment(bundle, person, upper, lower, trace)
    first, second = trace["passes"]
    rebuilt = build_agnostic(trace["intermediate"], GarmentCategory.LOWER_BODY, bundle.config.dilation_radius)
    return {
        "upper then lower": trace["order"] == [GarmentCategory.UPPER_BODY, GarmentCategory.LOWER_BODY],
        "pass-2 input is pass-1 image": np.array_equal(trace["intermediate"].model_image, first["image"]),
        "pass-2 agnostic from predicted parse": np.array_equal(second["masked_parse"].numpy(), rebuilt.parse)
        and np.array_equal(trace["intermediate"].parse, first["parse_pred"]),
    }


def test_c8_protocol_fidelity(acceptance, tmp_path, desk_run, desk_records):
    checks = _protocol_checks(_manifest_root(tmp_path / "dresscode"))
    checks.update(_multi_garment_probe(desk_run[1], desk_records))
    real = os.environ.get("DRESSCODE_ROOT")
    if real:
        checks.update({f"real root: {k}": v for k, v in _protocol_checks(real).items()})
    source = f"real root {real}" if real else "manifest-only root at full counts (DRESSCODE_ROOT unset)"
    failed = [k for k, v in checks.items() if not v]
    assert acceptance(8, "protocol fidelity", not failed,
                      f"{source}; {len(checks) - len(failed)}/{len(checks)} checks hold"
                      + (f", failing: {', '.join(failed)}" if failed else ""))


@pytest.mark.skipif(not os.environ.get("DRESSCODE_ROOT"), reason="DRESSCODE_ROOT not set")
def test_c8_real_dress_code_root():
    checks = _protocol_checks(os.environ["DRESSCODE_ROOT"])
    assert all(checks.values()), checks


# --- 9: determinism -----------------------------------------------------------

def test_c9_determinism(acceptance, desk_run, desk_records, ablation_run, tmp_path):
    _, ckpt, results, _ = desk_run
    ablation, _ = ablation_run
    # the ablation's shared stages and its psad generator are a second, independent seeded run
    second = {"warp": ablation.stage_results["warp"], "parse": ablation.stage_results["parse"],
              "tryon": ablation.stage_results["psad"]}
    worst = max(abs(results[s].final_losses[k] - second[s].final_losses[k])
                for s in results for k in results[s].final_losses)
    original = load_checkpoint(stage_path(ckpt, "tryon"), "tryon")
    back = load_checkpoint(save_checkpoint(original, tmp_path / "tryon.pt"), "tryon")
    bit_exact = all(torch.equal(v, back.weights[n][k]) for n in original.weights
                    for k, v in original.weights[n].items())
    bit_exact &= original.iteration == back.iteration and original.history == back.history
    before = tryon_once(load_bundle(ckpt), desk_records[0], desk_records[0])
    after = tryon_once(load_bundle(ckpt, tmp_path / "tryon.pt"), desk_records[0], desk_records[0])
    bit_exact &= np.array_equal(before, after)
    ok = worst <= 1e-6 and bit_exact
    assert acceptance(9, "determinism", ok,
                      f"max final-loss difference between two seeded runs {worst:.1e}, "
                      f"checkpoint round-trip (weights and forward) {'bit-exact' if bit_exact else 'NOT bit-exact'}")
