"""Acceptance suite: desk-scale behavioral checks with pinned tolerances.

Each criterion prints one PASS line so a log scrape can confirm coverage.
The heavy criteria (6 and 7) train small models from scratch and are the
slowest tests in the repository; their runtime limits are part of the
contract and asserted explicitly.
"""

import contextlib
import io
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from syncast.backbone import Backbone, ModelConfig, crop_to_region, forward_state, rollout
from syncast.cli import main as cli_main
from syncast.diffusion import (
    DiffusionConfig,
    build_climatology,
    build_conditioning,
    climatology_gate,
    denoise_ensemble_mean,
    train_dee,
)
from syncast.grid import (
    AtmosphericState,
    GridSpec,
    NormalizationStats,
    RegionSpec,
    VariableCatalog,
    crop_region,
    denormalize_state,
    normalize_state,
    pm_log_forward,
    pm_log_inverse,
)
from syncast.lora import attach_lora, base_params_hash, lora_parameters, merge_lora
from syncast.synthetic import SyntheticConfig, gen_synthetic_sequence, make_training_pairs
from syncast.training import TrainConfig, finetune_lora, grad_check, train_backbone
from syncast.verification import (
    HIGH_QUANTILES,
    QUARTILES,
    ContingencyTable,
    contingency,
    evaluate,
    lat_weighted_rmse,
    rqe,
    sedi,
    sedi_at_percentile,
)
from conftest import random_state


# --- naive reference implementations, kept deliberately independent -----------


def rmse_oracle(pred, obs, grid):
    num, den = 0.0, 0.0
    for i in range(grid.n_lat):
        w = math.cos(math.radians(grid.lat_deg[i]))
        for j in range(grid.n_lon):
            num += w * (float(pred[i, j]) - float(obs[i, j])) ** 2
            den += w
    return math.sqrt(num / den)


def rqe_oracle(pred, obs, quantiles):
    acc = 0.0
    for q in quantiles:
        qp = float(np.quantile(pred.ravel(), q))
        qo = float(np.quantile(obs.ravel(), q))
        acc += (qp - qo) / qo
    return acc / len(quantiles)


def sedi_oracle(a, b, c, d, eps=1e-9):
    hr = min(max(a / (a + c), eps), 1 - eps)
    fr = min(max(b / (b + d), eps), 1 - eps)
    ln = math.log
    return ((ln(fr) - ln(hr) - ln(1 - fr) + ln(1 - hr))
            / (ln(fr) + ln(hr) + ln(1 - fr) + ln(1 - hr)))


def test_criterion_01_metric_oracle_equivalence(grid8):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    for _ in range(200):
        pred = np.abs(rng.normal(size=(8, 8))) + 0.1
        obs = np.abs(rng.normal(size=(8, 8))) + 0.1
        assert abs(lat_weighted_rmse(pred, obs, grid8)
                   - rmse_oracle(pred, obs, grid8)) <= 1e-10
        for qs in (HIGH_QUANTILES, QUARTILES):
            assert abs(rqe(pred, obs, quantiles=qs)
                       - rqe_oracle(pred, obs, qs)) <= 1e-10
        thr = float(np.median(obs))
        tab = contingency(pred, obs, thr)
        brute = [0, 0, 0, 0]
        for p, o in zip(pred.ravel(), obs.ravel()):
            brute[0 if (p > thr and o > thr) else
                  1 if (p > thr) else
                  2 if (o > thr) else 3] += 1
        assert (tab.hits, tab.false_alarms,
                tab.misses, tab.correct_negatives) == tuple(brute)
        assert abs(sedi(tab) - sedi_oracle(*brute)) <= 1e-10
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    print(f"ACCEPTANCE 1 PASS: metric oracles agree within 1e-10 "
          f"on 200 fields in {elapsed:.1f}s")


def test_criterion_02_sedi_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    for _ in range(1000):
        a, b, c, d = rng.integers(1, 10_000, size=4)
        fwd = sedi(ContingencyTable(int(a), int(b), int(c), int(d)))
        rev = sedi(ContingencyTable(int(b), int(a), int(d), int(c)))
        assert fwd == pytest.approx(-rev, abs=1e-12)
    assert sedi(ContingencyTable(500, 0, 0, 500)) >= 0.99
    assert sedi(ContingencyTable(30, 30, 70, 70)) == 0.0
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    print(f"ACCEPTANCE 2 PASS: SEDI antisymmetry on 1000 tables, perfect "
          f">= 0.99, H=F -> 0, in {elapsed:.1f}s")


def test_criterion_03_pm_transform():
    for x, y in ((1e-11, 0.0), (1e-9, 0.5), (1e-7, 1.0)):
        assert abs(pm_log_forward(x) - y) <= 1e-12
    x = np.logspace(-11, -5, 4001)
    back = pm_log_inverse(pm_log_forward(x))
    assert np.max(np.abs(back - x) / x) <= 1e-9
    print("ACCEPTANCE 3 PASS: transform anchors exact to 1e-12, "
          "round trip rel err <= 1e-9 on [1e-11, 1e-5]")


def test_criterion_04_gradient_check(grid8):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    model = Backbone(ModelConfig(embed_dim=8, encoder_depth=1,
                                 decoder_depth=1, heads=2, n_levels=2),
                     8, 8).double()
    pairs = [(random_state(grid8, seed=0), random_state(grid8, seed=1))]
    err = grad_check(model, pairs, TrainConfig(), eps=1e-5)
    elapsed = time.perf_counter() - t0
    assert err <= 1e-4
    assert elapsed < 120.0
    print(f"ACCEPTANCE 4 PASS: analytic vs finite-difference gradients, "
          f"max rel err {err:.2e} <= 1e-4 in {elapsed:.0f}s")


def test_criterion_05_lora_contracts(grid8):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    model = Backbone(ModelConfig(embed_dim=8, encoder_depth=1,
                                 decoder_depth=1, heads=2, n_levels=2), 8, 8)
    s = random_state(grid8)
    before = forward_state(model, s)
    attach_lora(model, rank=4, alpha=8.0, dropout=0.0)
    after = forward_state(model, s)
    assert np.max(np.abs(after.surface - before.surface)) <= 1e-6
    assert np.max(np.abs(after.upper - before.upper)) <= 1e-6

    base_hash = base_params_hash(model)
    pairs = [(random_state(grid8, seed=k), random_state(grid8, seed=20 + k))
             for k in range(2)]
    finetune_lora(model, pairs, TrainConfig(learning_rate=1e-3, epochs=3,
                                            batch_size=2, seed=0))
    assert base_params_hash(model) == base_hash

    adapted = forward_state(model, s)
    merged = forward_state(merge_lora(model), s)
    rel = max(np.abs(merged.surface - adapted.surface).max()
              / max(np.abs(adapted.surface).max(), 1e-12),
              np.abs(merged.upper - adapted.upper).max()
              / max(np.abs(adapted.upper).max(), 1e-12))
    assert rel <= 1e-5
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"ACCEPTANCE 5 PASS: zero-init <= 1e-6, frozen base bit-identical, "
          f"merge rel err {rel:.2e} <= 1e-5 in {elapsed:.0f}s")


def _synthetic_pairs(grid, seed, n_steps=9):
    cat = VariableCatalog(pressure_levels_hpa=(1000.0, 850.0, 500.0, 200.0))
    syn = SyntheticConfig(seed=seed, grid=grid, n_steps=n_steps, step_hours=1,
                          catalog=cat).validate()
    states = gen_synthetic_sequence(syn)
    stats = NormalizationStats.fit(states)
    norm = [normalize_state(s, stats) for s in states]
    return make_training_pairs(norm, 1), states, stats


def test_criterion_06_overfit_viability():
    t0 = time.perf_counter()
    # part 1: full-model overfit on 8 pairs at 16x16, Z=4
    pairs, _, _ = _synthetic_pairs(GridSpec.regular(16, 16, 1.0), seed=7)
    assert len(pairs) == 8
    torch.manual_seed(0)
    model = Backbone(ModelConfig(embed_dim=32, encoder_depth=1,
                                 decoder_depth=1, heads=2, n_levels=4), 16, 16)
    hist = train_backbone(pairs, model,
                          TrainConfig(learning_rate=1e-3, epochs=250,
                                      batch_size=4, seed=0), max_steps=500)
    overfit_red = 1.0 - hist[-1] / hist[0]
    assert overfit_red >= 0.95

    # part 2: regional LoRA fine-tune against a regional bias in the targets
    grid = GridSpec.regular(32, 32, 1.0)
    pairs, _, _ = _synthetic_pairs(grid, seed=7)
    torch.manual_seed(0)
    base = Backbone(ModelConfig(embed_dim=128, encoder_depth=1,
                                decoder_depth=1, heads=4, n_levels=4), 32, 32)
    train_backbone(pairs, base, TrainConfig(learning_rate=1e-3, epochs=40,
                                            batch_size=4, seed=0))
    region = RegionSpec.from_bounds(grid, grid.lat_deg[16], grid.lat_deg[31],
                                    grid.lon_deg[0], grid.lon_deg[15])

    def shift(s):
        surf = s.surface.copy()
        surf[:, :, 3] += 4.0
        return AtmosphericState(s.upper, surf, s.timestamp, s.grid)

    rpairs = [(crop_region(a, region), shift(crop_region(b, region)))
              for a, b in pairs]
    reg = crop_to_region(base, region)
    torch.manual_seed(1)
    attach_lora(reg, rank=8, alpha=16.0, dropout=0.0)
    base_hash = base_params_hash(reg)
    h2 = finetune_lora(reg, rpairs,
                       TrainConfig(learning_rate=3e-3, epochs=500,
                                   batch_size=4, seed=1), max_steps=1000)
    lora_red = 1.0 - h2[-1] / h2[0]
    assert base_params_hash(reg) == base_hash
    assert lora_red >= 0.90
    elapsed = time.perf_counter() - t0
    assert elapsed < 300.0
    print(f"ACCEPTANCE 6 PASS: overfit reduction {overfit_red:.1%} >= 95%, "
          f"regional LoRA reduction {lora_red:.1%} >= 90%, base frozen, "
          f"in {elapsed:.0f}s")


def test_criterion_07_dee_direction():
    t0 = time.perf_counter()
    wins = 0
    rmse_ratios = []
    for seed in range(4):
        grid = GridSpec.regular(16, 16, 1.0)
        cat = VariableCatalog(pressure_levels_hpa=(1000.0, 500.0))
        syn = SyntheticConfig(seed=seed + 11, grid=grid, n_steps=40,
                              step_hours=1, catalog=cat).validate()
        states = gen_synthetic_sequence(syn)
        stats = NormalizationStats.fit(states)
        norm = [normalize_state(s, stats) for s in states]
        pairs = make_training_pairs(norm, 1)
        torch.manual_seed(seed)
        model = Backbone(ModelConfig(embed_dim=32, encoder_depth=1,
                                     decoder_depth=1, heads=2, n_levels=2),
                         16, 16)
        train_backbone(pairs, model,
                       TrainConfig(learning_rate=1e-3, epochs=25,
                                   batch_size=4, seed=seed))
        preds = [forward_state(model, x) for x, _ in pairs]
        dee_pairs = [(build_conditioning(p), y.surface[:, :, 4:])
                     for p, (_, y) in zip(preds, pairs)]
        dcfg = DiffusionConfig(n_train_steps=8, beta_start=0.05, beta_end=0.95,
                               n_sample_steps=8, learning_rate=2e-3,
                               epochs=2000, batch_size=64, hidden=32,
                               seed=seed).validate()
        den, _ = train_dee(dee_pairs, dcfg, 2)
        clim = build_climatology(states, 24, 4)

        det_all, gat_all, tru_all = [], [], []
        for p, (_, y) in zip(preds, pairs):
            det_pm = denormalize_state(p, stats).surface[:, :, 4:] \
                .astype(np.float64)
            ref_norm = denoise_ensemble_mean(build_conditioning(p), den, dcfg,
                                             seed=seed, n_members=4)
            ref_pm = pm_log_inverse(np.clip(ref_norm, 0.0, 1.5),
                                    stats.pm_floor, stats.pm_span)
            gat_pm, _ = climatology_gate(det_pm, ref_pm, clim, p.timestamp,
                                         delta=0.5)
            tru_pm = denormalize_state(y, stats).surface[:, :, 4:] \
                .astype(np.float64)
            det_all.append(det_pm)
            gat_all.append(gat_pm)
            tru_all.append(tru_pm)
        det, gat, tru = map(np.stack, (det_all, gat_all, tru_all))

        c = 1  # pm2p5
        rmse_det = math.sqrt(np.mean(
            [lat_weighted_rmse(det[t, :, :, c], tru[t, :, :, c], grid) ** 2
             for t in range(len(det))]))
        rmse_gat = math.sqrt(np.mean(
            [lat_weighted_rmse(gat[t, :, :, c], tru[t, :, :, c], grid) ** 2
             for t in range(len(det))]))
        rmse_ratios.append(rmse_gat / rmse_det)
        rq_det = rqe(det[:, :, :, c].ravel(), tru[:, :, :, c].ravel(),
                     quantiles=(0.99,))
        rq_gat = rqe(gat[:, :, :, c].ravel(), tru[:, :, :, c].ravel(),
                     quantiles=(0.99,))
        sd_det = sedi_at_percentile(det[:, :, :, c].ravel(),
                                    tru[:, :, :, c].ravel(), 90.0)
        sd_gat = sedi_at_percentile(gat[:, :, :, c].ravel(),
                                    tru[:, :, :, c].ravel(), 90.0)
        if abs(rq_gat) < abs(rq_det) and sd_gat > sd_det:
            wins += 1

    elapsed = time.perf_counter() - t0
    assert max(rmse_ratios) <= 1.02
    assert wins >= 3
    assert elapsed < 900.0
    print(f"ACCEPTANCE 7 PASS: gated DEE never worsens RMSE beyond 2% "
          f"(worst ratio {max(rmse_ratios):.3f}) and improves |RQE| and "
          f"SEDI@90 on {wins}/4 seeds in {elapsed:.0f}s")


def test_criterion_08_gate_exactness(grid8):
    states = [random_state(grid8, seed=k, timestamp=k) for k in range(48)]
    clim = build_climatology(states, 24, 4)
    pred = np.zeros((8, 8, 3))
    refined = np.ones((8, 8, 3))
    final, mask = climatology_gate(pred, refined, clim, 0, delta=1.0)
    assert not mask.any()
    assert np.array_equal(final, pred)

    rng = np.random.default_rng(3)
    pred = np.abs(rng.normal(size=(8, 8, 3))) * 1e-8
    counts = []
    for d in (0.0, 0.5, 1.0, 2.0, np.inf):
        _, mask = climatology_gate(pred, refined, clim, 0, delta=d)
        counts.append(int(mask.sum()))
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[-1] == 0
    print(f"ACCEPTANCE 8 PASS: quiescent gate is bit-equal passthrough, "
          f"refined-pixel counts {counts} monotone over delta")


def test_criterion_09_harmonization_exactness(grid8):
    from syncast.harmonize import (
        downsample_to_resolution,
        regrid_bilinear,
        temporal_upsample_linear,
    )
    from syncast.grid import lat_weights
    from syncast.harmonize import block_lat_weights

    src = GridSpec.regular(16, 24, 0.5)
    dst = GridSpec.regular(8, 12, 1.0)
    affine = 2.0 - 0.5 * src.lat_deg[:, None] + 3.0 * src.lon_deg[None, :]
    affine_dst = 2.0 - 0.5 * dst.lat_deg[:, None] + 3.0 * dst.lon_deg[None, :]
    out = regrid_bilinear(affine, src, dst)
    assert np.max(np.abs(out - affine_dst)) <= 1e-6

    f = np.random.default_rng(0).normal(size=(16, 24))
    coarse = downsample_to_resolution(f, src, dst)
    ws, wd = lat_weights(src), block_lat_weights(src, dst)
    fine_mean = (f * ws[:, None]).sum() / (ws.sum() * 24)
    coarse_mean = (coarse * wd[:, None]).sum() / (wd.sum() * 12)
    assert abs(fine_mean - coarse_mean) <= 1e-6

    seq = [random_state(grid8, seed=k, timestamp=6 * k) for k in range(3)]
    up = temporal_upsample_linear(seq, 3)
    for k, orig in enumerate(seq):
        assert up[3 * k] is orig
    print("ACCEPTANCE 9 PASS: bilinear affine <= 1e-6, block mean conserved "
          "<= 1e-6, temporal endpoints bit-exact")


def _cli(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli_main(argv)
    assert code == 0, f"command {argv} failed with exit code {code}"
    return buf.getvalue().strip()


def test_criterion_10_reproducibility(tmp_path):
    cfg = {
        "seed": 1,
        "out_dir": str(tmp_path / "runs"),
        "synthetic": {"grid": {"n_lat": 16, "n_lon": 32}, "n_steps": 40,
                      "n_levels": 2, "n_sources": 3},
        "model": {"embed_dim": 16, "encoder_depth": 1, "decoder_depth": 1,
                  "heads": 2},
        "train": {"epochs": 1, "max_steps": 3},
        "diffusion": {"epochs": 1, "max_steps": 3, "hidden": 8,
                      "n_sample_steps": 5},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    base = ["--config", str(cfg_path)]

    data_dir = _cli(base + ["gen-data"])
    backbone = _cli(base + ["train", "--data-dir", data_dir])
    denoiser = _cli(base + ["train-dee", "--data-dir", data_dir,
                            "--checkpoint", backbone])
    climatology = str(Path(denoiser).parent / "climatology.scg")
    test_scg = str(Path(data_dir) / "test.scg")
    adapters = _cli(base + ["finetune", "--data-dir", data_dir,
                            "--checkpoint", backbone])
    forecast = _cli(base + ["rollout", "--checkpoint", backbone,
                            "--input", test_scg, "--steps", "3"])
    _cli(base + ["infer", "--checkpoint", backbone, "--input", test_scg,
                 "--adapters", adapters, "--dee", "on",
                 "--dee-checkpoint", denoiser,
                 "--climatology", climatology])
    _cli(base + ["evaluate", "--forecast", forecast, "--truth", test_scg])
    _cli(base + ["plot", "--input", forecast, "--variable", "pm2p5"])

    commands = [
        base + ["gen-data"],
        base + ["train", "--data-dir", data_dir],
        base + ["train-dee", "--data-dir", data_dir, "--checkpoint", backbone],
        base + ["finetune", "--data-dir", data_dir, "--checkpoint", backbone],
        base + ["rollout", "--checkpoint", backbone, "--input", test_scg,
                "--steps", "3"],
        base + ["infer", "--checkpoint", backbone, "--input", test_scg,
                "--adapters", adapters, "--dee", "on",
                "--dee-checkpoint", denoiser, "--climatology", climatology],
        base + ["evaluate", "--forecast", forecast, "--truth", test_scg],
        base + ["plot", "--input", forecast, "--variable", "pm2p5"],
    ]
    snapshot = {p: p.read_bytes()
                for p in sorted(Path(cfg["out_dir"]).rglob("*"))
                if p.is_file()}
    assert snapshot
    for argv in commands:
        _cli(argv)
    changed = [str(p) for p, blob in snapshot.items()
               if p.read_bytes() != blob]
    assert not changed, f"artifacts changed on rerun: {changed}"
    print(f"ACCEPTANCE 10 PASS: {len(snapshot)} artifacts byte-identical "
          f"after rerunning all {len(commands)} commands")


def test_criterion_11_rollout_consistency(grid8):
    torch.manual_seed(0)
    model = Backbone(ModelConfig(embed_dim=8, encoder_depth=1,
                                 decoder_depth=1, heads=2, n_levels=2), 8, 8)
    s = random_state(grid8)
    one = rollout(model, s, 1)[0]
    fwd = forward_state(model, s)
    assert np.array_equal(one.upper, fwd.upper)
    assert np.array_equal(one.surface, fwd.surface)

    truth = [random_state(grid8, seed=30 + k, timestamp=k + 1)
             for k in range(6)]
    preds = rollout(model, s, 6)
    forecasts = {k + 1: [preds[k]] for k in range(6)}

    def build_report():
        return evaluate(forecasts, truth, grid8,
                        sedi_percentiles=(90.0,), rqe_quantiles=(0.99,))

    r1, r2 = build_report(), build_report()
    assert r1.rows == r2.rows
    leads = sorted({row["lead_hours"] for row in r1.rows})
    assert leads == [1, 2, 3, 4, 5, 6]
    for lead in leads:
        assert r1.value("pm2p5", lead, "lat_rmse") >= 0.0
    print("ACCEPTANCE 11 PASS: rollout(x, 1) bit-equals forward(x); "
          "deterministic lead 1-6 RMSE report produced")
