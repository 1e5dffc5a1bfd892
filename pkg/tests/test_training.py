import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from ccgan.core import ExperimentConfig, LossWeights, StainDomain
from ccgan.data import PatchLoader, load_manifest, sample_paired_batches
from ccgan.networks import with_condition
from ccgan.training import (
    TERM_NAMES,
    TrainingError,
    batch_tensors,
    discriminator_step,
    format_metrics_line,
    generator_step,
    init_state,
    learning_rate_at,
    parse_metrics_line,
    read_metrics,
    run_training,
    total_objective,
    train_step,
)

TINY = ExperimentConfig(
    patch_size=32,
    num_classes=3,
    generator_filters=8,
    discriminator_filters=8,
    residual_blocks=2,
    pho_resolution=16,
    total_iterations=6,
    checkpoint_every=3,
    seed=5,
)


def _batches(manifest, cfg, seed=0):
    rng = np.random.default_rng(seed)
    return sample_paired_batches(manifest, cfg.batch_size, rng, loader=PatchLoader(manifest))


def test_total_objective_closed_forms():
    w = LossWeights()
    assert total_objective({k: 0.0 for k in TERM_NAMES}, w) == 0.0
    assert total_objective({k: 1.0 for k in TERM_NAMES}, w) == 19.5
    only_cyc = LossWeights(lambda_cyc=10, delta_id=0, gamma_cls=0, alpha_ssim=0, beta_pho=0)
    parts = {k: 0.7 for k in TERM_NAMES} | {"cyc": 0.2, "gan_enc": 0.3, "gan_dec": 0.4}
    assert total_objective(parts, only_cyc) == pytest.approx(2.0 + 0.7, abs=1e-12)


def test_total_objective_coefficients_by_perturbation():
    w = LossWeights(lambda_cyc=3, delta_id=2, gamma_cls=0.25, alpha_ssim=0.75, beta_pho=1.5)
    coeff = {"gan_enc": 1, "gan_dec": 1, "cyc": 3, "id": 2, "class": 0.25, "clcyc": 0.25, "ssim": 0.75, "pho": 1.5}
    base = {k: 0.5 for k in TERM_NAMES}
    f0 = total_objective(base, w)
    for k in TERM_NAMES:
        assert total_objective(base | {k: 1.5}, w) - f0 == pytest.approx(coeff[k], abs=1e-12)


def test_total_objective_names_non_finite_term():
    with pytest.raises(TrainingError, match="'ssim'"):
        total_objective({k: 0.0 for k in TERM_NAMES} | {"ssim": math.nan}, LossWeights())
    with pytest.raises(KeyError):
        total_objective({"cyc": 1.0}, LossWeights())


def test_learning_rate_schedule():
    cfg = ExperimentConfig(total_iterations=100)
    assert learning_rate_at(cfg, 0) == learning_rate_at(cfg, 49) == 2e-4
    assert learning_rate_at(cfg, 75) == pytest.approx(1e-4)
    assert learning_rate_at(cfg, 100) == 0.0
    assert learning_rate_at(cfg.replace(decay_start=80), 90) == pytest.approx(1e-4)


def test_metrics_line_roundtrip():
    rec = {"iteration": 12, **{k: i / 7 for i, k in enumerate(TERM_NAMES)}, "total": 3.25}
    line = format_metrics_line(rec)
    assert line.startswith("12\tgan_enc=") and line.count("\t") == 9
    back = parse_metrics_line(line)
    assert list(back) == ["iteration", *TERM_NAMES, "total"]
    assert all(back[k] == pytest.approx(rec[k], rel=1e-8) for k in rec)


def test_train_step_records_and_isolation(small_fixture):
    m = load_manifest(small_fixture)
    state = init_state(TINY)
    xs, ys = _batches(m, TINY)
    gs = ("g_enc", "g_dec", "s_enc", "s_dec")
    ds = ("d_enc", "d_dec")
    d_before = state.bundle.fingerprint(ds)
    g_before = state.bundle.fingerprint(gs)
    out = generator_step(state, xs, ys)
    assert state.bundle.fingerprint(ds) == d_before and state.bundle.fingerprint(gs) != g_before
    g_mid = state.bundle.fingerprint(gs)
    discriminator_step(state, xs, ys, out.fake_y, out.fake_x)
    assert state.bundle.fingerprint(gs) == g_mid and state.bundle.fingerprint(ds) != d_before
    rec = train_step(state, xs, ys)
    assert rec["iteration"] == 1 and state.iteration == 1
    assert all(math.isfinite(rec[k]) for k in (*TERM_NAMES, "total", "d_enc", "d_dec"))


def test_discriminator_descends_on_fixed_batch(small_fixture):
    m = load_manifest(small_fixture)
    zero = LossWeights(lambda_cyc=0, delta_id=0, gamma_cls=0, alpha_ssim=0, beta_pho=0)
    cfg = TINY.replace(loss_weights=zero, learning_rate=1e-4, pool_capacity_per_class=0)
    state = init_state(cfg)
    xs, ys = _batches(m, cfg, seed=1)
    x, cx, _ = batch_tensors(xs)
    y, _, _ = batch_tensors(ys)
    b = state.bundle
    with torch.no_grad():
        fake_y = b.g_enc(with_condition(x, cx, 3))
        fake_x = b.g_dec(with_condition(y, cx, 3))

    def d_loss():
        with torch.no_grad():
            r = lambda d, real, fake: 0.5 * (((d(with_condition(real, cx, 3)) - 1) ** 2).mean() + (d(with_condition(fake, cx, 3)) ** 2).mean())
            return float(r(b.d_enc, y, fake_y) + r(b.d_dec, x, fake_x))

    before = d_loss()
    after_step = discriminator_step(state, xs, ys, fake_y, fake_x)
    assert after_step["d_enc"] + after_step["d_dec"] == pytest.approx(before, rel=1e-5)
    assert d_loss() <= before


class _IdentityGenerator(nn.Module):
    conditioned = True

    def forward(self, x):
        return x[:, :3]


def test_identity_generators_zero_cycle_and_identity(small_fixture):
    m = load_manifest(small_fixture)
    state = init_state(TINY)
    state.bundle.g_enc = _IdentityGenerator()
    state.bundle.g_dec = _IdentityGenerator()
    xs, _ = _batches(m, TINY)
    out = generator_step(state, xs, xs)
    assert out.parts["cyc"] == 0.0 and out.parts["id"] == 0.0


def test_zero_iterations_checkpoints_initial_weights(tmp_path, small_fixture):
    res = run_training(TINY.replace(total_iterations=0), load_manifest(small_fixture), tmp_path)
    assert res.checkpoint.exists() and res.checkpoint.name == "iter_0000000.pt"
    assert read_metrics(res.metrics_log) == [] and (tmp_path / "config.yaml").exists()


def test_config_must_match_manifest(tmp_path, small_fixture):
    m = load_manifest(small_fixture)
    with pytest.raises(ValueError, match="num_classes"):
        run_training(TINY.replace(num_classes=4), m, tmp_path)
    with pytest.raises(ValueError, match="patch"):
        run_training(TINY.replace(patch_size=64), m, tmp_path)


def test_resume_without_checkpoint(tmp_path, small_fixture):
    with pytest.raises(FileNotFoundError, match="no checkpoint"):
        run_training(TINY, load_manifest(small_fixture), tmp_path, resume=True)


def test_short_runs_are_reproducible_and_resumable(tmp_path, small_fixture):
    m = load_manifest(small_fixture)
    a = run_training(TINY, m, tmp_path / "a")
    b = run_training(TINY, m, tmp_path / "b")
    assert a.metrics_log.read_text() == b.metrics_log.read_text()
    assert len(read_metrics(a.metrics_log)) == 6
    run_training(TINY, m, tmp_path / "c", stop_after=3)
    c = run_training(TINY, m, tmp_path / "c", resume=True)
    full, resumed = read_metrics(a.metrics_log), read_metrics(c.metrics_log)
    assert [r["iteration"] for r in resumed] == list(range(1, 7))
    for r1, r2 in zip(full, resumed):
        for k in (*TERM_NAMES, "total"):
            assert r2[k] == pytest.approx(r1[k], abs=1e-5)


def test_condition_changes_generator_output_after_training(tmp_path, small_fixture):
    m = load_manifest(small_fixture)
    res = run_training(TINY.replace(total_iterations=3), m, tmp_path)
    g = res.state.bundle.g_enc.eval()
    x = torch.rand(1, 3, 32, 32) * 2 - 1
    with torch.no_grad():
        zeroed = g(torch.cat([x, torch.zeros(1, 3, 32, 32)], dim=1))
        onehot = g(with_condition(x, torch.tensor([1]), 3))
    assert float((zeroed - onehot).abs().mean()) > 1e-6


def test_laplacian_cache_directory_is_used(tmp_path, small_fixture):
    m = load_manifest(small_fixture)
    run_training(TINY.replace(total_iterations=2), m, tmp_path / "run", cache_dir=tmp_path / "cache")
    assert (tmp_path / "cache" / "index.json").exists()
    assert len(list((tmp_path / "cache").glob("*.lap"))) >= 2
