"""Acceptance criteria 1-10. Each test records one PASS/FAIL line (see the terminal summary).

Run alone with ``pytest tests/test_acceptance.py -v`` (about 6-8 minutes on one core).
"""

import sys
import time

import numpy as np
import pytest

from nmprune import autodiff as ad
from nmprune.cli import main as cli_main
from nmprune.coding import decode_masks, encode_masks, payload_bits
from nmprune.data import Corpus, batch_iterator, regression_data, sequential_batches, synthetic_text
from nmprune.gumbel import MaskDistribution, differentiable_mask, soft_index
from nmprune.masks import LayerMask, enumerate_candidates
from nmprune.models import ToyModelSpec, build_model, fit_least_squares, pretrain_dense
from nmprune.pruners import prune_model
from nmprune.sparse import compress, decompress, dense_matmul, spmm
from nmprune.trainer import (TrainConfig, converged, evaluate_loss, init_logits, remaining_weight_norm, train_masks,
                             training_objective, transfer_masks)

from conftest import LM_SPEC, numeric_grad, record_criterion

S24 = enumerate_candidates(2, 4)


def majority(flags) -> bool:
    return sum(bool(f) for f in flags) >= 2


# 1 ----------------------------------------------------------------------------


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    model = build_model(ToyModelSpec(kind="transformer_lm", num_layers=2), seed=0, dtype=np.float64)
    cfg = TrainConfig(logits_init_std=0.01, seed=0)
    dists = init_logits(model, cfg)
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, 256, (2, 33))
    batch = (tokens[:, :-1], tokens[:, 1:])
    noise = {d.tensor_name: rng.gumbel(size=d.logits.shape) for d in dists}
    tau, kappa, lam = 4.0, 100.0, 1e-5

    def objective():
        obj, _, _ = training_objective(model, dists, batch, tau, kappa, lam, noise)
        return obj

    ad.backward(objective())
    worst = 0.0
    for d in dists:
        analytic = d.logits.grad.reshape(-1)
        # a few random coordinates plus the largest-gradient one per tensor
        pick = list(rng.choice(analytic.size, 4, replace=False)) + [int(np.abs(analytic).argmax())]
        d.logits.requires_grad = False
        num = numeric_grad(lambda: objective().item(), d.logits.data, h=1e-5, index=pick).reshape(-1)
        d.logits.requires_grad = True
        err = np.abs(analytic[pick] - num[pick]).max() / max(np.abs(num[pick]).max(), 1e-12)
        worst = max(worst, float(err))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 120
    record_criterion(1, ok, f"max rel err {worst:.2e} over {len(dists)} tensors (<= 1e-4), {elapsed:.1f}s (< 120s)")
    assert ok


# 2 ----------------------------------------------------------------------------


def test_criterion_2_gumbel_mask_algebra():
    rng = np.random.default_rng(2)
    n = 10_000
    logits = rng.normal(0, 0.05, (n, 6))
    noise = rng.gumbel(size=(n, 6))
    taus = rng.uniform(0.05, 4.0, (n, 1))
    kappas = rng.uniform(1.0, 500.0, (n, 1))
    y = np.stack([soft_index(logits[i], noise[i], taus[i, 0], kappas[i, 0]).data for i in range(0, n, 10)])
    sum_err = float(np.abs(y.sum(-1) - 1).max())
    shift = rng.normal(0, 50, (n, 1))
    y2 = np.stack([soft_index(logits[i] + shift[i], noise[i], taus[i, 0], kappas[i, 0]).data for i in range(0, n, 10)])
    shift_err = float(np.abs(y - y2).max())

    pts = rng.dirichlet(np.ones(6), size=n)
    mask_err = float(np.abs(differentiable_mask(pts, S24).data.sum(-1) - 2).max())

    grid = np.geomspace(4.0, 0.05, 25)
    mono = True
    for i in range(0, n, 10):
        maxes = [soft_index(logits[i], noise[i], t, 100.0).data.max() for t in grid]
        mono &= all(b >= a for a, b in zip(maxes, maxes[1:]))
    ok = sum_err <= 1e-12 and shift_err <= 1e-12 and mask_err <= 1e-12 and mono
    record_criterion(2, ok, f"sum err {sum_err:.1e}, shift err {shift_err:.1e}, mask-sum err {mask_err:.1e} "
                            f"on {n} simplex points, tau-monotone {mono}")
    assert ok


# 3 ----------------------------------------------------------------------------


def _exhaustive_optimum(model, x, y) -> float:
    """Loss of every one of the 6^8 masks of a 4x8 map; MSE splits exactly into per-row sums."""
    w = model.params["linear.weight"]
    s = S24.masks.astype(np.float64)
    pair = np.array([np.concatenate([s[a], s[b]]) for a in range(6) for b in range(6)])  # (36, 8)
    row_sse = [(((x @ (w[r] * pair).T) - y[:, [r]]) ** 2).sum(0) for r in range(4)]  # 4 x (36,)
    total = (row_sse[0][:, None, None, None] + row_sse[1][None, :, None, None]
             + row_sse[2][None, None, :, None] + row_sse[3][None, None, None, :])
    assert total.size == 6 ** 8
    return float(total.min() / y.size)


def test_criterion_3_brute_force_oracle():
    t0 = time.perf_counter()
    ratios = []
    for seed in range(3):
        x, y = regression_data(8, 4, 256, seed=seed)
        model = fit_least_squares(build_model(ToyModelSpec(kind="linear"), seed=seed, dtype=np.float64), x, y)
        opt = _exhaustive_optimum(model, x, y)
        masks, _, _ = train_masks(model, [(x, y)], TrainConfig(steps=2000, seed=seed))
        ratios.append(evaluate_loss(model, masks, [(x, y)]) / opt)
    elapsed = time.perf_counter() - t0
    ok = majority(r <= 1.05 for r in ratios) and elapsed < 600
    record_criterion(3, ok, "learned/optimal loss " + ", ".join(f"{r:.4f}" for r in ratios)
                     + f" (<= 1.05 on 2 of 3), {elapsed:.1f}s")
    assert ok


# 4 ----------------------------------------------------------------------------


def test_criterion_4_quality_ordering(lm_model, lm_train, lm_val):
    mag = prune_model(lm_model, "magnitude")
    mag_loss = evaluate_loss(lm_model, mag, lm_val)
    rows, beats_mag, prior_wins = [], [], []
    for seed in range(3):
        cfg = TrainConfig(steps=1000, seed=seed, prior_strength=3.0)
        with_prior, _, _ = train_masks(lm_model, lm_train(seed + 1), cfg, prior=mag)
        no_prior, _, _ = train_masks(lm_model, lm_train(seed + 1), cfg)
        lp, ln = evaluate_loss(lm_model, with_prior, lm_val), evaluate_loss(lm_model, no_prior, lm_val)
        beats_mag.append(lp < mag_loss)
        prior_wins.append(lp <= ln)
        rows.append(f"seed {seed}: prior {lp:.4f} no-prior {ln:.4f}")
    ok = majority(beats_mag) and majority(prior_wins)
    record_criterion(4, ok, f"magnitude {mag_loss:.4f}; " + "; ".join(rows))
    assert ok


# 5 ----------------------------------------------------------------------------


def test_criterion_5_regularization_effect(lm_model, lm_train):
    grad_up, norm_up, rows = [], [], []
    for seed in range(3):
        res = {}
        for lam in (0.0, 1e-5):
            masks, met, _ = train_masks(lm_model, lm_train(seed + 10), TrainConfig(steps=500, seed=seed, lambda_reg=lam))
            res[lam] = (float(met.column("grad_norm")[:500].mean()), remaining_weight_norm(lm_model, masks))
        grad_up.append(res[1e-5][0] > res[0.0][0])
        norm_up.append(res[1e-5][1] > res[0.0][1])
        rows.append(f"seed {seed}: grad {res[0.0][0]:.4g}->{res[1e-5][0]:.4g}, "
                    f"||W*M|| {res[0.0][1]:.6g}->{res[1e-5][1]:.6g}")
    ok = majority(grad_up) and majority(norm_up)
    record_criterion(5, ok, "; ".join(rows))
    assert ok


# 6 ----------------------------------------------------------------------------


def test_criterion_6_convergence_dynamics(lm_model, lm_train):
    runs = {}
    for name, kw in [("default", {}), ("kappa=1e5", dict(kappa_start=1e5, kappa_end=1e5)),
                     ("kappa=1", dict(kappa_start=1.0, kappa_end=1.0))]:
        _, met, _ = train_masks(lm_model, lm_train(3), TrainConfig(steps=1000, seed=0, **kw))
        runs[name] = met
    first, last = runs["default"].decile_means()
    default_ok = last <= first and converged(runs["default"])
    frozen_first, _ = runs["kappa=1e5"].decile_means()
    frozen_ok = frozen_first <= 0.01
    noisy_first, noisy_last = runs["kappa=1"].decile_means()
    noisy_ok = not converged(runs["kappa=1"])
    ok = default_ok and frozen_ok and noisy_ok
    record_criterion(6, ok, f"default {first:.4f}->{last:.2e} converged={default_ok}; "
                            f"kappa=1e5 first-decile diff {frozen_first:.1e} (<= 0.01); "
                            f"kappa=1 {noisy_first:.4f}->{noisy_last:.4f} converged={not noisy_ok}")
    assert ok


# 7 ----------------------------------------------------------------------------


def test_criterion_7_storage():
    rng = np.random.default_rng(7)
    shapes = [(512, 512), (512, 1024), (256, 1024), (256, 128)]
    masks = [LayerMask(f"t{i}", r, c, rng.integers(0, 6, (r, c // 4))) for i, (r, c) in enumerate(shapes)]
    data = encode_masks(masks)
    bits, params = payload_bits(data)
    bpp = bits / params
    exact = decode_masks(data) == masks
    ok = params >= 1e5 and abs(bpp - 0.6462) <= 0.01 * 0.6462 and exact
    record_criterion(7, ok, f"{bpp:.5f} bits/param over {params} params (0.6462 +- 1%), round trip exact={exact}")
    assert ok


# 8 ----------------------------------------------------------------------------


def test_criterion_8_kernel_equivalence():
    rng = np.random.default_rng(8)
    size = 2048
    errs = {}
    meta_ok = values_ok = True
    for dtype, tol in ((np.float64, 1e-12), (np.float32, 1e-4)):
        w = rng.standard_normal((size, size)).astype(dtype)
        lm = LayerMask("w", size, size, rng.integers(0, 6, (size, size // 4)))
        x = rng.standard_normal((size, 64)).astype(dtype)
        s = compress(w, lm)
        wm = (w * lm.to_dense(dtype))
        ref = wm.astype(np.float64) @ x.astype(np.float64)
        out = spmm(s, x)
        errs[np.dtype(dtype).name] = (float(np.abs(out - ref).max()), tol)
        errs[np.dtype(dtype).name + " vs dense kernel"] = (float(np.abs(out - dense_matmul(wm, x)).max()), tol)
        meta_ok &= s.meta_bytes() * 8 == size * size
        values_ok &= s.value_bytes() * 2 == w.nbytes and np.array_equal(decompress(s), wm)
    ok = all(e <= t for e, t in errs.values()) and meta_ok and values_ok
    record_criterion(8, ok, ", ".join(f"{k} max err {e:.1e} (<= {t:g})" for k, (e, t) in errs.items())
                     + f"; meta 1 bit/param={meta_ok}; values 50%={values_ok}")
    assert ok


# 9 ----------------------------------------------------------------------------


def test_criterion_9_transfer():
    a = synthetic_text(150_000, seed=0, domain="A")
    b = synthetic_text(150_000, seed=0, domain="B")
    mixed = b"".join(a[i:i + 2000] + b[i:i + 2000] for i in range(0, 150_000, 2000))
    cm, ca, cb = Corpus.from_bytes(mixed), Corpus.from_bytes(a), Corpus.from_bytes(b)
    model = pretrain_dense(build_model(LM_SPEC, seed=0), batch_iterator(cm.train, 16, 32, 0), 2000)
    val_b = sequential_batches(cb.val, 32, 32, 20)
    base, _, _ = train_masks(model, batch_iterator(ca.train, 16, 32, 5), TrainConfig(steps=500, seed=0))
    rows, wins = [], []
    for seed in range(3):
        cfg = TrainConfig(steps=300, seed=seed)
        tm, _, _ = transfer_masks(model, base, batch_iterator(cb.train, 16, 32, seed + 20), cfg)
        sm, _, _ = train_masks(model, batch_iterator(cb.train, 16, 32, seed + 20), cfg)
        lt, ls = evaluate_loss(model, tm, val_b), evaluate_loss(model, sm, val_b)
        wins.append(lt <= ls)
        rows.append(f"seed {seed}: transfer {lt:.4f} scratch {ls:.4f}")
    ok = majority(wins)
    record_criterion(9, ok, "; ".join(rows))
    assert ok


# 10 ---------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("embed_dim=16\ncontext_length=16\ncorpus_bytes=40000\npretrain_steps=100\neval_batches=2\n"
                   "steps=40\nseed=11\nprior=magnitude\n")
    assert cli_main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "pt")]) == 0
    model = str(tmp_path / "pt" / "model.nmmd")
    codes = [cli_main(["learn", "--config", str(cfg), "--model", model, "--out", str(tmp_path / f"run{i}")])
             for i in (1, 2)]
    a = (tmp_path / "run1" / "masks.nmmk").read_bytes()
    b = (tmp_path / "run2" / "masks.nmmk").read_bytes()
    ok = codes == [0, 0] and a == b
    record_criterion(10, ok, f"exit codes {codes}, archives {len(a)} bytes, byte-identical={a == b}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
