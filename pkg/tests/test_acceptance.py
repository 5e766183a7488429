"""Acceptance suite.

One test per acceptance criterion, each printing a PASS/FAIL line (run
with `pytest -s tests/test_acceptance.py` to watch them). The CIFAR-10
learnability run needs the binary dataset on disk (see
scripts/fetch_cifar.py); it is skipped with an explicit reason when the
files are absent.
"""

import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import (naive_conv2d, random_valid_config, textbook_attention,
                      write_cifar10_fixture)
from ctanet import cli
from ctanet import data as D
from ctanet import gradcheck as G
from ctanet import nn
from ctanet import tensor as T
from ctanet.costs import compare_attention_costs, count_params
from ctanet.model import (ct_block, fuse_tokens, lmf_mhsa, mhsa, model_init,
                          paper_config, patchify_map, reconstruct, rrcv_forward,
                          tiny_config)
from ctanet.tensor import Tensor
from ctanet.train import (OptimizerState, TrainConfig, evaluate,
                          load_checkpoint, train_epoch, train_run)

DATA_ROOT = os.environ.get("CTANET_DATA_ROOT", "data")
HAVE_CIFAR = os.path.exists(os.path.join(DATA_ROOT, "cifar-10-batches-bin", "data_batch_1.bin"))


@contextmanager
def criterion(num, name):
    try:
        yield
    except BaseException:
        print(f"\n[ACCEPTANCE {num}] {name}: FAIL")
        raise
    print(f"\n[ACCEPTANCE {num}] {name}: PASS")


def test_1_gradient_fidelity():
    with criterion(1, "gradient fidelity (f64 central differences)"):
        t0 = time.time()
        results = G.run_suite(seed=0, include_model=True, samples_per_param=3)
        for r in results:
            assert r.passed, f"{r.name}: {r.error:.3e} > {r.tol}"
        elapsed = time.time() - t0
        print(f"  {len(results)} checks, worst headroom at "
              f"{max(r.error / r.tol for r in results):.3f}x tol, {elapsed:.0f}s")
        assert elapsed < 300


def test_2_structural_invariants():
    with criterion(2, "structural invariants"):
        # reconstruct is the exact inverse of patch extraction, bitwise
        x = T.uniform([2, 5, 12, 12], seed=1, dtype="f64")
        assert reconstruct(patchify_map(x, 3, 3), 12, 12).data.tobytes() == x.data.tobytes()

        # shape preservation across 20 random valid configs
        for seed in range(20):
            cfg = random_valid_config(seed)
            net = model_init(cfg, seed=seed, dtype="f64")
            tok = T.uniform([2, cfg.tokens, cfg.embed_dim], seed=seed + 50, dtype="f64")
            bp = net.blocks[0]
            if bp.rrcv is not None:
                assert rrcv_forward(tok, bp.rrcv, cfg).shape == tok.shape
            out = (lmf_mhsa(tok, bp.attn, cfg) if cfg.attention_kind == "lmf_mhsa"
                   else mhsa(tok, bp.attn, cfg.heads))
            assert out.shape == tok.shape
            assert ct_block(tok, bp, cfg).shape == tok.shape

        # class-token bypass independence (conv detour and fusion stage)
        cfg = tiny_config(depth=1)
        net = model_init(cfg, seed=3, dtype="f64")
        tok = T.uniform([2, 65, 64], seed=60, dtype="f64")
        poked = Tensor(tok.data.copy())
        poked.data[:, 0] += 5.0
        r1, r2 = rrcv_forward(tok, net.blocks[0].rrcv, cfg), rrcv_forward(poked, net.blocks[0].rrcv, cfg)
        assert np.array_equal(r1.data[:, 1:], r2.data[:, 1:])
        assert np.array_equal(r1.data[:, 0], tok.data[:, 0])
        f1 = fuse_tokens(tok, net.blocks[0].attn.fusion, cfg)
        f2 = fuse_tokens(poked, net.blocks[0].attn.fusion, cfg)
        assert np.array_equal(f1.data[:, 1:], f2.data[:, 1:])
        assert np.array_equal(f1.data[:, 0], tok.data[:, 0])
        patch_poked = Tensor(tok.data.copy())
        patch_poked.data[:, 1:] *= 1.25
        f3 = fuse_tokens(patch_poked, net.blocks[0].attn.fusion, cfg)
        assert np.array_equal(f3.data[:, 0], patch_poked.data[:, 0])

        # attention weights are row-stochastic for both kinds
        for kind in ("mhsa", "lmf_mhsa"):
            c = tiny_config(attention_kind=kind, depth=1)
            n = model_init(c, seed=4, dtype="f64")
            xx = T.uniform([2, 65, 64], -2, 2, seed=61, dtype="f64")
            if kind == "mhsa":
                _, w = mhsa(xx, n.blocks[0].attn, c.heads, return_weights=True)
            else:
                _, w = lmf_mhsa(xx, n.blocks[0].attn, c, return_weights=True)
            assert np.abs(w.data.sum(-1) - 1).max() <= 1e-6 and (w.data >= 0).all()

        # the reduced attention collapses to the standard one
        c = tiny_config(kernel_scales=(), kv_reduction=1)
        n = model_init(c, seed=5, dtype="f64")
        xx = T.uniform([2, 65, 64], seed=62, dtype="f64")
        diff = np.abs(lmf_mhsa(xx, n.blocks[0].attn, c).data -
                      mhsa(xx, n.blocks[0].attn, c.heads).data).max()
        assert diff <= 1e-10
        print(f"  lmf_mhsa(fusion off, r=1) vs mhsa: {diff:.2e}")


def test_3_oracle_equivalence():
    with criterion(3, "oracle equivalence (naive conv, textbook attention)"):
        import random
        rng = random.Random(0)
        worst = 0.0
        for trial in range(50):
            k = rng.choice([1, 3, 5])
            stride = rng.choice([1, 2])
            pad = rng.choice([0, 1, 2])
            grouping = rng.choice(["dense", "grouped", "depthwise"])
            if grouping == "dense":
                groups, Cg, og = 1, rng.randint(1, 3), rng.randint(1, 3)
            elif grouping == "grouped":
                groups, Cg, og = 2, rng.randint(1, 2), rng.randint(1, 2)
            else:
                groups, Cg, og = rng.randint(1, 4), 1, 1
            C, OC = groups * Cg, groups * og
            if grouping == "depthwise":
                OC = C
            H = max(k - 2 * pad, 1) + rng.randint(k, 6)
            x = T.uniform([2, C, H, H], -1, 1, seed=1000 + trial, dtype="f64")
            p = nn.conv2d_init(C, OC, k, stride=stride, padding=pad, groups=groups,
                               seed=trial, dtype="f64")
            want = naive_conv2d(x.data, p.weight.data, p.bias.data, stride, pad, groups)
            got = nn.conv2d(x, p).data
            worst = max(worst, float(np.abs(got - want).max()))
        assert worst <= 1e-12
        print(f"  conv2d vs 6-loop oracle over 50 configs: {worst:.2e}")

        cfg = tiny_config(kernel_scales=(), kv_reduction=1, depth=1)
        net = model_init(cfg, seed=6, dtype="f64")
        ap = net.blocks[0].attn
        xx = T.uniform([2, 65, 64], -1, 1, seed=63, dtype="f64")
        want = textbook_attention(xx.data, ap.q.weight.data, ap.q.bias.data,
                                  ap.k.weight.data, ap.k.bias.data,
                                  ap.v.weight.data, ap.v.bias.data,
                                  ap.out.weight.data, ap.out.bias.data, cfg.heads)
        diff = float(np.abs(lmf_mhsa(xx, ap, cfg).data - want).max())
        assert diff <= 1e-10
        print(f"  lmf_mhsa(r=1) vs textbook oracle: {diff:.2e}")


def test_4_cost_model_exactness():
    with criterion(4, "cost-model exactness (formula == enumeration)"):
        for seed in range(30):
            cfg = random_valid_config(seed)
            formula = count_params(cfg).total_params
            instance = model_init(cfg, seed=seed).param_count()
            assert formula == instance, (seed, formula, instance)
        # depthwise(k) + pointwise pair: C*k^2 + C*OC weights
        M, N, Dk = 3, 8, 3
        dw = nn.conv2d_init(M, M, Dk, groups=M, bias=False, seed=1)
        pw = nn.conv2d_init(M, N, 1, bias=False, seed=2)
        assert dw.weight.size + pw.weight.size == M * Dk * Dk + M * N == 51
        print("  30 random configs exact; separable pair M=3,N=8,D=3 -> 51")


def test_5_cost_reduction_direction(capsys):
    with criterion(5, "cost-reduction direction at the full-scale shape"):
        t0 = time.time()
        p_red, f_red = compare_attention_costs(paper_config())
        elapsed = time.time() - t0
        assert p_red >= 55.0, p_red
        assert f_red >= 65.0, f_red
        assert elapsed < 1.0
        code = cli.main(["analyze", "--preset", "paper"])
        out = capsys.readouterr().out
        assert code == 0
        assert "MACs" in out and "FLOPs" in out          # both conventions
        assert out.count("reduction") >= 2               # both reductions
        with capsys.disabled():
            print(f"\n  params reduction {p_red:.2f}% (>=55), "
                  f"compute reduction {f_red:.2f}% (>=65), {elapsed * 1000:.0f}ms")


def test_6a_learnability_synthetic():
    with criterion("6a", "tiny preset learns the synthetic set (>=90% in <=20 epochs)"):
        t0 = time.time()
        cfg = tiny_config()
        net = model_init(cfg, seed=0, dtype="f32")
        tcfg = TrainConfig(epochs=20, batch_size=32, warmup_epochs=2, seed=0)
        ds = D.load_dataset(D.DatasetSpec(kind="synthetic", synth_size=512, seed=0))
        state = OptimizerState.for_model(net)
        best, epochs_used = 0.0, 0
        for epoch in range(tcfg.epochs):
            _, top1, _ = train_epoch(net, ds, state, tcfg, epoch)
            best, epochs_used = max(best, top1), epoch + 1
            if top1 >= 0.90:
                break
        elapsed = time.time() - t0
        print(f"  train top1 {best:.3f} after {epochs_used} epochs, {elapsed:.0f}s")
        assert best >= 0.90
        assert elapsed < 300


@pytest.mark.skipif(not HAVE_CIFAR, reason=(
    f"CIFAR-10 binary files not found under {DATA_ROOT!r} and this host has no "
    "network access; run scripts/fetch_cifar.py --root data and re-run"))
def test_6b_learnability_cifar_subset():
    with criterion("6b", "CIFAR-10 5k subset reaches >=40% test top1 in <=30 epochs"):
        t0 = time.time()
        cfg = tiny_config()
        net = model_init(cfg, seed=0, dtype="f32")
        tcfg = TrainConfig(epochs=30, batch_size=32, warmup_epochs=3, seed=0)
        train_ds = D.load_dataset(D.DatasetSpec(
            kind="cifar10", root=DATA_ROOT, split="train", subset_size=5000, seed=0))
        probe_ds = D.load_dataset(D.DatasetSpec(
            kind="cifar10", root=DATA_ROOT, split="test", subset_size=2000, seed=0))
        full_test = D.load_dataset(D.DatasetSpec(kind="cifar10", root=DATA_ROOT, split="test"))
        aug = D.AugmentFlags(crop=True, flip=True)
        state = OptimizerState.for_model(net)
        top1 = 0.0
        for epoch in range(tcfg.epochs):
            train_epoch(net, train_ds, state, tcfg, epoch, aug=aug)
            _, probe = evaluate(net, probe_ds, batch_size=64)
            print(f"  epoch {epoch}: probe top1 {probe:.3f} ({time.time() - t0:.0f}s)")
            if probe >= 0.42 or epoch == tcfg.epochs - 1:
                _, top1 = evaluate(net, full_test, batch_size=64)
                if top1 >= 0.40:
                    break
        elapsed = time.time() - t0
        print(f"  full test top1 {top1:.4f} in {elapsed / 60:.1f} min")
        assert top1 >= 0.40
        assert elapsed < 45 * 60


def test_7_ablation_harness(tmp_path, capsys):
    with criterion(7, "ablation harness executes the config ladders"):
        micro = ["--set", "model.depth=1", "--set", "data.synth_size=48",
                 "--set", "data.val_subset=16", "--set", "train.warmup_epochs=0",
                 "--epochs", "1", "--batch-size", "16", "--seed", "9"]

        def ablate(tag, grid_args):
            out = str(tmp_path / tag)
            assert cli.main(["ablate", "--preset", "tiny", *micro, *grid_args,
                             "--out-dir", out]) == 0
            sub = os.listdir(out)[0]
            lines = open(os.path.join(out, sub, "summary.csv")).read().strip().splitlines()
            assert lines[0] == "cell,attention,rrcv,scales,batch,depth,heads,top1,params,flops,seconds"
            return lines[1:]

        # module ladder: plain baseline, + conv detour, + reduced attention
        base = ablate("ladder_base", ["--grid-attention", "mhsa",
                                      "--grid-rrcv", "none,resnet",
                                      "--scales", "none",
                                      "--set", "model.kv_reduction=1"])
        full = ablate("ladder_full", ["--grid-attention", "lmf_mhsa",
                                      "--grid-rrcv", "resnet"])
        assert len(base) == 2 and len(full) == 1

        # conv-variant ladder and kernel-scale ladder
        variants = ablate("variants", ["--grid-rrcv", "cnn,dwconv,resnet"])
        assert sorted(line.split(",")[2] for line in variants) == ["cnn", "dwconv", "resnet"]
        scales = ablate("scales", ["--grid-scales", "1;3;5;1,3,5"])
        assert sorted(line.split(",")[3] for line in scales) == ["1", "1+3+5", "3", "5"]
        for line in base + full + variants + scales:
            top1 = float(line.split(",")[7])
            assert 0.0 <= top1 <= 1.0

        # cells are independently reproducible
        rerun = ablate("variants_rerun", ["--grid-rrcv", "cnn,dwconv,resnet"])
        strip = lambda rows: [",".join(r.split(",")[:-1]) for r in rows]
        assert strip(rerun) == strip(variants)
        capsys.readouterr()
        print(f"  {2 + 1 + 3 + 4} ladder cells ran; rerun rows identical")


def test_8_determinism_and_persistence(tmp_path):
    with criterion(8, "determinism, checkpoint persistence, byte-exact decode"):
        # bit-reproducible seeded f64 runs
        seq = []
        for _ in range(2):
            cfg = tiny_config(depth=2)
            net = model_init(cfg, seed=13, dtype="f64")
            tcfg = TrainConfig(epochs=2, batch_size=16, warmup_epochs=1, seed=13, dtype="f64")
            ds = D.load_dataset(D.DatasetSpec(kind="synthetic", synth_size=64, seed=13))
            rows = train_run(net, OptimizerState.for_model(net), tcfg, ds, ds)
            seq.append([(r.train_loss, r.train_top1, r.val_loss) for r in rows])
        assert seq[0] == seq[1]

        # resumed run equals the uninterrupted one
        cfg = tiny_config(depth=1)
        tcfg = TrainConfig(epochs=3, batch_size=16, warmup_epochs=1, seed=14, dtype="f64")
        ds = D.load_dataset(D.DatasetSpec(kind="synthetic", synth_size=64, seed=14))
        net_a = model_init(cfg, seed=14, dtype="f64")
        rows_a = train_run(net_a, OptimizerState.for_model(net_a), tcfg, ds, ds)
        run_dir = str(tmp_path / "resume")
        os.makedirs(run_dir)
        net_b = model_init(cfg, seed=14, dtype="f64")
        rows_b = train_run(net_b, OptimizerState.for_model(net_b), tcfg, ds, ds,
                           stop_epoch=1, out_dir=run_dir)
        net_c, st_c, ep, _ = load_checkpoint(os.path.join(run_dir, "last.ckpt"))
        rows_b += train_run(net_c, st_c, tcfg, ds, ds, start_epoch=ep, out_dir=run_dir)
        assert [(r.train_loss, r.val_loss) for r in rows_a] == \
               [(r.train_loss, r.val_loss) for r in rows_b]

        # crafted CIFAR record decodes byte-exactly
        pixels = np.arange(3072, dtype=np.uint8).reshape(3, 32, 32)
        fixture = tmp_path / "rec.bin"
        write_cifar10_fixture(fixture, [(9, pixels)])
        images, labels = D.decode_cifar_records(fixture.read_bytes(), coarse_fine=False)
        assert labels.tolist() == [9]
        assert np.array_equal((images[0] * 255).round().astype(np.uint8), pixels)
        print("  seeded runs bit-identical; resume == uninterrupted; decode byte-exact")
