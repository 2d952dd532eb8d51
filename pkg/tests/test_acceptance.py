"""System acceptance suite.

Nine criteria, each with the stated tolerance and runtime budget:

1. gradient correctness of every primitive and the full training-step graph
2. bit-exact VQ round trip and monotone codebook fitting
3. guidance combination algebra
4. layout masking and causality over the 144-slot sequence
5. condition-dropout bucket statistics
6. incremental decoding against the full forward pass
7. the desk-scale training run and its quality gates
8. determinism and bit-exact resume
9. metric sanity fixed points

The desk training run (criterion 7) executes the full default recipe and is
shared by its dependent tests through a session fixture; everything else is
self-contained and fast.
"""

import json
import time

import numpy as np
import pytest

import aredit.data as data
import aredit.distill as distill
import aredit.metrics as metrics
import aredit.model as model
import aredit.sampler as sampler
import aredit.tensor as T
import aredit.text as textmod
import aredit.trainer as trainer
import aredit.vq as vq
from aredit.sampler import SampleConfig
from aredit.seeding import make_rng
from aredit.tensor import Tensor

from conftest import randomize_zero_blocks

EPS = 1e-5
GRAD_RTOL = 1e-4


def rel_err(analytic, numeric):
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    return (np.abs(analytic - numeric) / denom).max()


def central_diff_entry(f, arr, ix):
    old = arr[ix]
    arr[ix] = old + EPS
    fp = f()
    arr[ix] = old - EPS
    fm = f()
    arr[ix] = old
    return (fp - fm) / (2 * EPS)


# -- 1. gradient correctness ---------------------------------------------------


PRIMITIVES = [
    ("add", lambda x, y: T.add(x, y), 2),
    ("mul", lambda x, y: T.mul(x, y), 2),
    ("matmul", lambda x, y: T.matmul(x, T.reshape(y, (4, 3))), 2),
    ("scale", lambda x: T.scale(x, -1.7), 1),
    ("reshape", lambda x: T.reshape(x, (4, 3)), 1),
    ("transpose", lambda x: T.transpose(x, (1, 0)), 1),
    ("slice", lambda x: T.slice_axis(x, 1, 1, 3), 1),
    ("sum", lambda x: T.tsum(x, axis=0, keepdims=True), 1),
    ("mean", lambda x: T.tmean(x), 1),
    ("gelu", T.gelu, 1),
    ("layer_norm", T.layer_norm, 1),
    ("softmax", T.softmax_rows, 1),
    ("concat", lambda x, y: T.concat([x, y], axis=0), 2),
]


class TestGradientCorrectness:
    def test_every_primitive_20_seeds(self):
        t0 = time.perf_counter()
        for name, op, arity in PRIMITIVES:
            for seed in range(20):
                rng = np.random.default_rng(1000 * seed + hash(name) % 997)
                xs = [Tensor(rng.normal(size=(3, 4)), requires_grad=True)
                      for _ in range(arity)]
                out = op(*xs)
                w = rng.normal(size=out.data.shape)
                T.tsum(T.mul(out, Tensor(w))).backward()

                def value():
                    return float((op(*xs).data * w).sum())

                for x in xs:
                    flat_ix = rng.integers(x.data.size)
                    ix = np.unravel_index(flat_ix, x.data.shape)
                    num = central_diff_entry(value, x.data, ix)
                    assert rel_err(np.array(x.grad[ix]), np.array(num)) \
                        < GRAD_RTOL, (name, seed)
        # embedding and cross-entropy take integer side inputs, checked apart
        for seed in range(20):
            rng = np.random.default_rng(seed)
            table = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
            ids = rng.integers(0, 6, (2, 3))
            w = rng.normal(size=(2, 3, 5))
            T.tsum(T.mul(T.embedding(table, ids), Tensor(w))).backward()

            def emb_value():
                return float((table.data[ids] * w).sum())

            ix = np.unravel_index(rng.integers(table.data.size),
                                  table.data.shape)
            assert rel_err(np.array(table.grad[ix]),
                           np.array(central_diff_entry(emb_value, table.data,
                                                       ix))) < GRAD_RTOL

            logits = Tensor(rng.normal(size=(2, 4, 7)), requires_grad=True)
            targets = rng.integers(0, 7, (2, 4))
            mask = rng.random((2, 4)) < 0.7
            if not mask.any():
                mask[0, 0] = True
            T.cross_entropy_masked(logits, targets, mask).backward()

            def ce_value():
                return T.cross_entropy_masked(Tensor(logits.data), targets,
                                              mask).item()

            ix = np.unravel_index(rng.integers(logits.data.size),
                                  logits.data.shape)
            assert rel_err(np.array(logits.grad[ix]),
                           np.array(central_diff_entry(ce_value, logits.data,
                                                       ix))) < GRAD_RTOL
        assert time.perf_counter() - t0 < 60.0

    def test_full_training_step_graph_20_seeds(self, tiny_cfg):
        """Finite differences through the complete CE + distillation loss."""
        t0 = time.perf_counter()
        cfg = tiny_cfg
        lay = model.layout_of(cfg)
        lo, hi = lay.out_span
        lam = 0.5
        for seed in range(20):
            rng = np.random.default_rng(seed)
            params = randomize_zero_blocks(
                model.init_params(cfg, seed=seed), seed=seed + 1)
            text_ids = rng.integers(0, cfg.v_text, (2, cfg.l_text))
            cond_ids = rng.integers(0, cfg.k_img, (2, cfg.n_img))
            out_ids = rng.integers(0, cfg.k_img, (2, cfg.n_img))
            text_null = np.array([False, True])
            cond_null = np.array([True, False])
            feats = rng.normal(size=(2, cfg.n_img, cfg.d_teacher))
            mask = np.ones((2, hi - lo), dtype=bool)

            def loss_value():
                x = model.assemble_batch(params, cfg, text_ids, text_null,
                                         cond_ids, cond_null, out_ids)
                logits, hidden = model.forward(params, cfg, x,
                                               logit_span=(lo - 1, hi - 1))
                ce = T.cross_entropy_masked(logits, out_ids, mask)
                dl = distill.distill_loss(T.slice_axis(hidden, 1, lo, hi),
                                          feats, params)
                return T.add(ce, T.scale(dl, lam))

            loss = loss_value()
            loss.backward()
            names = rng.choice(sorted(params), size=6, replace=False)
            for name in names:
                p = params[name]
                assert p.grad is not None, name
                ix = np.unravel_index(rng.integers(p.data.size), p.data.shape)
                num = central_diff_entry(lambda: loss_value().item(),
                                         p.data, ix)
                assert rel_err(np.array(p.grad[ix]), np.array(num)) \
                    < GRAD_RTOL, (seed, name, ix)
            for p in params.values():
                p.zero_grad()
        assert time.perf_counter() - t0 < 60.0


# -- 2. VQ round trip ----------------------------------------------------------


class TestVQRoundTrip:
    def test_thousand_images_bit_exact(self):
        t0 = time.perf_counter()
        corpus = data.sample_corpus(500, None, seed=21)
        images = [im for ex in corpus for im in (ex.condition, ex.target)]
        assert len(images) == 1000
        patches = np.concatenate([
            vq.encode_patches(im, data.PATCH).reshape(-1, 48)
            for im in images])
        codebook, distortions = vq.build_codebook(patches, 256, data.PATCH,
                                                  seed=0)
        assert (np.diff(distortions) <= 1e-12).all()
        for im in images:
            seq = vq.quantize(vq.encode_patches(im, data.PATCH), codebook)
            np.testing.assert_array_equal(vq.decode(seq, codebook), im)
        assert time.perf_counter() - t0 < 60.0

    def test_kmeans_distortion_monotone_general(self):
        rng = np.random.default_rng(3)
        x = rng.random((3000, 48))  # forces the iterative path
        _, distortions = vq.fit_codebook(x, 64, iters=20, seed=1)
        assert (np.diff(distortions) <= 1e-12).all()


# -- 3. guidance algebra -------------------------------------------------------


class TestGuidanceAlgebra:
    def test_degeneracies_and_normalization(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(5)
        for _ in range(200):
            c = rng.normal(scale=4.0, size=256)
            u = rng.normal(scale=4.0, size=256)
            np.testing.assert_array_equal(sampler.cfg_combine(c, u, 1.0), c)
            np.testing.assert_array_equal(sampler.cfg_combine(c, u, 0.0), u)
        for _ in range(10000):
            c = rng.normal(scale=3.0, size=32)
            u = rng.normal(scale=3.0, size=32)
            eta = rng.uniform(0.0, 6.0)
            lse_c = np.log(np.exp(c - c.max()).sum()) + c.max()
            lse_u = np.log(np.exp(u - u.max()).sum()) + u.max()
            a = sampler.cfg_combine(c, u, eta)
            b = sampler.cfg_combine(c - lse_c, u - lse_u, eta)
            pa = np.exp(a - a.max())
            pa /= pa.sum()
            pb = np.exp(b - b.max())
            pb /= pb.sum()
            assert np.abs(pa - pb).max() < 1e-9
        assert time.perf_counter() - t0 < 10.0


# -- 4. layout and causality ---------------------------------------------------


@pytest.fixture(scope="module")
def desk_model():
    cfg = model.ModelConfig()  # d_model=128, 4 layers, 144-slot layout
    params = randomize_zero_blocks(model.init_params(cfg, seed=31), seed=32)
    return cfg, params


class TestLayoutMasking:
    def test_ce_grad_exactly_zero_at_text_and_condition(self, desk_model):
        t0 = time.perf_counter()
        cfg, params = desk_model
        lay = model.layout_of(cfg)
        rng = np.random.default_rng(33)
        x = Tensor(rng.normal(size=(1, lay.max_seq, cfg.d_model)))
        logits, _ = model.forward(params, cfg, x)
        mask = lay.loss_mask()[None, :]
        targets = rng.integers(0, cfg.k_img, (1, lay.max_seq))
        T.cross_entropy_masked(logits, targets, mask).backward()
        g = logits.grad[0]
        t_lo, t_hi = lay.text_span
        c_lo, c_hi = lay.cond_span
        o_lo, o_hi = lay.out_span
        # without a BOS token the final condition slot predicts the first
        # output token, so the zero region is everything before it plus the
        # last sequence position (which has no target)
        assert (g[t_lo:t_hi] == 0.0).all()
        assert (g[c_lo:c_hi - 1] == 0.0).all()
        assert (g[o_hi - 1] == 0.0).all()
        # every loss position carries gradient
        assert (np.abs(g[o_lo - 1:o_hi - 1]).max(axis=-1) > 0).all()
        assert time.perf_counter() - t0 < 60.0

    def test_causality_every_position_144(self, desk_model):
        t0 = time.perf_counter()
        cfg, params = desk_model
        tlen = cfg.max_seq
        assert tlen == 144
        rng = np.random.default_rng(34)
        base_x = rng.normal(size=(1, tlen, cfg.d_model))
        base, _ = model.forward(params, cfg, Tensor(base_x))
        for j in range(tlen):
            bumped = base_x.copy()
            bumped[0, j, 0] += 1.0
            pert, _ = model.forward(params, cfg, Tensor(bumped))
            np.testing.assert_array_equal(pert.data[0, :j], base.data[0, :j])
            assert np.abs(pert.data[0, j] - base.data[0, j]).max() > 0
        assert time.perf_counter() - t0 < 60.0


# -- 5. dropout statistics -----------------------------------------------------


class TestDropoutStatistics:
    def test_bucket_rates_within_one_point(self):
        t0 = time.perf_counter()
        counts = {b: 0 for b in trainer.BUCKETS}
        n = 10000
        for i in range(n):
            rng = make_rng(0, 0xD80, i)
            counts[trainer.draw_dropout_bucket(rng)] += 1
        expect = {"none": 0.85, "text_null": 0.05, "image_null": 0.05,
                  "both_null": 0.05}
        for bucket, p in expect.items():
            assert abs(counts[bucket] / n - p) <= 0.01, (bucket, counts)
        assert time.perf_counter() - t0 < 10.0


# -- 6. incremental decoding ---------------------------------------------------


class TestIncrementalDecoding:
    def test_hundred_rollouts_match_full_forward(self, vocab):
        t0 = time.perf_counter()
        cfg = model.ModelConfig(d_model=64, n_layers=2, n_heads=4)
        params = randomize_zero_blocks(model.init_params(cfg, seed=41),
                                       seed=42)
        np_params = model._NumpyParams(params)
        for trial in range(100):
            rng = np.random.default_rng(trial)
            toks = textmod.InstructionTokens(
                rng.integers(0, cfg.v_text, cfg.l_text), cfg.l_text)
            cond = rng.integers(0, cfg.k_img, cfg.n_img)
            out = rng.integers(0, cfg.k_img, cfg.n_img)

            state = model.DecodeState(np_params, cfg)
            logits, _ = state.append(
                model.embed_rows(np_params, cfg, toks, cond, []))
            cached = [logits[-1]]
            for i in range(cfg.n_img - 1):
                logits, _ = state.append(
                    model.output_token_row(np_params, cfg, out[i], i))
                cached.append(logits[-1])
            cached = np.stack(cached)

            x = model.assemble_input(params, cfg, toks, cond, out)
            full, _ = model.forward(params, cfg,
                                    T.reshape(x, (1,) + x.shape))
            lo, hi = model.layout_of(cfg).out_span
            full_next = full.data[0, lo - 1:hi - 1]
            assert np.abs(cached - full_next).max() < 1e-9, trial
        assert time.perf_counter() - t0 < 60.0


# -- 7. desk training run ------------------------------------------------------


N_TRAIN = 4096
N_HELDOUT = 256


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The full default training recipe, executed once for this session."""
    out_dir = tmp_path_factory.mktemp("desk-run")
    corpus = data.sample_corpus(N_TRAIN, None, seed=0)
    patches = np.concatenate([
        vq.encode_patches(im, data.PATCH).reshape(-1, 48)
        for ex in corpus for im in (ex.condition, ex.target)])
    codebook, _ = vq.build_codebook(patches, 256, data.PATCH, seed=0)
    cfg = model.ModelConfig()
    tcfg = trainer.TrainConfig()
    t0 = time.perf_counter()
    params, _, records = trainer.train(corpus, codebook, cfg, tcfg,
                                       out_dir=str(out_dir))
    elapsed = time.perf_counter() - t0
    heldout = data.sample_corpus(N_HELDOUT, None, seed=1)
    vocab = textmod.build_vocabulary()
    teacher = distill.TeacherEncoder(tcfg.teacher_seed,
                                     d_teacher=cfg.d_teacher)
    prepared_heldout = trainer.prepare_corpus(heldout, codebook, vocab,
                                              teacher, cfg)
    return {"params": params, "records": records, "codebook": codebook,
            "cfg": cfg, "tcfg": tcfg, "vocab": vocab, "heldout": heldout,
            "prepared_heldout": prepared_heldout, "elapsed": elapsed,
            "out_dir": out_dir}


class TestDeskRun:
    def test_completes_within_30_minutes(self, desk_run):
        step_time = sum(r.wall_time for r in desk_run["records"])
        assert desk_run["elapsed"] <= 1800.0, (
            f"training took {desk_run['elapsed']:.0f}s wall "
            f"({step_time:.0f}s in optimizer steps); budget is 1800s")

    def test_heldout_top1_at_least_70(self, desk_run):
        cfg, params = desk_run["cfg"], desk_run["params"]
        prepared = desk_run["prepared_heldout"]
        lay = model.layout_of(cfg)
        lo, hi = lay.out_span
        n = len(prepared)
        correct = total = 0
        for start in range(0, n, 32):
            idx = np.arange(start, min(start + 32, n))
            flags = np.zeros(len(idx), dtype=bool)
            x = model.assemble_batch(
                params, cfg, prepared.text_ids[idx], flags,
                prepared.cond_ids[idx], flags, prepared.target_ids[idx])
            logits, _ = model.forward(params, cfg, x, want_hidden=False,
                                      logit_span=(lo - 1, hi - 1))
            pred = logits.data.argmax(axis=-1)
            correct += (pred == prepared.target_ids[idx]).sum()
            total += pred.size
        top1 = correct / total
        assert top1 >= 0.70, f"held-out next-token top-1 {top1:.3f}"

    def test_identity_exact_token_match_95(self, desk_run):
        cfg, params = desk_run["cfg"], desk_run["params"]
        codebook, vocab = desk_run["codebook"], desk_run["vocab"]
        matched = total = 0
        for i in range(32):
            rng = np.random.default_rng(10_000 + i)
            spec = data.sample_scene(rng, int(rng.integers(1, 4)))
            ex = data.make_edit_pair(spec, "identity", rng)
            cond_tokens = vq.quantize(
                vq.encode_patches(ex.condition, data.PATCH), codebook)
            toks = textmod.tokenize(ex.instruction, vocab, cfg.l_text)
            scfg = SampleConfig(eta=3.0, temperature=1e-9, seed=i)
            out = sampler.generate_tokens(params, cfg, toks,
                                          cond_tokens.indices, scfg)
            matched += (out == cond_tokens.indices).sum()
            total += out.size
        rate = matched / total
        assert rate >= 0.95, f"identity exact-token-match {rate:.3f}"

    def test_guidance_gap_at_least_20_points(self, desk_run):
        cfg, params = desk_run["cfg"], desk_run["params"]
        codebook, vocab = desk_run["codebook"], desk_run["vocab"]
        edits = [ex for ex in desk_run["heldout"]
                 if ex.kind == "edit" and ex.meta["edit_op"] != "identity"]
        edits = edits[:48]
        rates = {}
        for eta in (3.0, 0.0):
            succ = []
            for i, ex in enumerate(edits):
                scfg = SampleConfig(eta=eta, temperature=1.0, seed=i)
                gen, _ = sampler.generate(params, cfg, codebook, vocab,
                                          ex.condition, ex.instruction, scfg)
                succ.append(metrics.edit_success(gen, ex))
            rates[eta] = float(np.mean(succ))
        gap = rates[3.0] - rates[0.0]
        assert gap >= 0.20, (
            f"edit success eta=3: {rates[3.0]:.3f}, eta=0: {rates[0.0]:.3f}")

    def test_distill_loss_halved(self, desk_run):
        records = desk_run["records"]
        first = records[0].loss_distill
        last = records[-1].loss_distill
        assert last <= 0.5 * first, (first, last)


# -- 8. determinism and resume -------------------------------------------------


class TestDeterminismResume:
    def test_runs_and_resume_bit_exact(self, small_corpus, small_codebook,
                                       tmp_path):
        t0 = time.perf_counter()
        cfg = model.ModelConfig()  # full desk model, shortened schedule
        tcfg = trainer.TrainConfig(steps=10, batch_size=8,
                                   checkpoint_interval=5)

        def run(name, resume_from=None):
            out = tmp_path / name
            return trainer.train(small_corpus, small_codebook, cfg, tcfg,
                                 out_dir=str(out), resume_from=resume_from)

        pa, _, _ = run("a")
        pb, _, _ = run("b")
        ca = (tmp_path / "a" / "ckpt-final.bin").read_bytes()
        cb = (tmp_path / "b" / "ckpt-final.bin").read_bytes()
        assert ca == cb

        run("c")
        run("c", resume_from=str(tmp_path / "c" / "ckpt-000005.bin"))
        cc = (tmp_path / "c" / "ckpt-final.bin").read_bytes()
        assert cc == ca

        vocab = textmod.build_vocabulary()
        scfg = SampleConfig(eta=2.0, temperature=1.0, seed=3)
        ra = metrics.report_to_json(metrics.evaluate(
            pa, cfg, small_codebook, vocab, small_corpus[:6], scfg))
        rb = metrics.report_to_json(metrics.evaluate(
            pb, cfg, small_codebook, vocab, small_corpus[:6], scfg))
        assert ra == rb
        assert time.perf_counter() - t0 < 600.0


# -- 9. metric sanity ----------------------------------------------------------


class TestMetricSanity:
    def test_fixed_points_and_copy_baseline(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(91)
        img = rng.random((32, 32, 3))
        assert metrics.ssim(img, img) == pytest.approx(1.0, abs=1e-12)

        seg_rng = np.random.default_rng(92)
        spec = data.sample_scene(seg_rng, 2)
        seg_ex = data.make_translation_pair(spec, "seg", seg_rng)
        assert metrics.seg_miou(seg_ex.target, seg_ex) == 1.0

        corpus = data.sample_corpus(64, None, seed=93)
        edits = [ex for ex in corpus if ex.kind == "edit"]
        pairs = [(ex.condition, ex) for ex in edits]
        report = metrics.evaluate_images(pairs)
        cell = report["per_task"]["edit"]
        # copying the condition preserves the background perfectly: every
        # background PSNR is infinite
        assert cell["PSNR_bg"].get("identical", 0) == cell["PSNR_bg"]["n"]
        assert cell["MSE_bg"]["mean"] == 0.0
        non_identity = [ex for ex in edits
                        if ex.meta["edit_op"] != "identity"]
        fails = [metrics.edit_success(ex.condition, ex)
                 for ex in non_identity]
        assert np.mean(fails) == 0.0
        assert time.perf_counter() - t0 < 60.0
