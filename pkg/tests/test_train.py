import dataclasses
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biomamba import model as M
from biomamba import tensor as tn
from biomamba import train as T
from biomamba.data import LMBatch, QAExample, Vocabulary, build_lm_batches, build_qa_features, encode
from biomamba.errors import ContractError, InputError, NumericError
from synthetic import biomedical_text


def scalar_adamw(theta, grads, lr, b1=0.9, b2=0.95, eps=1e-8, wd=0.1):
    """Plain-float AdamW written independently of the array implementation."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * (m_hat / (math.sqrt(v_hat) + eps) + wd * theta)
    return theta


def one_param(value, dtype=np.float64):
    return {"w": tn.Tensor(np.array([value], dtype=dtype), requires_grad=True)}


class TestSchedule:
    def test_peak_at_warmup_end(self):
        s = T.LRSchedule(100, 2000, 6e-4, 1e-5)
        assert T.lr_at(s, 99) == 6e-4
        assert T.lr_at(s, 100) == 6e-4

    def test_min_at_total(self):
        s = T.LRSchedule(100, 2000, 6e-4, 1e-5)
        assert T.lr_at(s, 2000) == 1e-5
        assert T.lr_at(s, 5000) == 1e-5

    def test_midpoint(self):
        s = T.LRSchedule(100, 2100, 6e-4, 1e-5)
        assert T.lr_at(s, 1100) == pytest.approx((6e-4 + 1e-5) / 2, rel=1e-12)

    def test_warmup_is_linear(self):
        s = T.LRSchedule(10, 50, 1.0, 0.0)
        assert [T.lr_at(s, k) for k in range(3)] == pytest.approx([0.1, 0.2, 0.3])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 500))
    def test_monotone_after_peak(self, warmup, extra):
        s = T.LRSchedule(warmup, warmup + extra, 1e-3, 1e-5)
        rates = [T.lr_at(s, k) for k in range(warmup - 1, warmup + extra + 1)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert rates[0] == rates[1] == 1e-3

    @pytest.mark.parametrize("args", [(0, 10), (10, 10), (20, 10), (5, 10, 1e-5, 1e-3)])
    def test_invalid(self, args):
        with pytest.raises(ContractError):
            T.LRSchedule(*args)

    def test_negative_step(self):
        with pytest.raises(ContractError):
            T.lr_at(T.LRSchedule(1, 5), -1)


class TestClipping:
    def test_under_threshold(self):
        g = [np.array([0.3, 0.4])]
        assert T.clip_gradients(g, 1.0) == 1.0
        np.testing.assert_array_equal(g[0], [0.3, 0.4])

    def test_three_four_five(self):
        g = [np.array([3.0, 4.0])]
        assert T.clip_gradients(g, 1.0) == pytest.approx(0.2)
        np.testing.assert_allclose(g[0], [0.6, 0.8], rtol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_post_clip_norm(self, seed, scale):
        rng = np.random.default_rng(seed)
        grads = [rng.normal(0, scale, rng.integers(1, 50)).astype(np.float32) for _ in range(rng.integers(1, 6))]
        T.clip_gradients(grads, 1.0)
        assert math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)) <= 1.0 + 1e-6

    def test_non_finite(self):
        with pytest.raises(NumericError):
            T.clip_gradients([np.array([1.0, np.nan])])


class TestAdamW:
    def test_hand_example_without_eps(self):
        params = one_param(1.0)
        T.adamw_step(params, {"w": np.array([0.5])}, T.OptimizerState(eps=0.0), 0.1)
        assert abs(params["w"].data[0] - 0.89) <= 1e-12

    def test_hand_example_default_eps(self):
        params = one_param(1.0)
        T.adamw_step(params, {"w": np.array([0.5])}, T.OptimizerState(), 0.1)
        assert abs(params["w"].data[0] - scalar_adamw(1.0, [0.5], 0.1)) <= 1e-12
        assert abs(params["w"].data[0] - 0.89) < 1e-8

    def test_matches_scalar_oracle_over_steps(self):
        grads = [0.5, -0.2, 1.3, 0.0, -0.7]
        params = one_param(0.8)
        state = T.OptimizerState()
        for g in grads:
            T.adamw_step(params, {"w": np.array([g])}, state, 0.05)
        assert params["w"].data[0] == pytest.approx(scalar_adamw(0.8, grads, 0.05), abs=1e-12)

    def test_zero_gradient_zero_decay(self):
        params = one_param(1.7)
        T.adamw_step(params, {"w": np.zeros(1)}, T.OptimizerState(weight_decay=0.0), 0.1)
        assert params["w"].data[0] == 1.7

    def test_deterministic(self):
        a, b = one_param(1.0), one_param(1.0)
        sa, sb = T.OptimizerState(), T.OptimizerState()
        for _ in range(2):
            T.adamw_step(a, {"w": np.array([0.3])}, sa, 0.1)
            T.adamw_step(b, {"w": np.array([0.3])}, sb, 0.1)
        assert a["w"].data.tobytes() == b["w"].data.tobytes()

    @pytest.mark.parametrize(
        "name, decayed",
        [("layers.0.norm", False), ("final_norm", False), ("layers.1.ln1_gain", False), ("layers.0.ln2_bias", False),
         ("layers.0.core.delta_bias", False), ("layers.2.b", False), ("layers.0.core.a_log", False),
         ("embed", True), ("layers.0.in_proj", True), ("layers.0.core.d_skip", True), ("qa_head", True)],
    )
    def test_decay_exclusions(self, name, decayed):
        assert T.decays(name) is decayed

    def test_excluded_params_not_decayed(self):
        params = {"final_norm": tn.Tensor(np.array([2.0]), requires_grad=True)}
        T.adamw_step(params, {"final_norm": np.zeros(1)}, T.OptimizerState(), 0.1)
        assert params["final_norm"].data[0] == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            T.adamw_step(one_param(1.0), {"w": np.zeros(2)}, T.OptimizerState(), 0.1)

    @pytest.mark.parametrize("wd, tol", [(0.0, 1e-3), (0.1, 1e-2)])
    def test_quadratic_minimizer(self, wd, tol):
        # decoupled decay moves the stationary point off the minimizer by ~2e-3 here
        target = np.array([1.0, -2.0])
        scales = np.array([1.0, 4.0])
        with tn.precision("float64"):
            params = {"w": tn.Tensor(np.zeros(2), requires_grad=True)}
        sched = T.LRSchedule(10, 200, 0.1, 1e-5)
        state = T.OptimizerState(weight_decay=wd)
        for step in range(200):
            g = 2 * scales * (params["w"].data - target)
            T.adamw_step(params, {"w": g}, state, T.lr_at(sched, step))
        np.testing.assert_allclose(params["w"].data, target, atol=tol)

    def test_flipped_sign_ascends_concave(self):
        params = one_param(0.0)
        state = T.OptimizerState(weight_decay=0.0)
        value = lambda x: -((x - 3.0) ** 2)
        start = value(params["w"].data[0])
        for _ in range(50):
            g = -2 * (params["w"].data - 3.0)
            T.adamw_step(params, {"w": -g}, state, 0.05)
        assert value(params["w"].data[0]) > start

    def test_optimizer_roundtrip(self, tmp_path):
        params = one_param(1.0, np.float32)
        state = T.OptimizerState()
        T.adamw_step(params, {"w": np.array([0.5], dtype=np.float32)}, state, 0.1)
        T.save_optimizer(state, tmp_path / "o.opt")
        back = T.load_optimizer(tmp_path / "o.opt")
        assert back.step == 1 and back.betas == (0.9, 0.95) and back.weight_decay == 0.1
        np.testing.assert_array_equal(back.m["w"], state.m["w"])


@pytest.fixture
def corpus_batches():
    ids = np.array(encode(biomedical_text(60, seed=2), Vocabulary()))
    return build_lm_batches(ids, 32, 64, seed=0)


def quick_cfg(**kw):
    base = dict(total_steps=50, warmup_steps=5, peak_lr=3e-3, log_every=10)
    base.update(kw)
    base["warmup_steps"] = min(base["warmup_steps"], base["total_steps"] - 1)
    return T.TrainConfig(**base)


class TestPretrainLoop:
    def test_learns_and_logs(self, tiny_config, corpus_batches):
        out = io.StringIO()
        report = T.pretrain_loop(M.init_model(tiny_config), corpus_batches, quick_cfg(), stdout=out)
        assert report.steps == list(range(1, 51))
        assert report.loss[0] == pytest.approx(math.log(260), rel=0.05)
        assert report.loss[-1] < report.loss[0]
        lines = out.getvalue().splitlines()
        assert len(lines) == 5 and lines[0].startswith("step=10 loss=")
        assert all(np.isfinite(report.loss))

    def test_deterministic(self, tiny_config, corpus_batches):
        a = T.pretrain_loop(M.init_model(tiny_config), corpus_batches, quick_cfg(total_steps=10), stdout=None)
        b = T.pretrain_loop(M.init_model(tiny_config), corpus_batches, quick_cfg(total_steps=10), stdout=None)
        assert a.loss == b.loss and a.grad_norm == b.grad_norm

    def test_grad_norm_logged_before_clip(self, tiny_config, corpus_batches):
        report = T.pretrain_loop(M.init_model(tiny_config), corpus_batches, quick_cfg(total_steps=3, grad_clip=1e-3), stdout=None)
        assert min(report.grad_norm) > 1e-3

    def test_accumulation_matches_big_batch(self, tiny_config):
        rng = np.random.default_rng(0)
        seqs = rng.integers(0, 260, (4, 9))
        full = [LMBatch(seqs[:, :-1], seqs[:, 1:], np.ones((4, 8), bool))]
        halves = [LMBatch(seqs[i : i + 2, :-1], seqs[i : i + 2, 1:], np.ones((2, 8), bool)) for i in (0, 2)]
        with tn.precision("float64"):
            a = M.init_model(tiny_config)
            b = M.init_model(tiny_config)
        T.pretrain_loop(a, full, quick_cfg(total_steps=2, warmup_steps=1), stdout=None)
        T.pretrain_loop(b, halves, quick_cfg(total_steps=2, warmup_steps=1, accum_steps=2), stdout=None)
        for (k, x), (_, y) in zip(a.named_parameters().items(), b.named_parameters().items()):
            np.testing.assert_allclose(x.data, y.data, rtol=1e-9, atol=1e-12, err_msg=k)

    def test_checkpoints(self, tiny_config, corpus_batches, tmp_path):
        T.pretrain_loop(M.init_model(tiny_config), corpus_batches, quick_cfg(total_steps=6, ckpt_every=3), tmp_path, stdout=None)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["final.bmck", "final.opt", "step-3.bmck", "step-3.opt", "step-6.bmck", "step-6.opt"]
        assert M.load_checkpoint(tmp_path / "step-3.bmck").meta == {"step": 3}

    def test_resume_numbering(self, tiny_config, corpus_batches, tmp_path):
        T.pretrain_loop(M.init_model(tiny_config), corpus_batches, quick_cfg(total_steps=6, ckpt_every=3), tmp_path, stdout=None)
        model = M.load_checkpoint(tmp_path / "step-3.bmck")
        opt = T.load_optimizer(tmp_path / "step-3.opt")
        report = T.pretrain_loop(model, corpus_batches, quick_cfg(total_steps=6), start_step=3, opt=opt, stdout=None)
        assert report.steps == [4, 5, 6]

    def test_nan_aborts_before_update(self, tiny_config, corpus_batches, tmp_path):
        model = M.init_model(tiny_config)

        def poison(step, loss):
            if step == 2:
                model.final_norm.data[0] = np.nan

        with pytest.raises(NumericError):
            T.pretrain_loop(model, corpus_batches, quick_cfg(total_steps=5, ckpt_every=1), tmp_path, stdout=None, on_step=poison)
        assert (tmp_path / "step-2.bmck").exists() and not (tmp_path / "step-3.bmck").exists()
        assert np.isfinite(M.load_checkpoint(tmp_path / "step-2.bmck").final_norm.data).all()

    def test_no_batches(self, tiny_config):
        with pytest.raises(InputError):
            T.pretrain_loop(M.init_model(tiny_config), [], quick_cfg(), stdout=None)


def qa_examples(n):
    out = []
    for i in range(n):
        ctx = f"g{i % 7} binds d{i % 5}"
        ans = f"d{i % 5}"
        out.append(QAExample(str(i), f"g{i % 7}?", ctx, [(ans, ctx.index(ans))]))
    return out


class TestFinetune:
    def test_uniform_head_initial_loss(self, tiny_config):
        model = M.init_model(tiny_config)
        M.attach_qa_head(model).data[:] = 0.0
        feats, _ = build_qa_features(qa_examples(1), Vocabulary(), 32)
        tokens, mask, s, e = T.collate_qa(feats)
        start, end = M.qa_logits(model, tokens, mask)
        assert M.qa_loss(start, end, s, e).item() == pytest.approx(math.log(mask.sum()), rel=1e-6)

    def test_runs_and_is_deterministic(self, tiny_config):
        feats, _ = build_qa_features(qa_examples(6), Vocabulary(), 32)
        reports = []
        for _ in range(2):
            model = M.init_model(tiny_config)
            M.attach_qa_head(model)
            reports.append(T.finetune_qa_loop(model, feats, quick_cfg(total_steps=8, qa_batch_size=3), stdout=None))
        assert reports[0].loss == reports[1].loss
        assert reports[0].loss[-1] < reports[0].loss[0]

    def test_no_usable_examples(self, tiny_config):
        model = M.init_model(tiny_config)
        M.attach_qa_head(model)
        with pytest.raises(InputError):
            T.finetune_qa_loop(model, [], quick_cfg(), stdout=None)

    def test_needs_head(self, tiny_config):
        feats, _ = build_qa_features(qa_examples(2), Vocabulary(), 32)
        with pytest.raises(ContractError):
            T.finetune_qa_loop(M.init_model(tiny_config), feats, quick_cfg(), stdout=None)

    def test_collate_pads_and_masks(self):
        feats, _ = build_qa_features(qa_examples(3)[:1] + [QAExample("x", "q", "ab cd", [("cd", 3)])], Vocabulary(), 64)
        tokens, mask, s, e = T.collate_qa(feats)
        assert tokens.shape[0] == 2 and not mask[1, feats[1].tokens.size :].any()
        assert (s <= e).all()
