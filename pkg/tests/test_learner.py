import numpy as np
import pytest

from flowvos import autodiff as ad
from flowvos.autodiff import Tensor
from flowvos.fusion import FusionParams
from flowvos.learner import (LearnerConfig, MemoryBuffer, NumericalError,
                             gauss_newton, optimize, steepest_descent)
from flowvos.target_model import TargetModelParams, TargetSample, apply


def linear_residual(A, b):
    At = Tensor(A)
    bt = Tensor(b.reshape(-1, 1))

    def fn(params):
        tau = ad.reshape(params[0], (params[0].size, 1))
        return ad.sub(ad.matmul(At, tau), bt)

    return fn


class TestGaussNewton:
    def test_linear_one_step_exact(self, rng):
        for _ in range(10):
            m, n = 12, 6
            A = rng.standard_normal((m, n))
            b = rng.standard_normal(m)
            tau = Tensor(rng.standard_normal(n), requires_grad=True)
            cfg = LearnerConfig(damping=0.0, cg_iters=n)
            res = gauss_newton(linear_residual(A, b), [tau], 1, cfg)
            ref = np.linalg.lstsq(A, b, rcond=None)[0]
            assert np.linalg.norm(tau.data - ref) < 1e-8
            assert res.losses[-1] <= res.losses[0]

    def test_ridge_matches_closed_form(self, rng):
        m, n, lam = 10, 5, 0.3
        A = rng.standard_normal((m, n))
        b = rng.standard_normal(m)
        At = Tensor(A)
        bt = Tensor(b.reshape(-1, 1))
        root = np.sqrt(lam)

        def fn(params):
            tau = ad.reshape(params[0], (n, 1))
            data = ad.sub(ad.matmul(At, tau), bt)
            reg = params[0] * root
            return [data, reg]

        tau = Tensor(np.zeros(n), requires_grad=True)
        cfg = LearnerConfig(damping=0.0, cg_iters=n)
        gauss_newton(fn, [tau], 1, cfg)
        ref = np.linalg.solve(A.T @ A + lam * np.eye(n), A.T @ b)
        assert np.linalg.norm(tau.data - ref) < 1e-8

    def test_nonlinear_valley_within_ten_iters(self):
        def fn(params):
            t = params[0]
            t1 = ad.reshape(t, (1, 2)) @ Tensor([[1.0], [0.0]])
            t2 = ad.reshape(t, (1, 2)) @ Tensor([[0.0], [1.0]])
            r2 = ad.sub(t2, ad.mul(t1, t1)) * 10.0
            return [ad.reshape(t1, (1,)), ad.reshape(r2, (1,))]

        tau = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        res = gauss_newton(fn, [tau], 10, LearnerConfig())
        r_final = np.concatenate([v.reshape(-1) for v in
                                  [o.data for o in fn([tau])]])
        assert np.linalg.norm(r_final) < 1e-6
        assert len(res.losses) <= 11

    def test_cg_normal_equation_residual(self, rng):
        A = rng.standard_normal((14, 7))
        b = rng.standard_normal(14)
        tau = Tensor(rng.standard_normal(7), requires_grad=True)
        res = gauss_newton(linear_residual(A, b), [tau], 1,
                           LearnerConfig(damping=1e-4, cg_iters=10))
        assert res.cg_residuals[0] <= 1e-6

    def test_monotone_losses(self, rng):
        def fn(params):
            p = params[0]
            return ad.sub(ad.sigmoid(p), Tensor(np.full(4, 0.2)))

        tau = Tensor(rng.standard_normal(4) * 2.0, requires_grad=True)
        res = gauss_newton(fn, [tau], 6, LearnerConfig())
        assert all(b <= a for a, b in zip(res.losses, res.losses[1:]))

    def test_nonfinite_loss_reports_iteration(self):
        def fn(params):
            return params[0] * np.inf

        tau = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(NumericalError, match="iteration 0"):
            gauss_newton(fn, [tau], 2, LearnerConfig())


class TestSteepestDescent:
    def test_converges_to_gn_minimizer_on_convex_instance(self, rng):
        n = 5
        q = np.linalg.qr(rng.standard_normal((n, n)))[0]
        A = q @ np.diag(np.linspace(1.0, 2.5, n))     # mild conditioning
        b = rng.standard_normal(n)
        tau_gn = Tensor(np.zeros(n), requires_grad=True)
        gauss_newton(linear_residual(A, b), [tau_gn], 1,
                     LearnerConfig(damping=0.0, cg_iters=n))
        tau_sd = Tensor(np.zeros(n), requires_grad=True)
        res = steepest_descent(linear_residual(A, b), [tau_sd], 200,
                               LearnerConfig(damping=0.0))
        assert np.linalg.norm(tau_sd.data - tau_gn.data) < 1e-4
        assert all(y <= x for x, y in zip(res.losses, res.losses[1:]))


class TestMemoryBuffer:
    def sample(self, rng, t=0):
        return TargetSample(l3_im=Tensor(rng.random((2, 2, 2))), l3_fl=None,
                            encoded=Tensor(rng.random((1, 2, 2))),
                            weights=Tensor(rng.random((1, 2, 2))),
                            frame_index=t)

    def test_first_annotated_frame_pinned(self, rng):
        buf = MemoryBuffer()
        buf.add(self.sample(rng, 0), pinned=True)
        assert len(buf) == 1 and buf.has_pinned

    def test_capacity_and_pinned_survival(self, rng):
        buf = MemoryBuffer(capacity=8)
        buf.add(self.sample(rng, 0), pinned=True)
        for t in range(1, 10):
            buf.add(self.sample(rng, t))
        assert len(buf) == 8
        samples, _ = buf.samples()
        assert samples[0].frame_index == 0          # pinned survived
        frames = [s.frame_index for s in samples]
        assert frames == [0, 3, 4, 5, 6, 7, 8, 9]   # oldest unpinned evicted

    def test_decay_weights(self, rng):
        buf = MemoryBuffer(decay=0.9, pinned_weight=2.0)
        buf.add(self.sample(rng, 0), pinned=True)
        for t in (1, 2, 3):
            buf.add(self.sample(rng, t))
        _, w = buf.samples()
        np.testing.assert_allclose(w, [2.0, 0.9 ** 2, 0.9, 1.0], atol=1e-15)
        assert w[0] == max(w)

    def test_weights_positive(self, rng):
        buf = MemoryBuffer()
        for t in range(5):
            buf.add(self.sample(rng, t), pinned=(t == 0))
        _, w = buf.samples()
        assert all(x > 0 for x in w)


class TestOptimize:
    def make_buffer(self, rng, n=3, with_flow=False, c_in=5, d=3):
        buf = MemoryBuffer()
        for t in range(n):
            l3 = Tensor(rng.standard_normal((c_in, 4, 4)))
            l3f = Tensor(rng.standard_normal((c_in, 4, 4))) if with_flow else None
            buf.add(TargetSample(l3_im=l3, l3_fl=l3f,
                                 encoded=Tensor(rng.standard_normal((d, 4, 4))),
                                 weights=Tensor(0.2 + rng.random((d, 4, 4))),
                                 frame_index=t),
                    pinned=(t == 0))
        return buf

    def test_loss_decreases_mode_none(self, rng):
        fp = FusionParams.init(rng, "none", 3)
        tm = TargetModelParams.init_random(rng, 5, 3, with_flow=False, c_mid=2,
                                           reg_lambda=1e-3)
        buf = self.make_buffer(rng)
        res = optimize(tm, buf, fp, LearnerConfig(), outer_iters=5)
        assert res.losses[-1] < res.losses[0]
        assert all(y <= x for x, y in zip(res.losses, res.losses[1:]))

    def test_first_step_solves_linear_subproblem(self, rng):
        # with the expand filter at zero and no regularizer the data term is
        # linear in that filter, so one GN step must match the dense solve
        fp = FusionParams.init(rng, "none", 2)
        tm = TargetModelParams.init_random(rng, 3, 2, with_flow=False, c_mid=2,
                                           reg_lambda=0.0)
        tm.tau1[1].data[:] = 0.0
        buf = self.make_buffer(rng, n=2, c_in=3, d=2)
        buf._entries = buf._entries[:2]
        samples, sw = buf.samples()

        rows, targets = [], []
        for s, w_s in zip(samples, sw):
            reduced = np.einsum("mc,chw->mhw", tm.tau1[0].data[:, :, 0, 0],
                                s.l3_im.data)
            red_pad = np.pad(reduced, ((0, 0), (1, 1), (1, 1)))
            for d in range(2):
                for y in range(4):
                    for x in range(4):
                        row = np.zeros((2, 2, 3, 3))
                        row[d] = red_pad[:, y:y + 3, x:x + 3]
                        wgt = np.sqrt(w_s) * s.weights.data[d, y, x]
                        rows.append(wgt * row.reshape(-1))
                        targets.append(wgt * s.encoded.data[d, y, x])
        A = np.stack(rows)
        y = np.array(targets)
        ref = np.linalg.lstsq(A, y, rcond=None)[0]

        optimize(tm, buf, fp, LearnerConfig(damping=0.0, cg_iters=100),
                 outer_iters=1)
        assert np.linalg.norm(tm.tau1[1].data.reshape(-1) - ref) < 1e-8

    def test_steepest_descent_mode(self, rng):
        fp = FusionParams.init(rng, "none", 3)
        tm = TargetModelParams.init_random(rng, 5, 3, with_flow=False, c_mid=2)
        buf = self.make_buffer(rng)
        res = optimize(tm, buf, fp, LearnerConfig(mode="steepest_descent",
                                                  sd_steps=10))
        assert res.losses[-1] < res.losses[0]

    def test_attention_mode_decreases(self, rng):
        fp = FusionParams.init(rng, "attention", 3)
        tm = TargetModelParams.init_random(rng, 5, 3, with_flow=True, c_mid=2)
        buf = self.make_buffer(rng, with_flow=True)
        res = optimize(tm, buf, fp, LearnerConfig(), outer_iters=3)
        assert res.losses[-1] < res.losses[0]
        assert all(y <= x for x, y in zip(res.losses, res.losses[1:]))

    def test_empty_buffer_rejected(self, rng):
        fp = FusionParams.init(rng, "none", 3)
        tm = TargetModelParams.init_random(rng, 5, 3, with_flow=False)
        with pytest.raises(ValueError, match="empty buffer"):
            optimize(tm, MemoryBuffer(), fp, LearnerConfig())


def test_config_validation():
    with pytest.raises(ValueError, match="damping"):
        LearnerConfig(damping=-1.0)
    with pytest.raises(ValueError, match="unknown learner mode"):
        LearnerConfig(mode="adam")
    with pytest.raises(ValueError, match=">= 1"):
        LearnerConfig(cg_iters=0)
