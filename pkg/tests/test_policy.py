"""Fusion network and loss tests.

The forward oracle is a loop-free numpy reimplementation of the published
equations operating on the network's raw weight arrays; losses are checked
against hand arithmetic and finite differences.
"""

import math

import numpy as np
import pytest

from drivecoach.errors import UsageError
from drivecoach.nn import Tensor, ShapeError
from drivecoach.policy import (
    ACTION_DIM,
    EMBED_DIM,
    FusionPolicyNet,
    LossReport,
    distill_loss,
    entropy_bonus,
    kl_penalty,
    kl_to_teacher,
    ppo_policy_loss,
    q_value_loss,
    teacher_distribution,
    total_loss,
    value_loss,
    value_targets,
)

IN_DIM = 42


def reference_forward(weights: dict, x: np.ndarray):
    """Straight-line forward pass: encoders, attention fusion, heads."""

    def mlp(prefix):
        h = np.tanh(x @ weights[f"{prefix}.w1"] + weights[f"{prefix}.b1"])
        return np.tanh(h @ weights[f"{prefix}.w2"] + weights[f"{prefix}.b2"])

    def soft(z):
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    h_s = mlp("f_s")
    h_t = mlp("f_t")
    teacher_pi = soft(h_t @ weights["teacher_pi.w"] + weights["teacher_pi.b"])
    teacher_q = h_t @ weights["teacher_q.w"] + weights["teacher_q.b"]

    heads = []
    alphas = []
    for i in range(2):
        q = h_s @ weights[f"attn{i}.wq"]
        k = h_t @ weights[f"attn{i}.wk"]
        v = h_t @ weights[f"attn{i}.wv"]
        score = (q * k).sum(axis=-1, keepdims=True) / math.sqrt(EMBED_DIM)
        alpha = soft(score)  # one key position: always 1.0
        alphas.append(alpha)
        heads.append(alpha * v)
    fused = np.concatenate(heads, axis=-1) @ weights["attn_out.w"]
    h = fused + h_s

    pi = soft(h @ weights["pi.w"] + weights["pi.b"])
    q_values = h @ weights["q.w"] + weights["q.b"]
    v_out = h @ weights["v.w"] + weights["v.b"]
    return pi, q_values, v_out, teacher_pi, teacher_q, alphas


def batch_obs(rng, n=4):
    return rng.normal(size=(n, IN_DIM))


class TestForward:
    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        net = FusionPolicyNet(IN_DIM, seed=1)
        x = batch_obs(rng, 6)
        out = net.forward(x)
        ref = reference_forward(net.params.state_dict(), x)
        np.testing.assert_allclose(out.pi.data, ref[0], atol=1e-10)
        np.testing.assert_allclose(out.q_values.data, ref[1], atol=1e-10)
        np.testing.assert_allclose(out.v.data, ref[2], atol=1e-10)
        np.testing.assert_allclose(out.teacher_pi_hat.data, ref[3], atol=1e-10)
        np.testing.assert_allclose(out.teacher_q_hat.data, ref[4], atol=1e-10)

    def test_output_invariants(self):
        rng = np.random.default_rng(3)
        net = FusionPolicyNet(IN_DIM, seed=2)
        out = net.forward(batch_obs(rng, 5))
        assert out.pi.data.shape == (5, ACTION_DIM)
        assert out.q_values.data.shape == (5, ACTION_DIM)
        assert out.teacher_pi_hat.data.shape == (5, ACTION_DIM)
        assert out.teacher_q_hat.data.shape == (5, ACTION_DIM)
        assert out.v.data.shape == (5, 1)
        np.testing.assert_allclose(out.pi.data.sum(axis=-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(out.teacher_pi_hat.data.sum(axis=-1), 1.0, atol=1e-9)
        for alpha in out.attention:
            np.testing.assert_allclose(alpha.data.sum(axis=-1), 1.0, atol=1e-9)
        for field in (out.pi, out.q_values, out.v, out.teacher_pi_hat, out.teacher_q_hat):
            assert np.all(np.isfinite(field.data))

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        net = FusionPolicyNet(IN_DIM, seed=4)
        x = batch_obs(rng)
        a = net.forward(x)
        b = net.forward(x)
        assert np.array_equal(a.pi.data, b.pi.data)
        assert np.array_equal(a.v.data, b.v.data)

    def test_zero_value_projection_reduces_to_student_path(self):
        rng = np.random.default_rng(6)
        net = FusionPolicyNet(IN_DIM, seed=7)
        for i in range(2):
            net.params[f"attn{i}.wv"].data[:] = 0.0
        x = batch_obs(rng)
        before = net.forward(x)
        # the teacher encoder no longer reaches the fused embedding
        net.params["f_t.w1"].data += rng.normal(size=net.params["f_t.w1"].data.shape)
        after = net.forward(x)
        assert np.array_equal(before.pi.data, after.pi.data)
        assert np.array_equal(before.v.data, after.v.data)
        # h reduces to h_s exactly: recompute the student path by hand
        w = net.params.state_dict()
        h_s = np.tanh(np.tanh(x @ w["f_s.w1"] + w["f_s.b1"]) @ w["f_s.w2"] + w["f_s.b2"])
        def soft(z):
            z = z - z.max(axis=-1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(after.pi.data, soft(h_s @ w["pi.w"] + w["pi.b"]), atol=1e-12)

    def test_no_fusion_variant_ignores_teacher_encoder(self):
        rng = np.random.default_rng(8)
        net = FusionPolicyNet(IN_DIM, seed=9, use_fusion=False)
        x = batch_obs(rng)
        before = net.forward(x)
        net.params["f_t.w2"].data += 1.0
        net.params["attn0.wv"].data += 1.0
        after = net.forward(x)
        assert np.array_equal(before.pi.data, after.pi.data)
        assert np.array_equal(before.q_values.data, after.q_values.data)
        assert np.array_equal(before.v.data, after.v.data)

    def test_wrong_input_dimension_rejected(self):
        net = FusionPolicyNet(IN_DIM, seed=0)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((3, IN_DIM + 1)))

    def test_single_observation_accepted(self):
        net = FusionPolicyNet(IN_DIM, seed=0)
        out = net.forward(np.zeros(IN_DIM))
        assert out.pi.data.shape == (1, ACTION_DIM)

    def test_act_greedy_is_argmax(self):
        rng = np.random.default_rng(11)
        net = FusionPolicyNet(IN_DIM, seed=10)
        x = rng.normal(size=IN_DIM)
        action, logp, value = net.act(x, greedy=True)
        out = net.forward(x)
        assert action == int(np.argmax(out.pi.data[0]))
        assert logp == pytest.approx(math.log(out.pi.data[0, action]))
        assert value == pytest.approx(float(out.v.data[0, 0]))

    def test_act_sampling_deterministic_per_rng(self):
        net = FusionPolicyNet(IN_DIM, seed=12)
        x = np.zeros(IN_DIM)
        a = [net.act(x, rng=np.random.default_rng(3))[0] for _ in range(3)]
        assert a[0] == a[1] == a[2]


class TestValueLoss:
    def test_zero_when_exact(self):
        v = Tensor(np.array([[1.0], [2.0], [3.0]]))
        assert value_loss(v, np.array([1.0, 2.0, 3.0])).data == pytest.approx(0.0)

    def test_terminal_target_is_reward(self):
        t = value_targets(rewards=np.array([4.0]), next_values=np.array([9.0]),
                          dones=np.array([True]), gamma=0.99)
        assert t[0] == pytest.approx(4.0)

    def test_bootstrap_target(self):
        t = value_targets(rewards=np.array([1.0]), next_values=np.array([2.0]),
                          dones=np.array([False]), gamma=0.99)
        assert t[0] == pytest.approx(1.0 + 0.99 * 2.0)

    def test_hand_computed_msbe(self):
        v = Tensor(np.array([[1.0], [0.0], [2.0]]))
        targets = np.array([2.0, 0.5, 2.0])
        # ((1-2)^2 + (0-0.5)^2 + 0) / 3
        want = (1.0 + 0.25 + 0.0) / 3.0
        assert value_loss(v, targets).data == pytest.approx(want, abs=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(UsageError):
            value_loss(Tensor(np.zeros((0, 1))), np.zeros(0))

    def test_q_head_loss_hits_taken_action_only(self):
        q = Tensor(np.array([[1.0, 5.0, 0.0, 0.0, 0.0],
                             [0.0, 0.0, 2.0, 0.0, 0.0]]))
        actions = np.array([1, 2])
        targets = np.array([4.0, 2.0])
        # ((5-4)^2 + (2-2)^2) / 2
        assert q_value_loss(q, actions, targets).data == pytest.approx(0.5)


class TestPpoLoss:
    def test_ratio_one_recovers_mean_advantage(self):
        logp = np.log(np.full((4, ACTION_DIM), 0.2))
        actions = np.array([0, 1, 2, 3])
        adv = np.array([1.0, -2.0, 0.5, 3.0])
        old = logp[np.arange(4), actions]
        loss = ppo_policy_loss(Tensor(logp), actions, old, adv, clip_range=0.2)
        assert loss.data == pytest.approx(-adv.mean(), abs=1e-12)

    def test_positive_advantage_clips_at_upper_bound(self):
        # new prob 0.4 vs old 0.2: ratio 2, clipped to 1.2 for positive advantage
        new = np.full((1, ACTION_DIM), 0.15)
        new[0, 0] = 0.4
        old_logp = np.array([math.log(0.2)])
        loss = ppo_policy_loss(Tensor(np.log(new)), np.array([0]), old_logp,
                               np.array([2.0]), clip_range=0.2)
        assert loss.data == pytest.approx(-1.2 * 2.0, abs=1e-12)

    def test_negative_advantage_clips_at_lower_bound(self):
        new = np.full((1, ACTION_DIM), 0.21)
        new[0, 0] = 0.1  # ratio 0.5 vs old 0.2
        old_logp = np.array([math.log(0.2)])
        loss = ppo_policy_loss(Tensor(np.log(new)), np.array([0]), old_logp,
                               np.array([-1.0]), clip_range=0.2)
        # max(0.5*-1, 0.8*-1) picked by -min(...): clipped arm -0.8 wins
        assert loss.data == pytest.approx(0.8, abs=1e-12)

    def test_random_batch_matches_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            n = 16
            logits = rng.normal(size=(n, ACTION_DIM))
            z = logits - logits.max(axis=-1, keepdims=True)
            log_pi = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            actions = rng.integers(ACTION_DIM, size=n)
            old = log_pi[np.arange(n), actions] + rng.normal(scale=0.3, size=n)
            adv = rng.normal(size=n)
            eps = 0.15
            ratio = np.exp(log_pi[np.arange(n), actions] - old)
            surrogate = np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)
            want = -surrogate.mean()
            got = ppo_policy_loss(Tensor(log_pi), actions, old, adv, clip_range=eps)
            assert got.data == pytest.approx(want, abs=1e-12)


class TestKl:
    def test_identical_distributions_zero(self):
        p = np.array([0.2, 0.2, 0.2, 0.2, 0.2])
        assert float(kl_to_teacher(Tensor(p), p).data) == pytest.approx(0.0, abs=1e-9)

    def test_hand_computed_value(self):
        ps = np.array([0.7, 0.1, 0.1, 0.05, 0.05])
        pt = teacher_distribution(0)
        want = (0.7 * math.log(0.7 / 0.9)
                + 0.1 * math.log(0.1 / 0.025) * 2
                + 0.05 * math.log(0.05 / 0.025) * 2)
        assert float(kl_to_teacher(Tensor(ps), pt).data) == pytest.approx(want, abs=1e-9)

    def test_batched_per_sample(self):
        ps = np.array([[0.7, 0.1, 0.1, 0.05, 0.05],
                       [0.9, 0.025, 0.025, 0.025, 0.025]])
        pt = np.stack([teacher_distribution(0), teacher_distribution(0)])
        kl = kl_to_teacher(Tensor(ps), pt)
        assert kl.data.shape == (2,)
        assert kl.data[1] == pytest.approx(0.0, abs=1e-9)

    def test_teacher_floor_keeps_kl_finite(self):
        ps = np.array([0.2, 0.2, 0.2, 0.2, 0.2])
        pt = np.array([1.0, 0.0, 0.0, 0.0, 0.0])  # hard one-hot
        kl = float(kl_to_teacher(Tensor(ps), pt).data)
        assert math.isfinite(kl) and kl > 0

    def test_penalty_hinge(self):
        assert kl_penalty(0.5, sigma=1.0, lam=10.0) == 0.0
        assert kl_penalty(1.0, sigma=1.0, lam=10.0) == 0.0
        assert kl_penalty(1.3, sigma=1.0, lam=10.0) == pytest.approx(10.0 * 0.09)
        # strictly increasing above sigma
        grid = [kl_penalty(k, 1.0, 10.0) for k in (1.1, 1.5, 2.0, 3.0)]
        assert all(a < b for a, b in zip(grid, grid[1:]))

    def test_penalty_on_tensor(self):
        kl = Tensor(np.array([0.5, 1.5]))
        pen = kl_penalty(kl, sigma=1.0, lam=10.0)
        np.testing.assert_allclose(pen.data, [0.0, 10.0 * 0.25], atol=1e-12)

    def test_teacher_distribution_shape(self):
        d = teacher_distribution(3)
        assert d.shape == (ACTION_DIM,)
        assert d.sum() == pytest.approx(1.0)
        assert d[3] == pytest.approx(0.9)
        assert d[0] == pytest.approx(0.025)


class TestDistill:
    def test_confident_head_zero_loss(self):
        log_pi = np.log(np.full((3, ACTION_DIM), 1e-12))
        log_pi[np.arange(3), [1, 1, 2]] = 0.0  # prob 1 on the demo action
        actions = np.array([1, 1, 2])
        assert float(distill_loss(Tensor(log_pi), actions).data) == pytest.approx(0.0)

    def test_uniform_head_log5(self):
        log_pi = np.log(np.full((4, ACTION_DIM), 0.2))
        actions = np.array([0, 1, 2, 3])
        got = float(distill_loss(Tensor(log_pi), actions).data)
        assert got == pytest.approx(math.log(5.0), abs=1e-12)

    def test_mixed_batch_mean_nll(self):
        probs = np.array([[0.5, 0.2, 0.1, 0.1, 0.1],
                          [0.1, 0.6, 0.1, 0.1, 0.1]])
        actions = np.array([0, 1])
        want = -(math.log(0.5) + math.log(0.6)) / 2.0
        got = float(distill_loss(Tensor(np.log(probs)), actions).data)
        assert got == pytest.approx(want, abs=1e-12)

    def test_empty_demo_set_is_zero(self):
        out = distill_loss(Tensor(np.zeros((0, ACTION_DIM))), np.zeros(0, dtype=int))
        assert float(out.data) == 0.0


class TestTotalLoss:
    def test_policy_only(self):
        total, report = total_loss(
            policy_loss=Tensor(np.asarray(1.5)), value=Tensor(np.asarray(2.0)),
            distill=Tensor(np.asarray(3.0)), kl_pen=Tensor(np.asarray(4.0)),
            entropy=Tensor(np.asarray(0.7)), kl_value=0.0,
            c_v=0.0, c_d=0.0, c_e=0.0,
        )
        assert float(total.data) == pytest.approx(1.5 + 4.0)  # kl penalty has no weight knob
        assert isinstance(report, LossReport)

    def test_linear_combination(self):
        total, report = total_loss(
            policy_loss=Tensor(np.asarray(1.0)), value=Tensor(np.asarray(2.0)),
            distill=Tensor(np.asarray(3.0)), kl_pen=Tensor(np.asarray(0.5)),
            entropy=Tensor(np.asarray(0.25)), kl_value=0.9,
            c_v=0.5, c_d=1.0, c_e=0.01,
        )
        want = 1.0 + 0.5 * 2.0 + 1.0 * 3.0 + 0.5 - 0.01 * 0.25
        assert float(total.data) == pytest.approx(want, abs=1e-12)
        assert report.total == pytest.approx(want, abs=1e-12)
        assert report.policy_loss == 1.0
        assert report.value_loss == 2.0
        assert report.distill_loss == 3.0
        assert report.kl_penalty == 0.5
        assert report.kl_value == 0.9
        assert report.entropy == 0.25

    def test_window_closed_removes_distillation(self):
        total, _ = total_loss(
            policy_loss=Tensor(np.asarray(1.0)), value=Tensor(np.asarray(0.0)),
            distill=Tensor(np.asarray(100.0)), kl_pen=Tensor(np.asarray(0.0)),
            entropy=Tensor(np.asarray(0.0)), kl_value=0.0,
            c_v=0.5, c_d=0.0, c_e=0.01,
        )
        assert float(total.data) == pytest.approx(1.0)


class TestGradients:
    def test_distillation_path_separated(self):
        """With c_d=0 and no KL, teacher heads receive no gradient."""
        rng = np.random.default_rng(20)
        net = FusionPolicyNet(IN_DIM, seed=21)
        x = batch_obs(rng, 8)
        actions = rng.integers(ACTION_DIM, size=8)
        out = net.forward(x)
        old_logp = out.log_pi.data[np.arange(8), actions].copy()
        adv = rng.normal(size=8)

        policy = ppo_policy_loss(out.log_pi, actions, old_logp, adv, 0.2)
        value = value_loss(out.v, rng.normal(size=8))
        ent = entropy_bonus(out.pi, out.log_pi)
        total, _ = total_loss(policy_loss=policy, value=value,
                              distill=Tensor(np.asarray(0.0)),
                              kl_pen=Tensor(np.asarray(0.0)),
                              entropy=ent, kl_value=0.0,
                              c_v=0.5, c_d=0.0, c_e=0.01)
        net.params.zero_grad()
        total.backward()
        for name in ("teacher_pi.w", "teacher_pi.b", "teacher_q.w", "teacher_q.b"):
            grad = net.params[name].grad
            assert grad is None or np.all(grad == 0.0)
        # while the shared encoder path does train
        assert net.params["f_s.w1"].grad is not None
        assert np.any(net.params["f_s.w1"].grad != 0.0)

    def test_distill_trains_teacher_path_not_student_encoder(self):
        rng = np.random.default_rng(22)
        net = FusionPolicyNet(IN_DIM, seed=23)
        x = batch_obs(rng, 4)
        out = net.forward(x)
        loss = distill_loss(out.log_teacher_pi_hat, np.array([0, 1, 2, 3]))
        net.params.zero_grad()
        loss.backward()
        assert np.any(net.params["teacher_pi.w"].grad != 0.0)
        assert np.any(net.params["f_t.w1"].grad != 0.0)
        for name in ("f_s.w1", "f_s.w2", "pi.w", "v.w"):
            grad = net.params[name].grad
            assert grad is None or np.all(grad == 0.0)

    def test_finite_difference_gradcheck(self):
        """Central differences on the full objective for sampled coordinates."""
        rng = np.random.default_rng(30)
        net = FusionPolicyNet(IN_DIM, seed=31)
        x = batch_obs(rng, 4)
        actions = np.array([0, 1, 2, 3])
        adv = rng.normal(size=4)
        targets = rng.normal(size=4)
        teacher_pi = np.stack([teacher_distribution(a) for a in actions])

        def objective():
            out = net.forward(x)
            old_logp = np.log(np.full(4, 0.2))
            policy = ppo_policy_loss(out.log_pi, actions, old_logp, adv, 0.2)
            value = value_loss(out.v, targets)
            kl = kl_to_teacher(out.pi, teacher_pi)
            pen = kl_penalty(kl, sigma=0.05, lam=10.0)
            from drivecoach.nn import tmean

            distill = distill_loss(out.log_teacher_pi_hat, actions)
            ent = entropy_bonus(out.pi, out.log_pi)
            return total_loss(policy_loss=policy, value=value, distill=distill,
                              kl_pen=tmean(pen), entropy=ent, kl_value=0.0,
                              c_v=0.5, c_d=1.0, c_e=0.01)[0]

        total = objective()
        net.params.zero_grad()
        total.backward()

        for name in ("f_s.w1", "f_t.w2", "attn0.wq", "attn1.wv", "attn_out.w",
                     "pi.w", "v.w", "teacher_pi.w", "q.w"):
            param = net.params[name]
            flat_idx = rng.integers(param.data.size, size=3)
            for idx in flat_idx:
                ij = np.unravel_index(idx, param.data.shape)
                eps = 1e-6
                orig = param.data[ij]
                param.data[ij] = orig + eps
                up = float(objective().data)
                param.data[ij] = orig - eps
                down = float(objective().data)
                param.data[ij] = orig
                numeric = (up - down) / (2 * eps)
                analytic = param.grad[ij] if param.grad is not None else 0.0
                assert numeric == pytest.approx(analytic, abs=1e-5), name
