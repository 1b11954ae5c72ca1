"""Attention-fused actor-critic network and its training losses.

Two encoders read the same flattened observation: a student branch and a
teacher branch. Multi-head attention queries the student embedding against
the teacher embedding (a single key/value slot per head), the heads are
concatenated, projected back down, and added to the student embedding as a
residual. Policy, action-value, and state-value heads read the fused vector;
two auxiliary heads read the raw teacher embedding so that demonstration
distillation trains the teacher branch without steering the student heads
directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .nn import (
    ParamStore,
    ShapeError,
    Tensor,
    add,
    clip,
    concat,
    exp,
    gather,
    log,
    log_softmax,
    matmul,
    minimum,
    mul,
    neg,
    relu,
    scale,
    softmax,
    sub,
    tanh,
    tmean,
    tsum,
)

ACTION_DIM = 5
EMBED_DIM = 128
N_HEADS = 2

# probability mass a teacher demonstration puts on its chosen action; the
# remainder spreads evenly so the KL term stays finite
TEACHER_CONFIDENCE = 0.9

# floors applied before taking logs inside the KL
TEACHER_PROB_FLOOR = 1e-8
STUDENT_PROB_FLOOR = 1e-12


@dataclass
class PolicyOutput:
    """One forward pass. All fields are graph tensors over a (batch, ...) axis."""

    pi: Tensor  # (B, 5) action distribution from the fused embedding
    log_pi: Tensor  # (B, 5) its log, computed stably for ratios and entropy
    q_values: Tensor  # (B, 5) action values from the fused embedding
    v: Tensor  # (B, 1) state value
    teacher_pi_hat: Tensor  # (B, 5) demonstration head on the teacher branch
    log_teacher_pi_hat: Tensor  # (B, 5)
    teacher_q_hat: Tensor  # (B, 5) action-value head on the teacher branch
    attention: list  # per head: (B, 1) weights over the single teacher slot


class FusionPolicyNet:
    """Actor-critic with a teacher branch fused in through attention.

    With use_fusion False the residual fusion is skipped and every head that
    drives behaviour reads the student embedding alone; the teacher branch
    parameters still exist (keeping checkpoints shape-stable) but cannot
    influence actions.
    """

    def __init__(self, input_dim: int, seed: int = 0, use_fusion: bool = True):
        self.input_dim = int(input_dim)
        self.use_fusion = bool(use_fusion)
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        for enc in ("f_s", "f_t"):
            self._linear(rng, f"{enc}.w1", f"{enc}.b1", self.input_dim, EMBED_DIM)
            self._linear(rng, f"{enc}.w2", f"{enc}.b2", EMBED_DIM, EMBED_DIM)
        self._linear(rng, "teacher_pi.w", "teacher_pi.b", EMBED_DIM, ACTION_DIM)
        self._linear(rng, "teacher_q.w", "teacher_q.b", EMBED_DIM, ACTION_DIM)
        for i in range(N_HEADS):
            for proj in ("wq", "wk", "wv"):
                self._weight(rng, f"attn{i}.{proj}", EMBED_DIM, EMBED_DIM)
        self._weight(rng, "attn_out.w", N_HEADS * EMBED_DIM, EMBED_DIM)
        self._linear(rng, "pi.w", "pi.b", EMBED_DIM, ACTION_DIM)
        self._linear(rng, "q.w", "q.b", EMBED_DIM, ACTION_DIM)
        self._linear(rng, "v.w", "v.b", EMBED_DIM, 1)

    def _weight(self, rng, name, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        self.params.add(name, rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def _linear(self, rng, w_name, b_name, fan_in, fan_out):
        self._weight(rng, w_name, fan_in, fan_out)
        self.params.add(b_name, np.zeros(fan_out))

    def _encode(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = tanh(add(matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return tanh(add(matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"]))

    def forward(self, obs) -> PolicyOutput:
        x = np.asarray(obs, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(
                f"expected observations of width {self.input_dim}, got {x.shape}"
            )
        p = self.params
        xt = Tensor(x)
        h_s = self._encode(xt, "f_s")
        h_t = self._encode(xt, "f_t")

        teacher_logits = add(matmul(h_t, p["teacher_pi.w"]), p["teacher_pi.b"])
        teacher_pi_hat = softmax(teacher_logits)
        log_teacher_pi_hat = log_softmax(teacher_logits)
        teacher_q_hat = add(matmul(h_t, p["teacher_q.w"]), p["teacher_q.b"])

        heads = []
        alphas = []
        for i in range(N_HEADS):
            q = matmul(h_s, p[f"attn{i}.wq"])
            k = matmul(h_t, p[f"attn{i}.wk"])
            v = matmul(h_t, p[f"attn{i}.wv"])
            score = scale(tsum(mul(q, k), axis=-1, keepdims=True), 1.0 / math.sqrt(EMBED_DIM))
            # one teacher slot, so the weight is identically 1; kept in softmax
            # form so the output contract (rows sum to 1) is explicit
            alpha = softmax(score)
            alphas.append(alpha)
            heads.append(mul(alpha, v))
        if self.use_fusion:
            fused = matmul(concat(heads, axis=-1), p["attn_out.w"])
            h = add(fused, h_s)
        else:
            h = h_s

        logits = add(matmul(h, p["pi.w"]), p["pi.b"])
        return PolicyOutput(
            pi=softmax(logits),
            log_pi=log_softmax(logits),
            q_values=add(matmul(h, p["q.w"]), p["q.b"]),
            v=add(matmul(h, p["v.w"]), p["v.b"]),
            teacher_pi_hat=teacher_pi_hat,
            log_teacher_pi_hat=log_teacher_pi_hat,
            teacher_q_hat=teacher_q_hat,
            attention=alphas,
        )

    def act(self, obs, rng: np.random.Generator | None = None, greedy: bool = False):
        """Pick one action for a single observation.

        Returns (action, log-prob of that action, state value). Sampling
        needs an explicit generator so rollouts stay reproducible.
        """
        out = self.forward(obs)
        probs = out.pi.data[0]
        if greedy:
            action = int(np.argmax(probs))
        else:
            if rng is None:
                raise UsageError("sampling an action requires a random generator")
            action = int(rng.choice(ACTION_DIM, p=probs))
        return action, float(out.log_pi.data[0, action]), float(out.v.data[0, 0])

    def architecture_id(self) -> str:
        """Identity string stored in checkpoints to reject mismatched loads."""
        return (
            f"fusion-v1:in{self.input_dim}:embed{EMBED_DIM}"
            f":heads{N_HEADS}:act{ACTION_DIM}:fused{int(self.use_fusion)}"
        )

    def state_dict(self) -> dict:
        return self.params.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.params.load_state_dict(state)


def teacher_distribution(action: int) -> np.ndarray:
    """Smoothed one-hot over actions for a teacher demonstration."""
    d = np.full(ACTION_DIM, (1.0 - TEACHER_CONFIDENCE) / (ACTION_DIM - 1))
    d[int(action)] = TEACHER_CONFIDENCE
    return d


def value_targets(rewards, next_values, dones, gamma: float) -> np.ndarray:
    """One-step bootstrap targets; terminal transitions use the reward alone."""
    r = np.asarray(rewards, dtype=np.float64)
    nv = np.asarray(next_values, dtype=np.float64)
    live = 1.0 - np.asarray(dones, dtype=np.float64)
    return r + gamma * nv * live


def value_loss(values: Tensor, targets) -> Tensor:
    """Mean squared error of the state-value head against bootstrap targets."""
    if values.data.size == 0:
        raise UsageError("value loss needs a non-empty batch")
    t = Tensor(np.asarray(targets, dtype=np.float64).reshape(values.data.shape))
    d = sub(values, t)
    return tmean(mul(d, d))


def q_value_loss(q_values: Tensor, actions, targets) -> Tensor:
    """Same targets applied to the action-value head at the taken action."""
    if q_values.data.size == 0:
        raise UsageError("action-value loss needs a non-empty batch")
    qa = gather(q_values, np.asarray(actions, dtype=np.int64))
    t = Tensor(np.asarray(targets, dtype=np.float64).reshape(qa.data.shape))
    d = sub(qa, t)
    return tmean(mul(d, d))


def ppo_policy_loss(log_pi: Tensor, actions, logp_old, advantages, clip_range: float) -> Tensor:
    """Clipped surrogate objective, negated for minimization."""
    if log_pi.data.shape[0] == 0:
        raise UsageError("policy loss needs a non-empty batch")
    logp_new = gather(log_pi, np.asarray(actions, dtype=np.int64))
    old = np.asarray(logp_old, dtype=np.float64).reshape(logp_new.data.shape)
    adv = Tensor(np.asarray(advantages, dtype=np.float64).reshape(logp_new.data.shape))
    ratio = exp(sub(logp_new, Tensor(old)))
    surrogate = minimum(mul(ratio, adv), mul(clip(ratio, 1.0 - clip_range, 1.0 + clip_range), adv))
    return neg(tmean(surrogate))


def kl_to_teacher(pi_student: Tensor, pi_teacher) -> Tensor:
    """KL(student || teacher), per sample for batched input.

    The teacher distribution is floored and renormalized so a hard one-hot
    cannot produce an infinite divergence; the student side is floored only
    at the log to guard exact zeros out of a saturated softmax.
    """
    pt = np.asarray(
        pi_teacher.data if isinstance(pi_teacher, Tensor) else pi_teacher,
        dtype=np.float64,
    )
    pt = np.maximum(pt, TEACHER_PROB_FLOOR)
    pt = pt / pt.sum(axis=-1, keepdims=True)
    ps = clip(pi_student, STUDENT_PROB_FLOOR, 1.0)
    return tsum(mul(ps, sub(log(ps), Tensor(np.log(pt)))), axis=-1)


def kl_penalty(kl, sigma: float, lam: float):
    """Quadratic hinge: zero up to the tolerance, lam * (kl - sigma)^2 above."""
    if isinstance(kl, Tensor):
        h = relu(sub(kl, Tensor(np.asarray(float(sigma)))))
        return scale(mul(h, h), lam)
    h = max(0.0, float(kl) - float(sigma))
    return float(lam) * h * h


def distill_loss(log_teacher_pi_hat: Tensor, actions) -> Tensor:
    """Mean negative log-likelihood of demonstrated actions; empty set is 0."""
    acts = np.asarray(actions, dtype=np.int64)
    if acts.size == 0:
        return Tensor(np.asarray(0.0))
    return neg(tmean(gather(log_teacher_pi_hat, acts)))


def entropy_bonus(pi: Tensor, log_pi: Tensor) -> Tensor:
    """Mean policy entropy over the batch."""
    return neg(tmean(tsum(mul(pi, log_pi), axis=-1)))


@dataclass
class LossReport:
    """Scalar snapshot of one update's loss components."""

    total: float
    policy_loss: float
    value_loss: float
    distill_loss: float
    kl_penalty: float
    kl_value: float
    entropy: float


def total_loss(
    policy_loss: Tensor,
    value: Tensor,
    distill: Tensor,
    kl_pen: Tensor,
    entropy: Tensor,
    kl_value: float,
    c_v: float = 0.5,
    c_d: float = 1.0,
    c_e: float = 0.01,
) -> tuple:
    """Weighted sum of the components; returns (graph scalar, float report).

    The KL penalty carries its own multiplier already, so it enters with
    weight 1. kl_value is the raw divergence for the report.
    """
    total = add(policy_loss, scale(value, c_v))
    total = add(total, scale(distill, c_d))
    total = add(total, kl_pen)
    total = sub(total, scale(entropy, c_e))
    report = LossReport(
        total=float(total.data),
        policy_loss=float(policy_loss.data),
        value_loss=float(value.data),
        distill_loss=float(distill.data),
        kl_penalty=float(kl_pen.data),
        kl_value=float(kl_value),
        entropy=float(entropy.data),
    )
    return total, report
