"""Training loop: rollouts, teacher guidance scheduling, updates, evaluation.

The student acts at every step. While the run is inside the guidance window
(the first teacher_window_fraction of the step budget) the teacher is queried
once per decision step and its chosen maneuver is stored alongside the
transition; those labels drive the KL and distillation terms during updates.
Outside the window the teacher is never queried and both terms vanish.

Variants share this one loop:
    V-PPO   no teacher, no fusion (the policy reads the student encoder only)
    A-PPO   fusion on, no teacher
    LA-PPO  fusion on, teacher on
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError
from .nn import (
    AdamState,
    CheckpointError,
    Tensor,
    adam_step,
    add,
    gather,
    load_checkpoint,
    mul,
    neg,
    save_checkpoint,
    scale,
    tsum,
)
from .policy import (
    ACTION_DIM,
    FusionPolicyNet,
    LossReport,
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
from .risk import INFRACTION_EVENTS, RiskParams, delta_ttcp_metric, flag_segments, risk_value
from .sim.engine import FLAT_OBS_DIM, TrafficEnv, observe, trace_record
from .sim.scenarios import ScenarioConfig
from .sim.vehicles import MANEUVER_TOKENS, Maneuver
from .teacher import FlaggedSegment, ScriptedBackend, TeacherAgent

VARIANTS = ("V-PPO", "A-PPO", "LA-PPO")

METRICS_HEADER = "step,variant,scenario,success_rate,eval_reward,avg_speed,delta_ttcp,decision_time_s,seed"
LOSS_HEADER = "update,step,total,policy_loss,value_loss,distill_loss,kl_penalty,kl_value,entropy,clip,sigma"

CHECKPOINT_FORMAT = 1


def normalize_variant(name: str) -> str:
    key = str(name).strip().lower().replace("_", "-")
    for variant in VARIANTS:
        if key == variant.lower():
            return variant
    raise ConfigError(
        f"train.variant: {name!r} is not one of {[v.lower() for v in VARIANTS]}"
    )


@dataclass
class TrainConfig:
    total_steps: int = 100_000
    eval_interval: int = 500
    eval_episodes: int = 20
    rollout_size: int = 1600
    batch_size: int = 128
    epochs: int = 10
    lr: float = 5e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_initial: float = 0.2
    clip_floor: float = 0.02
    teacher_window_fraction: float = 0.10
    sigma_initial: float = 0.1
    sigma_final: float = 2.0
    kl_weight: float = 10.0
    value_coef: float = 0.5
    distill_coef: float = 1.0
    entropy_coef: float = 0.01
    checkpoint_every_evals: int = 10
    seed: int = 0
    variant: str = "LA-PPO"

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)

    def validate(self) -> None:
        positives = (
            "total_steps", "eval_interval", "eval_episodes", "rollout_size",
            "batch_size", "epochs", "checkpoint_every_evals",
        )
        for name in positives:
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must be >= 1, got {getattr(self, name)}")
        if self.batch_size > self.rollout_size:
            raise ConfigError(
                f"train.batch_size: must not exceed rollout_size, got {self.batch_size} > {self.rollout_size}"
            )
        if self.lr <= 0:
            raise ConfigError(f"train.lr: must be > 0, got {self.lr}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"train.gamma: must be in (0, 1], got {self.gamma}")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError(f"train.gae_lambda: must be in [0, 1], got {self.gae_lambda}")
        if not 0 < self.teacher_window_fraction < 1:
            raise ConfigError(
                f"train.teacher_window_fraction: must be in (0, 1), got {self.teacher_window_fraction}"
            )
        if self.sigma_initial <= 0 or self.sigma_final < self.sigma_initial:
            raise ConfigError(
                "train.sigma_initial/sigma_final: need 0 < initial <= final, got "
                f"{self.sigma_initial} and {self.sigma_final}"
            )
        if self.clip_initial <= 0 or self.clip_floor < 0:
            raise ConfigError("train.clip_initial/clip_floor: need initial > 0 and floor >= 0")
        for name in ("kl_weight", "value_coef", "distill_coef", "entropy_coef"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name}: must be >= 0, got {getattr(self, name)}")


def window_steps(cfg: TrainConfig) -> int:
    return int(cfg.teacher_window_fraction * cfg.total_steps)


def clip_schedule(step: float, cfg: TrainConfig) -> float:
    """Linear decay from clip_initial to the floor over the whole budget."""
    progress = min(1.0, max(0.0, step / cfg.total_steps))
    return max(cfg.clip_floor, cfg.clip_initial * (1.0 - progress))


def sigma_schedule(step: float, cfg: TrainConfig) -> float:
    """Linear widening of the KL tolerance across the guidance window."""
    w = window_steps(cfg)
    frac = 1.0 if w == 0 else min(1.0, max(0.0, step / w))
    return cfg.sigma_initial + (cfg.sigma_final - cfg.sigma_initial) * frac


def metrics_row(report: "EvalReport", variant: str, scenario_kind: str, seed: int) -> str:
    """One metrics.csv line; fixed precision keeps identical runs byte-identical."""
    return (
        f"{report.step},{variant},{scenario_kind},"
        f"{report.success_rate:.3f},{report.eval_reward:.6f},"
        f"{report.avg_speed:.6f},{report.delta_ttcp:.6f},"
        f"{report.decision_time:.3f},{seed}"
    )


def gae_advantages(rewards, values, next_values, dones, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates over one stored trajectory segment.

    next_values holds the bootstrap estimate of each transition's successor
    state; terminal transitions ignore it and cut the recursion.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    nv = np.asarray(next_values, dtype=np.float64)
    live = 1.0 - np.asarray(dones, dtype=np.float64)
    deltas = r + gamma * nv * live - v
    adv = np.zeros_like(deltas)
    carry = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        carry = deltas[t] + gamma * lam * live[t] * carry
        adv[t] = carry
    return adv


@dataclass
class EvalReport:
    step: int
    success_rate: float
    eval_reward: float
    avg_speed: float
    delta_ttcp: float
    decision_time: float  # s per forward pass, rounded up to 1 ms resolution


class RolloutBuffer:
    """Fixed-capacity transition store for one collect/update cycle."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ConfigError(f"rollout buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.logp = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.values = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.teacher_actions = np.full(capacity, -1, dtype=np.int64)  # -1: unlabeled
        self.teacher_pi = np.zeros((capacity, ACTION_DIM))
        self.step_ids = np.zeros(capacity, dtype=np.int64)
        self.n = 0

    @property
    def full(self) -> bool:
        return self.n >= self.capacity

    def add(self, *, obs, action, logp, reward, value, done, next_obs, step_id,
            teacher_action=None) -> None:
        if self.full:
            raise UsageError("rollout buffer is full")
        i = self.n
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = int(action)
        self.logp[i] = logp
        self.rewards[i] = reward
        self.values[i] = value
        self.dones[i] = bool(done)
        self.step_ids[i] = int(step_id)
        if teacher_action is not None:
            self.teacher_actions[i] = int(teacher_action)
            self.teacher_pi[i] = teacher_distribution(int(teacher_action))
        self.n += 1

    def clear(self) -> None:
        self.n = 0
        self.teacher_actions[:] = -1


@dataclass
class EpisodeAccumulator:
    """Per-episode bookkeeping for memory writes, reflection, and logging."""

    seed: int = 0
    ret: float = 0.0
    length: int = 0
    actions: list = field(default_factory=list)
    omegas: list = field(default_factory=list)
    taus: list = field(default_factory=list)
    speeds: list = field(default_factory=list)
    z_steps: list = field(default_factory=list)  # step index of each teacher query
    z_list: list = field(default_factory=list)

    def to_meta(self) -> dict:
        return {
            "seed": self.seed, "ret": self.ret, "length": self.length,
            "actions": self.actions, "omegas": self.omegas, "taus": self.taus,
            "speeds": self.speeds, "z_steps": self.z_steps,
        }

    @classmethod
    def from_meta(cls, d: dict, z_rows: np.ndarray | None) -> "EpisodeAccumulator":
        ep = cls(seed=int(d["seed"]), ret=float(d["ret"]), length=int(d["length"]),
                 actions=[int(a) for a in d["actions"]],
                 omegas=[float(w) for w in d["omegas"]],
                 taus=[float(t) for t in d["taus"]],
                 speeds=[float(s) for s in d["speeds"]],
                 z_steps=[int(i) for i in d["z_steps"]])
        if z_rows is not None:
            ep.z_list = [z_rows[i].copy() for i in range(z_rows.shape[0])]
        return ep


class Trainer:
    """Single-threaded train/eval loop with full-state checkpointing."""

    def __init__(self, scenario: ScenarioConfig, train: TrainConfig,
                 risk: RiskParams | None = None, teacher: TeacherAgent | None = None,
                 out_dir=None):
        scenario.validate()
        train.validate()
        self.scenario = scenario
        self.cfg = train
        self.risk_params = risk or RiskParams()
        if train.variant == "LA-PPO":
            self.teacher = teacher or TeacherAgent(ScriptedBackend(), self.risk_params)
        else:
            if teacher is not None:
                raise ConfigError(f"train.variant: {train.variant} does not take a teacher")
            self.teacher = None
        use_fusion = train.variant != "V-PPO"
        self.policy = FusionPolicyNet(FLAT_OBS_DIM, seed=train.seed, use_fusion=use_fusion)
        self.target = FusionPolicyNet(FLAT_OBS_DIM, seed=train.seed, use_fusion=use_fusion)
        self.adam = AdamState.for_params(self.policy.params)
        self.rng = np.random.default_rng(train.seed)
        self.env = TrafficEnv(scenario, self.risk_params)
        self.buffer = RolloutBuffer(train.rollout_size, FLAT_OBS_DIM)
        self.global_step = 0
        self.updates_done = 0
        self.evals_done = 0
        self.episode_index = 0
        self.eval_reports: list[EvalReport] = []
        self._obs: np.ndarray | None = None
        self._ep = EpisodeAccumulator()
        self._episodes_this_collect = 0
        self._stop_at: int | None = None
        self._stopped = False
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # --- rollout collection --------------------------------------------------

    def _begin_episode(self) -> None:
        seed = int(self.rng.integers(2**31 - 1))
        obs = self.env.reset(seed=seed)
        self._obs = obs.flat()
        self._ep = EpisodeAccumulator(seed=seed)

    def _collect_one_step(self) -> None:
        if self._obs is None:
            self._begin_episode()
        in_window = self.global_step < window_steps(self.cfg)
        teacher_action = None
        if self.teacher is not None and in_window:
            decision, z = self.teacher.decide_step(self.env.state)
            teacher_action = int(decision.action)
            self._ep.z_steps.append(self._ep.length)
            self._ep.z_list.append(z)
        action, logp, value = self.policy.act(self._obs, rng=self.rng)
        try:
            out = self.env.step(Maneuver(action))
        except Exception as err:
            raise RuntimeError(
                f"environment fault at global step {self.global_step}, "
                f"episode {self.episode_index}: {err}"
            ) from err
        omega = risk_value(out.info["tau_min"],
                           bool(INFRACTION_EVENTS & out.events), self.risk_params)
        next_flat = out.observation.flat()
        self.buffer.add(obs=self._obs, action=action, logp=logp, reward=out.reward,
                        value=value, done=out.done, next_obs=next_flat,
                        step_id=self.global_step, teacher_action=teacher_action)
        ep = self._ep
        ep.ret += out.reward
        ep.length += 1
        ep.actions.append(action)
        ep.omegas.append(omega)
        ep.taus.append(float(out.info["tau_min"]))
        ep.speeds.append(out.observation.ego_speed)
        self.global_step += 1
        if out.done:
            self._finish_episode(out.events)
        else:
            self._obs = next_flat
        if self.global_step % self.cfg.eval_interval == 0:
            report = self.evaluate()
            self.eval_reports.append(report)
            self.evals_done += 1
            self._append_metrics(report)
            if self.out_dir is not None and self.evals_done % self.cfg.checkpoint_every_evals == 0:
                self.save(self.out_dir / f"checkpoint_step{self.global_step}.dckp")
        if self._stop_at is not None and self.global_step >= self._stop_at:
            self._stopped = True

    def _finish_episode(self, events: set) -> None:
        ep = self._ep
        if self.out_dir is not None:
            line = json.dumps({
                "episode": self.episode_index, "seed": ep.seed,
                "global_step": self.global_step, "length": ep.length,
                "return": ep.ret, "events": sorted(events),
                "success": "success" in events,
            }, sort_keys=True)
            with open(self.out_dir / "episodes.jsonl", "a") as f:
                f.write(line + "\n")
        if self.teacher is not None and ep.z_list:
            # one memory entry per episode, anchored at the riskiest queried step
            best = max(range(len(ep.z_steps)), key=lambda i: ep.omegas[ep.z_steps[i]])
            step_idx = ep.z_steps[best]
            if "collision" in events:
                label = "collision"
            elif "success" in events:
                label = "success"
            else:
                label = "other"
            self.teacher.record_episode(ep.z_list[best], self.scenario.kind,
                                        Maneuver(ep.actions[step_idx]), label, ep.ret)
            if self.global_step <= window_steps(self.cfg):
                ranges = flag_segments(ep.omegas, self.risk_params)
                if ranges:
                    segments = [
                        FlaggedSegment(
                            scenario_kind=self.scenario.kind,
                            actions=[MANEUVER_TOKENS[Maneuver(a)] for a in ep.actions[s:e + 1]],
                            omegas=ep.omegas[s:e + 1],
                            tau_mins=ep.taus[s:e + 1],
                            speeds=ep.speeds[s:e + 1],
                        )
                        for s, e in ranges
                    ]
                    self.teacher.run_reflection(segments)
        self.episode_index += 1
        self._episodes_this_collect += 1
        self._obs = None

    def _fill_buffer(self) -> None:
        while (not self.buffer.full and self.global_step < self.cfg.total_steps
               and not self._stopped):
            self._collect_one_step()

    def collect_rollout(self) -> dict:
        """Fill the buffer from the live environment; returns collection stats."""
        if self.buffer.n:
            raise UsageError("collect_rollout expects an empty buffer")
        self._episodes_this_collect = 0
        start = self.global_step
        self._fill_buffer()
        return {
            "steps": self.global_step - start,
            "episodes": self._episodes_this_collect,
        }

    # --- optimization ---------------------------------------------------------

    def update(self) -> list[LossReport]:
        """One optimization cycle over the buffer; clears it afterwards.

        The buffer is normally full; the final rollout of a run may truncate
        at the step budget and update on what it has.
        """
        n = self.buffer.n
        if n == 0:
            raise UsageError("update needs collected transitions")
        cfg = self.cfg
        t_mid = float(np.mean(self.buffer.step_ids[:n]))
        eps_clip = clip_schedule(t_mid, cfg)
        sigma = sigma_schedule(t_mid, cfg)
        self.target.load_state_dict(self.policy.state_dict())
        next_values = self.target.forward(self.buffer.next_obs[:n]).v.data[:, 0]
        targets = value_targets(self.buffer.rewards[:n], next_values,
                                self.buffer.dones[:n], cfg.gamma)
        adv = gae_advantages(self.buffer.rewards[:n], self.buffer.values[:n],
                             next_values, self.buffer.dones[:n],
                             cfg.gamma, cfg.gae_lambda)
        reports = []
        for _ in range(cfg.epochs):
            perm = self.rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                idx = perm[lo:lo + cfg.batch_size]
                reports.append(self._update_minibatch(idx, adv, targets, eps_clip, sigma))
        self.buffer.clear()
        self.updates_done += 1
        if self.out_dir is not None:
            self._append_losses(reports, eps_clip, sigma)
        return reports

    def _update_minibatch(self, idx, adv_all, targets_all, eps_clip, sigma) -> LossReport:
        cfg = self.cfg
        buf = self.buffer
        actions = buf.actions[idx]
        adv = adv_all[idx]
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        out = self.policy.forward(buf.obs[idx])
        policy = ppo_policy_loss(out.log_pi, actions, buf.logp[idx], adv, eps_clip)
        value = add(value_loss(out.v, targets_all[idx]),
                    q_value_loss(out.q_values, actions, targets_all[idx]))
        ent = entropy_bonus(out.pi, out.log_pi)
        mask = buf.teacher_actions[idx] >= 0
        n_labeled = int(mask.sum())
        if n_labeled:
            maskf = mask.astype(np.float64)
            kl_vec = kl_to_teacher(out.pi, buf.teacher_pi[idx])
            penalty = kl_penalty(kl_vec, sigma, cfg.kl_weight)
            kl_pen = scale(tsum(mul(penalty, Tensor(maskf))), 1.0 / n_labeled)
            kl_value = float((kl_vec.data * maskf).sum() / n_labeled)
            demo = np.where(mask, buf.teacher_actions[idx], 0)
            nll = neg(gather(out.log_teacher_pi_hat, demo))
            distill = scale(tsum(mul(nll, Tensor(maskf[:, None]))), 1.0 / n_labeled)
        else:
            kl_pen = Tensor(np.asarray(0.0))
            distill = Tensor(np.asarray(0.0))
            kl_value = 0.0
        total, report = total_loss(policy, value, distill, kl_pen, ent, kl_value,
                                   c_v=cfg.value_coef, c_d=cfg.distill_coef,
                                   c_e=cfg.entropy_coef)
        self.policy.params.zero_grad()
        total.backward()
        adam_step(self.policy.params, self.adam, cfg.lr)
        return report

    # --- evaluation -----------------------------------------------------------

    def _eval_seed(self, episode: int) -> int:
        return 1_000_000 + self.cfg.seed * 1000 + episode

    def evaluate(self, n_episodes: int | None = None) -> EvalReport:
        """Greedy policy on a fixed seed set; the training episode is untouched."""
        n = self.cfg.eval_episodes if n_episodes is None else n_episodes
        if n < 1:
            raise UsageError("evaluate needs at least one episode")
        env = TrafficEnv(self.scenario, self.risk_params)
        returns, speeds, margins, latencies = [], [], [], []
        successes = 0
        for e in range(n):
            flat = env.reset(seed=self._eval_seed(e)).flat()
            done = False
            ep_ret = 0.0
            ep_speeds, ep_taus = [], []
            while not done:
                t0 = time.perf_counter()
                action, _, _ = self.policy.act(flat, greedy=True)
                latencies.append(time.perf_counter() - t0)
                out = env.step(Maneuver(action))
                ep_ret += out.reward
                ep_speeds.append(out.observation.ego_speed)
                ep_taus.append(out.info["tau_min"])
                flat = out.observation.flat()
                done = out.done
            returns.append(ep_ret)
            speeds.append(float(np.mean(ep_speeds)))
            margins.append(delta_ttcp_metric(ep_taus, self.risk_params))
            if "success" in env.state.last_events:
                successes += 1
        # wall time is reported at millisecond resolution, rounded up, so the
        # figure is reproducible across identical runs and never reads as zero
        decision_time = math.ceil(float(np.mean(latencies)) * 1000.0) / 1000.0
        return EvalReport(
            step=self.global_step,
            success_rate=successes / n,
            eval_reward=float(np.mean(returns)),
            avg_speed=float(np.mean(speeds)),
            delta_ttcp=float(np.mean(margins)),
            decision_time=decision_time,
        )

    # --- artifacts ------------------------------------------------------------

    def _append_metrics(self, report: EvalReport) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / "metrics.csv"
        line = metrics_row(report, self.cfg.variant, self.scenario.kind, self.cfg.seed)
        new = not path.exists()
        with open(path, "a") as f:
            if new:
                f.write(METRICS_HEADER + "\n")
            f.write(line + "\n")

    def _append_losses(self, reports: list[LossReport], eps_clip: float, sigma: float) -> None:
        path = self.out_dir / "losses.csv"
        mean = lambda name: float(np.mean([getattr(r, name) for r in reports]))
        line = (
            f"{self.updates_done},{self.global_step},{mean('total'):.6f},"
            f"{mean('policy_loss'):.6f},{mean('value_loss'):.6f},"
            f"{mean('distill_loss'):.6f},{mean('kl_penalty'):.6f},"
            f"{mean('kl_value'):.6f},{mean('entropy'):.6f},"
            f"{eps_clip:.6f},{sigma:.6f}"
        )
        new = not path.exists()
        with open(path, "a") as f:
            if new:
                f.write(LOSS_HEADER + "\n")
            f.write(line + "\n")

    def _write_traces(self) -> None:
        """Greedy trajectories on the eval seed set, one JSON record per step."""
        env = TrafficEnv(self.scenario, self.risk_params)
        with open(self.out_dir / "traces.jsonl", "w") as f:
            for e in range(self.cfg.eval_episodes):
                flat = env.reset(seed=self._eval_seed(e)).flat()
                done = False
                while not done:
                    pre = env.state.state_dict()
                    action, _, _ = self.policy.act(flat, greedy=True)
                    out = env.step(Maneuver(action))
                    record = trace_record(env.state, Maneuver(action), out)
                    record["episode"] = e
                    record["state"] = pre
                    f.write(json.dumps(record, sort_keys=True) + "\n")
                    flat = out.observation.flat()
                    done = out.done

    # --- checkpointing ----------------------------------------------------------

    def save(self, path) -> None:
        arrays = {}
        for name, arr in self.policy.state_dict().items():
            arrays[f"param.{name}"] = arr
        for name in self.adam.m:
            arrays[f"adam_m.{name}"] = self.adam.m[name]
            arrays[f"adam_v.{name}"] = self.adam.v[name]
        buf = self.buffer
        arrays["buffer.obs"] = buf.obs
        arrays["buffer.next_obs"] = buf.next_obs
        arrays["buffer.actions"] = buf.actions.astype(np.float64)
        arrays["buffer.logp"] = buf.logp
        arrays["buffer.rewards"] = buf.rewards
        arrays["buffer.values"] = buf.values
        arrays["buffer.dones"] = buf.dones.astype(np.float64)
        arrays["buffer.teacher_actions"] = buf.teacher_actions.astype(np.float64)
        arrays["buffer.teacher_pi"] = buf.teacher_pi
        arrays["buffer.step_ids"] = buf.step_ids.astype(np.float64)
        if self._ep.z_list:
            arrays["episode.z"] = np.stack(self._ep.z_list)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "architecture": self.policy.architecture_id(),
            "train": asdict(self.cfg),
            "scenario": self.scenario.to_dict(),
            "risk": {
                "beta": self.risk_params.beta,
                "delta": self.risk_params.delta,
                "conflict_radius": self.risk_params.conflict_radius,
                "horizon": self.risk_params.horizon,
            },
            "global_step": self.global_step,
            "updates_done": self.updates_done,
            "evals_done": self.evals_done,
            "episode_index": self.episode_index,
            "buffer_n": self.buffer.n,
            "adam_step": self.adam.step,
            "rng": _rng_to_meta(self.rng),
            "env": self.env.state.state_dict() if self.env.state is not None else None,
            "episode": self._ep.to_meta(),
            "teacher": self.teacher.state_dict() if self.teacher is not None else None,
        }
        save_checkpoint(str(path), arrays, meta)

    @classmethod
    def resume(cls, path, out_dir=None, teacher: TeacherAgent | None = None) -> "Trainer":
        arrays, meta = load_checkpoint(str(path))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format: {meta.get('format')!r}")
        train = TrainConfig(**meta["train"])
        scenario = ScenarioConfig.from_dict(meta["scenario"])
        risk = RiskParams(**meta["risk"])
        trainer = cls(scenario, train, risk, teacher=teacher, out_dir=out_dir)
        want = trainer.policy.architecture_id()
        if meta["architecture"] != want:
            raise CheckpointError(
                f"architecture mismatch: checkpoint holds {meta['architecture']!r}, "
                f"this configuration builds {want!r}"
            )
        trainer.policy.load_state_dict(_strip(arrays, "param."))
        adam_m = _strip(arrays, "adam_m.")
        adam_v = _strip(arrays, "adam_v.")
        for name in trainer.adam.m:
            trainer.adam.m[name] = adam_m[name].copy()
            trainer.adam.v[name] = adam_v[name].copy()
        trainer.adam.step = int(meta["adam_step"])
        buf = trainer.buffer
        buf.obs[:] = arrays["buffer.obs"]
        buf.next_obs[:] = arrays["buffer.next_obs"]
        buf.actions[:] = arrays["buffer.actions"].astype(np.int64)
        buf.logp[:] = arrays["buffer.logp"]
        buf.rewards[:] = arrays["buffer.rewards"]
        buf.values[:] = arrays["buffer.values"]
        buf.dones[:] = arrays["buffer.dones"].astype(bool)
        buf.teacher_actions[:] = arrays["buffer.teacher_actions"].astype(np.int64)
        buf.teacher_pi[:] = arrays["buffer.teacher_pi"]
        buf.step_ids[:] = arrays["buffer.step_ids"].astype(np.int64)
        buf.n = int(meta["buffer_n"])
        trainer.global_step = int(meta["global_step"])
        trainer.updates_done = int(meta["updates_done"])
        trainer.evals_done = int(meta["evals_done"])
        trainer.episode_index = int(meta["episode_index"])
        trainer.rng.bit_generator.state = meta["rng"]
        if meta["env"] is not None:
            from .sim.engine import ScenarioState

            trainer.env.state = ScenarioState.from_state_dict(meta["env"])
        trainer._ep = EpisodeAccumulator.from_meta(meta["episode"], arrays.get("episode.z"))
        if trainer.env.state is not None and not trainer.env.state.done:
            trainer._obs = observe(trainer.env.state).flat()
        if trainer.teacher is not None and meta["teacher"] is not None:
            trainer.teacher.load_state_dict(meta["teacher"])
        return trainer

    # --- top level --------------------------------------------------------------

    def run(self, stop_after_step: int | None = None) -> list[EvalReport]:
        """Collect/update until the step budget; returns the eval history.

        stop_after_step halts collection once the global step reaches it and
        writes a resumable checkpoint instead of finishing the run.
        """
        self._stop_at = stop_after_step
        self._stopped = False
        while self.global_step < self.cfg.total_steps and not self._stopped:
            self._fill_buffer()
            if self.buffer.n and not self._stopped:
                self.update()
        if self.out_dir is not None:
            if self._stopped:
                self.save(self.out_dir / f"checkpoint_step{self.global_step}.dckp")
            else:
                self.save(self.out_dir / "checkpoint_final.dckp")
                self._write_traces()
        return self.eval_reports


def _rng_to_meta(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _strip(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
