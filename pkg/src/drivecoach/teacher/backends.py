"""Chat backends: remote endpoint, deterministic scripted stand-in, and
transcript record/replay for golden tests."""

from __future__ import annotations

import json
import os
from pathlib import Path

from ..errors import ConfigError
from ..sim.vehicles import MANEUVER_TOKENS
from .prompts import Prompt, parse_constraints, parse_telemetry
from .rules import scripted_decide

API_KEY_VAR = "TELL_LLM_API_KEY"
DEFAULT_TIMEOUT = 30.0


class BackendError(RuntimeError):
    pass


class ChatBackend:
    kind = "abstract"

    def chat(self, messages: list[tuple[str, str]], temperature: float | None = None,
             max_tokens: int = 512) -> str:
        # temperature None means the backend's own default
        raise NotImplementedError


class RemoteBackend(ChatBackend):
    """Chat-completions endpoint speaking the usual JSON shape."""

    kind = "remote"

    def __init__(self, endpoint: str, model: str, timeout: float = DEFAULT_TIMEOUT,
                 temperature: float = 0.2):
        if not endpoint:
            raise ConfigError("remote backend needs an endpoint URL")
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.temperature = temperature

    def chat(self, messages, temperature=None, max_tokens=512):
        import requests

        key = os.environ.get(API_KEY_VAR, "")
        if not key:
            raise BackendError(f"{API_KEY_VAR} is not set")
        payload = {
            "model": self.model,
            "messages": [{"role": role, "content": text} for role, text in messages],
            "temperature": self.temperature if temperature is None else temperature,
            "max_tokens": max_tokens,
        }
        try:
            response = requests.post(
                self.endpoint,
                json=payload,
                headers={"Authorization": f"Bearer {key}"},
                timeout=self.timeout,
            )
            response.raise_for_status()
            return response.json()["choices"][0]["message"]["content"]
        except requests.RequestException as err:
            raise BackendError(f"remote backend request failed: {err}") from err
        except (KeyError, IndexError, TypeError, ValueError) as err:
            raise BackendError(f"remote backend returned an unexpected shape: {err}") from err


def _last_user_text(messages) -> str:
    for role, text in reversed(messages):
        if role == "user":
            return text
    return ""


def _system_text(messages) -> str:
    for role, text in messages:
        if role == "system":
            return text
    return ""


class ScriptedBackend(ChatBackend):
    """Deterministic offline teacher.

    Recovers the telemetry and constraint lines from the prompt, runs the rule
    cascade, and answers in the same shape a remote model would, so the parsing
    path stays identical across backends.
    """

    kind = "scripted"

    def chat(self, messages, temperature=None, max_tokens=512):
        user = _last_user_text(messages)
        prompt = Prompt(system=_system_text(messages), user=user)
        if "REFLECTION: " in user:
            return self._reflect(user)
        telemetry = parse_telemetry(prompt)
        if telemetry is None:
            raise BackendError("prompt carries no telemetry line")
        constraints = parse_constraints(prompt)
        action = scripted_decide(telemetry, constraints)
        token = MANEUVER_TOKENS[action]
        reason = (
            f"tau_min {telemetry.tau_min:g} s, "
            f"speed {telemetry.speed:.1f} of {telemetry.desired_speed:.1f} m/s, "
            f"lane {telemetry.lane} toward {telemetry.goal_lane}"
        )
        body = json.dumps({"action": token, "reason": reason})
        return (
            "Checking conflict margins, speed deficit, and lane goal in order.\n"
            f"The rule cascade selects {token}.\n{body}"
        )

    def _reflect(self, user: str) -> str:
        for line in user.splitlines():
            if line.startswith("REFLECTION: "):
                summary = json.loads(line[len("REFLECTION: "):])
                break
        else:
            raise BackendError("reflection prompt carries no summary line")
        token = summary["action"]
        # Forbidding the brake itself would poison the cascade's last resort,
        # so a braking culprit yields advice without a hard rule.
        if token == "slow_down":
            rules = []
            policy = "Brake earlier; the margin was already thin when braking began."
        else:
            rules = [{
                "scenario_kind": summary["scenario_kind"],
                "forbidden_action": token,
                "guard": {"tau_min_lt": float(summary["tau_min"])},
            }]
            policy = f"Do not {token} when the conflict margin is below {summary['tau_min']} s."
        body = json.dumps({
            "policy_delta": policy,
            "prompt_delta": "State the smallest conflict margin before listing options.",
            "constraints": rules,
        })
        return f"The flagged maneuver was {token} at a thin conflict margin.\n{body}"


class ReplayBackend(ChatBackend):
    """Replays a recorded transcript, one response per chat call, in order."""

    kind = "replay"

    def __init__(self, path):
        self.path = Path(path)
        try:
            lines = self.path.read_text().splitlines()
        except OSError as err:
            raise ConfigError(f"cannot read transcript {self.path}: {err}") from err
        records = [json.loads(line) for line in lines if line.strip()]
        self._responses = [r["response"] for r in records]
        self._cursor = 0
        # transcripts remember which backend produced them, so replayed
        # decisions report the original source
        kinds = {r["kind"] for r in records if "kind" in r}
        if len(kinds) == 1:
            self.kind = kinds.pop()

    def chat(self, messages, temperature=None, max_tokens=512):
        if self._cursor >= len(self._responses):
            raise BackendError(f"transcript {self.path} exhausted after {self._cursor} calls")
        text = self._responses[self._cursor]
        self._cursor += 1
        return text


class RecordingBackend(ChatBackend):
    """Wraps another backend and appends (request, response) pairs to a JSONL file."""

    def __init__(self, inner: ChatBackend, path):
        self.inner = inner
        self.path = Path(path)
        self.kind = inner.kind

    def chat(self, messages, temperature=None, max_tokens=512):
        text = self.inner.chat(messages, temperature=temperature, max_tokens=max_tokens)
        record = {
            "kind": self.kind,
            "request": {
                "messages": [[role, body] for role, body in messages],
                "temperature": temperature,
                "max_tokens": max_tokens,
            },
            "response": text,
        }
        with self.path.open("a") as handle:
            handle.write(json.dumps(record) + "\n")
        return text
