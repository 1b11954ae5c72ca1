from .agent import (
    ReflectionOutcome,
    TeacherAgent,
    TeacherDecision,
    decide,
    parse_decision_reply,
    reflect,
)
from .backends import (
    API_KEY_VAR,
    BackendError,
    ChatBackend,
    RecordingBackend,
    RemoteBackend,
    ReplayBackend,
    ScriptedBackend,
)
from .constraints import ConstraintRule
from .memory import (
    CAPACITY,
    MemoryEntry,
    MemoryRepository,
    cosine_similarity,
    retrieve,
    update_memory,
)
from .prompts import (
    MAX_PROMPT_TOKENS,
    N_SHOT,
    FlaggedSegment,
    Prompt,
    build_prompt,
    build_reflection_prompt,
    estimate_tokens,
    parse_constraints,
    parse_telemetry,
)
from .rules import Telemetry, build_telemetry, goal_lane_for, scripted_decide
from .state import STATE_DIM, encode_state
