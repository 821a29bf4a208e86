"""Agent conversation engine, LLM backends, keyframes and the improvement loop."""
from grappa.agents.backends import (
    BackendConfig,
    BackendError,
    HttpBackend,
    ScriptedBackend,
    Timeout,
    TranscriptExhausted,
    backend_complete,
    make_backend,
)
from grappa.agents.keyframes import EmptyTrajectory, KeyframeSet, extract_keyframes
from grappa.agents.loop import ImprovementReport, IterationResult, improve, monitor_feedback, monitor_payload
from grappa.agents.protocol import (
    AgentEnvironment,
    ConversationState,
    ProtocolFailure,
    Route,
    extract_code_block,
    generate_guidance_function,
    route_message,
)

__all__ = [
    "AgentEnvironment",
    "BackendConfig",
    "BackendError",
    "ConversationState",
    "EmptyTrajectory",
    "HttpBackend",
    "ImprovementReport",
    "IterationResult",
    "KeyframeSet",
    "ProtocolFailure",
    "Route",
    "ScriptedBackend",
    "Timeout",
    "TranscriptExhausted",
    "backend_complete",
    "extract_code_block",
    "extract_keyframes",
    "generate_guidance_function",
    "improve",
    "make_backend",
    "monitor_feedback",
    "monitor_payload",
    "route_message",
]
