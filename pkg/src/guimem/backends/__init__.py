"""Wire-level contracts and clients for the external model roles: the four
memory operators (step, compress, write, select), the frozen GUI backbone,
the embedders, and the judge."""

from .actions import format_action, parse_action
from .embedder import Embedder, HashEmbedder
from .invoke import (
    CallMeta,
    invoke_compress,
    invoke_judge,
    invoke_select,
    invoke_step,
    invoke_write,
    predict_action,
)
from .remote import RemoteChatBackend
from .schemas import (
    SCHEMA_VERSION,
    BackendConfig,
    CompressEntry,
    CompressOutput,
    CompressRequest,
    DimensionMismatch,
    JudgeRequest,
    JudgeVerdict,
    ParseFailure,
    SelectCandidate,
    SelectOutput,
    SelectRequest,
    StepOutput,
    StepRequest,
    TransportFailure,
    WriteOutput,
    WriteRequest,
    extract_json_object,
)
from .scripted import MALFORMED_REPLY, Reply, ScriptedBackend, offline_script

__all__ = [
    "BackendConfig",
    "CallMeta",
    "CompressEntry",
    "CompressOutput",
    "CompressRequest",
    "DimensionMismatch",
    "Embedder",
    "HashEmbedder",
    "JudgeRequest",
    "JudgeVerdict",
    "MALFORMED_REPLY",
    "ParseFailure",
    "RemoteChatBackend",
    "Reply",
    "SCHEMA_VERSION",
    "ScriptedBackend",
    "SelectCandidate",
    "SelectOutput",
    "SelectRequest",
    "StepOutput",
    "StepRequest",
    "TransportFailure",
    "WriteOutput",
    "WriteRequest",
    "extract_json_object",
    "format_action",
    "invoke_compress",
    "invoke_judge",
    "invoke_select",
    "invoke_step",
    "invoke_write",
    "offline_script",
    "parse_action",
    "predict_action",
]
