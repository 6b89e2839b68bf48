"""Chunked streaming speech recognition with simulated future context."""
from .chunking import ContextMode, plan_chunks
from .model import Model, ModelConfig
from .streamer import StreamConfig, StreamingSession

__version__ = "0.1.0"

__all__ = ["ContextMode", "Model", "ModelConfig", "StreamConfig", "StreamingSession", "plan_chunks"]
