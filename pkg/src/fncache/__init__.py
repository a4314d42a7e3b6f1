"""fncache: an erasure-coded in-memory object cache on ephemeral
serverless-function instances, with a deterministic provider simulator,
availability/cost models, and a trace-replay harness."""

__version__ = "0.1.0"

from .ec import Chunk, ChunkId, ECConfig, decode, encode  # noqa: F401
