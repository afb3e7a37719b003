"""Vision-token compression lab: a toy VLM, compression, attacks and metrics."""

__version__ = "0.1.0"
