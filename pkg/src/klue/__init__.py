"""KLUE: differentiable neuro-symbolic inference with implicit concept learning."""

from .training import TOOL_VERSION as __version__  # noqa: F401
