"""Differentiable splatting with Jinc and modulated reconstruction kernels."""

from ._threads import apply_thread_env as _apply_thread_env

_apply_thread_env()

__version__ = "0.1.0"
