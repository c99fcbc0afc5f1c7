"""HTTP service wrapping the model: streaming sessions plus one-shot runs."""

from .app import create_app, default_app

__all__ = ["create_app", "default_app"]
