"""Desk-scale laboratory for hierarchical lifelong model editing.

Subpackages and modules:

- autodiff: float64 reverse-mode tape and the op set built on it
- backend: compiled/numpy kernel cores selected at import
- toylm: tiny decoder-only language model with editable MLP slots
- stream: synthetic fact corpus and sequential edit streams
- hypernets: two-level editor (layer selector + update generator)
- trainer: hierarchical edit-trajectory training loop and rewards
- metrics: post-stream editing quality metrics
- checkpoint: versioned array container and atomic file writes
- cli: operator entry points (pretrain, gen-stream, train-editor,
  edit-run, eval, report)
"""

__version__ = "0.1.0"

from . import autodiff, backend  # noqa: F401
