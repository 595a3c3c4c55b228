"""Semi-supervised multi-task image fusion: a multi-focus subtask and a
reconstruction subtask trained first, then frozen and read by the main
cross-modal fusion network through lateral connections."""
from __future__ import annotations

from .config import package_version

__version__ = package_version()
