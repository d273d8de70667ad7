"""
Domain errors for the ONH pipeline.

Every failure carries the module that raised it and a short code so the CLI
can report a machine-readable `module.CODE` string.
"""

from typing import Optional


class OnhError(ValueError):
    """A validation or computation failure inside one pipeline module."""

    def __init__(self, module: str, code: str, message: str, field: Optional[str] = None):
        super().__init__(f"{module}.{code}: {message}")
        self.module = module
        self.code = code
        self.message = message
        self.field = field

    @property
    def qualified_code(self) -> str:
        return f"{self.module}.{self.code}"

    def to_dict(self) -> dict:
        return {
            "error": self.qualified_code,
            "message": self.message,
            "field": self.field,
        }
