"""Per-token language labels and the language registry.

Labels are plain ints so label sequences can live in numpy arrays:
``k >= 0`` is programming language ``k`` of the registry, ``NL`` marks
natural language and ``PAD`` marks tail padding.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

NL = -1
PAD = -2

log = logging.getLogger(__name__)


class UnknownLanguageError(KeyError):
    pass


def label_name(label: int, registry: "LanguageRegistry | None" = None) -> str:
    if label == NL:
        return "NL"
    if label == PAD:
        return "PAD"
    if registry is not None:
        return f"PL({registry.names[label]})"
    return f"PL({label})"


@dataclass(frozen=True)
class LanguageRegistry:
    """Ordered programming-language names; index = expert id."""

    names: tuple[str, ...]
    fallback: str = "nl"  # "nl" routes unknown languages as NL, "error" raises

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValueError("registry needs at least one language")
        if len(set(names)) != len(names) or any(not n for n in names):
            raise ValueError(f"language names must be unique and nonempty: {names}")
        if self.fallback not in ("nl", "error"):
            raise ValueError(f"unknown fallback policy {self.fallback!r}")

    @property
    def K(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownLanguageError(name) from None

    def resolve(self, name: str | None) -> int:
        """Label for a fence language word, applying the fallback policy."""
        if name in self.names:
            return self.names.index(name)
        if self.fallback == "error":
            raise UnknownLanguageError(name)
        log.warning("unregistered language %r routed as NL", name)
        return NL

    def to_json(self) -> dict:
        return {"names": list(self.names), "fallback": self.fallback}

    @classmethod
    def from_json(cls, d: dict) -> "LanguageRegistry":
        return cls(tuple(d["names"]), d.get("fallback", "nl"))
