"""Code-fence automaton, span labelling and code-character accounting.

Fence grammar: an opening fence is a whole line ``````lang`` (three
backticks at line start, optionally followed immediately by a language word).
A closing fence is a line holding exactly three backticks. Indented or inline
backticks are never fences.

The automaton is causal so the same machine drives labelling of stored text
and adapter switching during generation. Each character is labelled with the
path known once that character has been read:

* the opening-fence line (including its newline) is NL;
* block interior and the closing backticks carry the block language;
* the newline ending the closing fence is NL again.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..labels import NL, LanguageRegistry, label_name

OPEN_RE = re.compile(r"```([A-Za-z0-9_+#.\-]*)")
LINE_CAP = 64


@dataclass
class Transition:
    offset: int      # index of the first character read under the new path
    src: int
    dst: int
    reason: str      # "open" | "close" | "reopen"


@dataclass
class Block:
    lang: str | None
    path: int
    interior_start: int
    interior_end: int | None = None   # start of the closing fence
    closed: bool = False

    @property
    def size(self) -> int:
        end = self.interior_start if self.interior_end is None else self.interior_end
        return end - self.interior_start


class FenceAutomaton:
    """Character-at-a-time fence tracker with a bounded line buffer."""

    def __init__(self, registry: LanguageRegistry | None = None):
        self.registry = registry
        self.mode = "text"          # text | code | pending
        self.path = NL
        self.pos = 0
        self.line = ""
        self.overflow = False
        self.block: Block | None = None
        self.blocks: list[Block] = []
        self.log: list[Transition] = []
        self.diagnostics: list[str] = []
        self.end_path = NL

    def _resolve(self, lang: str | None) -> int:
        if not lang or self.registry is None:
            return NL
        return self.registry.resolve(lang)

    def _switch(self, dst: int, reason: str, offset: int | None = None) -> None:
        if dst != self.path:
            at = self.pos if offset is None else offset
            self.log.append(Transition(at, self.path, dst, reason))
            self.path = dst

    def _push(self, c: str) -> None:
        if len(self.line) < LINE_CAP:
            self.line += c
        else:
            self.overflow = True

    def _newline(self) -> None:
        self.line = ""
        self.overflow = False

    def feed(self, c: str) -> int:
        """Consume one character; return its label."""
        i = self.pos
        self.pos += 1
        if self.mode == "text":
            if c == "\n":
                m = None if self.overflow else OPEN_RE.fullmatch(self.line)
                self._newline()
                if m:
                    lang = m.group(1) or None
                    path = self._resolve(lang)
                    if lang and path == NL and self.registry is not None:
                        self.diagnostics.append(f"unregistered language {lang!r} at {i}")
                    self.block = Block(lang, path, i + 1)
                    self.mode = "code"
                    self._switch(path, "open")
            else:
                self._push(c)
            return NL
        if self.mode == "code":
            label = self.path
            if c == "\n":
                self._newline()
            else:
                self._push(c)
                if self.line == "```" and not self.overflow:
                    self.mode = "pending"
                    self.block.interior_end = i - 2
                    self._switch(NL, "close")
            return label
        # pending: a lone "```" closes only if the line ends here
        if c == "\n":
            self._close()
            self._newline()
            return NL
        self.mode = "code"
        self.block.interior_end = None
        self._push(c)
        self._switch(self.block.path, "reopen", offset=i)
        return self.path

    def _close(self) -> None:
        self.block.closed = True
        self.blocks.append(self.block)
        self.block = None
        self.mode = "text"

    def feed_text(self, text: str) -> list[int]:
        return [self.feed(c) for c in text]

    def finish(self) -> None:
        """Mark end of input; records unclosed blocks."""
        if self.mode == "pending":
            self._close()
        elif self.mode == "code":
            self.block.interior_end = self.pos
            self.blocks.append(self.block)
            self.diagnostics.append(
                f"unclosed fence ({self.block.lang or 'no language'}) opened at "
                f"{self.block.interior_start}")
            self.block = None
            self.mode = "text"

    def state(self) -> tuple:
        return (self.mode, self.path, self.line, self.overflow,
                self.block.lang if self.block else None)


@dataclass
class LabeledText:
    text: str
    spans: list[tuple[int, int, int]]                 # (start, end, label)
    targets: list[tuple[int, int]] = field(default_factory=list)
    blocks: list[Block] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    end_path: int = NL    # router path after the last character

    def char_labels(self) -> list[int]:
        out = []
        for s, e, lab in self.spans:
            out.extend([lab] * (e - s))
        return out

    def pretty(self, registry: LanguageRegistry | None = None) -> list[tuple[str, str]]:
        return [(self.text[s:e], label_name(lab, registry)) for s, e, lab in self.spans]


def _spans(labels: list[int], offset: int = 0) -> list[tuple[int, int, int]]:
    spans = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            spans.append((offset + start, offset + i, labels[start]))
            start = i
    return spans


def _run(text: str, registry: LanguageRegistry | None) -> tuple[FenceAutomaton, list[int]]:
    fa = FenceAutomaton(registry)
    labels = fa.feed_text(text)
    fa.end_path = fa.path
    fa.finish()
    return fa, labels


def label_spans(text: str, registry: LanguageRegistry | None = None) -> LabeledText:
    """Partition ``text`` into maximal runs of equal language label."""
    fa, labels = _run(text, registry)
    return LabeledText(text, _spans(labels), [], fa.blocks, fa.diagnostics, fa.end_path)


SEPARATOR = "\n\n"


def prompt_text(question: str) -> str:
    return question + SEPARATOR


def label_sample(question: str, answer: str,
                 registry: LanguageRegistry | None = None) -> LabeledText:
    """Label ``question + SEPARATOR + answer``; the answer is the target region.

    The automaton restarts at the answer so an unclosed block in the question
    cannot leak into the response.
    """
    q, q_labels = _run(question, registry)
    a, a_labels = _run(answer, registry)
    prompt = prompt_text(question)
    text = prompt + answer
    labels = q_labels + [NL] * len(SEPARATOR) + a_labels
    off = len(prompt)
    blocks = q.blocks + [
        Block(b.lang, b.path, b.interior_start + off,
              None if b.interior_end is None else b.interior_end + off, b.closed)
        for b in a.blocks
    ]
    targets = [(off, len(text))] if answer else []
    return LabeledText(text, _spans(labels), targets, blocks, q.diagnostics + a.diagnostics,
                       a.end_path)


def code_blocks(text: str, registry: LanguageRegistry | None = None) -> list[Block]:
    return _run(text, registry)[0].blocks


def code_char_fraction(question: str, answer: str) -> float:
    """Fraction of characters lying inside code-block interiors."""
    total = len(question) + len(answer)
    if total == 0:
        return 0.0
    inside = sum(b.size for t in (question, answer) for b in code_blocks(t))
    return inside / total
