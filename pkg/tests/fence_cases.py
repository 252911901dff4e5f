"""Fence-labelling fixture cases and an independent line-based oracle."""
import re

from mole.data.fences import LINE_CAP
from mole.labels import NL

LANG_WORD = re.compile(r"```([A-Za-z0-9_+#.\-]*)")
LINES = re.compile(r"[^\n]*\n|[^\n]+")


def oracle_labels(text, reg):
    """Line-at-a-time reference labeller written from the fence grammar."""
    out, mode, lab = [], "text", NL
    for line in LINES.findall(text):
        body = line[:-1] if line.endswith("\n") else line
        if mode == "text":
            m = LANG_WORD.fullmatch(body)
            out += [NL] * len(line)
            if m and line.endswith("\n") and len(body) <= LINE_CAP:
                mode = "code"
                name = m.group(1)
                lab = reg.names.index(name) if name in reg.names else NL
        else:
            if body == "```":
                out += [lab] * 3 + [NL] * (len(line) - 3)
                mode, lab = "text", NL
            else:
                out += [lab] * len(line)
    return out, mode == "code"


FIXTURES = [
    "",
    "no code here",
    "Sure!\n```cpp\nint x;\n```\nNotes.",
    "```python\npass",                                  # unclosed
    "```python\npass\n```",                             # close at EOF, no newline
    "```python\n```\n",                                 # empty block
    "```python\n\n\n```\n",                             # blank interior lines
    "```rust\nfn main() {}\n```\n",                     # unknown language
    "```\nplain fence\n```\n",                          # no language word
    "  ```python\nindented is not a fence\n",
    "inline ```python``` mention\n",
    "```python\n```cpp\nnested-looking\n```\n",
    "```python\n````\nstill code\n```\n",               # four backticks do not close
    "```python\n``` \nstill code\n```\n",               # trailing space does not close
    "```python\nx = 1\n  ```\ny\n```\n",                # indented close ignored
    "a\n```snake\ndef f(x):\n    return x\n```\nb\n```cpp\nint y;\n```\nc",
    "```python\r\nCRLF open line is not a fence\n",
    "```python",                                        # open line without newline
    "``python\nnot three\n",
    "text ``` \n```cpp\na\n```\n```\n",                 # stray close in text, then bare open
    "```c++\nx\n```\n",                                 # punctuation in lang word
    "```" + "p" * 80 + "\ntoo long for the line buffer\n",
    "é ü 漢字\n```python\nprint('ő')\n```\n🙂",
]
