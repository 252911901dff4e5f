"""Three miniature languages sharing one arithmetic/function semantics.

* ``snake``: keyword and indentation style (``def f(x):`` / ``return``)
* ``curly``: braces and semicolons (``fn f(x) { return x; }``)
* ``paren``: parenthesised prefix forms (``(define (f x) (+ x 1))``)

Programs are a single function whose body is a nest of ``Let``/``If``
nodes ending in an arithmetic expression. Every language has a renderer and a
parser onto the same tree, and :func:`run` is the reference interpreter.
:func:`describe` / :func:`parse_description` give an invertible English
rendering used by the summarisation task.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

LANGUAGES = ("snake", "curly", "paren")
DISPLAY = {"snake": "Snake", "curly": "Curly", "paren": "Paren"}
STEP_BUDGET = 10_000


class ParseError(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    pass


# -- tree ---------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Bin:
    op: str  # + - *
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Let:
    name: str
    value: "Expr"
    body: "Body"


@dataclass(frozen=True)
class If:
    cmp: str  # < >
    left: "Expr"
    right: "Expr"
    then: "Body"
    other: "Body"


Expr = Num | Var | Bin
Body = Let | If | Num | Var | Bin


@dataclass(frozen=True)
class Program:
    name: str
    params: tuple[str, ...]
    body: Body


PREC = {"+": 1, "-": 1, "*": 2}


# -- interpreter --------------------------------------------------------------

def run(prog: Program, args, budget: int = STEP_BUDGET) -> int:
    if len(args) != len(prog.params):
        raise ValueError(f"{prog.name} takes {len(prog.params)} arguments, got {len(args)}")
    steps = [0]

    def tick():
        steps[0] += 1
        if steps[0] > budget:
            raise BudgetExceeded(f"step budget {budget} exhausted")

    def ev(node, env):
        tick()
        if isinstance(node, Num):
            return node.value
        if isinstance(node, Var):
            if node.name not in env:
                raise NameError(f"unbound variable {node.name!r}")
            return env[node.name]
        if isinstance(node, Bin):
            a, b = ev(node.left, env), ev(node.right, env)
            return a + b if node.op == "+" else a - b if node.op == "-" else a * b
        if isinstance(node, Let):
            return ev(node.body, {**env, node.name: ev(node.value, env)})
        if isinstance(node, If):
            a, b = ev(node.left, env), ev(node.right, env)
            ok = a < b if node.cmp == "<" else a > b
            return ev(node.then if ok else node.other, env)
        raise TypeError(f"not a program node: {node!r}")

    return ev(prog.body, dict(zip(prog.params, args)))


# -- infix rendering (snake, curly, descriptions) ---------------------------

def _infix(e: Expr, words: dict[str, str] | None = None) -> str:
    if isinstance(e, Num):
        return str(e.value)
    if isinstance(e, Var):
        return e.name
    op = words[e.op] if words else e.op

    def side(child, right):
        s = _infix(child, words)
        if isinstance(child, Bin) and (PREC[child.op] < PREC[e.op]
                                       or (right and PREC[child.op] == PREC[e.op])):
            return f"({s})"
        return s

    return f"{side(e.left, False)} {op} {side(e.right, True)}"


def _prefix(e: Expr) -> str:
    if isinstance(e, Num):
        return str(e.value)
    if isinstance(e, Var):
        return e.name
    return f"({e.op} {_prefix(e.left)} {_prefix(e.right)})"


def render(prog: Program, lang: str) -> str:
    if lang == "snake":
        lines = [f"def {prog.name}({', '.join(prog.params)}):"]

        def walk(b, ind):
            pad = "    " * ind
            if isinstance(b, Let):
                lines.append(f"{pad}{b.name} = {_infix(b.value)}")
                walk(b.body, ind)
            elif isinstance(b, If):
                lines.append(f"{pad}if {_infix(b.left)} {b.cmp} {_infix(b.right)}:")
                walk(b.then, ind + 1)
                walk(b.other, ind)
            else:
                lines.append(f"{pad}return {_infix(b)}")

        walk(prog.body, 1)
        return "\n".join(lines)
    if lang == "curly":
        lines = [f"fn {prog.name}({', '.join(prog.params)}) {{"]

        def walk(b, ind):
            pad = "  " * ind
            if isinstance(b, Let):
                lines.append(f"{pad}let {b.name} = {_infix(b.value)};")
                walk(b.body, ind)
            elif isinstance(b, If):
                lines.append(f"{pad}if ({_infix(b.left)} {b.cmp} {_infix(b.right)}) {{")
                walk(b.then, ind + 1)
                lines.append(f"{pad}}}")
                walk(b.other, ind)
            else:
                lines.append(f"{pad}return {_infix(b)};")

        walk(prog.body, 1)
        lines.append("}")
        return "\n".join(lines)
    if lang == "paren":
        def form(b, ind):
            pad = "  " * ind
            if isinstance(b, Let):
                return f"{pad}(let (({b.name} {_prefix(b.value)}))\n{form(b.body, ind + 1)})"
            if isinstance(b, If):
                return (f"{pad}(if ({b.cmp} {_prefix(b.left)} {_prefix(b.right)})\n"
                        f"{form(b.then, ind + 1)}\n{form(b.other, ind + 1)})")
            return pad + _prefix(b)

        return f"(define ({' '.join((prog.name,) + prog.params)})\n{form(prog.body, 1)})"
    raise ValueError(f"unknown toy language {lang!r}")


# -- parsing --------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\d+)|([A-Za-z_]\w*)|(.))")


def _lex(src: str) -> list[str]:
    out = []
    pos = 0
    src = src.rstrip()
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if not m:
            break
        pos = m.end()
        tok = m.group(1) or m.group(2) or m.group(3)
        if tok is not None:
            out.append(tok)
    return out


class _Tokens:
    def __init__(self, toks: list[str]):
        self.toks = toks
        self.i = 0

    def peek(self) -> str | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def next(self) -> str:
        if self.i >= len(self.toks):
            raise ParseError("unexpected end of input")
        self.i += 1
        return self.toks[self.i - 1]

    def expect(self, tok: str) -> None:
        got = self.next()
        if got != tok:
            raise ParseError(f"expected {tok!r}, got {got!r}")

    def ident(self) -> str:
        tok = self.next()
        if not re.fullmatch(r"[A-Za-z_]\w*", tok) or tok in _KEYWORDS:
            raise ParseError(f"expected identifier, got {tok!r}")
        return tok

    def done(self) -> bool:
        return self.i >= len(self.toks)


_KEYWORDS = {"def", "fn", "let", "return", "if", "define"}


def _expr(ts: _Tokens, words: dict[str, str] | None = None) -> Expr:
    ops = {v: k for k, v in words.items()} if words else {o: o for o in PREC}

    def atom():
        tok = ts.next()
        if tok == "(":
            e = level(1)
            ts.expect(")")
            return e
        if tok.isdigit():
            return Num(int(tok))
        if re.fullmatch(r"[A-Za-z_]\w*", tok) and tok not in _KEYWORDS and tok not in ops:
            return Var(tok)
        raise ParseError(f"unexpected token {tok!r}")

    def level(p):
        if p > 2:
            return atom()
        left = level(p + 1)
        while ts.peek() in ops and PREC[ops[ts.peek()]] == p:
            op = ops[ts.next()]
            left = Bin(op, left, level(p + 1))
        return left

    return level(1)


def _parse_snake(src: str) -> Program:
    lines = [ln for ln in src.split("\n") if ln.strip()]
    if not lines:
        raise ParseError("empty program")
    m = re.fullmatch(r"def ([A-Za-z_]\w*)\(([^)]*)\):\s*", lines[0])
    if not m:
        raise ParseError("expected 'def name(params):'")
    params = _params(m.group(2))
    rows = []
    for ln in lines[1:]:
        stripped = ln.lstrip(" ")
        indent = len(ln) - len(stripped)
        if indent == 0 or indent % 4:
            raise ParseError(f"bad indentation: {ln!r}")
        rows.append((indent // 4, stripped.rstrip()))
    pos = [0]

    def block(depth) -> Body:
        if pos[0] >= len(rows):
            raise ParseError("missing return")
        d, text = rows[pos[0]]
        if d != depth:
            raise ParseError(f"unexpected indentation at {text!r}")
        pos[0] += 1
        if m := re.fullmatch(r"return (.+)", text):
            return _full_expr(m.group(1))
        if m := re.fullmatch(r"if (.+?) ([<>]) (.+):", text):
            left, cmp, right = _full_expr(m.group(1)), m.group(2), _full_expr(m.group(3))
            then = block(depth + 1)
            return If(cmp, left, right, then, block(depth))
        if m := re.fullmatch(r"([A-Za-z_]\w*) = (.+)", text):
            if m.group(1) in _KEYWORDS:
                raise ParseError(f"keyword as variable: {m.group(1)}")
            return Let(m.group(1), _full_expr(m.group(2)), block(depth))
        raise ParseError(f"cannot parse statement {text!r}")

    body = block(1)
    if pos[0] != len(rows):
        raise ParseError("statements after return")
    return Program(_header_name(lines[0]), params, body)


def _header_name(header: str) -> str:
    return re.match(r"(?:def|fn) ([A-Za-z_]\w*)", header).group(1)


def _params(s: str) -> tuple[str, ...]:
    names = tuple(p.strip() for p in s.split(",")) if s.strip() else ()
    for n in names:
        if not re.fullmatch(r"[A-Za-z_]\w*", n) or n in _KEYWORDS:
            raise ParseError(f"bad parameter {n!r}")
    if len(set(names)) != len(names):
        raise ParseError("duplicate parameter")
    return names


def _full_expr(src: str) -> Expr:
    ts = _Tokens(_lex(src))
    e = _expr(ts)
    if not ts.done():
        raise ParseError(f"trailing tokens in {src!r}")
    return e


def _parse_curly(src: str) -> Program:
    ts = _Tokens(_lex(src))
    ts.expect("fn")
    name = ts.ident()
    ts.expect("(")
    params = []
    while ts.peek() != ")":
        params.append(ts.ident())
        if ts.peek() == ",":
            ts.next()
    ts.expect(")")
    params = _params(", ".join(params))
    ts.expect("{")

    def block() -> Body:
        tok = ts.next()
        if tok == "return":
            e = _expr(ts)
            ts.expect(";")
            return e
        if tok == "let":
            v = ts.ident()
            ts.expect("=")
            e = _expr(ts)
            ts.expect(";")
            return Let(v, e, block())
        if tok == "if":
            ts.expect("(")
            left = _expr(ts)
            cmp = ts.next()
            if cmp not in "<>":
                raise ParseError(f"bad comparison {cmp!r}")
            right = _expr(ts)
            ts.expect(")")
            ts.expect("{")
            then = block()
            ts.expect("}")
            return If(cmp, left, right, then, block())
        raise ParseError(f"unexpected {tok!r}")

    body = block()
    ts.expect("}")
    if not ts.done():
        raise ParseError("trailing tokens after function")
    return Program(name, params, body)


def _sexpr(src: str):
    toks = re.findall(r"\(|\)|[^\s()]+", src)
    pos = [0]

    def read():
        if pos[0] >= len(toks):
            raise ParseError("unexpected end of input")
        tok = toks[pos[0]]
        pos[0] += 1
        if tok == "(":
            out = []
            while True:
                if pos[0] >= len(toks):
                    raise ParseError("unbalanced parentheses")
                if toks[pos[0]] == ")":
                    pos[0] += 1
                    return out
                out.append(read())
        if tok == ")":
            raise ParseError("unexpected ')'")
        return tok

    tree = read()
    if pos[0] != len(toks):
        raise ParseError("trailing forms")
    return tree


def _parse_paren(src: str) -> Program:
    tree = _sexpr(src)
    if not (isinstance(tree, list) and len(tree) == 3 and tree[0] == "define"
            and isinstance(tree[1], list) and tree[1]):
        raise ParseError("expected (define (name params...) body)")
    head = tree[1]
    if any(isinstance(h, list) for h in head):
        raise ParseError("bad function header")
    params = _params(", ".join(head[1:]))

    def expr(t) -> Expr:
        if isinstance(t, str):
            if t.isdigit():
                return Num(int(t))
            if re.fullmatch(r"[A-Za-z_]\w*", t) and t not in _KEYWORDS:
                return Var(t)
            raise ParseError(f"bad atom {t!r}")
        if len(t) == 3 and t[0] in PREC:
            return Bin(t[0], expr(t[1]), expr(t[2]))
        raise ParseError(f"bad expression {t!r}")

    def body(t) -> Body:
        if isinstance(t, list) and t and t[0] == "let":
            if not (len(t) == 3 and isinstance(t[1], list) and len(t[1]) == 1
                    and isinstance(t[1][0], list) and len(t[1][0]) == 2
                    and isinstance(t[1][0][0], str)):
                raise ParseError("bad let form")
            name = t[1][0][0]
            if not re.fullmatch(r"[A-Za-z_]\w*", name) or name in _KEYWORDS:
                raise ParseError(f"bad let name {name!r}")
            return Let(name, expr(t[1][0][1]), body(t[2]))
        if isinstance(t, list) and t and t[0] == "if":
            if not (len(t) == 4 and isinstance(t[1], list) and len(t[1]) == 3
                    and t[1][0] in ("<", ">")):
                raise ParseError("bad if form")
            return If(t[1][0], expr(t[1][1]), expr(t[1][2]), body(t[2]), body(t[3]))
        return expr(t)

    return Program(head[0], params, body(tree[2]))


_PARSERS = {"snake": _parse_snake, "curly": _parse_curly, "paren": _parse_paren}


def parse(src: str, lang: str) -> Program:
    if lang not in _PARSERS:
        raise ValueError(f"unknown toy language {lang!r}")
    try:
        return _PARSERS[lang](src)
    except ParseError:
        raise
    except (IndexError, AttributeError, TypeError, KeyError) as exc:
        raise ParseError(str(exc)) from exc


# -- English descriptions -------------------------------------------------------

_WORDS = {"+": "plus", "-": "minus", "*": "times"}
_CMP_WORDS = {">": "is greater than", "<": "is less than"}


def describe(body: Body) -> str:
    if isinstance(body, Let):
        return f"lets {body.name} be {_infix(body.value, _WORDS)}, then {describe(body.body)}"
    if isinstance(body, If):
        return (f"returns {_tail(body.then)} if {_infix(body.left, _WORDS)} "
                f"{_CMP_WORDS[body.cmp]} {_infix(body.right, _WORDS)}, "
                f"otherwise {describe(body.other)}")
    return f"returns {_infix(body, _WORDS)}"


def _tail(b: Body) -> str:
    if not isinstance(b, (Num, Var, Bin)):
        raise ValueError("descriptions support only expression branches")
    return _infix(b, _WORDS)


def signature(prog: Program) -> str:
    return f"{prog.name}({', '.join(prog.params)})"


def parse_description(text: str) -> Body:
    """Inverse of :func:`describe`."""
    text = text.strip().rstrip(".")
    toks = re.findall(r"\d+|[A-Za-z_]\w*|[(),]", text)
    # fold the multi-word comparisons into single tokens
    merged, i = [], 0
    while i < len(toks):
        if toks[i:i + 3] in (["is", "greater", "than"], ["is", "less", "than"]):
            merged.append(">" if toks[i + 1] == "greater" else "<")
            i += 3
        else:
            merged.append(toks[i])
            i += 1
    ts = _Tokens(merged)

    def body() -> Body:
        tok = ts.next()
        if tok == "lets":
            name = ts.ident()
            ts.expect("be")
            value = _expr(ts, _WORDS)
            ts.expect(",")
            ts.expect("then")
            return Let(name, value, body())
        if tok == "returns":
            e = _expr(ts, _WORDS)
            if ts.peek() == "if":
                ts.next()
                left = _expr(ts, _WORDS)
                cmp = ts.next()
                if cmp not in ("<", ">"):
                    raise ParseError(f"bad comparison {cmp!r}")
                right = _expr(ts, _WORDS)
                ts.expect(",")
                ts.expect("otherwise")
                return If(cmp, left, right, e, body())
            return e
        raise ParseError(f"unexpected {tok!r}")

    out = body()
    if not ts.done():
        raise ParseError("trailing words")
    return out
