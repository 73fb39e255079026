"""Tensor DSL front end: lexer, parser, and shape checker.

Grammar (comments run from // to end of line):

    program  := (decl | stmt)*
    decl     := "var" ("input" | "output")? ident ":" "[" extent+ "]"
    stmt     := ident "=" expr
    expr     := term ("+" term)*            elementwise add
    term     := factor ("*" factor)*        elementwise multiply
    factor   := postfix ("#" postfix)*      tensor (outer) product
    postfix  := primary ("." pairlist)*     contraction
    pairlist := "[" ("[" nat nat "]")+ "]"
    primary  := ident | "(" expr ")"
    extent   := nat | ident                 idents resolved via bindings

Contraction pairs are 0-based index positions of the operand's shape.
Names assigned without a declaration become implicit temporaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

__all__ = [
    "Loc", "SourceError", "ParseError", "CheckError",
    "Ident", "Product", "Contract", "ElemMul", "ElemAdd", "Paren",
    "Decl", "Stmt", "Program", "TypedProgram",
    "parse", "check", "pretty_print",
]


@dataclass(frozen=True)
class Loc:
    line: int  # 1-based
    col: int   # 1-based


class SourceError(Exception):
    """Compile error carrying a source location."""

    def __init__(self, msg: str, loc: Loc, filename: str = "<input>"):
        super().__init__(msg)
        self.msg = msg
        self.loc = loc
        self.filename = filename

    def __str__(self) -> str:
        return f"{self.filename}:{self.loc.line}:{self.loc.col}: {self.msg}"


class ParseError(SourceError):
    pass


class CheckError(SourceError):
    pass


# ---------------------------------------------------------------- AST

@dataclass
class Expr:
    loc: Loc = field(default=Loc(0, 0), kw_only=True)
    shape: tuple[int, ...] | None = field(default=None, kw_only=True)


@dataclass
class Ident(Expr):
    name: str = ""


@dataclass
class Product(Expr):
    lhs: Expr = None
    rhs: Expr = None


@dataclass
class Contract(Expr):
    operand: Expr = None
    pairs: tuple[tuple[int, int], ...] = ()


@dataclass
class ElemMul(Expr):
    lhs: Expr = None
    rhs: Expr = None


@dataclass
class ElemAdd(Expr):
    lhs: Expr = None
    rhs: Expr = None


@dataclass
class Paren(Expr):
    inner: Expr = None


@dataclass
class Decl:
    name: str
    direction: str  # input | output | temporary
    shape: tuple[int, ...]
    loc: Loc = Loc(0, 0)
    implicit: bool = False


@dataclass
class Stmt:
    target: str
    expr: Expr
    loc: Loc = Loc(0, 0)


@dataclass
class Program:
    declarations: list[Decl]
    statements: list[Stmt]


@dataclass
class TypedProgram:
    """A checked program: every Expr carries its inferred shape and the
    declaration table includes implicit temporaries."""

    program: Program
    decls: dict[str, Decl]

    @property
    def statements(self) -> list[Stmt]:
        return self.program.statements

    def inputs(self) -> list[Decl]:
        return [d for d in self.decls.values() if d.direction == "input"]

    def outputs(self) -> list[Decl]:
        return [d for d in self.decls.values() if d.direction == "output"]


# ---------------------------------------------------------------- lexer

_PUNCT = {":", "[", "]", "=", "#", ".", "*", "+", "(", ")"}
_KEYWORDS = {"var", "input", "output"}


@dataclass(frozen=True)
class _Tok:
    kind: str  # ident | nat | punct | kw | eof
    text: str
    loc: Loc


def _lex(src: str, filename: str) -> list[_Tok]:
    toks: list[_Tok] = []
    line, col = 1, 1
    i, n = 0, len(src)
    while i < n:
        ch = src[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "/" and i + 1 < n and src[i + 1] == "/":
            while i < n and src[i] != "\n":
                i += 1
            continue
        loc = Loc(line, col)
        if ch.isdigit():
            j = i
            while j < n and src[j].isdigit():
                j += 1
            toks.append(_Tok("nat", src[i:j], loc))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            word = src[i:j]
            toks.append(_Tok("kw" if word in _KEYWORDS else "ident", word, loc))
            col += j - i
            i = j
            continue
        if ch in _PUNCT:
            toks.append(_Tok("punct", ch, loc))
            i += 1
            col += 1
            continue
        raise ParseError(f"unexpected character {ch!r}", loc, filename)
    toks.append(_Tok("eof", "", Loc(line, col)))
    return toks


# ---------------------------------------------------------------- parser

class _Parser:
    def __init__(self, toks: list[_Tok], filename: str, bindings: dict[str, int]):
        self.toks = toks
        self.pos = 0
        self.filename = filename
        self.bindings = bindings

    def peek(self) -> _Tok:
        return self.toks[self.pos]

    def next(self) -> _Tok:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def fail(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.peek()
        raise ParseError(msg, tok.loc, self.filename)

    def expect(self, kind: str, text: str | None = None) -> _Tok:
        t = self.peek()
        if t.kind != kind or (text is not None and t.text != text):
            want = text or kind
            got = t.text or t.kind
            self.fail(f"expected {want!r}, found {got!r}")
        return self.next()

    def program(self) -> Program:
        decls, stmts = [], []
        while self.peek().kind != "eof":
            if self.peek().kind == "kw" and self.peek().text == "var":
                decls.append(self.decl())
            else:
                stmts.append(self.stmt())
        return Program(decls, stmts)

    def decl(self) -> Decl:
        loc = self.expect("kw", "var").loc
        direction = "temporary"
        if self.peek().kind == "kw":
            direction = self.next().text
        name = self.expect("ident").text
        self.expect("punct", ":")
        self.expect("punct", "[")
        shape = []
        while not (self.peek().kind == "punct" and self.peek().text == "]"):
            shape.append(self.extent())
        self.expect("punct", "]")
        if not shape:
            self.fail("empty shape")
        return Decl(name, direction, tuple(shape), loc)

    def extent(self) -> int:
        t = self.peek()
        if t.kind == "nat":
            self.next()
            v = int(t.text)
            if v < 1:
                self.fail("extents must be >= 1", t)
            return v
        if t.kind == "ident":
            self.next()
            if t.text not in self.bindings:
                self.fail(f"unbound size symbol {t.text!r}", t)
            v = self.bindings[t.text]
            if v < 1:
                self.fail(f"size symbol {t.text!r} bound to {v}, must be >= 1", t)
            return v
        self.fail("expected extent")

    def stmt(self) -> Stmt:
        t = self.expect("ident")
        self.expect("punct", "=")
        return Stmt(t.text, self.expr(), t.loc)

    def expr(self) -> Expr:
        e = self.term()
        while self.peek().kind == "punct" and self.peek().text == "+":
            loc = self.next().loc
            e = ElemAdd(e, self.term(), loc=loc)
        return e

    def term(self) -> Expr:
        e = self.factor()
        while self.peek().kind == "punct" and self.peek().text == "*":
            loc = self.next().loc
            e = ElemMul(e, self.factor(), loc=loc)
        return e

    def factor(self) -> Expr:
        e = self.postfix()
        while self.peek().kind == "punct" and self.peek().text == "#":
            loc = self.next().loc
            e = Product(e, self.postfix(), loc=loc)
        return e

    def postfix(self) -> Expr:
        e = self.primary()
        while self.peek().kind == "punct" and self.peek().text == ".":
            loc = self.next().loc
            e = Contract(e, self.pairlist(), loc=loc)
        return e

    def pairlist(self) -> tuple[tuple[int, int], ...]:
        self.expect("punct", "[")
        pairs = []
        while self.peek().kind == "punct" and self.peek().text == "[":
            self.next()
            a = int(self.expect("nat").text)
            b = int(self.expect("nat").text)
            self.expect("punct", "]")
            pairs.append((a, b))
        self.expect("punct", "]")
        if not pairs:
            self.fail("empty contraction pair list")
        return tuple(pairs)

    def primary(self) -> Expr:
        t = self.peek()
        if t.kind == "ident":
            self.next()
            return Ident(t.text, loc=t.loc)
        if t.kind == "punct" and t.text == "(":
            self.next()
            e = self.expr()
            self.expect("punct", ")")
            return Paren(e, loc=t.loc)
        self.fail("expected identifier or '('")


def parse(source_text: str, filename: str = "<input>",
          bindings: dict[str, int] | None = None) -> Program:
    """Parse DSL text into a Program with source locations.

    Shape extents may be written as symbols; `bindings` supplies their
    values (the CLI's --p flag binds the symbol `p`).
    """
    toks = _lex(source_text, filename)
    return _Parser(toks, filename, bindings or {}).program()


# ---------------------------------------------------------------- checker

def _strip(e: Expr) -> Expr:
    while isinstance(e, Paren):
        e = e.inner
    return e


def check(program: Program, filename: str = "<input>") -> TypedProgram:
    """Shape-check the program and annotate every Expr with its shape.

    Composition rules: a product concatenates operand shapes; a
    contraction removes the paired positions; elementwise operands must
    have identical shapes.  Undeclared assignment targets become
    implicit temporaries.
    """
    decls: dict[str, Decl] = {}
    for d in program.declarations:
        if d.name in decls:
            raise CheckError(f"duplicate declaration of {d.name!r}", d.loc, filename)
        decls[d.name] = d

    defined: set[str] = {d.name for d in decls.values() if d.direction == "input"}
    assigned: set[str] = set()

    def infer(e: Expr) -> tuple[int, ...]:
        if isinstance(e, Paren):
            e.shape = infer(e.inner)
            return e.shape
        if isinstance(e, Ident):
            if e.name not in defined:
                raise CheckError(f"undefined identifier {e.name!r}", e.loc, filename)
            e.shape = decls[e.name].shape
            return e.shape
        if isinstance(e, Product):
            e.shape = infer(e.lhs) + infer(e.rhs)
            return e.shape
        if isinstance(e, (ElemMul, ElemAdd)):
            ls, rs = infer(e.lhs), infer(e.rhs)
            if ls != rs:
                op = "*" if isinstance(e, ElemMul) else "+"
                raise CheckError(
                    f"elementwise {op!r} operand shapes differ: {list(ls)} vs {list(rs)}",
                    e.loc, filename)
            e.shape = ls
            return e.shape
        if isinstance(e, Contract):
            s = infer(e.operand)
            used: set[int] = set()
            for a, b in e.pairs:
                if a == b:
                    raise CheckError(
                        f"contraction pair [{a} {b}] references the same position",
                        e.loc, filename)
                for pos in (a, b):
                    if pos < 0 or pos >= len(s):
                        raise CheckError(
                            f"contraction position {pos} out of range for rank {len(s)}",
                            e.loc, filename)
                    if pos in used:
                        raise CheckError(
                            f"contraction position {pos} used twice", e.loc, filename)
                    used.add(pos)
                if s[a] != s[b]:
                    raise CheckError(
                        f"contraction extents differ at [{a} {b}]: {s[a]} vs {s[b]}",
                        e.loc, filename)
            e.shape = tuple(x for i, x in enumerate(s) if i not in used)
            return e.shape
        raise AssertionError(f"unknown expr {e!r}")

    for stmt in program.statements:
        shape = infer(stmt.expr)
        d = decls.get(stmt.target)
        if d is None:
            d = Decl(stmt.target, "temporary", shape, stmt.loc, implicit=True)
            decls[stmt.target] = d
        else:
            if d.direction == "input":
                raise CheckError(
                    f"input {stmt.target!r} may not be assigned", stmt.loc, filename)
            if d.shape != shape:
                raise CheckError(
                    f"{stmt.target!r} declared {list(d.shape)} but assigned "
                    f"shape {list(shape)}", stmt.loc, filename)
        if stmt.target in assigned:
            raise CheckError(f"{stmt.target!r} assigned twice", stmt.loc, filename)
        assigned.add(stmt.target)
        defined.add(stmt.target)

    for d in decls.values():
        if d.direction == "output" and d.name not in assigned:
            raise CheckError(f"output {d.name!r} is never assigned", d.loc, filename)

    return TypedProgram(program, decls)


# ---------------------------------------------------------------- printer

def _fmt_expr(e: Expr) -> str:
    if isinstance(e, Ident):
        return e.name
    if isinstance(e, Paren):
        return f"({_fmt_expr(e.inner)})"
    if isinstance(e, Product):
        return f"{_fmt_expr(e.lhs)} # {_fmt_expr(e.rhs)}"
    if isinstance(e, ElemMul):
        return f"{_fmt_expr(e.lhs)} * {_fmt_expr(e.rhs)}"
    if isinstance(e, ElemAdd):
        return f"{_fmt_expr(e.lhs)} + {_fmt_expr(e.rhs)}"
    if isinstance(e, Contract):
        pairs = " ".join(f"[{a} {b}]" for a, b in e.pairs)
        return f"{_fmt_expr(e.operand)} . [{pairs}]"
    raise AssertionError(e)


def pretty_print(program: Program) -> str:
    """Render a Program back to parseable source text."""
    lines = []
    for d in program.declarations:
        dir_part = "" if d.direction == "temporary" else f"{d.direction} "
        shape = " ".join(str(x) for x in d.shape)
        lines.append(f"var {dir_part}{d.name} : [{shape}]")
    if program.declarations and program.statements:
        lines.append("")
    for s in program.statements:
        lines.append(f"{s.target} = {_fmt_expr(s.expr)}")
    return "\n".join(lines) + "\n"
