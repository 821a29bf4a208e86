from __future__ import annotations

import re
from dataclasses import dataclass

from grappa.gsl.errors import GslSyntaxError, MissingHeader

KEYWORDS = {"fn", "let", "if", "else", "for", "in", "return", "and", "or", "not", "true", "false"}

HEADER = re.compile(r"^#gsl[ \t]+(\d+)[ \t]*$")

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<string>"(?:[^"\\\n]|\\.)*"|'(?:[^'\\\n]|\\.)*')
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|==|!=|[-+*/<>=(){}\[\],;:])
    """,
    re.VERBOSE,
)

_ESCAPES = {"n": "\n", "t": "\t", "\\": "\\", '"': '"', "'": "'"}


@dataclass(frozen=True)
class Token:
    kind: str  # number, string, ident, keyword, op, eof
    value: object
    line: int
    col: int

    @property
    def span(self) -> tuple[int, int]:
        return (self.line, self.col)


def read_header(source: str) -> int:
    first = source.split("\n", 1)[0].lstrip("﻿")
    m = HEADER.match(first.rstrip("\r"))
    if not m:
        raise MissingHeader("guidance source must start with '#gsl 1'", (1, 1))
    version = int(m.group(1))
    if version != 1:
        raise GslSyntaxError(f"unsupported GSL version {version}", (1, 1))
    return version


def _unescape(body: str, line: int, col: int) -> str:
    out = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\":
            nxt = body[i + 1]
            if nxt not in _ESCAPES:
                raise GslSyntaxError(f"unknown escape \\{nxt}", (line, col + i + 1))
            out.append(_ESCAPES[nxt])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    pos, line, line_start = 0, 1, 0
    n = len(source)
    while pos < n:
        m = _TOKEN.match(source, pos)
        col = pos - line_start + 1
        if m is None:
            raise GslSyntaxError(f"unexpected character {source[pos]!r}", (line, col))
        kind = m.lastgroup
        text = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "number":
            tokens.append(Token("number", float(text), line, col))
        elif kind == "string":
            tokens.append(Token("string", _unescape(text[1:-1], line, col), line, col))
        elif kind == "ident":
            tokens.append(Token("keyword" if text in KEYWORDS else "ident", text, line, col))
        elif kind == "op":
            tokens.append(Token("op", text, line, col))
        pos = m.end()
    tokens.append(Token("eof", None, line, pos - line_start + 1))
    return tokens
