"""Recursive-descent parser for guidance scripts.

Precedence, loosest first: ``or``, ``and``, ``not``, comparison, ``+ -``,
``* /``, unary minus, postfix (call, index, slice).
"""
from __future__ import annotations

from grappa.gsl import ast
from grappa.gsl.errors import GslSyntaxError
from grappa.gsl.lexer import Token, read_header, tokenize

COMPARISONS = ("<", "<=", ">", ">=", "==", "!=")


class Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    # token helpers

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def at(self, kind: str, value=None) -> bool:
        tok = self.tok
        return tok.kind == kind and (value is None or tok.value == value)

    def at_op(self, value: str) -> bool:
        return self.at("op", value)

    def at_kw(self, value: str) -> bool:
        return self.at("keyword", value)

    def error(self, message: str, tok: Token | None = None) -> GslSyntaxError:
        tok = tok or self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.value)
        return GslSyntaxError(f"{message}, found {found}", tok.span)

    def expect_op(self, value: str) -> Token:
        if not self.at_op(value):
            raise self.error(f"expected {value!r}")
        return self.advance()

    def expect_kw(self, value: str) -> Token:
        if not self.at_kw(value):
            raise self.error(f"expected {value!r}")
        return self.advance()

    def expect_ident(self) -> Token:
        if not self.at("ident"):
            raise self.error("expected identifier")
        return self.advance()

    # top level

    def module(self) -> ast.Module:
        items = []
        while not self.at("eof"):
            if self.at_kw("fn"):
                items.append(self.fn_def())
            elif self.at_kw("let"):
                tok = self.advance()
                name = self.expect_ident().value
                self.expect_op("=")
                value = self.expr()
                self.expect_op(";")
                items.append(ast.Const(name, value, tok.span))
            else:
                raise self.error("expected 'fn' or 'let' at top level")
        return ast.Module(tuple(items))

    def fn_def(self) -> ast.FnDef:
        tok = self.expect_kw("fn")
        name = self.expect_ident().value
        self.expect_op("(")
        params = []
        if not self.at_op(")"):
            while True:
                ptok = self.expect_ident()
                default = None
                if self.at_op("="):
                    self.advance()
                    default = self.expr()
                params.append(ast.Param(ptok.value, default, ptok.span))
                if not self.at_op(","):
                    break
                self.advance()
        self.expect_op(")")
        body = self.block()
        return ast.FnDef(name, tuple(params), body, tok.span)

    def block(self) -> tuple:
        open_tok = self.expect_op("{")
        stmts = []
        while not self.at_op("}"):
            if self.at("eof"):
                raise GslSyntaxError("unclosed '{'", open_tok.span)
            stmts.append(self.statement())
        self.advance()
        return tuple(stmts)

    # statements

    def statement(self):
        tok = self.tok
        if self.at_kw("let"):
            self.advance()
            name = self.expect_ident().value
            self.expect_op("=")
            value = self.expr()
            self.expect_op(";")
            return ast.Let(name, value, tok.span)
        if self.at_kw("if"):
            return self.if_stmt()
        if self.at_kw("for"):
            self.advance()
            var = self.expect_ident().value
            self.expect_kw("in")
            iterable = self.expr()
            body = self.block()
            return ast.For(var, iterable, body, tok.span)
        if self.at_kw("return"):
            self.advance()
            value = self.expr()
            self.expect_op(";")
            return ast.Return(value, tok.span)
        if self.at("ident"):
            name = self.advance().value
            path = []
            while self.at_op("["):
                self.advance()
                path.append(self.expr())
                self.expect_op("]")
            if not self.at_op("="):
                raise self.error("expected '=' in assignment")
            self.advance()
            value = self.expr()
            self.expect_op(";")
            return ast.Assign(name, tuple(path), value, tok.span)
        raise self.error("expected statement")

    def if_stmt(self) -> ast.If:
        tok = self.expect_kw("if")
        cond = self.expr()
        body = self.block()
        orelse: tuple = ()
        if self.at_kw("else"):
            self.advance()
            orelse = (self.if_stmt(),) if self.at_kw("if") else self.block()
        return ast.If(cond, body, orelse, tok.span)

    # expressions

    def expr(self):
        return self.or_expr()

    def or_expr(self):
        left = self.and_expr()
        while self.at_kw("or"):
            tok = self.advance()
            left = ast.Binary("or", left, self.and_expr(), tok.span)
        return left

    def and_expr(self):
        left = self.not_expr()
        while self.at_kw("and"):
            tok = self.advance()
            left = ast.Binary("and", left, self.not_expr(), tok.span)
        return left

    def not_expr(self):
        if self.at_kw("not"):
            tok = self.advance()
            return ast.Unary("not", self.not_expr(), tok.span)
        return self.comparison()

    def comparison(self):
        left = self.additive()
        if self.tok.kind == "op" and self.tok.value in COMPARISONS:
            tok = self.advance()
            left = ast.Binary(tok.value, left, self.additive(), tok.span)
            if self.tok.kind == "op" and self.tok.value in COMPARISONS:
                raise self.error("comparisons do not chain; use 'and'")
        return left

    def additive(self):
        left = self.term()
        while self.at_op("+") or self.at_op("-"):
            tok = self.advance()
            left = ast.Binary(tok.value, left, self.term(), tok.span)
        return left

    def term(self):
        left = self.unary()
        while self.at_op("*") or self.at_op("/"):
            tok = self.advance()
            left = ast.Binary(tok.value, left, self.unary(), tok.span)
        return left

    def unary(self):
        if self.at_op("-"):
            tok = self.advance()
            operand = self.unary()
            if isinstance(operand, ast.Num):
                return ast.Num(-operand.value, tok.span)
            return ast.Unary("-", operand, tok.span)
        return self.postfix()

    def postfix(self):
        node = self.primary()
        while True:
            if self.at_op("("):
                if not isinstance(node, ast.Name):
                    raise self.error("only named functions can be called")
                self.advance()
                args = []
                if not self.at_op(")"):
                    args.append(self.expr())
                    while self.at_op(","):
                        self.advance()
                        args.append(self.expr())
                self.expect_op(")")
                node = ast.Call(node.id, tuple(args), node.span)
            elif self.at_op("["):
                tok = self.advance()
                lo = None if self.at_op(":") else self.expr()
                if self.at_op(":"):
                    self.advance()
                    hi = None if self.at_op("]") else self.expr()
                    self.expect_op("]")
                    node = ast.Slice(node, lo, hi, tok.span)
                else:
                    self.expect_op("]")
                    node = ast.Index(node, lo, tok.span)
            else:
                return node

    def primary(self):
        tok = self.tok
        if tok.kind == "number":
            self.advance()
            return ast.Num(tok.value, tok.span)
        if tok.kind == "string":
            self.advance()
            return ast.Str(tok.value, tok.span)
        if self.at_kw("true") or self.at_kw("false"):
            self.advance()
            return ast.Bool(tok.value == "true", tok.span)
        if tok.kind == "ident":
            self.advance()
            return ast.Name(tok.value, tok.span)
        if self.at_op("("):
            self.advance()
            first = self.expr()
            if self.at_op(","):
                self.advance()
                second = self.expr()
                self.expect_op(")")
                return ast.PairLit(first, second, tok.span)
            self.expect_op(")")
            return first
        if self.at_op("["):
            self.advance()
            items = []
            if not self.at_op("]"):
                items.append(self.expr())
                while self.at_op(","):
                    self.advance()
                    if self.at_op("]"):
                        break
                    items.append(self.expr())
            self.expect_op("]")
            return ast.VecLit(tuple(items), tok.span)
        if self.at_op("{"):
            self.advance()
            pairs = []
            while not self.at_op("}"):
                key = self.tok
                if key.kind != "string":
                    raise self.error("map keys must be string literals")
                self.advance()
                self.expect_op(":")
                pairs.append((key.value, self.expr()))
                if not self.at_op(","):
                    break
                self.advance()
            self.expect_op("}")
            return ast.MapLit(tuple(pairs), tok.span)
        raise self.error("expected expression")


def parse_module(source: str) -> tuple[int, ast.Module]:
    version = read_header(source)
    parser = Parser(tokenize(source))
    return version, parser.module()
