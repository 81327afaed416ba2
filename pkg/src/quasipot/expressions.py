"""Arithmetic expression ASTs for problem coefficients.

Coefficients are data, not code: a small grammar over the spatial variables
``x1..xd`` and the solution level ``u``, with ``+ - * / ^`` (``^`` binds
tightest and is right-associative, then unary minus, then ``* /``, then
``+ -``) and the functions exp, ln, sqrt, sin, cos, tanh, abs, min, max.
Evaluation is numpy-vectorized and refuses to produce silent NaNs: ln/sqrt
outside their domain, division by zero and fractional powers of negative
numbers raise :class:`ExpressionDomainError` pointing at the offending
subexpression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Expression",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "ExpressionSyntaxError",
    "ExpressionDomainError",
    "parse_expression",
    "to_source",
    "evaluate",
    "compile_program",
    "FUNCTION_ARITY",
]

FUNCTION_ARITY = {
    "exp": 1,
    "ln": 1,
    "sqrt": 1,
    "sin": 1,
    "cos": 1,
    "tanh": 1,
    "abs": 1,
    "min": 2,
    "max": 2,
}

_BINOPS = ("+", "-", "*", "/", "^")


class ExpressionSyntaxError(ValueError):
    """Parse failure; carries the byte offset of the offending token."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ExpressionDomainError(ArithmeticError):
    """Evaluation left the function's domain (ln/sqrt/division/power)."""

    def __init__(self, message, span=None):
        if span is not None:
            message = f"{message} [source bytes {span[0]}:{span[1]}]"
        super().__init__(message)
        self.span = span


@dataclass(frozen=True)
class Expression:
    span: tuple | None = field(default=None, compare=False, kw_only=True)


@dataclass(frozen=True)
class Num(Expression):
    value: float = 0.0


@dataclass(frozen=True)
class Var(Expression):
    name: str = ""


@dataclass(frozen=True)
class Neg(Expression):
    arg: Expression = None


@dataclass(frozen=True)
class BinOp(Expression):
    op: str = "+"
    left: Expression = None
    right: Expression = None


@dataclass(frozen=True)
class Call(Expression):
    func: str = ""
    args: tuple = ()


# ---------------------------------------------------------------------------
# tokenizer / parser


class _Token:
    __slots__ = ("kind", "text", "offset")

    def __init__(self, kind, text, offset):
        self.kind = kind
        self.text = text
        self.offset = offset


def _byte_offset(source, i):
    return len(source[:i].encode("utf-8"))


def _tokenize(source):
    tokens = []
    i, n = 0, len(source)
    while i < n:
        ch = source[i]
        if ch.isspace():
            i += 1
            continue
        off = _byte_offset(source, i)
        if ch.isdigit() or (ch == "." and i + 1 < n and source[i + 1].isdigit()):
            j = i
            while j < n and (source[j].isdigit() or source[j] == "."):
                j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            text = source[i:j]
            try:
                float(text)
            except ValueError:
                raise ExpressionSyntaxError(f"malformed number {text!r}", off)
            tokens.append(_Token("num", text, off))
            i = j
        elif ch.isalpha() or ch == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(_Token("ident", source[i:j], off))
            i = j
        elif ch in "+-*/^(),":
            tokens.append(_Token(ch, ch, off))
            i += 1
        else:
            raise ExpressionSyntaxError(f"unexpected character {ch!r}", off)
    tokens.append(_Token("eof", "", _byte_offset(source, n)))
    return tokens


class _Parser:
    def __init__(self, source):
        self.source = source
        self.tokens = _tokenize(source)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind):
        tok = self.next()
        if tok.kind != kind:
            raise ExpressionSyntaxError(
                f"expected {kind!r}, found {tok.text or 'end of input'!r}", tok.offset
            )
        return tok

    def parse(self):
        e = self.expr()
        tok = self.peek()
        if tok.kind != "eof":
            raise ExpressionSyntaxError(f"trailing input {tok.text!r}", tok.offset)
        return e

    def expr(self):
        left = self.term()
        while self.peek().kind in ("+", "-"):
            op = self.next().kind
            right = self.term()
            left = BinOp(op=op, left=left, right=right, span=_merge(left.span, right.span))
        return left

    def term(self):
        left = self.unary()
        while self.peek().kind in ("*", "/"):
            op = self.next().kind
            right = self.unary()
            left = BinOp(op=op, left=left, right=right, span=_merge(left.span, right.span))
        return left

    def unary(self):
        tok = self.peek()
        if tok.kind == "-":
            self.next()
            arg = self.unary()
            return Neg(arg=arg, span=_merge((tok.offset, tok.offset + 1), arg.span))
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek().kind == "^":
            self.next()
            exponent = self.unary()  # right-associative, allows 2^-3
            return BinOp(op="^", left=base, right=exponent, span=_merge(base.span, exponent.span))
        return base

    def atom(self):
        tok = self.next()
        if tok.kind == "num":
            end = tok.offset + len(tok.text.encode("utf-8"))
            return Num(value=float(tok.text), span=(tok.offset, end))
        if tok.kind == "ident":
            end = tok.offset + len(tok.text.encode("utf-8"))
            if self.peek().kind == "(":
                if tok.text not in FUNCTION_ARITY:
                    raise ExpressionSyntaxError(f"unknown function {tok.text!r}", tok.offset)
                self.next()
                args = [self.expr()]
                while self.peek().kind == ",":
                    self.next()
                    args.append(self.expr())
                close = self.expect(")")
                arity = FUNCTION_ARITY[tok.text]
                if len(args) != arity:
                    raise ExpressionSyntaxError(
                        f"{tok.text} takes {arity} argument(s), got {len(args)}", tok.offset
                    )
                return Call(func=tok.text, args=tuple(args), span=(tok.offset, close.offset + 1))
            if not _is_variable(tok.text):
                raise ExpressionSyntaxError(f"unknown identifier {tok.text!r}", tok.offset)
            return Var(name=tok.text, span=(tok.offset, end))
        if tok.kind == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise ExpressionSyntaxError(
            f"expected a value, found {tok.text or 'end of input'!r}", tok.offset
        )


def _is_variable(name):
    if name == "u":
        return True
    if name.startswith("x") and name[1:].isdigit() and int(name[1:]) >= 1:
        return True
    return False


def _merge(a, b):
    if a is None or b is None:
        return None
    return (a[0], b[1])


def parse_expression(source: str) -> Expression:
    """Parse UTF-8 text into an AST; raises ExpressionSyntaxError with byte offsets."""
    return _Parser(source).parse()


# ---------------------------------------------------------------------------
# printing (round-trips through parse_expression)

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


def to_source(e: Expression) -> str:
    return _print(e, 0)


def _print(e, parent_prec):
    if isinstance(e, Num):
        if e.value < 0 or (e.value == 0 and math.copysign(1.0, e.value) < 0):
            s, prec = f"-{abs(e.value)!r}", _PREC["neg"]
        else:
            s, prec = repr(e.value), _PREC["atom"]
    elif isinstance(e, Var):
        s, prec = e.name, _PREC["atom"]
    elif isinstance(e, Neg):
        s, prec = "-" + _print(e.arg, _PREC["neg"]), _PREC["neg"]
    elif isinstance(e, Call):
        s = f"{e.func}({', '.join(_print(a, 0) for a in e.args)})"
        prec = _PREC["atom"]
    elif isinstance(e, BinOp):
        prec = _PREC[e.op]
        if e.op == "^":
            # right-associative; left operand must outrank ^, including unary minus
            left = _print(e.left, prec + 1)
            right = _print(e.right, prec)
        else:
            left = _print(e.left, prec)
            # - and / are left-associative: parenthesize equal-precedence right operands
            right = _print(e.right, prec + (1 if e.op in ("-", "/") else 0))
        s = f"{left} {e.op} {right}"
    else:
        raise TypeError(f"not an expression node: {e!r}")
    if prec < parent_prec:
        return f"({s})"
    return s


# ---------------------------------------------------------------------------
# evaluation


def evaluate(e: Expression, env: dict):
    """Evaluate on scalars or broadcastable numpy arrays from ``env``."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise ExpressionDomainError(f"unbound variable {e.name!r}", e.span) from None
    if isinstance(e, Neg):
        return -evaluate(e.arg, env)
    if isinstance(e, BinOp):
        a = evaluate(e.left, env)
        b = evaluate(e.right, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            _check(np.all(b != 0), "division by zero", e, b, np.asarray(b) == 0)
            return a / b
        if e.op == "^":
            return _power(a, b, e)
    if isinstance(e, Call):
        args = [evaluate(a, env) for a in e.args]
        if e.func == "exp":
            return np.exp(args[0])
        if e.func == "ln":
            x = np.asarray(args[0], dtype=float)
            _check(np.all(x > 0), "ln of non-positive value", e, x, x <= 0)
            return np.log(args[0])
        if e.func == "sqrt":
            x = np.asarray(args[0], dtype=float)
            _check(np.all(x >= 0), "sqrt of negative value", e, x, x < 0)
            return np.sqrt(args[0])
        if e.func == "sin":
            return np.sin(args[0])
        if e.func == "cos":
            return np.cos(args[0])
        if e.func == "tanh":
            return np.tanh(args[0])
        if e.func == "abs":
            return np.abs(args[0])
        if e.func == "min":
            return np.minimum(args[0], args[1])
        if e.func == "max":
            return np.maximum(args[0], args[1])
    raise TypeError(f"not an expression node: {e!r}")


def _check(ok, message, node, values, bad_mask):
    if ok:
        return
    worst = np.asarray(values)[np.asarray(bad_mask)].ravel()
    raise ExpressionDomainError(f"{message} (e.g. {worst[0]!r})", node.span)


def _power(a, b, node):
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    frac = b_arr != np.floor(b_arr)
    bad = (a_arr < 0) & frac
    _check(not np.any(bad), "fractional power of negative base", node, a_arr, bad)
    bad0 = (a_arr == 0) & (b_arr < 0)
    _check(not np.any(bad0), "zero raised to negative power", node, b_arr, bad0)
    # compute through magnitudes so (-x)^n == -(x^n) exactly for odd integer n
    # (np.power itself is not odd-symmetric on every platform)
    mag = np.power(np.abs(a_arr), b_arr)
    odd = (a_arr < 0) & (np.mod(b_arr, 2.0) == 1.0)
    result = np.where(odd, -mag, mag)
    if np.ndim(a) == 0 and np.ndim(b) == 0:
        return float(result)
    return result


def variables_of(e: Expression) -> set:
    if isinstance(e, Num):
        return set()
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Neg):
        return variables_of(e.arg)
    if isinstance(e, BinOp):
        return variables_of(e.left) | variables_of(e.right)
    if isinstance(e, Call):
        out = set()
        for a in e.args:
            out |= variables_of(a)
        return out
    raise TypeError(f"not an expression node: {e!r}")


# ---------------------------------------------------------------------------
# bytecode for the jitted Monte Carlo kernels
#
# Postorder program over a small value stack; opcodes match
# mc_kernels.eval_program.

OP_CONST = 0
OP_VAR = 1  # arg: 0..d-1 -> x1..xd, d -> u
OP_NEG = 2
OP_ADD = 3
OP_SUB = 4
OP_MUL = 5
OP_DIV = 6
OP_POW = 7
OP_EXP = 8
OP_LN = 9
OP_SQRT = 10
OP_SIN = 11
OP_COS = 12
OP_TANH = 13
OP_ABS = 14
OP_MIN = 15
OP_MAX = 16

_FUNC_OPS = {
    "exp": OP_EXP,
    "ln": OP_LN,
    "sqrt": OP_SQRT,
    "sin": OP_SIN,
    "cos": OP_COS,
    "tanh": OP_TANH,
    "abs": OP_ABS,
    "min": OP_MIN,
    "max": OP_MAX,
}

MAX_STACK = 32


def compile_program(e: Expression, dimension: int):
    """Flatten to (opcodes, args, consts) int32/int32/float64 arrays."""
    ops, args, consts = [], [], []

    def emit(node):
        if isinstance(node, Num):
            ops.append(OP_CONST)
            args.append(len(consts))
            consts.append(float(node.value))
        elif isinstance(node, Var):
            idx = dimension if node.name == "u" else int(node.name[1:]) - 1
            if node.name != "u" and not (0 <= idx < dimension):
                raise ValueError(f"variable {node.name} out of range for dimension {dimension}")
            ops.append(OP_VAR)
            args.append(idx)
        elif isinstance(node, Neg):
            emit(node.arg)
            ops.append(OP_NEG)
            args.append(0)
        elif isinstance(node, BinOp):
            emit(node.left)
            emit(node.right)
            ops.append({"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "^": OP_POW}[node.op])
            args.append(0)
        elif isinstance(node, Call):
            for a in node.args:
                emit(a)
            ops.append(_FUNC_OPS[node.func])
            args.append(0)
        else:
            raise TypeError(f"not an expression node: {node!r}")

    emit(e)
    depth = 0
    peak = 0
    for op in ops:
        if op in (OP_CONST, OP_VAR):
            depth += 1
        elif op in (OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW, OP_MIN, OP_MAX):
            depth -= 1
        peak = max(peak, depth)
    if peak > MAX_STACK:
        raise ValueError(f"expression too deep for the jitted evaluator (stack {peak})")
    return (
        np.asarray(ops, dtype=np.int32),
        np.asarray(args, dtype=np.int32),
        np.asarray(consts, dtype=np.float64),
    )
