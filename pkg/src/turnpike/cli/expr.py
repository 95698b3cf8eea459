"""A small arithmetic language for user-defined control-affine systems.

Grammar (``^`` binds tightest and associates to the right; the other binary
operators associate to the left; unary minus sits between ``*`` and ``^``,
so ``-x1^2`` is ``-(x1^2)``)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?
    atom    := NUMBER | VAR | FUNC '(' expr ')' | '(' expr ')'

``VAR`` is ``x1, x2, ...``; ``FUNC`` is one of ``sin, cos, exp, tanh``.
Exponents must be constant integers.  Trees support numeric evaluation,
symbolic differentiation and compilation to fast Python callables.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple, Union

import numpy as np

from ..errors import ConfigError, ParseError
from ..model import ControlAffineSystem

FUNCTIONS = ("sin", "cos", "exp", "tanh")

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^()])
""", re.VERBOSE)

_VAR = re.compile(r"x([1-9][0-9]*)\Z")

_ATOM_START = ("number", "variable", "function", "'('")


# --------------------------------------------------------------------------
# Expression trees

class Expr:
    """Base class of expression nodes (immutable, hashable)."""

    def evaluate(self, x) -> float:
        """Value at ``x``: a sequence (``x[0]`` is ``x1``) or a name mapping."""
        if isinstance(x, Mapping):
            n = max((self.max_var(), *(_var_index(k) + 1 for k in x)), default=0)
            vec = np.zeros(n)
            for k, v in x.items():
                vec[_var_index(k)] = v
            x = vec
        return float(self._eval(np.asarray(x, dtype=float)))

    def diff(self, var: Union[str, "Var"]) -> "Expr":
        """Symbolic partial derivative with respect to ``var`` (``"xK"``)."""
        k = var.index if isinstance(var, Var) else _var_index(var)
        return self._diff(k)

    def max_var(self) -> int:
        """Largest variable number referenced (0 when constant)."""
        return max((c.max_var() for c in self._children()), default=0)

    def _children(self):
        return ()

    def __str__(self):
        return self._str(0)


@dataclass(frozen=True)
class Num(Expr):
    value: float

    def _eval(self, x):
        return self.value

    def _diff(self, k):
        return ZERO

    def _str(self, prec):
        v = self.value
        s = repr(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(float(v))
        return f"({s})" if v < 0 and prec > 1 else s

    def _src(self, consts):
        consts.append(np.float64(self.value))
        return f"_k[{len(consts) - 1}]"


@dataclass(frozen=True)
class Var(Expr):
    index: int  # 0-based: x1 has index 0

    def _eval(self, x):
        if self.index >= x.size:
            raise IndexError(f"x{self.index + 1} is not defined for a {x.size}-vector")
        return x[self.index]

    def _diff(self, k):
        return ONE if k == self.index else ZERO

    def max_var(self):
        return self.index + 1

    def _str(self, prec):
        return f"x{self.index + 1}"

    def _src(self, consts):
        return f"x[{self.index}]"


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr

    def _children(self):
        return (self.arg,)

    def _eval(self, x):
        return -self.arg._eval(x)

    def _diff(self, k):
        return neg(self.arg._diff(k))

    def _str(self, prec):
        s = "-" + self.arg._str(3)
        return f"({s})" if prec > 2 else s

    def _src(self, consts):
        return f"(-{self.arg._src(consts)})"


_BINARY_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    def _children(self):
        return (self.left, self.right)

    def _eval(self, x):
        a, b = self.left._eval(x), self.right._eval(x)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            a, b = np.float64(a), np.float64(b)
            if self.op == "+":
                return a + b
            if self.op == "-":
                return a - b
            if self.op == "*":
                return a * b
            return a / b

    def _diff(self, k):
        a, b = self.left, self.right
        da, db = a._diff(k), b._diff(k)
        if self.op == "+":
            return add(da, db)
        if self.op == "-":
            return sub(da, db)
        if self.op == "*":
            return add(mul(da, b), mul(a, db))
        return div(sub(mul(da, b), mul(a, db)), power(b, 2))

    def _str(self, prec):
        p = _BINARY_PREC[self.op]
        # right operand of - and / needs parentheses at equal precedence
        s = f"{self.left._str(p)} {self.op} {self.right._str(p + 1)}"
        return f"({s})" if prec > p else s

    def _src(self, consts):
        return f"({self.left._src(consts)} {self.op} {self.right._src(consts)})"


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int

    def _children(self):
        return (self.base,)

    def _eval(self, x):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return np.float64(self.base._eval(x)) ** self.exponent

    def _diff(self, k):
        return mul(mul(Num(float(self.exponent)), power(self.base, self.exponent - 1)),
                   self.base._diff(k))

    def _str(self, prec):
        e = str(self.exponent) if self.exponent >= 0 else f"({self.exponent})"
        s = f"{self.base._str(5)}^{e}"
        return f"({s})" if prec > 4 else s

    def _src(self, consts):
        return f"({self.base._src(consts)} ** {self.exponent})"


_NP_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "tanh": np.tanh}


@dataclass(frozen=True)
class Call(Expr):
    name: str
    arg: Expr

    def _children(self):
        return (self.arg,)

    def _eval(self, x):
        with np.errstate(over="ignore", invalid="ignore"):
            return _NP_FUNCS[self.name](np.float64(self.arg._eval(x)))

    def _diff(self, k):
        a = self.arg
        if self.name == "sin":
            outer = Call("cos", a)
        elif self.name == "cos":
            outer = neg(Call("sin", a))
        elif self.name == "exp":
            outer = self
        else:
            outer = sub(ONE, power(self, 2))
        return mul(outer, a._diff(k))

    def _str(self, prec):
        return f"{self.name}({self.arg._str(0)})"

    def _src(self, consts):
        return f"_np.{self.name}({self.arg._src(consts)})"


ZERO = Num(0.0)
ONE = Num(1.0)


def _is(e, v):
    return isinstance(e, Num) and e.value == v


def _fold(op, a, b):
    with np.errstate(all="ignore"):
        return Num(float(Binary(op, a, b)._eval(np.zeros(0))))


# Simplifying constructors (constant folding and the neutral elements).

def neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return _fold("+", a, b)
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    if isinstance(b, Neg):
        return sub(a, b.arg)
    return Binary("+", a, b)


def sub(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return _fold("-", a, b)
    if _is(b, 0):
        return a
    if _is(a, 0):
        return neg(b)
    return Binary("-", a, b)


def mul(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return _fold("*", a, b)
    if _is(a, 0) or _is(b, 0):
        return ZERO
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    if _is(a, -1):
        return neg(b)
    if _is(b, -1):
        return neg(a)
    return Binary("*", a, b)


def div(a, b):
    if isinstance(a, Num) and isinstance(b, Num) and b.value != 0:
        return _fold("/", a, b)
    if _is(a, 0) and not _is(b, 0):
        return ZERO
    if _is(b, 1):
        return a
    return Binary("/", a, b)


def power(a, k):
    if k == 0:
        return ONE
    if k == 1:
        return a
    if isinstance(a, Num) and not (a.value == 0 and k < 0):
        return Num(float(np.float64(a.value) ** k))
    if isinstance(a, Pow):
        return power(a.base, a.exponent * k)
    return Pow(a, k)


def _var_index(name) -> int:
    m = _VAR.match(str(name))
    if not m:
        raise ValueError(f"{name!r} is not a variable name (x1, x2, ...)")
    return int(m.group(1)) - 1


# --------------------------------------------------------------------------
# Parser

@dataclass(frozen=True)
class _Tok:
    kind: str  # number, name, op, end
    text: str
    offset: int  # byte offset into the UTF-8 source


def _tokenize(source: str):
    toks = []
    pos = 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", _byte_offset(source, pos),
                             _ATOM_START + ("operator",))
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, m.group(), _byte_offset(source, pos)))
        pos = m.end()
    toks.append(_Tok("end", "", len(source.encode("utf-8"))))
    return toks


def _byte_offset(source, pos):
    return len(source[:pos].encode("utf-8"))


class _Parser:
    def __init__(self, source):
        self.toks = _tokenize(source)
        self.i = 0

    @property
    def tok(self):
        return self.toks[self.i]

    def _fail(self, expected, what=None):
        t = self.tok
        what = what or ("end of input" if t.kind == "end" else f"token {t.text!r}")
        raise ParseError(f"unexpected {what}", t.offset, expected)

    def _accept(self, text):
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def parse(self):
        e = self.expr()
        if self.tok.kind != "end":
            self._fail(("'+'", "'-'", "'*'", "'/'", "'^'", "end of input"))
        return e

    def expr(self):
        e = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            rhs = self.term()
            e = add(e, rhs) if op == "+" else sub(e, rhs)
        return e

    def term(self):
        e = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            rhs = self.unary()
            e = mul(e, rhs) if op == "*" else div(e, rhs)
        return e

    def unary(self):
        if self._accept("-"):
            return neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.i += 1
            at = self.tok.offset
            exponent = self.unary()
            if not isinstance(exponent, Num) or not float(exponent.value).is_integer():
                raise ParseError("exponent must be a constant integer", at, ("integer",))
            return power(base, int(exponent.value))
        return base

    def atom(self):
        t = self.tok
        if t.kind == "number":
            self.i += 1
            return Num(float(t.text))
        if t.kind == "name":
            if _VAR.match(t.text):
                self.i += 1
                return Var(_var_index(t.text))
            if t.text in FUNCTIONS:
                self.i += 1
                if not self._accept("("):
                    self._fail(("'('",))
                arg = self.expr()
                if not self._accept(")"):
                    self._fail(("')'", "'+'", "'-'", "'*'", "'/'", "'^'"))
                return Call(t.text, arg)
            raise ParseError(f"unknown name {t.text!r}", t.offset, _ATOM_START)
        if self._accept("("):
            e = self.expr()
            if not self._accept(")"):
                self._fail(("')'", "'+'", "'-'", "'*'", "'/'", "'^'"))
            return e
        self._fail(_ATOM_START + ("'-'",))


def parse_expr(source: str) -> Expr:
    """Parse ``source`` into an expression tree.

    Raises
    ------
    ParseError
        With the byte offset of the offending token and the set of tokens
        that would have been accepted there.
    """
    if not isinstance(source, str):
        raise TypeError("expression source must be a string")
    return _Parser(source).parse()


# --------------------------------------------------------------------------
# Compilation

def compile_exprs(exprs, shape) -> "callable":
    """``x -> ndarray`` evaluating a nested list of trees laid out as ``shape``."""
    flat = list(np.asarray(exprs, dtype=object).reshape(-1))
    if len(flat) != int(np.prod(shape)):
        raise ValueError(f"expected {int(np.prod(shape))} expressions for shape {shape}")
    consts = []
    body = ", ".join(e._src(consts) for e in flat)
    code = f"lambda x, _k, _np: _np.array([{body}], dtype=_np.float64).reshape({tuple(shape)!r})"
    fn = eval(compile(code, "<turnpike-expr>", "eval"), {"__builtins__": {}})
    k = tuple(consts)

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return fn(x, k, np)

    return evaluate


@dataclass(frozen=True)
class SystemExpr:
    """``dx/dt = f(x) + g(x) u`` given as expression strings over ``x1..xn``."""

    n: int
    m: int
    f_exprs: Tuple[str, ...]
    g_exprs: Tuple[Tuple[str, ...], ...]
    name: str = "dsl"

    def __post_init__(self):
        object.__setattr__(self, "f_exprs", tuple(self.f_exprs))
        object.__setattr__(self, "g_exprs", tuple(tuple(r) for r in self.g_exprs))
        if self.n < 1 or self.m < 1:
            raise ConfigError("system dimensions n and m must be positive")
        if len(self.f_exprs) != self.n:
            raise ConfigError(f"f needs {self.n} expressions, got {len(self.f_exprs)}")
        if len(self.g_exprs) != self.n or any(len(r) != self.m for r in self.g_exprs):
            raise ConfigError(f"g needs {self.n} rows of {self.m} expressions")

    def trees(self):
        """Parsed ``(f, g)`` trees; variables beyond ``xn`` are rejected."""
        f = [parse_expr(s) for s in self.f_exprs]
        g = [[parse_expr(s) for s in row] for row in self.g_exprs]
        for e, src in zip(f + [e for r in g for e in r],
                          list(self.f_exprs) + [s for r in self.g_exprs for s in r]):
            if e.max_var() > self.n:
                raise ConfigError(f"expression {src!r} references x{e.max_var()} but n = {self.n}")
        return f, g

    def to_system(self) -> ControlAffineSystem:
        """Compile to a :class:`ControlAffineSystem` with exact derivatives.

        Raises ``ConfigError`` when ``f(0)`` is not zero to ``1e-12``.
        """
        n, m = self.n, self.m
        f, g = self.trees()
        df = [[e.diff(Var(j)) for j in range(n)] for e in f]
        d2f = [[[d.diff(Var(l)) for l in range(n)] for d in row] for row in df]
        # dg[k][i][j] = d g_ik / d x_j
        dg = [[[g[i][k].diff(Var(j)) for j in range(n)] for i in range(n)] for k in range(m)]
        d2g = [[[[e.diff(Var(l)) for l in range(n)] for e in row] for row in blk] for blk in dg]
        constant_g = all(_is(e, 0) for blk in dg for row in blk for e in row)
        sysm = ControlAffineSystem(
            n=n, m=m,
            f=compile_exprs(f, (n,)),
            g=compile_exprs(g, (n, m)),
            df=compile_exprs(df, (n, n)),
            dg=compile_exprs(dg, (m, n, n)),
            name=self.name,
            d2f=compile_exprs(d2f, (n, n, n)),
            d2g=compile_exprs(d2g, (m, n, n, n)),
            constant_g=constant_g,
        )
        f0 = sysm.f(np.zeros(n))
        if not np.all(np.isfinite(f0)) or np.abs(f0).max() > 1e-12:
            raise ConfigError(f"f(0) = {f0.tolist()} is not zero; the origin must be an equilibrium")
        return sysm

    def to_dict(self) -> Dict:
        return {"n": self.n, "m": self.m, "f": list(self.f_exprs),
                "g": [list(r) for r in self.g_exprs]}
