import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Callable, Dict, FrozenSet, List, NoReturn, Optional, Set, Tuple, Union

import mpmath
import numpy as np

from .exceptions import ParseError, UnsupportedCommand

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Int:
    value: int


@dataclass(frozen=True)
class Dec:
    """Decimal literal ``mantissa * 10**exponent`` with the digits kept exact."""

    mantissa: int
    exponent: int

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.mantissa) * Fraction(10) ** self.exponent


@dataclass(frozen=True)
class Rational:
    """Non-integer rational constant; only produced by canonicalization."""

    value: Fraction


@dataclass(frozen=True)
class Const:
    name: str  # "pi" or "e"


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class Add:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Sub:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Mul:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Div:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: "Expr"


@dataclass(frozen=True)
class Func:
    name: str
    arg: "Expr"


@dataclass(frozen=True)
class Sum:
    """Flattened, sorted sum; only produced by canonicalization."""

    terms: Tuple["Expr", ...]


@dataclass(frozen=True)
class Product:
    """Flattened product, rational coefficient first; only produced by canonicalization."""

    factors: Tuple["Expr", ...]


Expr = Union[Int, Dec, Rational, Const, Var, Neg, Add, Sub, Mul, Div, Pow, Func, Sum, Product]

FUNCTIONS = ("sin", "cos", "tan", "log", "ln", "exp", "sqrt", "abs")

GREEK = frozenset({
    "alpha", "beta", "gamma", "delta", "epsilon", "varepsilon", "zeta", "eta",
    "theta", "vartheta", "iota", "kappa", "lambda", "mu", "nu", "xi", "rho",
    "varrho", "sigma", "varsigma", "tau", "upsilon", "phi", "varphi", "chi",
    "psi", "omega", "Gamma", "Delta", "Theta", "Lambda", "Xi", "Pi", "Sigma",
    "Upsilon", "Phi", "Psi", "Omega",
})

_SPACING = frozenset({",", ";", ":", "!", " ", "quad", "qquad"})
_FRACTIONS = frozenset({"frac", "dfrac", "tfrac"})
_ATOMIC = (Int, Dec, Const, Var)

# Trailing "\,\mathrm{m/s}" or "\text{ kg}" suffixes carry units only
_UNIT_SUFFIX = re.compile(
    r"(?:\s|\\[,;:! ]|\\quad)*\\(?:text|mathrm|mbox)\s*\{[^{}]*\}(?:\s|\\[,;:! ])*$"
)


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    kind: str  # NUM, LETTER, CMD, SYM, END
    text: str
    offset: int


def _tokenize(text: str) -> List[Token]:
    tokens: List[Token] = []
    i = 0
    byte = 0
    n = len(text)

    def advance(count: int) -> None:
        nonlocal i, byte
        byte += len(text[i:i + count].encode("utf-8"))
        i += count

    while i < n:
        ch = text[i]
        if ch.isspace() or ch == "$":
            advance(1)
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            while j < n and text[j].isdigit():
                j += 1
            if j < n and text[j] == "." and j + 1 < n and text[j + 1].isdigit():
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
            tokens.append(Token("NUM", text[i:j], byte))
            advance(j - i)
            continue
        if ch.isascii() and ch.isalpha():
            tokens.append(Token("LETTER", ch, byte))
            advance(1)
            continue
        if ch == "\\":
            j = i + 1
            while j < n and text[j].isascii() and text[j].isalpha():
                j += 1
            if j == i + 1:
                # Single-character command such as "\," or "\{"
                name = text[i + 1:i + 2]
                j = i + 2
            else:
                name = text[i + 1:j]
            start = byte
            advance(j - i)
            if name in _SPACING:
                continue
            if name in ("left", "right"):
                # The delimiter that follows carries the meaning
                while i < n and text[i].isspace():
                    advance(1)
                if i < n and text[i] == "|":
                    tokens.append(Token("SYM", "LABS" if name == "left" else "RABS", start))
                    advance(1)
                elif i < n and text[i] in "()[].":
                    if text[i] != ".":
                        tokens.append(Token("SYM", text[i], start))
                    advance(1)
                elif text.startswith("\\vert", i) or text.startswith("\\lvert", i) or text.startswith("\\rvert", i):
                    width = 5 if text.startswith("\\vert", i) else 6
                    tokens.append(Token("SYM", "LABS" if name == "left" else "RABS", start))
                    advance(width)
                else:
                    raise ParseError(byte, ["(", ")", "[", "]", "|"], text[i:i + 1])
                continue
            if name == "lvert":
                tokens.append(Token("SYM", "LABS", start))
                continue
            if name == "rvert":
                tokens.append(Token("SYM", "RABS", start))
                continue
            tokens.append(Token("CMD", name, start))
            continue
        if ch in "+-*/^_()[]{}|":
            tokens.append(Token("SYM", ch, byte))
            advance(1)
            continue
        raise ParseError(byte, ["number", "letter", "command", "operator"], ch)
    tokens.append(Token("END", "", byte))
    return tokens


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser:

    def __init__(self, text: str) -> None:
        self._tokens = _tokenize(text)
        self._pos = 0
        self._abs_depth = 0

    @property
    def _current(self) -> Token:
        return self._tokens[self._pos]

    def _is(self, kind: str, text: Optional[str] = None) -> bool:
        token = self._current
        return token.kind == kind and (text is None or token.text == text)

    def _next(self) -> Token:
        token = self._current
        self._pos += 1
        return token

    def _expect(self, text: str) -> Token:
        if not self._is("SYM", text):
            self._fail([text])
        return self._next()

    def _fail(self, expected: List[str]) -> NoReturn:
        token = self._current
        raise ParseError(token.offset, expected, token.text)

    def parse(self) -> Expr:
        node = self._sum()
        if not self._is("END"):
            self._fail(["+", "-", "operator", "end of input"])
        return node

    def _sum(self) -> Expr:
        node = self._term()
        while self._is("SYM", "+") or self._is("SYM", "-"):
            op = self._next().text
            right = self._term()
            node = Add(node, right) if op == "+" else Sub(node, right)
        return node

    def _term(self) -> Expr:
        node = self._signed()
        while True:
            if self._is("SYM", "*") or self._is("CMD", "cdot") or self._is("CMD", "times"):
                self._next()
                node = Mul(node, self._signed())
            elif self._is("SYM", "/") or self._is("CMD", "div"):
                self._next()
                node = Div(node, self._signed())
            elif self._starts_factor():
                if isinstance(node, (Int, Dec)) and self._is("NUM"):
                    # "1\,000" style digit grouping is not multiplication
                    self._fail(["operator", "end of input"])
                node = Mul(node, self._power())
            else:
                return node

    def _signed(self) -> Expr:
        if self._is("SYM", "-"):
            self._next()
            return Neg(self._signed())
        return self._power()

    def _starts_factor(self) -> bool:
        token = self._current
        if token.kind in ("NUM", "LETTER"):
            return True
        if token.kind == "CMD":
            return token.text not in ("cdot", "times", "div")
        if token.kind == "SYM":
            if token.text in ("(", "[", "{", "LABS"):
                return True
            return token.text == "|" and self._abs_depth == 0
        return False

    def _power(self) -> Expr:
        base = self._primary()
        if self._is("SYM", "^"):
            self._next()
            return Pow(base, self._exponent())
        return base

    def _exponent(self) -> Expr:
        if self._is("SYM", "-"):
            self._next()
            return Neg(self._exponent())
        arg = self._single_argument()
        if self._is("SYM", "^"):
            self._next()
            return Pow(arg, self._exponent())
        return arg

    def _single_argument(self) -> Expr:
        """Argument of ``^``, ``\\frac`` or ``\\sqrt``: a braced group or one token."""
        if self._is("SYM", "{"):
            self._next()
            node = self._sum()
            self._expect("}")
            return node
        if self._is("NUM"):
            token = self._current
            digit, rest = token.text[0], token.text[1:]
            if rest:
                self._tokens[self._pos] = Token("NUM", rest, token.offset + 1)
            else:
                self._pos += 1
            return Int(int(digit))
        return self._primary()

    def _primary(self) -> Expr:
        token = self._current
        if token.kind == "NUM":
            self._next()
            return _number(token.text)
        if token.kind == "LETTER":
            self._next()
            return self._identifier(token.text, allow_constant=True)
        if token.kind == "CMD":
            return self._command()
        if token.kind == "SYM":
            if token.text in ("(", "["):
                self._next()
                node = self._sum()
                self._expect(")" if token.text == "(" else "]")
                return node
            if token.text == "{":
                self._next()
                node = self._sum()
                self._expect("}")
                return node
            if token.text == "LABS":
                self._next()
                self._abs_depth += 1
                node = self._sum()
                self._abs_depth -= 1
                self._expect("RABS")
                return Func("abs", node)
            if token.text == "|" and self._abs_depth == 0:
                self._next()
                self._abs_depth += 1
                node = self._sum()
                self._abs_depth -= 1
                self._expect("|")
                return Func("abs", node)
        self._fail(["number", "letter", "command", "(", "{", "|"])

    def _identifier(self, base: str, allow_constant: bool) -> Expr:
        if self._is("SYM", "_"):
            self._next()
            return Var(f"{base}_{{{self._subscript()}}}")
        if allow_constant and base == "e":
            return Const("e")
        return Var(base)

    def _subscript(self) -> str:
        if self._is("SYM", "{"):
            self._next()
            parts: List[str] = []
            depth = 1
            while True:
                token = self._current
                if token.kind in ("NUM", "LETTER"):
                    parts.append(token.text)
                elif token.kind == "CMD" and token.text in GREEK:
                    parts.append(token.text)
                elif token.kind == "SYM" and token.text == "{":
                    depth += 1
                elif token.kind == "SYM" and token.text == "}":
                    depth -= 1
                    if depth == 0:
                        self._next()
                        break
                elif not (token.kind == "CMD" and token.text in ("rm", "mathrm", "text")):
                    self._fail(["letter", "digit", "}"])
                self._next()
            if not parts:
                self._fail(["letter", "digit"])
            return "".join(parts)
        token = self._current
        if token.kind == "NUM":
            digit, rest = token.text[0], token.text[1:]
            if rest:
                self._tokens[self._pos] = Token("NUM", rest, token.offset + 1)
            else:
                self._pos += 1
            return digit
        if token.kind == "LETTER":
            self._next()
            return token.text
        self._fail(["letter", "digit", "{"])

    def _command(self) -> Expr:
        token = self._next()
        name = token.text
        if name in ("cdot", "times", "div"):
            raise ParseError(token.offset, ["operand"], f"\\{name}")
        if name == "pi":
            return Const("pi")
        if name in GREEK:
            return self._identifier(f"\\{name}", allow_constant=False)
        if name in _FRACTIONS:
            numerator = self._single_argument()
            denominator = self._single_argument()
            return Div(numerator, denominator)
        if name == "sqrt":
            if self._is("SYM", "["):
                self._next()
                index = self._sum()
                self._expect("]")
                radicand = self._single_argument()
                return Pow(radicand, Div(Int(1), index))
            return Func("sqrt", self._single_argument())
        if name in ("vec", "mathrm", "mathbf", "hat", "bar"):
            self._expect("{")
            inner = self._identifier_group()
            self._expect("}")
            if name == "mathrm":
                return self._identifier(inner, allow_constant=inner == "e")
            return self._identifier(f"\\{name}{{{inner}}}", allow_constant=False)
        if name in ("sin", "cos", "tan", "log", "ln", "exp"):
            return self._function(name)
        raise UnsupportedCommand(name, token.offset)

    def _identifier_group(self) -> str:
        token = self._current
        if token.kind == "LETTER":
            self._next()
            base = token.text
        elif token.kind == "CMD" and token.text in GREEK:
            self._next()
            base = f"\\{token.text}"
        else:
            self._fail(["letter"])
        while self._is("LETTER"):
            base += self._next().text
        if self._is("SYM", "_"):
            self._next()
            return f"{base}_{{{self._subscript()}}}"
        return base

    def _function(self, name: str) -> Expr:
        base_arg: Optional[Expr] = None
        if name == "log" and self._is("SYM", "_"):
            self._next()
            base_arg = self._single_argument()
        power: Optional[Expr] = None
        if self._is("SYM", "^"):
            self._next()
            power = self._exponent()
        if self._is("SYM", "(") or self._is("SYM", "[") or self._is("SYM", "{"):
            arg = self._primary()
        else:
            arg = self._power()
        node: Expr = Func(name, arg)
        if base_arg is not None:
            node = Div(node, Func("log", base_arg))
        if power is not None:
            node = Pow(node, power)
        return node


def _number(text: str) -> Expr:
    if "." in text:
        whole, frac = text.split(".")
        return Dec(int((whole or "0") + frac), -len(frac))
    return Int(int(text))


def strip_units(text: str) -> str:
    """Remove trailing ``\\text{...}``/``\\mathrm{...}`` unit suffixes."""
    stripped = text.strip()
    while True:
        match = _UNIT_SUFFIX.search(stripped)
        if not match or not stripped[:match.start()].strip():
            return stripped
        stripped = stripped[:match.start()].rstrip()


def parse_expression(text: str) -> Expr:
    if not text or not text.strip():
        raise ParseError(0, ["expression"], "")
    return _Parser(strip_units(text)).parse()


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------

def to_latex(node: Expr) -> str:
    """Render a node in the accepted grammar; reparsing yields the same tree."""
    if isinstance(node, Int):
        return str(node.value)
    if isinstance(node, Dec):
        digits = str(node.mantissa).rjust(-node.exponent + 1, "0")
        if node.exponent >= 0:
            return digits + "0" * node.exponent
        return f"{digits[:node.exponent]}.{digits[node.exponent:]}"
    if isinstance(node, Rational):
        sign = "-" if node.value < 0 else ""
        return f"{sign}\\frac{{{abs(node.value.numerator)}}}{{{node.value.denominator}}}"
    if isinstance(node, Const):
        return "\\pi" if node.name == "pi" else "e"
    if isinstance(node, Var):
        return _print_name(node.name)
    if isinstance(node, Neg):
        return f"-{_wrap(node.operand)}"
    if isinstance(node, Add):
        return f"{_wrap(node.left)}+{_wrap(node.right)}"
    if isinstance(node, Sub):
        return f"{_wrap(node.left)}-{_wrap(node.right)}"
    if isinstance(node, Mul):
        return f"{_wrap(node.left)}\\cdot {_wrap(node.right)}"
    if isinstance(node, Div):
        return f"\\frac{{{to_latex(node.left)}}}{{{to_latex(node.right)}}}"
    if isinstance(node, Pow):
        return f"{_wrap(node.base)}^{{{to_latex(node.exponent)}}}"
    if isinstance(node, Func):
        if node.name == "sqrt":
            return f"\\sqrt{{{to_latex(node.arg)}}}"
        if node.name == "abs":
            return f"\\left|{to_latex(node.arg)}\\right|"
        return f"\\{node.name}\\left({to_latex(node.arg)}\\right)"
    if isinstance(node, Sum):
        return "+".join(_wrap(term) for term in node.terms)
    if isinstance(node, Product):
        return "\\cdot ".join(_wrap(factor) for factor in node.factors)
    raise TypeError(f"Unknown expression node: {node!r}")


def _print_name(name: str) -> str:
    base, sep, subscript = name.partition("_")
    if len(base) > 1 and base.isascii() and base.isalpha():
        # Multi-letter roman names came from \mathrm{...}
        return f"\\mathrm{{{base}}}{sep}{subscript}"
    return name


def _wrap(node: Expr) -> str:
    text = to_latex(node)
    return text if isinstance(node, _ATOMIC) else f"({text})"


# ---------------------------------------------------------------------------
# Canonical form
# ---------------------------------------------------------------------------

# Integer powers of constants are folded only below this many result bits
_FOLD_BIT_LIMIT = 4096

_KIND_RANK = {
    Int: 0, Rational: 0, Dec: 0, Const: 1, Var: 2, Pow: 3, Func: 4,
    Product: 5, Sum: 6, Neg: 7, Add: 8, Sub: 8, Mul: 8, Div: 8,
}


def order_key(node: Expr) -> tuple:
    rank = _KIND_RANK[type(node)]
    if isinstance(node, (Int, Rational, Dec)):
        return (rank, _fraction_of(node))
    if isinstance(node, (Const, Var)):
        return (rank, node.name)
    if isinstance(node, Pow):
        return (rank, order_key(node.base), order_key(node.exponent))
    if isinstance(node, Func):
        return (rank, node.name, order_key(node.arg))
    if isinstance(node, Product):
        return (rank, tuple(order_key(f) for f in node.factors))
    if isinstance(node, Sum):
        return (rank, tuple(order_key(t) for t in node.terms))
    if isinstance(node, Neg):
        return (rank, order_key(node.operand))
    return (rank, type(node).__name__, order_key(node.left), order_key(node.right))


def _fraction_of(node: Expr) -> Fraction:
    if isinstance(node, Int):
        return Fraction(node.value)
    if isinstance(node, Rational):
        return node.value
    if isinstance(node, Dec):
        return node.fraction
    raise TypeError(f"{node!r} is not a rational constant")


def _is_constant(node: Expr) -> bool:
    return isinstance(node, (Int, Rational))


def _constant(value: Fraction) -> Expr:
    if value.denominator == 1:
        return Int(value.numerator)
    return Rational(value)


def canonicalize(node: Expr) -> Expr:
    if isinstance(node, (Int, Dec, Rational)):
        return _constant(_fraction_of(node))
    if isinstance(node, (Const, Var)):
        return node
    if isinstance(node, Neg):
        return _product([Int(-1), canonicalize(node.operand)])
    if isinstance(node, Add):
        return _sum([canonicalize(node.left), canonicalize(node.right)])
    if isinstance(node, Sub):
        return _sum([canonicalize(node.left), _product([Int(-1), canonicalize(node.right)])])
    if isinstance(node, Mul):
        return _product([canonicalize(node.left), canonicalize(node.right)])
    if isinstance(node, Div):
        return _product([canonicalize(node.left), _power(canonicalize(node.right), Int(-1))])
    if isinstance(node, Pow):
        return _power(canonicalize(node.base), canonicalize(node.exponent))
    if isinstance(node, Func):
        return _function(node.name, canonicalize(node.arg))
    if isinstance(node, Sum):
        return _sum([canonicalize(term) for term in node.terms])
    if isinstance(node, Product):
        return _product([canonicalize(factor) for factor in node.factors])
    raise TypeError(f"Unknown expression node: {node!r}")


def _split_coefficient(term: Expr) -> Tuple[Fraction, Expr]:
    if isinstance(term, Product) and _is_constant(term.factors[0]):
        rest = term.factors[1:]
        return _fraction_of(term.factors[0]), rest[0] if len(rest) == 1 else Product(rest)
    return Fraction(1), term


def _sum(children: List[Expr]) -> Expr:
    flat: List[Expr] = []
    for child in children:
        flat.extend(child.terms if isinstance(child, Sum) else [child])

    constant = Fraction(0)
    coefficients: Dict[tuple, Fraction] = {}
    bodies: Dict[tuple, Expr] = {}
    for term in flat:
        if _is_constant(term):
            constant += _fraction_of(term)
            continue
        coefficient, body = _split_coefficient(term)
        key = order_key(body)
        coefficients[key] = coefficients.get(key, Fraction(0)) + coefficient
        bodies[key] = body

    terms = [
        _product([_constant(coefficients[key]), bodies[key]])
        for key in coefficients
        if coefficients[key] != 0
    ]
    if constant != 0:
        terms.append(_constant(constant))
    if any(isinstance(term, Sum) for term in terms):
        # A unit coefficient on a parenthesised sum exposes its terms
        return _sum(terms)
    if not terms:
        return Int(0)
    if len(terms) == 1:
        return terms[0]
    return Sum(tuple(sorted(terms, key=order_key)))


def _product(children: List[Expr]) -> Expr:
    flat: List[Expr] = []
    for child in children:
        flat.extend(child.factors if isinstance(child, Product) else [child])

    coefficient = Fraction(1)
    exponents: Dict[tuple, Fraction] = {}
    bases: Dict[tuple, Expr] = {}
    others: List[Expr] = []
    for factor in flat:
        if _is_constant(factor):
            coefficient *= _fraction_of(factor)
            continue
        base, exponent = (factor.base, factor.exponent) if isinstance(factor, Pow) else (factor, Int(1))
        if not _is_constant(exponent):
            others.append(factor)
            continue
        key = order_key(base)
        exponents[key] = exponents.get(key, Fraction(0)) + _fraction_of(exponent)
        bases[key] = base

    if coefficient == 0:
        return Int(0)

    factors: List[Expr] = list(others)
    for key, exponent in exponents.items():
        if exponent == 0:
            continue
        merged = _power(bases[key], _constant(exponent))
        if _is_constant(merged):
            coefficient *= _fraction_of(merged)
        elif isinstance(merged, Product):
            # (c*x)^n folded into a product
            for part in merged.factors:
                if _is_constant(part):
                    coefficient *= _fraction_of(part)
                else:
                    factors.append(part)
        else:
            factors.append(merged)

    if coefficient == 0:
        return Int(0)
    factors.sort(key=order_key)
    if coefficient != 1 or not factors:
        factors.insert(0, _constant(coefficient))
    if len(factors) == 1:
        return factors[0]
    return Product(tuple(factors))


def _power(base: Expr, exponent: Expr) -> Expr:
    if _is_constant(exponent):
        value = _fraction_of(exponent)
        if value == 0:
            return Int(1)
        if value == 1:
            return base
        if _is_constant(base) and value.denominator == 1:
            folded = _fold_constant_power(_fraction_of(base), value.numerator)
            if folded is not None:
                return _constant(folded)
        if isinstance(base, Pow) and _is_constant(base.exponent) and value.denominator == 1:
            return _power(base.base, _constant(_fraction_of(base.exponent) * value))
    if _is_constant(base) and _fraction_of(base) == 1:
        return Int(1)
    return Pow(base, exponent)


def _fold_constant_power(base: Fraction, exponent: int) -> Optional[Fraction]:
    if base == 0 and exponent < 0:
        return None
    bits = max(base.numerator.bit_length(), base.denominator.bit_length())
    if bits * abs(exponent) > _FOLD_BIT_LIMIT:
        return None
    return base ** exponent


_FUNCTION_ZEROS = {"sin": 0, "tan": 0}
_FUNCTION_AT_ZERO_ONE = {"cos", "exp"}


def _function(name: str, arg: Expr) -> Expr:
    if _is_constant(arg):
        value = _fraction_of(arg)
        if name == "abs":
            return _constant(abs(value))
        if name == "sqrt" and value >= 0:
            root_num = _exact_root(value.numerator)
            root_den = _exact_root(value.denominator)
            if root_num is not None and root_den is not None:
                return _constant(Fraction(root_num, root_den))
        if value == 0 and name in _FUNCTION_ZEROS:
            return Int(0)
        if value == 0 and name in _FUNCTION_AT_ZERO_ONE:
            return Int(1)
        if value == 1 and name in ("log", "ln"):
            return Int(0)
    return Func("log" if name == "ln" else name, arg)


def _exact_root(value: int) -> Optional[int]:
    root = math.isqrt(value)
    return root if root * root == value else None


# ---------------------------------------------------------------------------
# Numeric probing
# ---------------------------------------------------------------------------

class Verdict(Enum):
    EQUIVALENT = "equivalent"
    NOT_EQUIVALENT = "not-equivalent"
    INDETERMINATE = "indeterminate"


class Method(Enum):
    EXACT_RATIONAL = "exact-rational"
    CANONICAL_FORM = "canonical-form"
    NUMERIC_PROBE = "numeric-probe"


@dataclass(frozen=True)
class EquivalenceVerdict:
    verdict: Verdict
    method: Method
    probe_count: int = 0

    @property
    def equivalent(self) -> bool:
        return self.verdict is Verdict.EQUIVALENT


@dataclass(frozen=True)
class ProbeConfig:
    probes: int = 32
    min_valid: int = 8
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    seed: int = 0
    precision: int = 30  # decimal digits used by the evaluator

    def __post_init__(self) -> None:
        if self.probes < 1:
            raise ValueError("probes must be at least 1")
        if self.min_valid < 1:
            raise ValueError("min_valid must be at least 1")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")


def free_variables(node: Expr) -> FrozenSet[str]:
    names: Set[str] = set()
    _collect(node, names, positive=None)
    return frozenset(names)


def positive_variables(node: Expr) -> FrozenSet[str]:
    """Variables that occur under log, sqrt or a non-integer power."""
    names: Set[str] = set()
    _collect(node, set(), positive=names)
    return frozenset(names)


def _collect(node: Expr, names: Set[str], positive: Optional[Set[str]], inside: bool = False) -> None:
    if isinstance(node, Var):
        names.add(node.name)
        if inside and positive is not None:
            positive.add(node.name)
    elif isinstance(node, Neg):
        _collect(node.operand, names, positive, inside)
    elif isinstance(node, (Add, Sub, Mul, Div)):
        _collect(node.left, names, positive, inside)
        _collect(node.right, names, positive, inside)
    elif isinstance(node, Pow):
        exponent = canonicalize(node.exponent)
        fractional = not isinstance(exponent, Int)
        _collect(node.base, names, positive, inside or fractional)
        _collect(node.exponent, names, positive, inside)
    elif isinstance(node, Func):
        _collect(node.arg, names, positive, inside or node.name in ("log", "ln", "sqrt"))
    elif isinstance(node, (Sum, Product)):
        for child in (node.terms if isinstance(node, Sum) else node.factors):
            _collect(child, names, positive, inside)


_MP_FUNCTIONS: Dict[str, Callable] = {
    "sin": mpmath.sin,
    "cos": mpmath.cos,
    "tan": mpmath.tan,
    "log": mpmath.log,
    "ln": mpmath.log,
    "exp": mpmath.exp,
    "sqrt": mpmath.sqrt,
    "abs": mpmath.fabs,
}


def evaluate(node: Expr, env: Dict[str, "mpmath.mpf"]):
    """Evaluate at the current mpmath precision; may return complex or raise."""
    if isinstance(node, (Int, Dec, Rational)):
        value = _fraction_of(node)
        return mpmath.mpf(value.numerator) / value.denominator
    if isinstance(node, Const):
        return +mpmath.pi if node.name == "pi" else +mpmath.e
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Neg):
        return -evaluate(node.operand, env)
    if isinstance(node, Add):
        return evaluate(node.left, env) + evaluate(node.right, env)
    if isinstance(node, Sub):
        return evaluate(node.left, env) - evaluate(node.right, env)
    if isinstance(node, Mul):
        return evaluate(node.left, env) * evaluate(node.right, env)
    if isinstance(node, Div):
        return evaluate(node.left, env) / evaluate(node.right, env)
    if isinstance(node, Pow):
        return mpmath.power(evaluate(node.base, env), evaluate(node.exponent, env))
    if isinstance(node, Func):
        return _MP_FUNCTIONS[node.name](evaluate(node.arg, env))
    if isinstance(node, Sum):
        return mpmath.fsum(evaluate(term, env) for term in node.terms)
    if isinstance(node, Product):
        result = mpmath.mpf(1)
        for factor in node.factors:
            result *= evaluate(factor, env)
        return result
    raise TypeError(f"Unknown expression node: {node!r}")


def _finite_real(node: Expr, env: Dict[str, "mpmath.mpf"]):
    try:
        value = evaluate(node, env)
    except (ZeroDivisionError, ValueError, OverflowError):
        return None
    if isinstance(value, mpmath.mpc):
        if value.imag != 0:
            return None
        value = value.real
    if not mpmath.isfinite(value):
        return None
    return value


def _sample_assignments(names: List[str], positive: FrozenSet[str], cfg: ProbeConfig) -> List[Dict[str, float]]:
    rng = np.random.default_rng(cfg.seed)
    assignments = []
    for _ in range(cfg.probes):
        env = {}
        for name in names:
            magnitude = rng.uniform(0.1, 2.0)
            negative = rng.random() < 0.5
            env[name] = magnitude if (name in positive or not negative) else -magnitude
        assignments.append(env)
    return assignments


def expr_equivalent(a: Expr, b: Expr, cfg: Optional[ProbeConfig] = None) -> EquivalenceVerdict:
    cfg = cfg or ProbeConfig()
    canonical_a = canonicalize(a)
    canonical_b = canonicalize(b)
    if canonical_a == canonical_b:
        if _is_constant(canonical_a):
            return EquivalenceVerdict(Verdict.EQUIVALENT, Method.EXACT_RATIONAL)
        return EquivalenceVerdict(Verdict.EQUIVALENT, Method.CANONICAL_FORM)

    names = sorted(free_variables(a) | free_variables(b))
    positive = positive_variables(a) | positive_variables(b)
    assignments = _sample_assignments(names, positive, cfg) if names else [{}]

    valid = 0
    with mpmath.workdps(cfg.precision):
        rel_tol = mpmath.mpf(cfg.rel_tol)
        abs_tol = mpmath.mpf(cfg.abs_tol)
        for raw_env in assignments:
            env = {name: mpmath.mpf(value) for name, value in raw_env.items()}
            value_a = _finite_real(a, env)
            value_b = _finite_real(b, env)
            if value_a is None or value_b is None:
                continue
            valid += 1
            bound = abs_tol + rel_tol * max(abs(value_a), abs(value_b))
            if abs(value_a - value_b) > bound:
                return EquivalenceVerdict(Verdict.NOT_EQUIVALENT, Method.NUMERIC_PROBE, valid)

    if not names and valid:
        # Closed-form constants give the same value at every probe
        valid = cfg.probes
    if valid < cfg.min_valid:
        logger.debug(f"Only {valid} of {cfg.probes} probes were evaluable")
        return EquivalenceVerdict(Verdict.INDETERMINATE, Method.NUMERIC_PROBE, valid)
    return EquivalenceVerdict(Verdict.EQUIVALENT, Method.NUMERIC_PROBE, valid)
