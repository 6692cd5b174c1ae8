"""A small expression language for coefficient fields and payoffs.

Expressions are parsed with :mod:`ast` and compiled into numpy closures.
Only a whitelist of constructs is accepted:

* numeric literals, named constants, parameters ``f1 .. fk`` (``f`` is an
  alias of ``f1``) and the time ``t``;
* ``+ - * /`` and ``**``;
* ``abs``, ``min``, ``max`` and ``pos`` (positive part);
* state taps ``X(t)`` and ``X(t - lag)`` where ``lag`` is a constant
  expression (``X1(t)``, ``X2(t)``, ... address components when d > 1);
* ``gamma(z)`` when the model declares a gamma table;
* ``max_X`` (payoffs only): running maximum of the state.

Every compiled expression is evaluated on a batch: the environment holds
``f`` with shape ``(n, dims)``, a scalar ``t`` and ``prefix`` with shape
``(n, k + 1, d)`` sampled on the uniform grid ``linspace(0, t, k + 1)``.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

_FUNCS = {"abs", "min", "max", "pos"}


@dataclass
class Expr:
    source: str
    fn: object
    uses_state: bool = False
    max_lag: float = 0.0
    uses_time: bool = False
    taps: list = field(default_factory=list)

    def __call__(self, env):
        return self.fn(env)


def tap_value(prefix, t, lag, component=0):
    """Piecewise-linear read of a discrete prefix at time ``max(t - lag, 0)``."""
    k = prefix.shape[-2] - 1
    if lag <= 0.0 or k == 0:
        return prefix[..., k, component]
    s = max(t - lag, 0.0)
    pos = s / t * k
    i = min(int(np.floor(pos)), k - 1)
    w = pos - i
    lo = prefix[..., i, component]
    hi = prefix[..., i + 1, component]
    return lo + w * (hi - lo) if w > 0.0 else lo


def _const_eval(node, consts, key):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.Name) and node.id in consts:
        return float(consts[node.id])
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _const_eval(node.operand, consts, key)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp):
        a = _const_eval(node.left, consts, key)
        b = _const_eval(node.right, consts, key)
        ops = {ast.Add: a + b, ast.Sub: a - b, ast.Mult: a * b}
        if type(node.op) in ops:
            return ops[type(node.op)]
        if isinstance(node.op, ast.Div):
            return a / b
    raise ConfigError("tap lag must be a constant expression", key)


class _Compiler:
    def __init__(self, dims, d, consts, gamma, allow_running_max, key):
        self.dims = dims
        self.d = d
        self.consts = dict(consts or {})
        self.gamma = gamma
        self.allow_running_max = allow_running_max
        self.key = key
        self.uses_state = False
        self.uses_time = False
        self.max_lag = 0.0
        self.taps = []

    def fail(self, msg):
        raise ConfigError(msg, self.key)

    def compile(self, node):
        if isinstance(node, ast.Expression):
            return self.compile(node.body)
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                self.fail(f"unsupported literal {node.value!r}")
            v = float(node.value)
            return lambda env: v
        if isinstance(node, ast.Name):
            return self._name(node.id)
        if isinstance(node, ast.UnaryOp):
            inner = self.compile(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda env: -inner(env)
            if isinstance(node.op, ast.UAdd):
                return inner
            self.fail("unsupported unary operator")
        if isinstance(node, ast.BinOp):
            lhs = self.compile(node.left)
            rhs = self.compile(node.right)
            op = type(node.op)
            if op is ast.Add:
                return lambda env: lhs(env) + rhs(env)
            if op is ast.Sub:
                return lambda env: lhs(env) - rhs(env)
            if op is ast.Mult:
                return lambda env: lhs(env) * rhs(env)
            if op is ast.Div:
                return lambda env: lhs(env) / rhs(env)
            if op is ast.Pow:
                return lambda env: np.power(lhs(env), rhs(env))
            self.fail(f"unsupported operator {op.__name__}")
        if isinstance(node, ast.Call):
            return self._call(node)
        self.fail(f"unsupported syntax {type(node).__name__}")

    def _name(self, name):
        if name == "t":
            self.uses_time = True
            return lambda env: env["t"]
        if name == "f" and self.dims == 1:
            name = "f1"
        if name.startswith("f") and name[1:].isdigit():
            i = int(name[1:]) - 1
            if not 0 <= i < self.dims:
                self.fail(f"parameter {name} outside 1..{self.dims}")
            return lambda env: env["f"][..., i]
        if name == "max_X":
            if not self.allow_running_max:
                self.fail("max_X is only available in payoffs")
            self.uses_state = True
            return lambda env: env["running_max"]
        if name in self.consts:
            v = float(self.consts[name])
            return lambda env: v
        self.fail(f"unknown name {name!r}")

    def _call(self, node):
        if not isinstance(node.func, ast.Name) or node.keywords:
            self.fail("only plain function calls are allowed")
        name = node.func.id
        args = node.args
        if name == "X" or (name.startswith("X") and name[1:].isdigit()):
            comp = 0 if name == "X" else int(name[1:]) - 1
            if name == "X" and self.d != 1:
                self.fail("use X1(t), X2(t), ... when d > 1")
            if not 0 <= comp < self.d:
                self.fail(f"state component {name} outside 1..{self.d}")
            if len(args) != 1:
                self.fail(f"{name} takes exactly one time argument")
            lag = self._lag(args[0])
            self.uses_state = True
            self.max_lag = max(self.max_lag, lag)
            self.taps.append((comp, lag))
            if lag > 0.0:
                self.uses_time = True
            return lambda env: tap_value(env["prefix"], env["t"], lag, comp)
        if name == "gamma":
            if self.gamma is None:
                self.fail("gamma(...) needs a [delay] gamma_table")
            if len(args) != 1:
                self.fail("gamma takes one argument")
            inner = self.compile(args[0])
            g = self.gamma
            return lambda env: g(inner(env))
        if name not in _FUNCS:
            self.fail(f"unknown function {name!r}")
        parts = [self.compile(a) for a in args]
        if name == "abs":
            if len(parts) != 1:
                self.fail("abs takes one argument")
            p = parts[0]
            return lambda env: np.abs(p(env))
        if name == "pos":
            if len(parts) != 1:
                self.fail("pos takes one argument")
            p = parts[0]
            return lambda env: np.maximum(p(env), 0.0)
        if len(parts) < 2:
            self.fail(f"{name} needs at least two arguments")
        red = np.minimum if name == "min" else np.maximum

        def reduce_(env):
            out = parts[0](env)
            for p in parts[1:]:
                out = red(out, p(env))
            return out

        return reduce_

    def _lag(self, node):
        if isinstance(node, ast.Name) and node.id == "t":
            return 0.0
        if (
            isinstance(node, ast.BinOp)
            and isinstance(node.op, ast.Sub)
            and isinstance(node.left, ast.Name)
            and node.left.id == "t"
        ):
            lag = _const_eval(node.right, self.consts, self.key)
            if lag < 0:
                self.fail("negative tap lag")
            return lag
        self.fail("state taps must look like X(t) or X(t - lag)")


def compile_expr(source, dims, d=1, consts=None, gamma=None, allow_running_max=False, key=""):
    """Compile ``source`` into an :class:`Expr` evaluated on batched environments."""
    if not isinstance(source, str):
        raise ConfigError("expression must be a string", key)
    try:
        tree = ast.parse(source.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse {source!r}: {exc.msg}", key) from None
    comp = _Compiler(dims, d, consts, gamma, allow_running_max, key)
    fn = comp.compile(tree)
    return Expr(
        source=source,
        fn=fn,
        uses_state=comp.uses_state,
        max_lag=comp.max_lag,
        uses_time=comp.uses_time,
        taps=comp.taps,
    )
