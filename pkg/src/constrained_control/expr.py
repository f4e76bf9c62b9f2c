"""Small arithmetic expression language for inline problem coefficients.

Expressions use ``+ - * / ^``, parentheses, numeric literals, the
constants ``pi`` and ``e``, the functions ``exp``, ``ln`` and ``sqrt``,
the time ``t`` and the state coordinates ``x_1 ... x_d`` (``x`` alone
when ``d = 1``).  Compiled expressions are vectorized: ``fn(t, x)`` with
``x`` of shape ``(..., d)`` returns an array of shape ``(...)``.
"""

from __future__ import annotations

import ast
import math
import re

import numpy as np

_FUNCTIONS = {"exp": np.exp, "ln": np.log, "sqrt": np.sqrt}
_CONSTANTS = {"pi": math.pi, "e": math.e}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}
_STATE = re.compile(r"x_([1-9][0-9]*)$")


class ExpressionError(ValueError):
    pass


def _check(node: ast.AST, dim: int, source: str) -> None:
    if isinstance(node, ast.Expression):
        return _check(node.body, dim, source)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return
    if isinstance(node, ast.Name):
        name = node.id
        if name == "t" or name in _CONSTANTS or (name == "x" and dim == 1):
            return
        m = _STATE.match(name)
        if m and int(m.group(1)) <= dim:
            return
        raise ExpressionError(f"unknown name {name!r} in {source!r} (state dimension {dim})")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        _check(node.left, dim, source)
        return _check(node.right, dim, source)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.UAdd, ast.USub)):
        return _check(node.operand, dim, source)
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
            raise ExpressionError(f"unsupported function in {source!r}; allowed: {sorted(_FUNCTIONS)}")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"{node.func.id} takes exactly one argument in {source!r}")
        return _check(node.args[0], dim, source)
    raise ExpressionError(f"unsupported syntax {type(node).__name__} in {source!r}")


def _evaluate(node: ast.AST, t, x):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        if node.id == "t":
            return t
        if node.id in _CONSTANTS:
            return _CONSTANTS[node.id]
        if node.id == "x":
            return x[..., 0]
        return x[..., int(node.id[2:]) - 1]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_evaluate(node.left, t, x), _evaluate(node.right, t, x))
    if isinstance(node, ast.UnaryOp):
        v = _evaluate(node.operand, t, x)
        return -v if isinstance(node.op, ast.USub) else v
    return _FUNCTIONS[node.func.id](_evaluate(node.args[0], t, x))


def compile_expression(source, dim: int):
    """Parse ``source`` (a string or a number) into a vectorized ``fn(t, x)``."""
    if isinstance(source, (int, float)) and not isinstance(source, bool):
        source = repr(float(source))
    if not isinstance(source, str) or not source.strip():
        raise ExpressionError(f"expected an expression string, got {source!r}")
    try:
        tree = ast.parse(source.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {source!r}: {exc.msg} at column {exc.offset}") from None
    _check(tree, dim, source)
    body = tree.body

    def fn(t, x):
        x = np.asarray(x, dtype=float)
        t_arr = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        with np.errstate(all="ignore"):
            return np.broadcast_to(np.asarray(_evaluate(body, t_arr, x), dtype=float), x.shape[:-1])

    fn.source = source
    return fn


def constant_value(source) -> float | None:
    """The value of an expression that mentions neither ``t`` nor the state, else ``None``."""
    if isinstance(source, (int, float)) and not isinstance(source, bool):
        return float(source)
    tree = ast.parse(str(source).replace("^", "**"), mode="eval")
    names = {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}
    if names - set(_CONSTANTS):
        return None
    return float(compile_expression(source, 1)(0.0, np.zeros(1)))
