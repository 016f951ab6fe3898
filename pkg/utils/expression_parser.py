"""
Safe arithmetic expression compiler.

Turns strings such as "1 + 0.3*p1 + 0.1*sin(pi*x1)" into vectorized numpy
callables. Only arithmetic, a fixed set of functions and whitelisted
variable names are accepted; everything else is rejected before evaluation.
"""

import ast
import operator
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np


class ExpressionError(ValueError):
    """Raised when an expression cannot be parsed or uses unsupported syntax."""
    pass


FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
    "log": np.log,
    "abs": np.abs,
}

CONSTANTS: dict[str, float] = {"pi": float(np.pi)}

_BINARY = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}

_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}

Evaluator = Callable[[Mapping[str, np.ndarray]], np.ndarray]


def standard_variables(species: int, dim: int, parameters: int = 0) -> list[str]:
    """Names p1..pM, s, x1..x_dim and theta1..thetaK."""
    names = [f"p{i + 1}" for i in range(species)] + ["s"]
    names += [f"x{j + 1}" for j in range(dim)]
    names += [f"theta{k + 1}" for k in range(parameters)]
    return names


@dataclass(frozen=True)
class CompiledExpression:
    """A parsed expression together with the variables it reads."""

    source: str
    variables: frozenset[str]
    _evaluate: Evaluator = field(repr=False, compare=False)

    def __call__(self, env: Mapping[str, np.ndarray]) -> np.ndarray:
        missing = self.variables - set(env)
        if missing:
            raise ExpressionError(f"Missing variables for '{self.source}': {sorted(missing)}")
        with np.errstate(all="ignore"):
            return np.asarray(self._evaluate(env), dtype=float)

    def uses_any(self, names: Iterable[str]) -> bool:
        return bool(self.variables & set(names))


def compile_expression(text: str, allowed: Iterable[str]) -> CompiledExpression:
    """
    Compile an expression string into a vectorized evaluator.

    Args:
        text: Expression source
        allowed: Variable names the expression may reference

    Returns:
        CompiledExpression

    Raises:
        ExpressionError: On syntax errors, unknown names or unsupported constructs
    """
    if not isinstance(text, str) or not text.strip():
        raise ExpressionError("Expression must be a non-empty string")
    try:
        tree = ast.parse(text.strip().replace("^", "**"), mode="eval")
    except SyntaxError as e:
        raise ExpressionError(f"Invalid expression '{text}': {e.msg}") from e

    allowed = frozenset(allowed)
    used: set[str] = set()

    def build(node: ast.AST) -> Evaluator:
        if isinstance(node, ast.Expression):
            return build(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            value = float(node.value)
            return lambda env: value
        if isinstance(node, ast.Name):
            if node.id in CONSTANTS:
                value = CONSTANTS[node.id]
                return lambda env: value
            if node.id not in allowed:
                raise ExpressionError(f"Unknown variable '{node.id}' in '{text}'")
            used.add(node.id)
            name = node.id
            return lambda env: env[name]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINARY:
            op = _BINARY[type(node.op)]
            left, right = build(node.left), build(node.right)
            return lambda env: op(left(env), right(env))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            op = _UNARY[type(node.op)]
            operand = build(node.operand)
            return lambda env: op(operand(env))
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
                raise ExpressionError(f"Unsupported function call in '{text}'")
            if len(node.args) != 1 or node.keywords:
                raise ExpressionError(f"{node.func.id}() takes exactly one argument")
            func = FUNCTIONS[node.func.id]
            argument = build(node.args[0])
            return lambda env: func(argument(env))
        raise ExpressionError(f"Unsupported syntax '{type(node).__name__}' in '{text}'")

    evaluator = build(tree)
    return CompiledExpression(source=text, variables=frozenset(used), _evaluate=evaluator)


def coordinate_function(value: "float | str", dim: int) -> Callable[[np.ndarray], np.ndarray]:
    """
    Turn a constant or an expression in x1..x_dim into a function of (K, dim) points.

    Used for boundary data given in run configurations.
    """
    if isinstance(value, (int, float)):
        constant = float(value)
        return lambda points: np.full(np.atleast_2d(points).shape[0], constant)
    compiled = compile_expression(value, [f"x{j + 1}" for j in range(dim)])

    def evaluate(points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        env = {f"x{j + 1}": points[:, j] for j in range(dim)}
        return np.broadcast_to(compiled(env), (points.shape[0],)).astype(float)

    return evaluate


__all__ = [
    "ExpressionError",
    "CompiledExpression",
    "compile_expression",
    "coordinate_function",
    "standard_variables",
    "FUNCTIONS",
]
