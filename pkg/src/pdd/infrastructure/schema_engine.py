"""Checks documents against structural ``SchemaNode`` trees, reporting JSON-pointer paths."""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Any

from pdd.domain.models import SchemaNode


@dataclass(frozen=True)
class SchemaViolation:
    path: str
    message: str
    observed: Any = None
    allowed: Any = None


@lru_cache(maxsize=256)
def _compiled(pattern: str) -> re.Pattern[str]:
    return re.compile(pattern)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate_document(node: SchemaNode, value: Any, path: str = "") -> list[SchemaViolation]:
    """Return every violation of *node* by *value*; an empty list means conformant."""
    violations: list[SchemaViolation] = []
    _check(node, value, path, violations)
    return violations


def _check(node: SchemaNode, value: Any, path: str, out: list[SchemaViolation]) -> None:
    if node.kind == "object":
        if not isinstance(value, dict):
            out.append(SchemaViolation(path or "/", "expected object", type(value).__name__))
            return
        for name in node.required:
            if name not in value:
                out.append(SchemaViolation(f"{path}/{name}", "required field missing"))
        for name, child in node.properties.items():
            if name in value:
                _check(child, value[name], f"{path}/{name}", out)
        return

    if node.kind == "string":
        if not isinstance(value, str):
            out.append(SchemaViolation(path, "expected string", value))
        elif node.pattern is not None and not _compiled(node.pattern).search(value):
            out.append(SchemaViolation(path, f"does not match pattern {node.pattern}", value, node.pattern))
        return

    if node.kind == "enum":
        if not any(v == value and type(v) is type(value) for v in node.enum_values):
            out.append(SchemaViolation(path, f"not one of {list(node.enum_values)}", value))
        return

    if node.kind == "integer":
        if not isinstance(value, int) or isinstance(value, bool):
            out.append(SchemaViolation(path, "expected integer", value))
            return
    elif not _is_number(value):
        out.append(SchemaViolation(path, "expected number", value))
        return

    if node.minimum is not None and value < node.minimum:
        out.append(SchemaViolation(path, f"below minimum {node.minimum}", value, node.minimum))
    if node.maximum is not None and value > node.maximum:
        out.append(SchemaViolation(path, f"above maximum {node.maximum}", value, node.maximum))
