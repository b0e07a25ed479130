"""Seeded input generation, property evaluation and greedy shrinking.

Each case draws from its own ``random.Random`` seeded by
``sha256(run seed, property name, case index)``, so a case's inputs never
depend on how many cases ran before it or on scheduling.
"""
from __future__ import annotations

import hashlib
import logging
import random
import re
import string
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

from pdd.domain.models import (
    BehavioralProperty,
    ClauseOutcome,
    Counterexample,
    Document,
    InvocationRecord,
    PropertyRun,
    SchemaNode,
    StructuralSchema,
)
from pdd.domain.ports import CandidateSession
from pdd.infrastructure.canonical import canonical_bytes
from pdd.infrastructure.documents import outcome_to_document
from pdd.infrastructure.schema_engine import validate_document

try:
    from re import _constants as sre_constants, _parser as sre_parse
except ImportError:  # pragma: no cover
    import sre_constants  # type: ignore[no-redef]
    import sre_parse  # type: ignore[no-redef]

logger = logging.getLogger(__name__)

NUMERIC_CLIP = 1_000_000_000
STRING_ALPHABET = string.ascii_letters + string.digits
_MAX_STRING = 12
_MAX_REPEAT = 8
_REGEX_ATTEMPTS = 50


def case_seed(seed: int, property_name: str, index: int) -> int:
    material = f"{seed}:{property_name}:{index}".encode()
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "big")


def effective_cases(run: PropertyRun, prop: BehavioralProperty) -> int:
    return max(run.case_count, prop.case_count)


# ── Generators ───────────────────────────────────────────────────────


class _RegexGenerator:
    """Produces strings for the regular-expression subset schemas use."""

    _CATEGORIES = {
        sre_constants.CATEGORY_DIGIT: string.digits,
        sre_constants.CATEGORY_WORD: string.ascii_letters + string.digits + "_",
        sre_constants.CATEGORY_SPACE: " ",
    }

    def __init__(self, rng: random.Random) -> None:
        self.rng = rng

    def render(self, pattern: str) -> str:
        return "".join(self._emit(sre_parse.parse(pattern)))

    def _emit(self, parsed) -> list[str]:
        out: list[str] = []
        for op, arg in parsed:
            if op is sre_constants.LITERAL:
                out.append(chr(arg))
            elif op is sre_constants.ANY:
                out.append(self.rng.choice(STRING_ALPHABET))
            elif op is sre_constants.IN:
                out.append(self._pick_in(arg))
            elif op in (sre_constants.MAX_REPEAT, sre_constants.MIN_REPEAT):
                low, high, sub = arg
                high = min(high, low + _MAX_REPEAT) if high != sre_constants.MAXREPEAT else low + _MAX_REPEAT
                for _ in range(self.rng.randint(low, high)):
                    out.extend(self._emit(sub))
            elif op is sre_constants.SUBPATTERN:
                out.extend(self._emit(arg[-1]))
            elif op is sre_constants.BRANCH:
                out.extend(self._emit(self.rng.choice(arg[1])))
            elif op is sre_constants.AT:
                continue
            else:
                raise ValueError(f"unsupported regex construct {op}")
        return out

    def _pick_in(self, items) -> str:
        choices: list[str] = []
        for op, arg in items:
            if op is sre_constants.NEGATE:
                raise ValueError("negated classes are not generated")
            if op is sre_constants.LITERAL:
                choices.append(chr(arg))
            elif op is sre_constants.RANGE:
                choices.extend(chr(c) for c in range(arg[0], arg[1] + 1))
            elif op is sre_constants.CATEGORY:
                choices.extend(self._CATEGORIES.get(arg, STRING_ALPHABET))
        return self.rng.choice(choices)


def _bounds(node: SchemaNode) -> tuple[float, float]:
    """Declared bounds as given; an open side is clipped, but never past the declared one."""
    low, high = node.minimum, node.maximum
    if low is None:
        low = -NUMERIC_CLIP if high is None or high > -NUMERIC_CLIP else high - NUMERIC_CLIP
    if high is None:
        high = NUMERIC_CLIP if low < NUMERIC_CLIP else low + NUMERIC_CLIP
    return low, high


def _string(node: SchemaNode, rng: random.Random) -> str:
    if node.pattern is None:
        return "".join(rng.choice(STRING_ALPHABET) for _ in range(rng.randint(1, _MAX_STRING)))
    compiled = re.compile(node.pattern)
    try:
        value = _RegexGenerator(rng).render(node.pattern)
        if compiled.search(value):
            return value
    except (ValueError, re.error):
        pass
    for _ in range(_REGEX_ATTEMPTS):
        value = "".join(rng.choice(STRING_ALPHABET) for _ in range(rng.randint(1, _MAX_STRING)))
        if compiled.search(value):
            return value
    raise ValueError(f"cannot generate a string matching {node.pattern!r}")


def generate_value(node: SchemaNode, rng: random.Random) -> Any:
    if node.kind == "object":
        value = {}
        for name, child in node.properties.items():
            if name in node.required or rng.random() < 0.5:
                value[name] = generate_value(child, rng)
        return value
    if node.kind == "string":
        return _string(node, rng)
    if node.kind == "enum":
        return rng.choice(node.enum_values)
    low, high = _bounds(node)
    if node.kind == "integer":
        return rng.randint(int(-(-low // 1)), int(high // 1))
    return min(max(round(rng.uniform(low, high), 6), low), high)


# ── Shrinking ────────────────────────────────────────────────────────


def _simpler_values(node: SchemaNode, value: Any) -> list[Any]:
    if node.kind in ("integer", "number") and isinstance(value, (int, float)):
        low, high = _bounds(node)
        anchor = 0 if low <= 0 <= high else low
        if value == anchor:
            return []
        half = value - (value - anchor) / 2
        if node.kind == "integer":
            half = int(half)
        return [v for v in (anchor, half) if v != value]
    if node.kind == "string" and isinstance(value, str) and len(value) > 1:
        return [value[:1], value[: len(value) // 2]]
    if node.kind == "enum" and node.enum_values and value != node.enum_values[0]:
        return [node.enum_values[0]]
    return []


def shrink_candidates(schema: SchemaNode, request: Document, keep: tuple[str, ...] = ()) -> list[Document]:
    """Schema-valid requests one step simpler than *request*."""
    candidates: list[Document] = []
    for name, value in request.items():
        if name in keep:
            continue
        child = schema.properties.get(name)
        if child is None:
            continue
        if name not in schema.required:
            candidates.append({k: v for k, v in request.items() if k != name})
        for simpler in _simpler_values(child, value):
            candidates.append({**request, name: simpler})
    return [c for c in candidates if not validate_document(schema, c)]


def greedy_shrink(
    request: Document,
    still_fails: Callable[[Document], bool],
    schema: SchemaNode,
    limit: int,
    keep: tuple[str, ...] = (),
) -> tuple[Document, int]:
    """Repeatedly take the first simpler request that still fails, up to *limit* attempts."""
    steps = attempts = 0
    current = request
    progress = True
    while progress and attempts < limit:
        progress = False
        for candidate in shrink_candidates(schema, current, keep):
            attempts += 1
            if still_fails(candidate):
                current, steps, progress = candidate, steps + 1, True
                break
            if attempts >= limit:
                break
    return current, steps


# ── Property checks ──────────────────────────────────────────────────


def _key(record: InvocationRecord) -> bytes:
    return canonical_bytes(outcome_to_document(record.outcome))


@dataclass(frozen=True)
class PropertyReport:
    outcome: ClauseOutcome
    cases: int


class _Checker:
    def __init__(
        self, prop: BehavioralProperty, schema: StructuralSchema, session: CandidateSession, shrink_limit: int
    ) -> None:
        self.prop = prop
        self.schema = schema
        self.session = session
        self.shrink_limit = shrink_limit

    def fail(self, inputs, observed, expected, steps: int, detail: str = "", **values) -> ClauseOutcome:
        return ClauseOutcome(
            clause_id=self.prop.name,
            passed=False,
            counterexample=Counterexample(tuple(inputs), observed, expected, steps),
            detail=detail,
            **values,
        )

    def check_case(self, rng: random.Random) -> ClauseOutcome | None:
        return getattr(self, f"_{self.prop.kind}")(rng)

    def _shrink(self, request: Document, fails: Callable[[Document], bool], keep=()) -> tuple[Document, int]:
        return greedy_shrink(request, fails, self.schema.request, self.shrink_limit, keep)

    def _determinism(self, rng: random.Random) -> ClauseOutcome | None:
        def differs(request: Document) -> bool:
            return _key(self.session.invoke(request)) != _key(self.session.invoke(request))

        request = generate_value(self.schema.request, rng)
        first, second = self.session.invoke(request), self.session.invoke(request)
        if _key(first) == _key(second):
            return None
        observed = [outcome_to_document(first.outcome), outcome_to_document(second.outcome)]
        shrunk, steps = self._shrink(request, differs)
        return self.fail([shrunk], observed, "identical outcomes", steps, "same request produced different outcomes")

    def _range_violation(self, record: InvocationRecord):
        if record.outcome.is_error:
            return None
        value = (record.outcome.response or {}).get(self.prop.target_field)
        lo, hi = self.prop.bounds
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            return value, None
        if lo is not None and value < lo:
            return value, lo
        if hi is not None and value > hi:
            return value, hi
        return None

    def _range(self, rng: random.Random) -> ClauseOutcome | None:
        request = generate_value(self.schema.request, rng)
        violation = self._range_violation(self.session.invoke(request))
        if violation is None:
            return None
        shrunk, steps = self._shrink(
            request, lambda r: self._range_violation(self.session.invoke(r)) is not None
        )
        value, bound = violation
        lo, hi = self.prop.bounds
        numeric = isinstance(value, (int, float)) and not isinstance(value, bool)
        return self.fail(
            [shrunk],
            value,
            f"[{lo}, {hi}]",
            steps,
            "" if numeric else f"'{self.prop.target_field}' missing or not a number",
            observed_value=value if numeric else None,
            allowed_value=bound,
            path=f"/response/{self.prop.target_field}",
        )

    def _monotone(self, rng: random.Random) -> ClauseOutcome | None:
        varied, target = self.prop.varied_field, self.prop.target_field
        decreasing = self.prop.direction == "non_increasing"
        node = self.schema.request.properties[varied]
        base = generate_value(self.schema.request, rng)
        low_x, high_x = sorted((generate_value(node, rng), generate_value(node, rng)))
        if low_x == high_x:
            return None

        def outputs(rest: Document, x1, x2):
            first = self.session.invoke({**rest, varied: x1})
            second = self.session.invoke({**rest, varied: x2})
            if first.outcome.is_error or second.outcome.is_error:
                return None
            return first.outcome.response.get(target), second.outcome.response.get(target)

        def violated(pair) -> bool:
            if pair is None or not all(isinstance(v, (int, float)) for v in pair):
                return False
            return pair[1] > pair[0] if decreasing else pair[1] < pair[0]

        pair = outputs(base, low_x, high_x)
        if not violated(pair):
            return None

        steps = attempts = 0
        # Narrow the gap between the two varied values while the violation holds.
        while attempts < self.shrink_limit:
            gap = high_x - low_x
            candidate = low_x + (gap // 2 if node.kind == "integer" else gap / 2)
            if candidate in (low_x, high_x):
                break
            attempts += 1
            narrowed = outputs(base, low_x, candidate)
            if violated(narrowed):
                high_x, pair, steps = candidate, narrowed, steps + 1
            else:
                break
        rest, more = self._shrink(
            base, lambda r: violated(outputs(r, low_x, high_x)), keep=(varied,)
        )
        if more:
            pair = outputs(rest, low_x, high_x)
        return self.fail(
            [{**rest, varied: low_x}, {**rest, varied: high_x}],
            list(pair),
            self.prop.direction,
            steps + more,
            f"{target} moved against {self.prop.direction} as {varied} grew from {low_x} to {high_x}",
        )

    def _fails_closed(self, rng: random.Random) -> ClauseOutcome | None:
        required = self.schema.request.required
        if not required:
            return None
        request = generate_value(self.schema.request, rng)
        dropped = rng.choice(required)
        mutated = {k: v for k, v in request.items() if k != dropped}
        record = self.session.invoke(mutated)
        if record.outcome.is_error and record.outcome.error.kind == self.prop.error_kind:
            return None
        return self.fail(
            [mutated],
            outcome_to_document(record.outcome),
            {"error": {"kind": self.prop.error_kind}},
            0,
            f"request without '{dropped}' was not rejected with {self.prop.error_kind}",
            path=f"/request/{dropped}",
        )

    def _idempotent_output(self, rng: random.Random) -> ClauseOutcome | None:
        def reapplied(request: Document):
            first = self.session.invoke(request)
            if first.outcome.is_error:
                return None
            second = self.session.invoke(first.outcome.response)
            if _key(second) == canonical_bytes({"response": first.outcome.response}):
                return None
            return first, second

        request = generate_value(self.schema.request, rng)
        found = reapplied(request)
        if found is None:
            return None
        shrunk, steps = self._shrink(request, lambda r: reapplied(r) is not None)
        first, second = found
        return self.fail(
            [request, first.outcome.response],
            outcome_to_document(second.outcome),
            {"response": first.outcome.response},
            steps,
            "applying the handler to its own output changed the result",
        )

    def _idempotent_stateful(self, rng: random.Random) -> ClauseOutcome | None:
        request = generate_value(self.schema.request, rng)
        first, replay = self.session.invoke(request), self.session.invoke(request)
        mutations = [e for e in replay.effects if e.mutating or e.kind == "fs_write"]
        if _key(first) == _key(replay) and not mutations:
            return None
        return self.fail(
            [request],
            {"outcome": outcome_to_document(replay.outcome), "mutating_effects": len(mutations)},
            {"outcome": outcome_to_document(first.outcome), "mutating_effects": 0},
            0,
            "replayed request changed the outcome or mutated state",
            observed_value=len(mutations),
            allowed_value=0,
        )


def check_property(
    prop: BehavioralProperty, schema: StructuralSchema, session: CandidateSession, run: PropertyRun
) -> PropertyReport:
    """Run every case of *prop*, stopping at the first counterexample."""
    checker = _Checker(prop, schema, session, run.shrink_limit)
    cases = effective_cases(run, prop)
    for index in range(cases):
        rng = random.Random(case_seed(run.seed, prop.name, index))
        outcome = checker.check_case(rng)
        if outcome is not None:
            logger.info("Property %s failed at case %d", prop.name, index)
            return PropertyReport(outcome, index + 1)
    logger.debug("Property %s held for %d cases", prop.name, cases)
    return PropertyReport(ClauseOutcome(clause_id=prop.name, passed=True), cases)
