"""Reads protocol bundle directories into ``ProtocolBundle`` values.

Bundle files use a restricted YAML subset: maps, lists and scalars only.
Anchors, aliases and explicit tags are rejected so that the parsed document,
not the source text, is what gets canonicalized and sealed.
"""
from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Any

import yaml

from pdd.domain.errors import (
    DanglingReference,
    GrammarError,
    MissingInvariantFile,
    MissingManifest,
)
from pdd.domain.models import (
    MANIFEST_NAME,
    PROPERTY_KINDS,
    SCHEMA_KINDS,
    BehavioralProperty,
    BundleDocument,
    CapabilityManifest,
    DependencyDecl,
    ProtocolBundle,
    SchemaNode,
    SemVer,
    StructuralSchema,
    ValidatorRequirement,
    VersionRange,
)
from pdd.infrastructure.guarantee_compiler import STRUCTURAL_CLAUSE_IDS, operational_clause_ids

logger = logging.getLogger(__name__)

INVARIANT_KEYS = ("structural", "behavioral", "operational")

_PROTOCOL_ID_RE = re.compile(r"[a-z0-9][a-z0-9-]*")
_COMPONENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*")
_IDENT_RE = re.compile(r"[a-z_][a-z0-9_]*")
_HOST_PORT_RE = re.compile(r"[A-Za-z0-9.-]+:\d{1,5}")
_BUDGET_RE = re.compile(r"max_([a-z0-9_]+)_calls_per_request")

ISO_3166_ALPHA2_PATTERN = "^[A-Z]{2}$"
_FORMATS = {"iso-3166-alpha-2": ISO_3166_ALPHA2_PATTERN}

_NODE_KEYS = {"type", "required", "properties", "minimum", "maximum", "values", "pattern", "format"}
_PROPERTY_KEYS = {"name", "kind", "for_all", "when", "require", "cases"}
_DEFAULT_CASES = 100


class _BundleLoader(yaml.SafeLoader):
    """SafeLoader that keeps timestamps as strings."""


_BundleLoader.yaml_implicit_resolvers = {
    first: [(tag, regexp) for tag, regexp in resolvers if tag != "tag:yaml.org,2002:timestamp"]
    for first, resolvers in yaml.SafeLoader.yaml_implicit_resolvers.items()
}


def load_restricted_yaml(text: str, file: str) -> Any:
    """Parse *text*, rejecting anchors, aliases and explicit tags."""
    try:
        for event in yaml.parse(text, Loader=_BundleLoader):
            if isinstance(event, yaml.AliasEvent):
                raise GrammarError(file, "", "aliases are not allowed")
            if getattr(event, "anchor", None):
                raise GrammarError(file, "", f"anchor '&{event.anchor}' is not allowed")
            tag = getattr(event, "tag", None)
            if tag:
                raise GrammarError(file, "", f"explicit tag '{tag}' is not allowed")
        return yaml.load(text, Loader=_BundleLoader)  # noqa: S506 - restricted SafeLoader
    except yaml.YAMLError as exc:
        raise GrammarError(file, "", f"invalid YAML: {exc}") from exc


def parse_bundle(root: str | Path) -> ProtocolBundle:
    """Load ``protocol.yaml`` and every invariant file it references."""
    root_path = Path(root)
    manifest_path = root_path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingManifest(str(root_path))

    manifest = _read_document(manifest_path, MANIFEST_NAME)
    documents = [BundleDocument(MANIFEST_NAME, manifest)]
    for rel in _referenced_files(manifest):
        target = root_path / rel
        if not target.is_file():
            raise DanglingReference(MANIFEST_NAME, rel)
        documents.append(BundleDocument(rel, _read_document(target, rel)))

    bundle = bundle_from_documents(documents)
    logger.info("Parsed bundle %s@%s from %s", bundle.protocol_id, bundle.version, root_path)
    return bundle


def _read_document(path: Path, rel: str) -> dict:
    text = path.read_text(encoding="utf-8")
    doc = load_restricted_yaml(text, rel)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise GrammarError(rel, "", "top level must be a map")
    return doc


def _referenced_files(manifest: dict) -> list[str]:
    """Files named by the manifest, in manifest order."""
    invariants = manifest.get("invariants")
    if not isinstance(invariants, dict):
        raise GrammarError(MANIFEST_NAME, "/invariants", "must be a map")
    refs = []
    for key in INVARIANT_KEYS:
        if key not in invariants:
            raise MissingInvariantFile(MANIFEST_NAME, key)
        refs.append(_expect_str(invariants[key], MANIFEST_NAME, f"/invariants/{key}"))
    validators = manifest.get("validators")
    if validators is not None:
        if not isinstance(validators, dict) or "required_set" not in validators:
            raise GrammarError(MANIFEST_NAME, "/validators", "must be a map with 'required_set'")
        refs.append(_expect_str(validators["required_set"], MANIFEST_NAME, "/validators/required_set"))
    return refs


def bundle_from_documents(documents: list[BundleDocument] | tuple[BundleDocument, ...]) -> ProtocolBundle:
    """Build and validate a bundle from already-parsed documents (manifest first)."""
    if not documents or documents[0].path != MANIFEST_NAME:
        raise GrammarError(MANIFEST_NAME, "", "manifest document missing")
    manifest = documents[0].content
    by_path = {d.path: d.content for d in documents[1:]}
    refs = _referenced_files(manifest)
    for rel in refs:
        if rel not in by_path:
            raise DanglingReference(MANIFEST_NAME, rel)

    protocol_id = _expect_str(manifest.get("protocol_id"), MANIFEST_NAME, "/protocol_id")
    if not _PROTOCOL_ID_RE.fullmatch(protocol_id):
        raise GrammarError(MANIFEST_NAME, "/protocol_id", f"'{protocol_id}' must match [a-z0-9][a-z0-9-]*")
    version = _expect_str(manifest.get("version"), MANIFEST_NAME, "/version")
    try:
        SemVer.parse(version)
    except ValueError as exc:
        raise GrammarError(MANIFEST_NAME, "/version", str(exc)) from exc
    component = manifest.get("component", "")
    if not isinstance(component, str) or (component and not _COMPONENT_RE.fullmatch(component)):
        raise GrammarError(MANIFEST_NAME, "/component", f"'{component}' is not a dotted name")

    inv = manifest["invariants"]
    structural = _parse_structural(by_path[inv["structural"]], inv["structural"])
    behavioral = _parse_behavioral(by_path[inv["behavioral"]], inv["behavioral"], structural)
    operational = _parse_operational(by_path[inv["operational"]], inv["operational"])
    requirements: tuple[ValidatorRequirement, ...] = ()
    if manifest.get("validators") is not None:
        rel = manifest["validators"]["required_set"]
        requirements = _parse_validator_set(by_path[rel], rel)

    provenance = manifest.get("provenance", {})
    if not isinstance(provenance, dict):
        raise GrammarError(MANIFEST_NAME, "/provenance", "must be a map")

    bundle = ProtocolBundle(
        protocol_id=protocol_id,
        version=version,
        component=component,
        structural=structural,
        behavioral=behavioral,
        operational=operational,
        dependencies=_parse_dependencies(manifest.get("dependencies", [])),
        validator_requirements=requirements,
        provenance=provenance,
        documents=(documents[0],) + tuple(BundleDocument(rel, by_path[rel]) for rel in refs),
    )
    _check_clause_ids(bundle, inv["behavioral"])
    return bundle


def update_provenance(bundle: ProtocolBundle, extra: dict) -> ProtocolBundle:
    """Return a copy of *bundle* whose manifest provenance is merged with *extra*."""
    manifest = dict(bundle.documents[0].content)
    manifest["provenance"] = {**manifest.get("provenance", {}), **extra}
    return bundle_from_documents((BundleDocument(MANIFEST_NAME, manifest),) + bundle.documents[1:])


def emit_bundle(bundle: ProtocolBundle, root: str | Path) -> Path:
    """Write *bundle*'s documents back out as a bundle directory."""
    root_path = Path(root)
    for document in bundle.documents:
        target = root_path / document.path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(
            yaml.safe_dump(document.content, sort_keys=False, allow_unicode=True),
            encoding="utf-8",
        )
    (root_path / "evidence").mkdir(exist_ok=True)
    return root_path


# ── Structural ───────────────────────────────────────────────────────


def _parse_structural(doc: dict, file: str) -> StructuralSchema:
    for key in ("request", "response"):
        if key not in doc:
            raise GrammarError(file, f"/{key}", "missing")
    errors = doc.get("errors", [])
    if isinstance(errors, str):
        errors = [e.strip() for e in errors.split("|")]
    errors = _expect_str_list(errors, file, "/errors")
    return StructuralSchema(
        request=_parse_node(doc["request"], file, "/request"),
        response=_parse_node(doc["response"], file, "/response"),
        errors=tuple(errors),
    )


def _parse_node(raw: Any, file: str, path: str) -> SchemaNode:
    if isinstance(raw, str):
        raw = {"type": raw}
    if not isinstance(raw, dict):
        raise GrammarError(file, path, "schema node must be a map or a type name")
    unknown = set(raw) - _NODE_KEYS
    if unknown:
        raise GrammarError(file, path, f"unknown keys {sorted(unknown)}")
    kind = raw.get("type")
    if kind not in SCHEMA_KINDS:
        raise GrammarError(file, f"{path}/type", f"must be one of {list(SCHEMA_KINDS)}")

    def forbid(*keys: str) -> None:
        for key in keys:
            if key in raw:
                raise GrammarError(file, f"{path}/{key}", f"not allowed for kind '{kind}'")

    if kind == "object":
        forbid("minimum", "maximum", "values", "pattern", "format")
        props_raw = raw.get("properties")
        if not isinstance(props_raw, dict):
            raise GrammarError(file, f"{path}/properties", "object nodes need a properties map")
        properties = {
            str(name): _parse_node(child, file, f"{path}/properties/{name}")
            for name, child in props_raw.items()
        }
        required = _expect_str_list(raw.get("required", []), file, f"{path}/required")
        for name in required:
            if name not in properties:
                raise GrammarError(file, f"{path}/required", f"required field '{name}' not in properties")
        if len(set(required)) != len(required):
            raise GrammarError(file, f"{path}/required", "duplicate field names")
        return SchemaNode(kind="object", required=tuple(required), properties=properties)

    forbid("required", "properties")
    if kind == "enum":
        forbid("minimum", "maximum", "pattern", "format")
        values = raw.get("values")
        if isinstance(values, str):
            values = [v.strip() for v in values.split("|")]
        if not isinstance(values, list) or not values:
            raise GrammarError(file, f"{path}/values", "enum nodes need a non-empty values list")
        return SchemaNode(kind="enum", enum_values=tuple(values))

    if kind == "string":
        forbid("minimum", "maximum", "values")
        pattern = raw.get("pattern")
        if "format" in raw:
            if raw["format"] not in _FORMATS:
                raise GrammarError(file, f"{path}/format", f"unknown format '{raw['format']}'")
            if pattern is not None:
                raise GrammarError(file, f"{path}/format", "format and pattern are exclusive")
            pattern = _FORMATS[raw["format"]]
        if pattern is not None:
            pattern = _expect_str(pattern, file, f"{path}/pattern")
            try:
                re.compile(pattern)
            except re.error as exc:
                raise GrammarError(file, f"{path}/pattern", f"invalid regular expression: {exc}") from exc
        return SchemaNode(kind="string", pattern=pattern)

    forbid("values", "pattern", "format")
    minimum = _expect_number(raw.get("minimum"), file, f"{path}/minimum")
    maximum = _expect_number(raw.get("maximum"), file, f"{path}/maximum")
    if minimum is not None and maximum is not None and minimum > maximum:
        raise GrammarError(file, path, f"minimum {minimum} exceeds maximum {maximum}")
    return SchemaNode(kind=kind, minimum=minimum, maximum=maximum)


# ── Behavioral ───────────────────────────────────────────────────────


def _parse_behavioral(doc: dict, file: str, structural: StructuralSchema) -> tuple[BehavioralProperty, ...]:
    entries = doc.get("properties", [])
    if not isinstance(entries, list):
        raise GrammarError(file, "/properties", "must be a list")
    seen: set[str] = set()
    result = []
    for i, raw in enumerate(entries):
        path = f"/properties/{i}"
        if not isinstance(raw, dict):
            raise GrammarError(file, path, "property must be a map")
        unknown = set(raw) - _PROPERTY_KEYS
        if unknown:
            raise GrammarError(file, path, f"unknown keys {sorted(unknown)}")
        name = _expect_str(raw.get("name"), file, f"{path}/name")
        if not _IDENT_RE.fullmatch(name):
            raise GrammarError(file, f"{path}/name", f"'{name}' is not an identifier")
        if name in seen:
            raise GrammarError(file, f"{path}/name", f"duplicate property '{name}'")
        seen.add(name)
        kind = raw.get("kind")
        if kind not in PROPERTY_KINDS:
            raise GrammarError(file, f"{path}/kind", f"must be one of {list(PROPERTY_KINDS)}")
        quantifier = raw.get("for_all", ["request"])
        if isinstance(quantifier, str):
            quantifier = [q.strip() for q in quantifier.split(",")]
        quantifier = _expect_str_list(quantifier, file, f"{path}/for_all")
        if not 1 <= len(quantifier) <= 2:
            raise GrammarError(file, f"{path}/for_all", "quantifies over one or two requests")
        when = raw.get("when", {}) or {}
        require = raw.get("require", {}) or {}
        if not isinstance(when, dict):
            raise GrammarError(file, f"{path}/when", "must be a map")
        if not isinstance(require, dict):
            raise GrammarError(file, f"{path}/require", "must be a map")
        cases = raw.get("cases", _DEFAULT_CASES)
        if not isinstance(cases, int) or isinstance(cases, bool) or cases < 1:
            raise GrammarError(file, f"{path}/cases", "must be a positive integer")
        prop = BehavioralProperty(
            name=name,
            kind=kind,
            quantifier=tuple(quantifier),
            when_clause=when,
            require_clause=require,
            case_count=cases,
        )
        _check_property(prop, structural, file, path)
        result.append(prop)
    return tuple(result)


def _check_property(prop: BehavioralProperty, structural: StructuralSchema, file: str, path: str) -> None:
    if prop.kind == "range":
        field = prop.target_field
        if not field:
            raise GrammarError(file, f"{path}/require/field", "range properties name an output field")
        lo = _expect_number(prop.require_clause.get("minimum"), file, f"{path}/require/minimum")
        hi = _expect_number(prop.require_clause.get("maximum"), file, f"{path}/require/maximum")
        if lo is None and hi is None:
            raise GrammarError(file, f"{path}/require", "range properties need minimum or maximum")
        if lo is not None and hi is not None and lo > hi:
            raise GrammarError(file, f"{path}/require", f"minimum {lo} exceeds maximum {hi}")
    elif prop.kind == "monotone":
        if len(prop.quantifier) != 2:
            raise GrammarError(file, f"{path}/for_all", "monotone properties quantify over two requests")
        varied = prop.varied_field
        if not isinstance(varied, str):
            raise GrammarError(
                file, f"{path}/when/same_fields_except", "monotone properties vary exactly one input field"
            )
        node = structural.request.properties.get(varied)
        if node is None or node.kind not in ("integer", "number"):
            raise GrammarError(
                file, f"{path}/when/same_fields_except", f"'{varied}' is not a numeric request field"
            )
        target = prop.target_field
        out = structural.response.properties.get(target or "")
        if out is None or out.kind not in ("integer", "number"):
            raise GrammarError(file, f"{path}/require/field", f"'{target}' is not a numeric response field")
        if prop.direction not in ("non_decreasing", "non_increasing"):
            raise GrammarError(file, f"{path}/require/direction", "must be non_decreasing or non_increasing")
    elif prop.kind == "fails_closed":
        kind = prop.error_kind
        if kind not in structural.errors:
            raise GrammarError(file, f"{path}/require/error_kind", f"'{kind}' is not a declared error kind")
        invalid = prop.when_clause.get("invalid_input", "missing_required_field")
        if invalid != "missing_required_field":
            raise GrammarError(file, f"{path}/when/invalid_input", "only missing_required_field is supported")


# ── Operational ──────────────────────────────────────────────────────


def _parse_operational(doc: dict, file: str) -> CapabilityManifest:
    caps = doc.get("capabilities", {}) or {}
    if not isinstance(caps, dict):
        raise GrammarError(file, "/capabilities", "must be a map")

    def section(name: str) -> dict:
        value = caps.get(name, {}) or {}
        if not isinstance(value, dict):
            raise GrammarError(file, f"/capabilities/{name}", "must be a map")
        return value

    network = section("network")
    allowlist = _unique_list(network.get("outbound_allowlist", []), file, "/capabilities/network/outbound_allowlist")
    for i, dest in enumerate(allowlist):
        if not _HOST_PORT_RE.fullmatch(dest):
            raise GrammarError(file, f"/capabilities/network/outbound_allowlist/{i}", f"'{dest}' is not host:port")
    filesystem = section("filesystem")
    resources = section("resources")

    latency = _non_negative(resources.get("max_latency_ms_p95"), file, "/capabilities/resources/max_latency_ms_p95")
    memory = _non_negative(resources.get("max_memory_mb"), file, "/capabilities/resources/max_memory_mb")
    budgets: dict[str, int] = {}
    for key, value in resources.items():
        if key in ("max_latency_ms_p95", "max_memory_mb"):
            continue
        match = _BUDGET_RE.fullmatch(str(key))
        if not match:
            raise GrammarError(file, f"/capabilities/resources/{key}", "unknown resource bound")
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise GrammarError(file, f"/capabilities/resources/{key}", "call budgets are non-negative integers")
        budgets[match.group(1).replace("_", "-")] = value

    return CapabilityManifest(
        network_allowlist=tuple(allowlist),
        deny_other_outbound=_expect_bool(network.get("deny_other_outbound", True), file, "/capabilities/network/deny_other_outbound"),
        fs_read=tuple(_unique_list(filesystem.get("read", []), file, "/capabilities/filesystem/read")),
        fs_write=tuple(_unique_list(filesystem.get("write", []), file, "/capabilities/filesystem/write")),
        dependency_allowlist=tuple(_unique_list(section("dependencies").get("allow", []), file, "/capabilities/dependencies/allow")),
        max_latency_ms_p95=latency,
        max_memory_mb=memory,
        per_request_call_budgets=budgets,
        secrets_allowlist=tuple(_unique_list(section("secrets").get("allow", []), file, "/capabilities/secrets/allow")),
        background_work_allowed=_expect_bool(section("background_work").get("allowed", False), file, "/capabilities/background_work/allowed"),
    )


# ── Validators and dependencies ──────────────────────────────────────


def _parse_validator_set(doc: dict, file: str) -> tuple[ValidatorRequirement, ...]:
    entries = doc.get("validators", [])
    if not isinstance(entries, list):
        raise GrammarError(file, "/validators", "must be a list")
    result = []
    for i, raw in enumerate(entries):
        if not isinstance(raw, dict):
            raise GrammarError(file, f"/validators/{i}", "must be a map")
        name = _expect_str(raw.get("name"), file, f"/validators/{i}/name")
        constraint = _expect_str(raw.get("version"), file, f"/validators/{i}/version")
        try:
            result.append(ValidatorRequirement(name, VersionRange.parse(constraint)))
        except ValueError as exc:
            raise GrammarError(file, f"/validators/{i}/version", str(exc)) from exc
    return tuple(result)


def _parse_dependencies(raw: Any) -> tuple[DependencyDecl, ...]:
    if not isinstance(raw, list):
        raise GrammarError(MANIFEST_NAME, "/dependencies", "must be a list")
    result = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise GrammarError(MANIFEST_NAME, f"/dependencies/{i}", "must be a map")
        pid = _expect_str(entry.get("protocol_id"), MANIFEST_NAME, f"/dependencies/{i}/protocol_id")
        if not _PROTOCOL_ID_RE.fullmatch(pid):
            raise GrammarError(MANIFEST_NAME, f"/dependencies/{i}/protocol_id", f"'{pid}' is not a protocol id")
        text = _expect_str(entry.get("version_range"), MANIFEST_NAME, f"/dependencies/{i}/version_range")
        try:
            result.append(DependencyDecl(pid, VersionRange.parse(text)))
        except ValueError as exc:
            raise GrammarError(MANIFEST_NAME, f"/dependencies/{i}/version_range", str(exc)) from exc
    return tuple(result)


def _check_clause_ids(bundle: ProtocolBundle, behavioral_file: str) -> None:
    reserved = set(STRUCTURAL_CLAUSE_IDS) | set(operational_clause_ids(bundle.operational))
    for i, prop in enumerate(bundle.behavioral):
        if prop.name in reserved:
            raise GrammarError(behavioral_file, f"/properties/{i}/name", f"'{prop.name}' collides with another clause id")


# ── Scalar helpers ───────────────────────────────────────────────────


def _expect_str(value: Any, file: str, path: str) -> str:
    if not isinstance(value, str) or not value:
        raise GrammarError(file, path, "must be a non-empty string")
    return value


def _expect_bool(value: Any, file: str, path: str) -> bool:
    if not isinstance(value, bool):
        raise GrammarError(file, path, "must be true or false")
    return value


def _expect_number(value: Any, file: str, path: str) -> int | float | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise GrammarError(file, path, "must be a number")
    return value


def _non_negative(value: Any, file: str, path: str) -> int | float | None:
    number = _expect_number(value, file, path)
    if number is not None and number < 0:
        raise GrammarError(file, path, "must be non-negative")
    return number


def _expect_str_list(value: Any, file: str, path: str) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise GrammarError(file, path, "must be a list of strings")
    return list(value)


def _unique_list(value: Any, file: str, path: str) -> list[str]:
    items = _expect_str_list(value, file, path)
    if len(set(items)) != len(items):
        raise GrammarError(file, path, "contains duplicates")
    return items
