"""Three-stage task reasoning over a built scene graph.

Stage 1 parses the natural-language task into a structured plan (relevant
object names plus pairwise subtasks). Stage 2 grounds the plan: names bind
to object nodes by embedding similarity, optionally narrowed to rooms, and
each subtask pair is checked for a relation edge. Stage 3 asks the
describing model about each bound pair and lets a decisor model turn the
description into an execute/skip verdict.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ProviderError, TaskParseError
from .graph import LAYER_ROOM, SceneGraph
from .imaging import label_color
from .providers import DESCRIBE_FEATURE
from .search import Match, find_objects, find_rooms

MISSING = "MISSING"

FOCUS_SUFFIX = " Focus only on the objects that have a {color_a} and {color_b} bounding box."


def _load_prompt(name: str) -> str:
    return resources.files("sgr.prompts").joinpath(name).read_text(encoding="utf-8")


@dataclass
class Subtask:
    object_a: str
    object_b: str
    prompt: str


@dataclass
class TaskPlan:
    relevant_objects: list[str]
    subtasks: list[Subtask]
    raw_response: str
    retry_count: int = 0


@dataclass
class PairBinding:
    """One candidate node pair for a subtask; ``edge`` is None when MISSING."""

    subtask_index: int
    pair: tuple[int, int]
    edge: object | None

    @property
    def missing(self) -> bool:
        return self.edge is None


@dataclass
class GroundedPlan:
    object_bindings: dict[str, list[Match]]
    subtask_bindings: list[PairBinding]
    room_scope: list[int] | None = None


@dataclass
class SubtaskVerdict:
    subtask_index: int
    pair: tuple[int, int]
    vlm_description: str | None
    execute: bool
    decisor_rationale: str
    undecided: bool = False
    unevaluated_reason: str | None = None


@dataclass
class TaskReport:
    task: str
    plan: TaskPlan
    grounded: GroundedPlan
    verdicts: list[SubtaskVerdict] = field(default_factory=list)
    targets: list[dict] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "plan": {
                "relevant_objects": self.plan.relevant_objects,
                "subtasks": [
                    {"object_a": s.object_a, "object_b": s.object_b, "prompt": s.prompt}
                    for s in self.plan.subtasks
                ],
                "retry_count": self.plan.retry_count,
            },
            "object_bindings": {
                name: [
                    {"node": m.node, "similarity": float(m.similarity)} for m in matches
                ]
                for name, matches in sorted(self.grounded.object_bindings.items())
            },
            "room_scope": self.grounded.room_scope,
            "subtask_bindings": [
                {
                    "subtask_index": b.subtask_index,
                    "pair": list(b.pair),
                    "edge": MISSING if b.missing else "bound",
                }
                for b in self.grounded.subtask_bindings
            ],
            "verdicts": [
                {
                    "subtask_index": v.subtask_index,
                    "pair": list(v.pair),
                    "execute": v.execute,
                    "vlm_description": v.vlm_description,
                    "decisor_rationale": v.decisor_rationale,
                    "undecided": v.undecided,
                    "unevaluated_reason": v.unevaluated_reason,
                }
                for v in self.verdicts
            ],
            "targets": self.targets,
        }


# ------------------------------------------------------------------- parsing


def _extract_json_document(text: str) -> dict:
    """Parse exactly one JSON object; tolerate a single ``` fence around it."""
    stripped = text.strip()
    if stripped.startswith("```"):
        body = stripped[3:]
        if body.startswith("json"):
            body = body[4:]
        if body.count("```") != 1 or not body.rstrip().endswith("```"):
            raise ValueError("response must contain exactly one fenced JSON block")
        stripped = body[: body.rindex("```")].strip()
    doc = json.loads(stripped)  # raises on trailing data, i.e. >1 document
    if not isinstance(doc, dict):
        raise ValueError("top-level JSON value must be an object")
    return doc


def _plan_from_document(doc: dict, raw: str) -> TaskPlan:
    expected = {"relevant_objects", "subtasks"}
    if set(doc) != expected:
        raise ValueError(f"plan keys must be exactly {sorted(expected)}, got {sorted(doc)}")
    objects = doc["relevant_objects"]
    if not isinstance(objects, list) or not objects or not all(isinstance(o, str) for o in objects):
        raise ValueError("relevant_objects must be a nonempty list of strings")
    subtasks = []
    for i, sub in enumerate(doc["subtasks"]):
        if not isinstance(sub, dict) or set(sub) != {"object_a", "object_b", "prompt"}:
            raise ValueError(f"subtask {i} must have exactly object_a, object_b, prompt")
        if sub["object_a"] not in objects or sub["object_b"] not in objects:
            raise ValueError(f"subtask {i} references objects outside relevant_objects")
        subtasks.append(Subtask(sub["object_a"], sub["object_b"], sub["prompt"]))
    return TaskPlan(relevant_objects=list(objects), subtasks=subtasks, raw_response=raw)


def parse_task(task: str, llm, max_retries: int = 2, system_prompt: str | None = None) -> TaskPlan:
    """Ask the planning model for a structured plan, re-prompting on bad output."""
    if not task.strip():
        raise ValueError("task text is empty")
    system = system_prompt if system_prompt is not None else _load_prompt("task_system.txt")
    raw_responses: list[str] = []
    user = task
    for attempt in range(max_retries + 1):
        response = llm.chat(system, user)
        raw_responses.append(response)
        try:
            plan = _plan_from_document(_extract_json_document(response), response)
            plan.retry_count = attempt
            return plan
        except (ValueError, json.JSONDecodeError) as exc:
            user = (
                f"{task}\n\nYour previous response could not be used: {exc}. "
                'Return exactly one JSON object with keys "relevant_objects" and "subtasks".'
            )
    raise TaskParseError(
        f"no parseable plan after {len(raw_responses)} responses", raw_responses
    )


# ----------------------------------------------------------------- grounding


def ground_plan(
    plan: TaskPlan,
    graph: SceneGraph,
    embedder,
    *,
    object_threshold: float,
    room_threshold: float,
    room_scope: str = "never",
    max_pairs_per_subtask: int = 8,
    template: str = "{}",
) -> GroundedPlan:
    """Bind plan names to nodes and subtask pairs to relation edges.

    Every cross pair of bound nodes is checked (capped per subtask, best
    joint similarity first); pairs without a relation edge are recorded as
    MISSING rather than dropped.
    """
    scope_ids: list[int] | None = None
    if room_scope not in ("never", "always", "auto"):
        raise ValueError(f"room_scope must be never/always/auto, got {room_scope!r}")
    if room_scope == "always" or (
        room_scope == "auto"
        and any(r.feature_clusters for r in graph.nodes(LAYER_ROOM).values())
    ):
        scope_ids = [
            m.node
            for m in find_rooms(graph, plan.relevant_objects, embedder, room_threshold, template=template)
        ]
    bindings = find_objects(
        graph,
        plan.relevant_objects,
        embedder,
        object_threshold,
        template=template,
        room_ids=scope_ids,
    )
    subtask_bindings: list[PairBinding] = []
    for index, subtask in enumerate(plan.subtasks):
        matches_a = bindings.get(subtask.object_a, [])
        matches_b = bindings.get(subtask.object_b, [])
        pairs = [
            (ma.similarity * mb.similarity, ma.node, mb.node)
            for ma in matches_a
            for mb in matches_b
            if ma.node != mb.node
        ]
        pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
        for _, node_a, node_b in pairs[:max_pairs_per_subtask]:
            edge = graph.relation_between(node_a, node_b)
            subtask_bindings.append(
                PairBinding(subtask_index=index, pair=(node_a, node_b), edge=edge)
            )
    return GroundedPlan(
        object_bindings=bindings, subtask_bindings=subtask_bindings, room_scope=scope_ids
    )


# ---------------------------------------------------------------- evaluation


def evaluate_subtask(
    binding: PairBinding,
    subtask: Subtask,
    graph: SceneGraph,
    palette: dict[int, tuple[int, int, int]],
    provider,
    crop_store=None,
) -> tuple[str | None, str | None]:
    """Describe a bound pair; returns (description, unevaluated_reason)."""
    if binding.missing:
        raise ValueError("cannot evaluate a MISSING binding")
    node_a = graph.node(binding.pair[0])
    node_b = graph.node(binding.pair[1])
    _, color_a = label_color(node_a.label, palette)
    _, color_b = label_color(node_b.label, palette)
    prompt = subtask.prompt + FOCUS_SUFFIX.format(color_a=color_a, color_b=color_b)
    try:
        if getattr(provider, "describe_mode", DESCRIBE_FEATURE) == DESCRIBE_FEATURE:
            return provider.describe(prompt, feature=binding.edge.feature), None
        crop = crop_store.get(binding.edge.endpoints) if crop_store is not None else None
        if crop is None:
            return None, "no pair crop"
        return provider.describe(prompt, image=crop), None
    except ProviderError as exc:
        return None, str(exc)


_AFFIRM = re.compile(r"\b(yes|execute)\b", re.IGNORECASE)
_NEGATE = re.compile(r"\b(no|skip)\b", re.IGNORECASE)


def _parse_decision(response: str) -> bool | None:
    token = response.strip().split(None, 1)[0].upper().strip(".,:;") if response.strip() else ""
    if token == "EXECUTE":
        return True
    if token == "SKIP":
        return False
    if _AFFIRM.search(response):
        return True
    if _NEGATE.search(response):
        return False
    return None


def decide(description: str, subtask_prompt: str, llm, system_prompt: str | None = None) -> tuple[bool, str, bool]:
    """Turn a scene description into (execute, rationale, undecided)."""
    if not description:
        raise ValueError("decision needs a nonempty description")
    system = system_prompt if system_prompt is not None else _load_prompt("decisor_system.txt")
    user = f"Subtask: {subtask_prompt}\nScene description: {description}\nShould this subtask be executed?"
    response = llm.chat(system, user)
    decision = _parse_decision(response)
    if decision is None:
        response = llm.chat(system, user + "\nAnswer with a line starting with EXECUTE or SKIP.")
        decision = _parse_decision(response)
        if decision is None:
            return False, response, True
    return decision, response, False


# --------------------------------------------------------------- whole tasks


def run_task(
    task: str,
    graph: SceneGraph,
    provider,
    *,
    palette: dict[int, tuple[int, int, int]],
    object_threshold: float,
    room_threshold: float,
    room_scope: str = "never",
    max_retries: int = 2,
    max_pairs_per_subtask: int = 8,
    template: str = "{}",
    crop_store=None,
) -> TaskReport:
    """Parse, ground and evaluate one task end to end.

    MISSING and unbound subtasks never reach the describing model. The
    report carries the centroids of positively decided pairs as navigation
    handoff data.
    """
    plan = parse_task(task, provider, max_retries=max_retries)
    grounded = ground_plan(
        plan,
        graph,
        provider,
        object_threshold=object_threshold,
        room_threshold=room_threshold,
        room_scope=room_scope,
        max_pairs_per_subtask=max_pairs_per_subtask,
        template=template,
    )
    report = TaskReport(task=task, plan=plan, grounded=grounded)
    for binding in grounded.subtask_bindings:
        if binding.missing:
            continue
        subtask = plan.subtasks[binding.subtask_index]
        description, reason = evaluate_subtask(
            binding, subtask, graph, palette, provider, crop_store=crop_store
        )
        if description is None:
            report.verdicts.append(
                SubtaskVerdict(
                    subtask_index=binding.subtask_index,
                    pair=binding.pair,
                    vlm_description=None,
                    execute=False,
                    decisor_rationale="",
                    unevaluated_reason=reason,
                )
            )
            continue
        execute, rationale, undecided = decide(description, subtask.prompt, provider)
        report.verdicts.append(
            SubtaskVerdict(
                subtask_index=binding.subtask_index,
                pair=binding.pair,
                vlm_description=description,
                execute=execute,
                decisor_rationale=rationale,
                undecided=undecided,
            )
        )
        if execute:
            node_a, node_b = graph.node(binding.pair[0]), graph.node(binding.pair[1])
            report.targets.append(
                {
                    "subtask_index": binding.subtask_index,
                    "pair": list(binding.pair),
                    "centroid_a": [float(v) for v in node_a.centroid],
                    "centroid_b": [float(v) for v in node_b.centroid],
                }
            )
    return report


def score_reasoning(reports: list[TaskReport], ground_truth: dict) -> dict:
    """Success ratio and false positives against an enumerated ground truth.

    ``ground_truth`` lists the positives: ``positive_objects`` entries
    ``{"name": ..., "node_ids": [...]}`` (the name counts as identified when
    any expected node is bound, and every bound node outside the expected
    set is a false positive) and ``positive_pairs`` as unordered node-id
    pairs (counted when some verdict executes them; executed pairs outside
    the list are false positives). SR% is the percentage of positives
    achieved; FP is the total count of spurious identifications/executions.
    """
    positive_objects = ground_truth.get("positive_objects", [])
    positive_pairs = {frozenset(p) for p in ground_truth.get("positive_pairs", [])}
    bound: dict[str, set[int]] = {}
    executed: set[frozenset] = set()
    for report in reports:
        for name, matches in report.grounded.object_bindings.items():
            bound.setdefault(name, set()).update(m.node for m in matches)
        for verdict in report.verdicts:
            if verdict.execute:
                executed.add(frozenset(verdict.pair))
    correct = 0
    false_positives = 0
    for entry in positive_objects:
        expected = set(entry["node_ids"])
        got = bound.get(entry["name"], set())
        if got & expected:
            correct += 1
        false_positives += len(got - expected)
    hit_pairs = {p for p in executed if p in positive_pairs}
    correct += len(hit_pairs)
    false_positives += len(executed - positive_pairs)
    total = len(positive_objects) + len(positive_pairs)
    sr = 100.0 if total == 0 else 100.0 * correct / total
    return {"sr_percent": sr, "fp": false_positives, "positives": total, "correct": correct}
