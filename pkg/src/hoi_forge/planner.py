"""Rule-based instruction decomposition and geometric affordance grounding.

The planner never guesses: an instruction clause that matches no template
keyword, action verb or known filler phrase raises
:class:`UnparsableInstruction`, and a part the object does not have raises
:class:`UngroundablePart`.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.spatial import cKDTree

from .conditioning import Action, SubTask
from .objects import PART_LABELS, PART_NAMES, AffordanceMap

DECAY_LENGTH = 0.02
ACTIVE_THRESHOLD = 0.5

_TOKEN = re.compile(r"[a-z0-9']+")
_CLAUSE_SPLIT = re.compile(r"[,.;:!?]+|\b(?:and then|and|then)\b")


class UnparsableInstruction(ValueError):
    pass


class UngroundablePart(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "ungroundable part"


def _phrase(text):
    return tuple(_TOKEN.findall(text.lower()))


@dataclass(frozen=True)
class InstructionGrammar:
    """Verb, part and hand lexicons plus goal-level templates.

    Lexicon keys are stored as token tuples so matching is whole-word.
    """

    verbs: dict
    parts: dict
    hands: dict
    templates: dict
    default_parts: dict
    default_hands: dict
    skip_verbs: tuple = ()
    pronouns: tuple = ("it",)

    def __post_init__(self):
        vocab = set(PART_LABELS)
        for name, tmpl in self.templates.items():
            for var in tmpl["variants"]:
                for action, part, hands in var["steps"]:
                    Action[action]
                    if part not in vocab or hands not in ("left", "right", "both"):
                        raise ValueError(f"template {name!r} uses unknown part or hands: {part}, {hands}")
        for phrase, cands in self.parts.items():
            if not set(cands) <= vocab:
                raise ValueError(f"part phrase {phrase!r} maps outside the part vocabulary")
        for actions in self.verbs.values():
            for a in actions:
                Action[a]

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != 1:
            raise ValueError("unsupported grammar schema version")
        return cls(
            verbs={_phrase(k): tuple(v) for k, v in d["verbs"].items()},
            parts={_phrase(k): tuple(v) for k, v in d["parts"].items()},
            hands={_phrase(k): v for k, v in d["hands"].items()},
            templates={k: dict(keywords=tuple(_phrase(w) for w in v["keywords"]), variants=v["variants"])
                       for k, v in d["templates"].items()},
            default_parts={k: tuple(v) for k, v in d["default_parts"].items()},
            default_hands=dict(d["default_hands"]),
            skip_verbs=tuple(_phrase(p) for p in d.get("skip_verbs", ())),
            pronouns=tuple(d.get("pronouns", ("it",))),
        )

    @classmethod
    def load(cls, path=None):
        if path is None:
            text = resources.files("hoi_forge").joinpath("data/grammar.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


def default_grammar():
    return InstructionGrammar.load()


def _find(tokens, lexicon):
    """Longest-match scan; returns ``[(start, end, key)]`` without overlaps."""
    keys = sorted(lexicon, key=len, reverse=True)
    hits, i = [], 0
    while i < len(tokens):
        for k in keys:
            if tuple(tokens[i:i + len(k)]) == k:
                hits.append((i, i + len(k), k))
                i += len(k)
                break
        else:
            i += 1
    return hits


def _contains(tokens, phrase):
    n = len(phrase)
    return any(tuple(tokens[i:i + n]) == phrase for i in range(len(tokens) - n + 1))


@dataclass(frozen=True, eq=False)
class Plan:
    """Ordered sub-tasks with one affordance marker each."""

    subtasks: tuple
    source_instruction: str
    aff_markers: tuple

    def __post_init__(self):
        object.__setattr__(self, "subtasks", tuple(self.subtasks))
        object.__setattr__(self, "aff_markers", tuple(self.aff_markers))
        if not self.subtasks:
            raise ValueError("a plan needs at least one sub-task")
        if len(self.aff_markers) != len(self.subtasks):
            raise ValueError("every sub-task needs exactly one affordance marker")

    def __len__(self):
        return len(self.subtasks)

    def describe(self):
        return [s.describe() for s in self.subtasks]


def _resolve_part(cands, obj, phrase):
    for c in cands:
        label = PART_LABELS[c]
        if label in obj.part_catalog:
            return label
    raise UngroundablePart(f"{' '.join(phrase) if phrase else 'default part'} "
                           f"({'/'.join(cands)}) not present on {obj.kind} {obj.name!r}")


def _template_steps(tmpl, obj, name):
    present = {PART_NAMES[k] for k in obj.part_catalog if k in PART_NAMES}
    for var in tmpl["variants"]:
        if not set(var["requires"]) <= present:
            continue
        if "kinds" in var and obj.kind not in var["kinds"]:
            continue
        return var["steps"]
    raise UngroundablePart(f"no variant of {name!r} fits the parts of {obj.kind} {obj.name!r}")


def decompose(grammar, instruction, obj, duration_frames=150):
    """Instruction text to a list of :class:`SubTask` (no grounding)."""
    text = instruction.lower()
    clauses = [c for c in _CLAUSE_SPLIT.split(text) if c and c.strip()]
    out, fired, last_part = [], set(), None
    for clause in clauses:
        tokens = _TOKEN.findall(clause)
        if not tokens:
            continue
        tmpl = next((n for n, t in grammar.templates.items()
                     if any(_contains(tokens, k) for k in t["keywords"])), None)
        if tmpl is not None:
            if tmpl not in fired:
                fired.add(tmpl)
                for action, part, hands in _template_steps(grammar.templates[tmpl], obj, tmpl):
                    out.append(SubTask(Action[action], PART_LABELS[part], hands, duration_frames))
                last_part = out[-1].target_part
            continue
        verbs = _find(tokens, grammar.verbs)
        if not verbs:
            if _find(tokens, dict.fromkeys(grammar.skip_verbs)):
                continue
            raise UnparsableInstruction(f"cannot interpret {clause.strip()!r}")
        start = verbs[0][0]
        rest = tokens[start:]
        parts = _find(rest, grammar.parts)
        hand_hits = _find(rest, grammar.hands)
        hands = grammar.hands[hand_hits[0][2]] if hand_hits else None
        pronoun = any(t in grammar.pronouns for t in rest)
        # "the jar lid": the object noun names the body, the modifier names the part
        specific = [k for _, _, k in parts if grammar.parts[k] != ("body",)]
        for _, _, vkey in verbs:
            for action in grammar.verbs[vkey]:
                if parts:
                    phrase = specific[0] if specific else parts[0][2]
                    label = _resolve_part(grammar.parts[phrase], obj, phrase)
                elif pronoun and last_part is not None:
                    label = last_part
                else:
                    label = _resolve_part(grammar.default_parts[action], obj, None)
                h = hands or grammar.default_hands[action]
                out.append(SubTask(Action[action], label, h, duration_frames))
                last_part = label
    if not out:
        raise UnparsableInstruction(f"no actionable content in {instruction!r}")
    return out


def parse_instruction(grammar, instruction, obj, duration_frames=150):
    subtasks = decompose(grammar, instruction, obj, duration_frames)
    return Plan(tuple(subtasks), instruction, tuple(ground_affordance(obj, s) for s in subtasks))


def plan_from_subtasks(obj, subtasks, source="external"):
    """Wrap externally supplied sub-tasks (e.g. another planner's output)."""
    subtasks = tuple(subtasks)
    for s in subtasks:
        s.check_object(obj)
    return Plan(subtasks, source, tuple(ground_affordance(obj, s) for s in subtasks))


def split_axis(points):
    """Bisection direction for a point set, oriented toward +y.

    Principal axis of the covariance; when the top eigenvalue is (near)
    degenerate, as for round parts, the direction inside that eigenspace
    closest to +y is used so the split is reproducible.
    """
    centered = points - points.mean(axis=0)
    evals, evecs = np.linalg.eigh(centered.T @ centered / max(len(points), 1))
    top = evecs[:, evals >= 0.9 * evals[-1]]
    ey = np.array([0.0, 1.0, 0.0])
    axis = top @ (top.T @ ey)
    n = np.linalg.norm(axis)
    axis = axis / n if n > 1e-6 else evecs[:, -1]
    return axis if axis @ ey >= 0 else -axis


def ground_affordance(obj, subtask):
    """Soft map ``exp(-dist / 2 cm)`` to the target part, regions split by hands."""
    subtask.check_object(obj)
    idx = obj.part_indices(subtask.target_part)
    if idx.size == 0:
        raise UngroundablePart(f"part {subtask.target_part} has no surface points")
    part_pts = obj.points[idx]
    dist, _ = cKDTree(part_pts).query(obj.points)
    scores = np.exp(-dist / DECAY_LENGTH)
    scores[idx] = 1.0
    active = np.flatnonzero(scores >= ACTIVE_THRESHOLD)
    empty = np.zeros(0, dtype=int)
    if subtask.hands == "left":
        return AffordanceMap(scores, active, empty)
    if subtask.hands == "right":
        return AffordanceMap(scores, empty, active)
    axis = split_axis(part_pts)
    proj = (obj.points[active] - part_pts.mean(axis=0)) @ axis
    return AffordanceMap(scores, active[proj <= 0], active[proj > 0])
