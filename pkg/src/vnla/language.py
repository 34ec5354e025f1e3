"""Closed instruction language: tokenizer, vocabulary and the subgoal grammar."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from vnla.env import NavAction

SEP = "<sep>"
UNK = "<unk>"
RESERVED = (UNK, SEP)

_PHRASES = {
    NavAction.LEFT: "turn left",
    NavAction.RIGHT: "turn right",
    NavAction.UP: "look up",
    NavAction.DOWN: "look down",
    NavAction.FORWARD: "go forward",
    NavAction.STOP: "stop",
}
_BY_PHRASE = {v: k for k, v in _PHRASES.items()}
_AGGREGATED = (NavAction.LEFT, NavAction.RIGHT, NavAction.FORWARD)

_TURN_RE = re.compile(r"^turn (\d+) degrees (left|right)$")
_STEPS_RE = re.compile(r"^go forward (\d+) steps$")


class SubgoalParseError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().replace(",", " , ").split()


def _runs(actions):
    """Split into aggregation runs; up/down/stop are never merged."""
    runs = []
    for a in actions:
        if runs and runs[-1][0] == a and a in _AGGREGATED:
            runs[-1][1] += 1
        else:
            runs.append([a, 1])
    return runs


def render_subgoal(actions) -> str:
    actions = [NavAction(a) for a in actions]
    if not actions:
        raise ValueError("subgoal needs at least one action")
    if NavAction.START in actions:
        raise ValueError("<start> cannot appear in a subgoal")
    clauses = []
    for action, n in _runs(actions):
        if n == 1:
            clauses.append(_PHRASES[action])
        elif action == NavAction.FORWARD:
            clauses.append(f"go forward {n} steps")
        else:
            clauses.append(f"turn {n * 30} degrees {action.word}")
    return ", ".join(clauses)


def parse_subgoal(text: str) -> list[NavAction]:
    out: list[NavAction] = []
    for clause in text.split(","):
        clause = " ".join(clause.split())
        if clause in _BY_PHRASE:
            out.append(_BY_PHRASE[clause])
            continue
        m = _TURN_RE.match(clause)
        if m:
            degrees = int(m.group(1))
            if degrees <= 0 or degrees % 30:
                raise SubgoalParseError(f"{clause!r}: degrees must be a positive multiple of 30")
            action = NavAction.LEFT if m.group(2) == "left" else NavAction.RIGHT
            out.extend([action] * (degrees // 30))
            continue
        m = _STEPS_RE.match(clause)
        if m:
            steps = int(m.group(1))
            if steps <= 0:
                raise SubgoalParseError(f"{clause!r}: step count must be positive")
            out.extend([NavAction.FORWARD] * steps)
            continue
        raise SubgoalParseError(f"malformed clause {clause!r}")
    return out


@dataclass(frozen=True)
class Subgoal:
    actions: tuple[NavAction, ...]
    text: str

    @classmethod
    def from_actions(cls, actions) -> "Subgoal":
        actions = tuple(NavAction(a) for a in actions)
        return cls(actions, render_subgoal(actions))


def prepend_subgoal(subgoal, end_goal: str) -> str:
    """Always builds on the original end-goal, so at most one subgoal prefix exists."""
    text = subgoal.text if isinstance(subgoal, Subgoal) else str(subgoal)
    return f"{text} {SEP} {end_goal}"


def subgoal_lexicon(max_turn_steps: int = 12, max_forward_steps: int = 25) -> list[str]:
    words = ["turn", "left", "right", "look", "up", "down", "go", "forward", "stop",
             "degrees", "steps", ","]
    words += [str(30 * n) for n in range(1, max_turn_steps + 1)]
    words += [str(n) for n in range(1, max_forward_steps + 1)]
    seen, out = set(), []
    for w in words:
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


class Vocabulary:
    """Token <-> index bijection with reserved tokens at the head."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        base = list(RESERVED) + subgoal_lexicon()
        known = set(base)
        extra = sorted({t for text in texts for t in tokenize(text)} - known)
        return cls(base + extra)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    @property
    def unk_index(self) -> int:
        return self._index[UNK]

    @property
    def sep_index(self) -> int:
        return self._index[SEP]

    def index(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    def encode(self, text: str) -> list[int]:
        return [self.index(t) for t in tokenize(text)]

    def decode(self, indices) -> list[str]:
        return [self.tokens[i] for i in indices]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens
