"""Verifiable toy tasks: generators, reference solutions and reward verifiers.

Four kinds share the character vocabulary: ``copy`` and ``sort`` (string
transforms), ``countdown_lite`` (reach a target with +, -, * over given
operands) and ``sudoku4`` (complete a 4x4 grid).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seq import RngStream, Vocab

DELIM = "ANS:"
_BAD = "\x00"          # stands in for reserved tokens inside a decoded span

TAGS = ("correct", "wrong_answer", "malformed", "rule_violation")


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class Reward:
    value: float
    tag: str


@dataclass
class TaskInstance:
    kind: str
    prompt: str
    payload: dict
    solution: str

    def to_record(self) -> dict:
        return {"kind": self.kind, "prompt": self.prompt, "payload": self.payload, "solution": self.solution}

    @classmethod
    def from_record(cls, rec: dict) -> "TaskInstance":
        return cls(rec["kind"], rec["prompt"], rec["payload"], rec["solution"])


def answer_span(response, vocab: Vocab) -> str:
    """Text between the first ``ANS:`` and the first eos. Without the
    delimiter the whole response (up to eos) is the candidate."""
    chars = []
    for i in np.asarray(response).tolist():
        if i == vocab.eos_id:
            break
        chars.append(_BAD if i in vocab.reserved or not 0 <= i < vocab.size else vocab.glyphs[i])
    text = "".join(chars)
    at = text.find(DELIM)
    return text[at + len(DELIM):] if at >= 0 else text


# ---------------------------------------------------------------------------
# countdown expressions


class ParseError(ValueError):
    pass


def _tokenize(expr: str) -> list[str]:
    out, i = [], 0
    while i < len(expr):
        c = expr[i]
        if c.isdigit():
            j = i
            while j < len(expr) and expr[j].isdigit():
                j += 1
            out.append(expr[i:j])
            i = j
        elif c in "+-*()":
            out.append(c)
            i += 1
        else:
            raise ParseError(f"unexpected character {c!r}")
    return out


def parse_expression(expr: str) -> tuple[int, list[int]]:
    """Evaluate an integer expression over +, -, * and parentheses with the
    usual precedence. Returns (value, numbers used in order)."""
    toks = _tokenize(expr)
    pos = 0
    nums: list[int] = []

    def peek():
        return toks[pos] if pos < len(toks) else None

    def take():
        nonlocal pos
        pos += 1
        return toks[pos - 1]

    def atom():
        tok = peek()
        if tok is None:
            raise ParseError("unexpected end")
        if tok == "(":
            take()
            v = additive()
            if peek() != ")":
                raise ParseError("unbalanced parenthesis")
            take()
            return v
        if tok.isdigit():
            if len(tok) > 1 and tok[0] == "0":
                raise ParseError("leading zero")
            nums.append(int(tok))
            return int(take())
        raise ParseError(f"unexpected token {tok!r}")

    def term():
        v = atom()
        while peek() == "*":
            take()
            v *= atom()
        return v

    def additive():
        v = term()
        while peek() in ("+", "-"):
            op = take()
            rhs = term()
            v = v + rhs if op == "+" else v - rhs
        return v

    if not toks:
        raise ParseError("empty expression")
    value = additive()
    if pos != len(toks):
        raise ParseError("trailing tokens")
    return value, nums


def solve_countdown(operands, target: int, use_all: bool = False) -> list[str]:
    """All flat expressions (no parentheses) over a sub-multiset of the
    operands that evaluate to ``target``."""
    found = []
    sizes = [len(operands)] if use_all else range(1, len(operands) + 1)
    for r in sizes:
        for perm in set(itertools.permutations(operands, r)):
            for ops in itertools.product("+-*", repeat=r - 1):
                expr = str(perm[0]) + "".join(o + str(x) for o, x in zip(ops, perm[1:]))
                if parse_expression(expr)[0] == target:
                    found.append(expr)
    return sorted(set(found))


# ---------------------------------------------------------------------------
# sudoku


def sudoku_valid(grid) -> bool:
    g = np.asarray(grid).reshape(4, 4)
    want = {1, 2, 3, 4}
    rows = all(set(r) == want for r in g)
    cols = all(set(c) == want for c in g.T)
    boxes = all(set(g[r:r + 2, c:c + 2].ravel()) == want for r in (0, 2) for c in (0, 2))
    return rows and cols and boxes


def sudoku_solutions(puzzle, limit: int = 2) -> list[list[int]]:
    """Brute-force completions of a 4x4 puzzle (0 = hole), up to ``limit``."""
    cells = list(puzzle)
    holes = [i for i, v in enumerate(cells) if v == 0]
    out = []

    def ok(i, v):
        r, c = divmod(i, 4)
        for j in range(16):
            rj, cj = divmod(j, 4)
            if j != i and cells[j] == v and (rj == r or cj == c or (rj // 2 == r // 2 and cj // 2 == c // 2)):
                return False
        return True

    def rec(h):
        if len(out) >= limit:
            return
        if h == len(holes):
            out.append(cells.copy())
            return
        i = holes[h]
        for v in (1, 2, 3, 4):
            if ok(i, v):
                cells[i] = v
                rec(h + 1)
                cells[i] = 0

    rec(0)
    return out


def _random_sudoku(rng: RngStream) -> np.ndarray:
    g = np.array([[1, 2, 3, 4], [3, 4, 1, 2], [2, 1, 4, 3], [4, 3, 2, 1]])
    digits = rng.permutation(4) + 1
    g = digits[g - 1]
    bands = rng.permutation(2)
    rows = np.concatenate([2 * b + rng.permutation(2) for b in bands])
    stacks = rng.permutation(2)
    cols = np.concatenate([2 * s + rng.permutation(2) for s in stacks])
    g = g[rows][:, cols]
    if rng.uniform() < 0.5:
        g = g.T
    return g.ravel()


# ---------------------------------------------------------------------------
# tasks


@dataclass
class Task:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        defaults = TASK_DEFAULTS.get(self.kind)
        if defaults is None:
            raise GenerationError(f"unknown task kind {self.kind!r}")
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise GenerationError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        self.params = {**defaults, **self.params}
        self._validate()

    def _validate(self):
        p = self.params
        if self.kind in ("copy", "sort"):
            if p["length"] < 1 or len(set(p["alphabet"])) < 2:
                raise GenerationError("string tasks need length >= 1 and >= 2 symbols")
        elif self.kind == "countdown_lite":
            if not 2 <= p["n_operands"] <= 4 or not 1 <= p["low"] <= p["high"] <= 9:
                raise GenerationError("countdown_lite takes 2-4 single-digit operands")
        elif self.kind == "sudoku4":
            if not 0 <= p["holes"] <= 12:
                raise GenerationError("sudoku4 supports 0..12 holes")

    # -- geometry -----------------------------------------------------------

    @property
    def prompt_width(self) -> int:
        p = self.params
        if self.kind in ("copy", "sort"):
            return 5 + p["length"]
        if self.kind == "countdown_lite":
            # "cd:" + comma-separated operands + "=" + target (at most 3 digits)
            return 3 + 2 * p["n_operands"] - 1 + 1 + 3
        return 3 + 16

    @property
    def response_len(self) -> int:
        """Generated region length, eos included."""
        p = self.params
        if self.kind in ("copy", "sort"):
            return p["length"] + 1
        if self.kind == "countdown_lite":
            return 2 * p["n_operands"] - 1 + 1
        return 16 + 1

    # -- generation ---------------------------------------------------------

    def generate(self, rng: RngStream) -> TaskInstance:
        p = self.params
        if self.kind in ("copy", "sort"):
            alpha = p["alphabet"]
            s = "".join(alpha[i] for i in rng.integers(0, len(alpha), p["length"]))
            sol = s if self.kind == "copy" else "".join(sorted(s))
            return TaskInstance(self.kind, f"{self.kind}:{s}", {"answer": sol}, sol)
        if self.kind == "countdown_lite":
            for _ in range(1000):
                ops = rng.integers(p["low"], p["high"] + 1, p["n_operands"]).tolist()
                signs = ["+-*"[i] for i in rng.integers(0, 3, p["n_operands"] - 1)]
                expr = str(ops[0]) + "".join(s + str(x) for s, x in zip(signs, ops[1:]))
                target = parse_expression(expr)[0]
                if 0 <= target <= 999:
                    shown = sorted(ops)
                    prompt = "cd:" + ",".join(map(str, shown)) + "=" + str(target)
                    return TaskInstance(self.kind, prompt, {"operands": shown, "target": target}, expr)
            raise GenerationError("could not draw a countdown instance with a valid target")
        # sudoku4
        for _ in range(200):
            sol = _random_sudoku(rng)
            holes = np.sort(rng.permutation(16)[:p["holes"]])
            puzzle = sol.copy()
            puzzle[holes] = 0
            if len(sudoku_solutions(puzzle.tolist())) == 1:
                prompt = "su:" + "".join("." if v == 0 else str(v) for v in puzzle)
                return TaskInstance(self.kind, prompt,
                                    {"puzzle": puzzle.tolist(), "solution": sol.tolist()},
                                    "".join(map(str, sol)))
        raise GenerationError(f"no uniquely solvable 4x4 grid with {p['holes']} holes found")

    # -- verification -------------------------------------------------------

    def verify(self, inst: TaskInstance, response, vocab: Vocab) -> Reward:
        """Total function: any token sequence maps to a reward in [0, 1]."""
        try:
            return self._verify(inst, answer_span(response, vocab))
        except (ParseError, ValueError, KeyError, IndexError, TypeError, OverflowError):
            return Reward(0.0, "malformed")

    def _verify(self, inst: TaskInstance, span: str) -> Reward:
        if _BAD in span:
            return Reward(0.0, "malformed")
        if self.kind in ("copy", "sort"):
            ok = span == inst.payload["answer"]
            return Reward(float(ok), "correct" if ok else "wrong_answer")
        if self.kind == "countdown_lite":
            value, nums = parse_expression(span)
            pool = list(inst.payload["operands"])
            for n in nums:
                if n not in pool:
                    return Reward(0.0, "rule_violation")
                pool.remove(n)
            ok = value == inst.payload["target"]
            return Reward(float(ok), "correct" if ok else "wrong_answer")
        return self._verify_sudoku(inst, span)

    def _verify_sudoku(self, inst: TaskInstance, span: str) -> Reward:
        puzzle, sol = inst.payload["puzzle"], inst.payload["solution"]
        fractional = self.params["fractional"]
        if len(span) != 16 or any(c not in "1234" for c in span):
            if not fractional:
                return Reward(0.0, "malformed")
        grid = [int(c) if c in "1234" else 0 for c in span[:16]]
        grid += [0] * (16 - len(grid))
        holes = [i for i, v in enumerate(puzzle) if v == 0]
        if fractional:
            if not holes:
                return Reward(1.0, "correct")
            frac = sum(grid[i] == sol[i] for i in holes) / len(holes)
            return Reward(frac, "correct" if frac == 1.0 else "wrong_answer")
        if any(v and grid[i] != v for i, v in enumerate(puzzle)):
            return Reward(0.0, "rule_violation")
        ok = sudoku_valid(grid)
        return Reward(float(ok), "correct" if ok else "wrong_answer")

    # -- token helpers ------------------------------------------------------

    def encode_prompt(self, inst: TaskInstance, vocab: Vocab) -> np.ndarray:
        """bos + prompt glyphs, left-padded so every prompt of this task has
        the same length (prompt_width + 1)."""
        body = vocab.encode(inst.prompt)
        if len(body) > self.prompt_width:
            raise GenerationError("prompt longer than the task's prompt width")
        pad = np.full(self.prompt_width - len(body), vocab.pad_id, dtype=np.int64)
        return np.concatenate([pad, [vocab.bos_id], body]).astype(np.int64)

    def encode_response(self, text: str, vocab: Vocab) -> np.ndarray:
        body = vocab.encode(text)
        if len(body) + 1 > self.response_len:
            raise GenerationError("response longer than the task's response length")
        out = np.full(self.response_len, vocab.pad_id, dtype=np.int64)
        out[:len(body)] = body
        out[len(body)] = vocab.eos_id
        return out

    def reference_response(self, inst: TaskInstance, vocab: Vocab) -> np.ndarray:
        return self.encode_response(inst.solution, vocab)


TASK_DEFAULTS: dict[str, dict] = {
    "copy": {"length": 8, "alphabet": "abcdefghijklmnopqrstuvwxyz"},
    "sort": {"length": 8, "alphabet": "abcdefghijklmnopqrstuvwxyz"},
    "countdown_lite": {"n_operands": 3, "low": 1, "high": 9},
    "sudoku4": {"holes": 4, "fractional": False},
}


def generate(kind: str, rng: RngStream, **params) -> TaskInstance:
    return Task(kind, params).generate(rng)


def make_dataset(task: Task, n: int, seed: int, split: str) -> list[TaskInstance]:
    """n instances, instance i drawn from stream (seed, task kind, split, i)."""
    return [task.generate(RngStream(seed, "task", task.kind, split, i)) for i in range(n)]


def save_dataset(path: str | Path, instances: list[TaskInstance]) -> None:
    with open(path, "w") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_record(), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> list[TaskInstance]:
    with open(path) as f:
        return [TaskInstance.from_record(json.loads(line)) for line in f if line.strip()]
