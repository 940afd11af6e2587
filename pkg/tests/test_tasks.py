import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffpost.seq import RngStream, default_vocab
from diffpost.tasks import (GenerationError, ParseError, Task, TaskInstance, answer_span, load_dataset,
                            make_dataset, parse_expression, save_dataset, solve_countdown, sudoku_solutions,
                            sudoku_valid)

V = default_vocab()
KINDS = ["copy", "sort", "countdown_lite", "sudoku4"]


@pytest.mark.parametrize("kind", KINDS)
def test_reference_answers_score_one(kind):
    task = Task(kind)
    for inst in make_dataset(task, 20, 0, "t"):
        assert task.verify(inst, task.reference_response(inst, V), V).value == 1.0
        assert len(task.encode_prompt(inst, V)) == task.prompt_width + 1


@pytest.mark.parametrize("kind", KINDS)
@given(data=st.data())
def test_verifier_is_total(kind, data):
    task = Task(kind)
    inst = task.generate(RngStream(data.draw(st.integers(0, 50)), kind))
    tokens = data.draw(st.lists(st.integers(0, V.size - 1), max_size=24))
    r = task.verify(inst, np.array(tokens, dtype=np.int64), V)
    assert 0.0 <= r.value <= 1.0
    assert r.tag in ("correct", "wrong_answer", "malformed", "rule_violation")


def test_dataset_is_deterministic_and_split_aware():
    task = Task("countdown_lite")
    a = make_dataset(task, 10, 3, "train")
    assert [i.prompt for i in a] == [i.prompt for i in make_dataset(task, 10, 3, "train")]
    assert [i.prompt for i in a] != [i.prompt for i in make_dataset(task, 10, 3, "heldout")]


def test_dataset_roundtrip(tmp_path):
    insts = make_dataset(Task("sudoku4"), 5, 0, "x")
    save_dataset(tmp_path / "d.jsonl", insts)
    assert load_dataset(tmp_path / "d.jsonl") == insts


def test_copy_and_sort():
    task = Task("sort", {"length": 4})
    inst = TaskInstance("sort", "sort:dbca", {"answer": "abcd"}, "abcd")
    assert task.verify(inst, task.encode_response("abcd", V), V).tag == "correct"
    assert task.verify(inst, task.encode_response("abdc", V), V).tag == "wrong_answer"
    assert task.verify(inst, np.array([V.mask_id, 5]), V).tag == "malformed"


def test_answer_span_rules():
    enc = lambda s: np.concatenate([V.encode(s), [V.eos_id]])
    assert answer_span(enc("ANS:12"), V) == "12"
    assert answer_span(enc("xxANS:1ANS:2"), V) == "1ANS:2"
    assert answer_span(enc("3+4"), V) == "3+4"


# -- countdown -----------------------------------------------------------------

exprs = st.recursive(st.integers(0, 99).map(str),
                     lambda inner: st.tuples(inner, st.sampled_from("+-*"), inner).map(
                         lambda t: f"({t[0]}{t[1]}{t[2]})"), max_leaves=6)


@given(exprs)
def test_parser_agrees_with_python(expr):
    value, nums = parse_expression(expr)
    assert value == eval(expr)
    assert sorted(nums) == sorted(int(x) for x in expr.replace("(", " ").replace(")", " ").replace("+", " ")
                                  .replace("-", " ").replace("*", " ").split())


@pytest.mark.parametrize("bad", ["", "1+", "(1+2", "01", "1//2", "2**3", "a+1", "1 + 2", "-1+2"])
def test_parser_rejects(bad):
    with pytest.raises(ParseError):
        parse_expression(bad)


def test_countdown_rules():
    task = Task("countdown_lite")
    inst = TaskInstance("countdown_lite", "cd:2,3,4=14", {"operands": [2, 3, 4], "target": 14}, "2+3*4")
    check = lambda s: task.verify(inst, task.encode_response(s, V), V).tag
    assert check("3*4+2") == "correct"
    assert check("4*3+2") == "correct"
    assert check("2*3+4") == "wrong_answer"
    assert check("3*3+5") == "rule_violation"
    assert check("4*4-2") == "rule_violation"       # operand used twice
    assert check("3*4+") == "malformed"


def test_solver_against_enumeration():
    sols = solve_countdown([2, 3, 4], 14)
    assert "2+3*4" in sols or "3*4+2" in sols
    for s in sols:
        v, nums = parse_expression(s)
        assert v == 14
        pool = [2, 3, 4]
        for x in nums:
            pool.remove(x)


def test_generated_countdown_instances_are_solvable():
    task = Task("countdown_lite")
    for inst in make_dataset(task, 30, 0, "s"):
        ops, target = inst.payload["operands"], inst.payload["target"]
        assert all(1 <= x <= 9 for x in ops) and len(ops) == 3
        v, nums = parse_expression(inst.solution)
        assert v == target and sorted(nums) == ops


# -- sudoku --------------------------------------------------------------------


def _all_grids():
    rows = list(itertools.permutations([1, 2, 3, 4]))
    out = []
    for r in itertools.product(rows, repeat=4):
        g = [x for row in r for x in row]
        if sudoku_valid(g):
            out.append(g)
    return out


def test_sudoku_validity_count():
    assert len(_all_grids()) == 288   # number of valid 4x4 sudoku grids


def test_sudoku_instances_have_unique_completion():
    task = Task("sudoku4", {"holes": 6})
    grids = _all_grids()
    for inst in make_dataset(task, 10, 0, "s"):
        puzzle = inst.payload["puzzle"]
        fits = [g for g in grids if all(p == 0 or p == x for p, x in zip(puzzle, g))]
        assert fits == [inst.payload["solution"]]
        assert sudoku_solutions(puzzle) == [inst.payload["solution"]]


def test_sudoku_fractional_reward():
    task = Task("sudoku4", {"holes": 4, "fractional": True})
    inst = make_dataset(task, 1, 0, "f")[0]
    sol = inst.payload["solution"]
    holes = [i for i, v in enumerate(inst.payload["puzzle"]) if v == 0]
    wrong = list(sol)
    wrong[holes[0]] = wrong[holes[0]] % 4 + 1
    r = task.verify(inst, task.encode_response("".join(map(str, wrong)), V), V)
    assert r.value == pytest.approx(0.75)


def test_bad_parameters():
    with pytest.raises(GenerationError):
        Task("countdown_lite", {"n_operands": 9})
    with pytest.raises(GenerationError):
        Task("copy", {"nope": 1})
    with pytest.raises(GenerationError):
        Task("chess")
