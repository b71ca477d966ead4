import json
from fractions import Fraction
from pathlib import Path

import pytest

from stepcheck.paths import Question, decompose_path

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name):
    with open(FIXTURES / name, encoding="utf-8") as handle:
        return json.load(handle)


def fixture_question(fixture, qid="q"):
    return Question(
        id=qid,
        text=fixture["question"],
        gold_answer=Fraction(fixture["gold_answer"]),
        gold_solution=fixture.get("reference_answer"),
    )


def fixture_path(fixture):
    return decompose_path(fixture["path_raw"])


@pytest.fixture
def reasoning_fx():
    return load_fixture("golden_reasoning.json")


@pytest.fixture
def all_direct_fx():
    return load_fixture("golden_check_all_direct.json")


@pytest.fixture
def step_direct_fx():
    return load_fixture("golden_check_step_direct.json")


@pytest.fixture
def step_cot_fx():
    return load_fixture("golden_check_step_cot.json")


@pytest.fixture
def correction_fx():
    return load_fixture("golden_correction.json")


@pytest.fixture
def checkgen_fx():
    return load_fixture("golden_check_generation.json")


@pytest.fixture
def correction_gen_fx():
    return load_fixture("golden_correction_generation.json")
