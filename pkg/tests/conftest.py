import sys

import numpy as np
import pytest

from ltekge.kg import TripleSet
from ltekge.synthetic import random_kg, symmetric_toy_kg, write_dataset


@pytest.fixture
def tiny_train():
    # a -r0-> b, a -r1-> c, b -r0-> c, d isolated
    return TripleSet(np.array([[0, 0, 1], [0, 1, 2], [1, 0, 2]]), "train")


@pytest.fixture
def random_train():
    def make(num_entities=8, num_relations=3, num_triples=20, seed=0):
        return TripleSet(random_kg(num_entities, num_relations, num_triples, seed), "train")
    return make


@pytest.fixture(scope="session")
def toy_dataset():
    return symmetric_toy_kg()


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory, toy_dataset):
    return write_dataset(toy_dataset, tmp_path_factory.mktemp("toy"))


def write_tsv(path, rows):
    path.write_text("".join("\t".join(r) + "\n" for r in rows), encoding="utf-8")
    return path


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.LINES):
        terminalreporter.write_line(acceptance.LINES[number])
