import numpy as np
import pytest
from PIL import Image

from arcomp.data import Dataset


def write_tree(root, alphabets=2, chars=3, drawings=20, side=105, seed=0):
    """Omniglot-style tree: black strokes on white, files named <char>_<drawer>.png."""
    rng = np.random.default_rng(seed)
    for a in range(alphabets):
        for c in range(chars):
            folder = root / f"Alphabet_{a}" / f"character{c + 1:02d}"
            folder.mkdir(parents=True)
            for d in range(drawings):
                img = np.full((side, side), 255, dtype=np.uint8)
                r0, c0 = rng.integers(10, side - 40, size=2)
                img[r0:r0 + 30, c0:c0 + 4] = 0
                Image.fromarray(img).save(folder / f"{a * 100 + c:04d}_{d + 1:02d}.png")
    return root


@pytest.fixture
def image_tree(tmp_path):
    return write_tree(tmp_path / "tree")


def omniglot_shaped(side=1, drawings=20):
    """Metadata-faithful stand-in: 50 alphabets (30 background with 964
    characters, 20 evaluation with 659), 20 drawers per character."""
    back = np.array_split(np.arange(964), 30)
    evals = np.array_split(np.arange(964, 1623), 20)
    alpha_of_char = np.empty(1623, dtype=int)
    for a, chars in enumerate(back + evals):
        alpha_of_char[chars] = a
    char = np.repeat(np.arange(1623), drawings)
    return Dataset(
        images=np.zeros((len(char), side, side)),
        alphabet=alpha_of_char[char],
        character=char,
        drawer=np.tile(np.arange(1, drawings + 1), 1623),
        alphabet_names=[f"alpha{a:02d}" for a in range(50)],
        character_names=[f"c{c}" for c in range(1623)],
        origin=["background"] * 30 + ["evaluation"] * 20,
    )


@pytest.fixture(scope="session")
def omniglot_meta():
    return omniglot_shaped()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
