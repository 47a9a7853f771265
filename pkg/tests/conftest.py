import pytest

TINY_INI = """\
[dataset]
num_classes = 8
per_class = 8
image_size = 16
fractions = 0.5,0.25,0.25

[embedding]
blocks_per_stage = 1,1,1,1
channels_per_stage = 8,16,16,32
se_reduction = 4

[relation]
blocks_per_stage = 1

[train]
pretrain_epochs = 1
batch_size = 16
relation_episodes = 4
eval_every = 2
val_episodes = 2
train_ways = 2
train_queries = 2

[eval]
ways = 2
queries = 3
episodes = 5
"""


@pytest.fixture
def tiny_ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return p


# filled by test_acceptance.py: criterion number -> (passed, description)
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, text = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")
