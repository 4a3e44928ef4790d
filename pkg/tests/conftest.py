import pytest

from textcsp.synthdata import GeneratorConfig, generate_dataset, load_dataset

TINY_GEN = dict(
    grid_size=(16, 16, 16), num_cases=6, wt_radius=(4, 6), tc_radius=(2.5, 3.5), et_radius=(1, 2), token_length=16
)

# small enough that a few epochs take seconds on one CPU thread
TINY_TRAIN = {
    "epochs": 4,
    "warmup_epochs": 1,
    "eval_interval": 2,
    "val_cases": 2,
    "model": {
        "text": {"d": 16, "heads": 2, "layers": 1, "lora_rank": 4, "prompt_length": 2},
        "vision": {"base_channels": 4, "depth": 2, "decoder_out_channels": 8, "fusion_heads": 2},
    },
}


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    generate_dataset(GeneratorConfig(**TINY_GEN), root)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_root):
    return load_dataset(tiny_root)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
