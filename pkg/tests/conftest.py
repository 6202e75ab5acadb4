import pytest

from eegalign.config import config_from_dict
from eegalign.data import SyntheticSpec, generate_synthetic

TINY_ENCODER = {
    "transformer_width": 32,
    "transformer_heads": 4,
    "transformer_ff": 64,
    "conv_blocks": [{"kernel": 5, "out_channels": 8, "stride": 1}],
    "pool": 2,
    "mlp_hidden_dims": [32],
    "dropout": 0.1,
}

TINY_SPEC = SyntheticSpec(
    n_classes=12,
    n_test_classes=6,
    samples_per_class=4,
    test_samples_per_class=2,
    n_channels=4,
    n_timepoints=16,
    embed_dim=8,
    noise_sigma=0.05,
)


def tiny_config(**train):
    base = {"batch_size": 16, "n_epochs": 3, "learning_rate": 1e-3}
    base.update(train)
    return config_from_dict({
        "train": base,
        "encoder": dict(TINY_ENCODER),
        "retrieval": {"tasks": [{"k_way": 2, "top_k": 1}, {"k_way": 6, "top_k": 1}, {"k_way": 6, "top_k": 3}]},
    })


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(TINY_SPEC, "train"), generate_synthetic(TINY_SPEC, "test")


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
