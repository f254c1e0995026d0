import pytest
import torch

from motrans.config import TrainConfig
from motrans.dataio import generate_dataset, load_dataset
from motrans.training import prepare_sequences, train_stage1, train_stage2

torch.set_num_threads(1)

TINY = dict(height=32, width=24, disc_layers=2, epochs_stage1=1, epochs_stage2=1)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small paired dataset: 2 training sequences plus 1 held-out, 32x24, 6 frames."""
    root = tmp_path_factory.mktemp("data")
    train = root / "train"
    test = root / "test"
    generate_dataset(train, n_actors=2, n_frames=6, size=(32, 24), seed=0)
    generate_dataset(test, n_actors=1, n_frames=6, size=(32, 24), seed=700)
    return train, test


@pytest.fixture(scope="session")
def tiny_cfg(tiny_data):
    train, test = tiny_data
    cfg = TrainConfig(train_dir=str(train), test_dir=str(test), **TINY)
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def tiny_sequences(tiny_data, tiny_cfg):
    train, test = tiny_data
    return (prepare_sequences(load_dataset(train), tiny_cfg),
            prepare_sequences(load_dataset(test), tiny_cfg))


@pytest.fixture(scope="session")
def trained_tiny(tmp_path_factory, tiny_cfg, tiny_sequences):
    """One-epoch training of all three networks; reused by pipeline and CLI tests."""
    from motrans.config import save_config

    out = tmp_path_factory.mktemp("run")
    train_seqs, _ = tiny_sequences
    save_config(tiny_cfg, out / "config.txt")
    train_stage1(tiny_cfg, train_seqs, out)
    train_stage2(tiny_cfg, train_seqs, out)
    return out
