import numpy as np
import pytest
import torch

from lvm.config import EnvConfig, ModelConfig, RunConfig, TrainerConfig


@pytest.fixture(autouse=True)
def _torch_single_thread():
    torch.set_num_threads(1)


def tiny_run_config(seed: int = 0) -> RunConfig:
    """Small enough that a full epoch runs in well under a second."""
    cfg = RunConfig(
        env=EnvConfig(img_size=8, max_steps=60),
        model=ModelConfig(deter_size=16, stoch_size=8, embed_size=16,
                          hidden_size=16, base_channels=4, free_nats=1.0),
        train=TrainerConfig(
            seed_episodes=2, max_epochs=2, train_freq=2, data_collect_freq=1,
            batch_size=4, seq_len=8, horizon=4, traj_num=2,
            pretrain_updates=2, eval_episodes=2, eval_every=0,
        ),
        seed=seed,
    )
    cfg.validate()
    return cfg


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_run_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
