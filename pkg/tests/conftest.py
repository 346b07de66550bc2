import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def oracle():
    """Presence oracle shared by every test that scores rendered or generated images."""
    from mealsynth.synthbench import train_oracle

    return train_oracle(num_glyphs=8, num_images=4000, seed=0)
