import pytest

from fixflow import trainer

# Pinned seeds for the bundled task and its train/eval draws; the whole
# suite, including acceptance, is deterministic given these.
TASK_SEED = 7
TRAIN_DRAW = 701
EVAL_DRAW = 702
INIT_SEED = 1
TRAIN_SEED = 3


@pytest.fixture(scope="session")
def jet_train_data():
    return trainer.synthetic_task(seed=TASK_SEED, n_samples=2000, sample_seed=TRAIN_DRAW)


@pytest.fixture(scope="session")
def jet_eval_data():
    return trainer.synthetic_task(seed=TASK_SEED, n_samples=1000, sample_seed=EVAL_DRAW)


@pytest.fixture(scope="session")
def jet_init_model():
    return trainer.build_classifier(16, [64, 32, 32], 5, seed=INIT_SEED)


@pytest.fixture(scope="session")
def jet_float_model(jet_init_model, jet_train_data):
    cfg = trainer.TrainingConfig(epochs=100, seed=TRAIN_SEED, learning_rate=0.01)
    model, _ = trainer.train(jet_init_model, jet_train_data, cfg)
    return model
