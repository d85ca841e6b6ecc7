import numpy as np
import pytest

from mergesim.fixtures import make_echo_fixture
from mergesim.merge import calibrate_constant_attention, markov_corpus, merge_model
from mergesim.model import ModelConfig, init_model_weights


@pytest.fixture(scope="session")
def toy_weights():
    return init_model_weights(ModelConfig(), seed=11)


@pytest.fixture(scope="session")
def toy_calibration(toy_weights):
    corpus = markov_corpus(toy_weights.config.vocab_size, 4,
                           toy_weights.config.max_len, seed=3)
    return calibrate_constant_attention(toy_weights, corpus)


@pytest.fixture(scope="session")
def toy_merged(toy_weights, toy_calibration):
    return merge_model(toy_weights, toy_calibration)


@pytest.fixture(scope="session")
def echo_weights():
    return make_echo_fixture(seed=0)


@pytest.fixture(scope="session")
def echo_merged(echo_weights):
    corpus = markov_corpus(echo_weights.config.vocab_size, 2,
                           echo_weights.config.max_len, seed=1)
    calib = calibrate_constant_attention(echo_weights, corpus)
    return merge_model(echo_weights, calib)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
