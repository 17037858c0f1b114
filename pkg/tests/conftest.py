import dataclasses

import numpy as np
import pytest
import torch

from xltransfer.config import desk_preset
from xltransfer.corpus import SyntheticWorldConfig, gen_synthetic_world
from xltransfer.model import EncoderConfig

SMALL_WORLD = dict(seed=0, vocab_size_per_language=80, corpus_sentences_per_language=200, parallel_pairs=20,
                   task_train_size=64, task_eval_size=16, retrieval_size=12, retrieval_distractor_count=4)


@pytest.fixture(scope="session")
def small_world_config():
    return SyntheticWorldConfig(**SMALL_WORLD)


@pytest.fixture(scope="session")
def small_world(small_world_config):
    return gen_synthetic_world(small_world_config)


@pytest.fixture(scope="session")
def tokenizer(small_world):
    return small_world.tokenizer


@pytest.fixture
def tiny_encoder_config(tokenizer):
    return EncoderConfig(vocab_size=len(tokenizer), num_layers=2, hidden_size=8, num_attention_heads=2,
                         ffn_size=16, max_sequence_length=32, dropout=0.0)


def quick_config(small_world_config, seed=0, intermediate=("paraphrase",), variant="single",
                 targets=("paraphrase", "tagging", "span_qa", "bucc", "tatoeba"), steps=(20, 12, 10)):
    """Desk preset shrunk to a few steps on the small world."""
    cfg = desk_preset(seed=seed, intermediate=intermediate, variant=variant, targets=targets,
                      pretrain_steps=steps[0], intermediate_steps=steps[1], target_steps=steps[2])
    cfg.world = small_world_config
    cfg.encoder = dict(cfg.encoder, hidden_size=16, ffn_size=32, max_sequence_length=48)
    es = dataclasses.replace(cfg.pretrain.early_stop, dev_subset_size=8, eval_interval_steps=5)
    cfg.pretrain = dataclasses.replace(cfg.pretrain, batch_size=8, early_stop=es)
    if cfg.intermediate:
        cfg.intermediate = dataclasses.replace(cfg.intermediate, batch_size=8, early_stop=es)
    cfg.targets = [dataclasses.replace(t, phase=dataclasses.replace(t.phase, batch_size=8, early_stop=es))
                   if t.phase else t for t in cfg.targets]
    cfg.eval_batch_size = 16
    return cfg


@pytest.fixture
def make_quick_config(small_world_config):
    def make(**kw):
        return quick_config(small_world_config, **kw)
    return make


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def rng(seed=0):
    return np.random.default_rng(seed)
