import json
import struct

import numpy as np
import pytest
import torch

from helpers import features_for, float64_bundle, gradient_check
from xltransfer.corpus import TokenizedBatch, collate
from xltransfer.exceptions import (CheckpointError, CheckpointVersionError, ConfigMismatchError,
                                   ConfigurationError, LifecycleError)
from xltransfer.model import (CHECKPOINT_MAGIC, HEAD_FORMATS, EmbeddingExtractor, EncoderConfig, decode_span,
                              forward, head_forward, head_loss, init_encoder, load_checkpoint, mean_pool,
                              read_checkpoint_header, reinit_head, save_checkpoint, sentence_embed)

NUM_OUTPUTS = {"classification": 2, "tagging": 6, "multiple_choice": None, "span_extraction": None, "mlm": None}


def test_encoder_config_validation():
    with pytest.raises(ConfigurationError):
        EncoderConfig(vocab_size=10, hidden_size=10, num_attention_heads=3)
    with pytest.raises(ConfigurationError):
        EncoderConfig(vocab_size=0)
    with pytest.raises(ConfigurationError):
        EncoderConfig(vocab_size=10, dropout=1.0)
    cfg = EncoderConfig(vocab_size=10)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


def test_extractor_validation(tiny_encoder_config):
    with pytest.raises(ConfigurationError):
        EmbeddingExtractor(layer_index=-1)
    with pytest.raises(ConfigurationError):
        EmbeddingExtractor(pooling="max")
    with pytest.raises(ConfigurationError):
        EmbeddingExtractor(layer_index=3).validate(tiny_encoder_config)
    EmbeddingExtractor(layer_index=2).validate(tiny_encoder_config)


def test_init_deterministic(tiny_encoder_config):
    a = init_encoder(tiny_encoder_config, 3)
    b = init_encoder(tiny_encoder_config, 3)
    c = init_encoder(tiny_encoder_config, 4)
    assert a.fingerprint == b.fingerprint != c.fingerprint


@pytest.mark.parametrize("fmt", HEAD_FORMATS)
def test_head_shapes(fmt, tiny_encoder_config, small_world, tokenizer):
    bundle = init_encoder(tiny_encoder_config, 0)
    reinit_head(bundle, fmt, 0, NUM_OUTPUTS[fmt])
    feats = features_for(fmt, small_world, tokenizer, n=3)
    hs = forward(bundle, feats.batch)
    B, T = feats.batch.input_ids.shape
    assert hs.shape == (3, B, T, 8)
    out = head_forward(bundle, fmt, hs, feats.batch, feats.num_choices)
    if fmt == "classification":
        assert out.shape == (B, 2)
    elif fmt == "multiple_choice":
        assert out.shape == (B // feats.num_choices, feats.num_choices)
    elif fmt == "span_extraction":
        assert out[0].shape == out[1].shape == (B, T)
    elif fmt == "tagging":
        assert out.shape == (B, max(len(w) for w in feats.batch.word_starts), 6)
    else:
        assert out.shape == (B, T, tiny_encoder_config.vocab_size)
    assert torch.isfinite(head_loss(bundle, fmt, feats))


@pytest.mark.parametrize("fmt", HEAD_FORMATS)
def test_gradients_match_finite_differences(fmt, tiny_encoder_config, small_world, tokenizer):
    bundle = float64_bundle(tiny_encoder_config, fmt, 0, NUM_OUTPUTS[fmt])
    feats = features_for(fmt, small_world, tokenizer, n=3)
    results = gradient_check(bundle, fmt, feats, n_params=20)
    assert len(results) == 20
    bad = [r for r in results if not r[-1]]
    assert not bad, bad


def test_missing_head_raises(tiny_encoder_config, small_world, tokenizer):
    bundle = init_encoder(tiny_encoder_config, 0)
    with pytest.raises(LifecycleError):
        bundle.head("classification")
    with pytest.raises(ConfigurationError):
        reinit_head(bundle, "classification", 0)
    with pytest.raises(ConfigurationError):
        reinit_head(bundle, "retrieval", 0)


def test_pad_invariance(tiny_encoder_config, tokenizer, small_world):
    bundle = init_encoder(tiny_encoder_config, 1)
    short, long = small_world.corpora["en"][0], small_world.corpora["en"][1] + " " + small_world.corpora["en"][2]
    alone = collate([tokenizer.encode(short, max_length=32)])
    padded = collate([tokenizer.encode(short, max_length=32), tokenizer.encode(long, max_length=32)])
    n = alone.input_ids.shape[1]
    assert padded.input_ids.shape[1] > n
    with torch.no_grad():
        a = forward(bundle, alone)[:, 0, :n]
        b = forward(bundle, padded)[:, 0, :n]
        assert torch.allclose(a, b, atol=1e-5)
        ex = EmbeddingExtractor(2)
        assert torch.allclose(sentence_embed(bundle, alone, ex)[0], sentence_embed(bundle, padded, ex)[0], atol=1e-5)


def test_mean_pool_two_tokens():
    u, v, pad = torch.randn(4), torch.randn(4), torch.randn(4) * 100
    states = torch.stack([u, v, pad])[None]
    pooled = mean_pool(states, np.array([[1, 1, 0]]))
    assert torch.allclose(pooled[0], (u + v) / 2)


def test_sentence_embed_layer_choice(tiny_encoder_config, tokenizer, small_world):
    bundle = init_encoder(tiny_encoder_config, 0)
    batch = collate([tokenizer.encode(s, max_length=32) for s in small_world.corpora["en"][:2]])
    with torch.no_grad():
        hs = forward(bundle, batch)
        for layer in range(3):
            emb = sentence_embed(bundle, batch, EmbeddingExtractor(layer))
            assert torch.allclose(emb, mean_pool(hs[layer], batch.attention_mask))


def test_truncation_flags_rows(tiny_encoder_config):
    bundle = init_encoder(tiny_encoder_config, 0)
    ids = np.full((2, 40), 7)
    mask = np.ones((2, 40), dtype=np.int64)
    mask[1, 20:] = 0
    batch = TokenizedBatch(ids, mask, [[1], [1]], np.zeros_like(ids))
    hs = forward(bundle, batch)
    assert hs.shape[2] == 32
    assert batch.truncated == [True, False]


def test_mlm_head_is_tied(tiny_encoder_config, small_world, tokenizer):
    bundle = init_encoder(tiny_encoder_config, 0)
    reinit_head(bundle, "mlm", 0)
    names = [n for n, _ in bundle.heads["mlm"].named_parameters()]
    assert not any("decoder" in n for n in names)
    feats = features_for("mlm", small_world, tokenizer)
    loss = head_loss(bundle, "mlm", feats)
    loss.backward()
    assert bundle.encoder.token_embeddings.weight.grad.abs().sum() > 0


def test_mlm_loss_none_without_targets(tiny_encoder_config, small_world, tokenizer):
    bundle = init_encoder(tiny_encoder_config, 0)
    reinit_head(bundle, "mlm", 0)
    feats = features_for("mlm", small_world, tokenizer)
    feats.targets["labels"][:] = -100
    assert head_loss(bundle, "mlm", feats) is None


def test_reinit_keeps_encoder_and_changes_head(tiny_encoder_config):
    bundle = init_encoder(tiny_encoder_config, 0)
    fp = bundle.fingerprint
    reinit_head(bundle, "classification", 5, 2)
    w1 = bundle.heads["classification"].proj.weight.detach().clone()
    reinit_head(bundle, "classification", 5, 2)
    w2 = bundle.heads["classification"].proj.weight.detach().clone()
    assert bundle.fingerprint == fp
    assert not torch.equal(w1, w2)
    other = init_encoder(tiny_encoder_config, 0)
    reinit_head(other, "classification", 5, 2)
    assert torch.equal(other.heads["classification"].proj.weight, w1)


def test_drop_heads(tiny_encoder_config):
    bundle = init_encoder(tiny_encoder_config, 0)
    reinit_head(bundle, "span_extraction", 0)
    bundle.drop_heads()
    assert not bundle.has_head("span_extraction")


def test_decode_span_respects_constraints():
    start = torch.tensor([0.0, 5.0, 1.0, 0.0, 9.0])
    end = torch.tensor([0.0, 0.0, 6.0, 0.0, 0.0])
    allowed = torch.tensor([False, True, True, True, True])
    assert decode_span(start, end, allowed) == (1, 2)
    # end before start is not allowed
    assert decode_span(torch.tensor([0.0, 0.0, 9.0]), torch.tensor([0.0, 9.0, 0.0]), torch.ones(3, dtype=torch.bool))[0] <= 2
    s, e = decode_span(torch.tensor([9.0, 0.0, 0.0, 0.0]), torch.tensor([0.0, 0.0, 0.0, 9.0]),
                       torch.ones(4, dtype=torch.bool), max_answer_length=2)
    assert e - s < 2


def test_checkpoint_round_trip(tmp_path, tiny_encoder_config):
    bundle = init_encoder(tiny_encoder_config, 2)
    reinit_head(bundle, "tagging", 1, 6)
    path = save_checkpoint(bundle, tmp_path / "m.ckpt", extra={"phase": "x"})
    back = load_checkpoint(path, expected_config=tiny_encoder_config)
    assert back.fingerprint == bundle.fingerprint
    for (n1, a), (n2, b) in zip(bundle.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and torch.equal(a, b)
    assert back.head_outputs == {"tagging": 6}
    assert read_checkpoint_header(path)["extra"] == {"phase": "x"}
    # a second save is byte-identical
    assert save_checkpoint(back, tmp_path / "n.ckpt", extra={"phase": "x"}).read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path, tiny_encoder_config):
    path = save_checkpoint(init_encoder(tiny_encoder_config, 0), tmp_path / "m.ckpt")
    data = bytearray(path.read_bytes())
    data[200] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(bytes(data[:20]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")


def _rewrite_header(path, mutate):
    import hashlib
    data = path.read_bytes()[:-32]
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    mutate(header)
    hb = json.dumps(header, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<Q", len(hb)) + hb + data[16 + hlen:]
    path.write_bytes(body + hashlib.sha256(body).digest())


def test_checkpoint_version_and_config_mismatch(tmp_path, tiny_encoder_config):
    path = save_checkpoint(init_encoder(tiny_encoder_config, 0), tmp_path / "m.ckpt")
    other = EncoderConfig(**dict(tiny_encoder_config.to_dict(), num_layers=3))
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expected_config=other)
    _rewrite_header(path, lambda h: h.update(format_version=99))
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(path)
