"""Small bidirectional encoder with per-format heads.

The encoder is a post-LayerNorm transformer. Hidden states are returned for
every layer, index 0 being the embedding output. Heads are attached per
task format and re-created from a seed whenever a phase starts.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import (CheckpointError, CheckpointVersionError, ConfigMismatchError,
                         ConfigurationError, LifecycleError)
from .sampling import IGNORE_LABEL

logger = logging.getLogger(__name__)

HEAD_FORMATS = ("classification", "multiple_choice", "span_extraction", "tagging", "mlm")
CHECKPOINT_MAGIC = b"XLTCKPT\n"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    num_layers: int = 2
    hidden_size: int = 64
    num_attention_heads: int = 4
    ffn_size: int = 128
    max_sequence_length: int = 64
    dropout: float = 0.1
    type_vocab_size: int = 2

    def __post_init__(self):
        for name in ("vocab_size", "num_layers", "hidden_size", "num_attention_heads",
                     "ffn_size", "max_sequence_length", "type_vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.hidden_size % self.num_attention_heads:
            raise ConfigurationError(
                f"hidden_size={self.hidden_size} is not divisible by num_attention_heads={self.num_attention_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class EmbeddingExtractor:
    layer_index: int = 1
    pooling: str = "mean"

    def __post_init__(self):
        if self.pooling != "mean":
            raise ConfigurationError("only mean pooling is supported")
        if self.layer_index < 0:
            raise ConfigurationError("layer_index must be >= 0")

    def validate(self, config):
        if not 0 <= self.layer_index <= config.num_layers:
            raise ConfigurationError(f"layer_index {self.layer_index} outside [0, {config.num_layers}]")


class SelfAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.num_heads = cfg.num_attention_heads
        self.head_dim = cfg.hidden_size // cfg.num_attention_heads
        self.qkv = nn.Linear(cfg.hidden_size, 3 * cfg.hidden_size)
        self.out = nn.Linear(cfg.hidden_size, cfg.hidden_size)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, key_mask):
        B, T, H = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(B, T, H)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attention = SelfAttention(cfg)
        self.ln1 = nn.LayerNorm(cfg.hidden_size)
        self.ffn_in = nn.Linear(cfg.hidden_size, cfg.ffn_size)
        self.ffn_out = nn.Linear(cfg.ffn_size, cfg.hidden_size)
        self.ln2 = nn.LayerNorm(cfg.hidden_size)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, key_mask):
        x = self.ln1(x + self.dropout(self.attention(x, key_mask)))
        return self.ln2(x + self.dropout(self.ffn_out(F.gelu(self.ffn_in(x)))))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embeddings = nn.Embedding(cfg.vocab_size, cfg.hidden_size)
        self.position_embeddings = nn.Embedding(cfg.max_sequence_length, cfg.hidden_size)
        self.type_embeddings = nn.Embedding(cfg.type_vocab_size, cfg.hidden_size)
        self.embedding_ln = nn.LayerNorm(cfg.hidden_size)
        self.dropout = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))

    def forward(self, input_ids, attention_mask, type_ids=None):
        T = input_ids.shape[1]
        if type_ids is None:
            type_ids = torch.zeros_like(input_ids)
        pos = torch.arange(T, device=input_ids.device)
        x = self.token_embeddings(input_ids) + self.position_embeddings(pos)[None] + self.type_embeddings(type_ids)
        x = self.dropout(self.embedding_ln(x))
        key_mask = attention_mask.bool()
        states = [x]
        for layer in self.layers:
            x = layer(x, key_mask)
            states.append(x)
        return torch.stack(states)


class ClassificationHead(nn.Module):
    def __init__(self, hidden, n, dropout=0.1):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.proj = nn.Linear(hidden, n)

    def forward(self, h):
        return self.proj(self.dropout(h))


class MLMHead(nn.Module):
    """Transform then score against the (tied) input token embeddings."""

    def __init__(self, hidden, vocab):
        super().__init__()
        self.dense = nn.Linear(hidden, hidden)
        self.ln = nn.LayerNorm(hidden)
        self.bias = nn.Parameter(torch.zeros(vocab))

    def forward(self, h, token_embeddings):
        return F.linear(self.ln(F.gelu(self.dense(h))), token_embeddings, self.bias)


def _make_head(fmt, cfg: EncoderConfig, num_outputs):
    hidden = cfg.hidden_size
    if fmt in ("classification", "tagging"):
        if not num_outputs:
            raise ConfigurationError(f"{fmt} head needs num_outputs")
        return ClassificationHead(hidden, num_outputs, cfg.dropout)
    if fmt == "multiple_choice":
        return ClassificationHead(hidden, 1, cfg.dropout)
    if fmt == "span_extraction":
        return ClassificationHead(hidden, 2, cfg.dropout)
    if fmt == "mlm":
        return MLMHead(hidden, cfg.vocab_size)
    raise ConfigurationError(f"no head for format {fmt!r}")


def _init_module_(module: nn.Module, generator: torch.Generator):
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
            elif isinstance(m, (nn.Linear, nn.Embedding)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator, dtype=m.weight.dtype) * INIT_STD)
                if getattr(m, "bias", None) is not None:
                    m.bias.zero_()


class ModelBundle(nn.Module):
    """Encoder plus at most one head per task format."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.heads = nn.ModuleDict()
        self.head_outputs = {}
        self.head_generation = {}

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.encoder.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def has_head(self, fmt):
        return fmt in self.heads

    def head(self, fmt):
        if fmt not in self.heads:
            raise LifecycleError(f"no {fmt!r} head attached; call reinit_head(bundle, {fmt!r}, seed) first")
        return self.heads[fmt]

    def drop_heads(self):
        self.heads = nn.ModuleDict()
        self.head_outputs = {}
        return self


def init_encoder(config: EncoderConfig, seed: int) -> ModelBundle:
    bundle = ModelBundle(config)
    g = torch.Generator().manual_seed(int(seed))
    _init_module_(bundle.encoder, g)
    bundle.eval()
    return bundle


def reinit_head(bundle: ModelBundle, fmt: str, seed: int, num_outputs=None) -> ModelBundle:
    """Attach a freshly initialized head for ``fmt``, replacing any existing one.

    The init stream is derived from (seed, format, how many heads of this
    format the bundle has had), so repeated re-inits never reproduce an
    earlier head while equal starting states stay reproducible.
    """
    if num_outputs is None:
        num_outputs = bundle.head_outputs.get(fmt)
    generation = bundle.head_generation.get(fmt, 0)
    key = f"{int(seed)}:{fmt}:{generation}".encode()
    stream = int.from_bytes(hashlib.sha256(key).digest()[:8], "little") & ((1 << 63) - 1)
    head = _make_head(fmt, bundle.config, num_outputs)
    _init_module_(head, torch.Generator().manual_seed(stream))
    dtype = next(bundle.encoder.parameters()).dtype
    head.to(dtype)
    head.train(bundle.training)
    bundle.heads[fmt] = head
    bundle.head_outputs[fmt] = num_outputs
    bundle.head_generation[fmt] = generation + 1
    return bundle


def _tensor(x, dtype=torch.long):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def forward(bundle: ModelBundle, batch) -> torch.Tensor:
    """Hidden states of shape [L+1, B, T, H].

    Batches longer than ``max_sequence_length`` are cut to that length;
    the affected rows are flagged in ``batch.truncated``.
    """
    ids = _tensor(batch.input_ids)
    mask = _tensor(batch.attention_mask)
    types = _tensor(batch.type_ids) if batch.type_ids is not None else None
    limit = bundle.config.max_sequence_length
    if ids.shape[1] > limit:
        over = (mask.sum(1) > limit).tolist()
        logger.warning("truncating %d of %d rows to %d positions", sum(over), len(over), limit)
        batch.truncated = [bool(a) or b for a, b in zip(batch.truncated or [False] * len(over), over)]
        ids, mask = ids[:, :limit], mask[:, :limit]
        types = types[:, :limit] if types is not None else None
    return bundle.encoder(ids, mask, types)


def gather_word_starts(hidden, word_starts):
    """Pick the first-subword state of every word: [B, W, H] plus a [B, W] validity mask."""
    B = hidden.shape[0]
    W = max((len(ws) for ws in word_starts), default=0)
    index = torch.zeros(B, W, dtype=torch.long)
    valid = torch.zeros(B, W, dtype=torch.bool)
    for b, ws in enumerate(word_starts):
        index[b, :len(ws)] = torch.as_tensor(ws, dtype=torch.long)
        valid[b, :len(ws)] = True
    picked = torch.gather(hidden, 1, index[..., None].expand(B, W, hidden.shape[-1]))
    return picked, valid


def head_forward(bundle: ModelBundle, fmt: str, hidden_states, batch=None, num_choices=None):
    """Task logits from the final hidden layer.

    classification [B, labels]; multiple_choice [B/num_choices, num_choices];
    span_extraction (start [B, T], end [B, T]); tagging [B, W, tags] at
    first-subword positions; mlm [B, T, vocab].
    """
    head = bundle.head(fmt)
    h = hidden_states[-1]
    if fmt == "classification":
        return head(h[:, 0])
    if fmt == "multiple_choice":
        if not num_choices:
            raise ConfigurationError("multiple_choice needs num_choices")
        return head(h[:, 0]).view(-1, num_choices)
    if fmt == "span_extraction":
        logits = head(h)
        return logits[..., 0], logits[..., 1]
    if fmt == "tagging":
        if batch is None or batch.word_starts is None:
            raise ConfigurationError("tagging needs word_starts")
        picked, _ = gather_word_starts(h, batch.word_starts)
        return head(picked)
    if fmt == "mlm":
        return head(h, bundle.encoder.token_embeddings.weight)
    raise ConfigurationError(f"unknown format {fmt!r}")


def mean_pool(states, attention_mask):
    m = _tensor(attention_mask).to(states.dtype)[..., None]
    return (states * m).sum(-2) / m.sum(-2).clamp_min(1.0)


def sentence_embed(bundle: ModelBundle, batch, extractor: EmbeddingExtractor) -> torch.Tensor:
    """Mean over non-padding positions of the chosen layer: [B, H]."""
    extractor.validate(bundle.config)
    states = forward(bundle, batch)
    T = states.shape[2]
    return mean_pool(states[extractor.layer_index], _tensor(batch.attention_mask)[:, :T])


NEG_INF = -1e4


def span_candidates(batch):
    """Context positions: last segment, non-special, non-padding. CLS kept for no-answer labels."""
    types = _tensor(batch.type_ids) if batch.type_ids is not None else torch.zeros_like(_tensor(batch.input_ids))
    mask = _tensor(batch.attention_mask).bool()
    ctx = torch.zeros_like(mask)
    for b in range(mask.shape[0]):
        n = int(mask[b].sum())
        seg = int(types[b, n - 2]) if n >= 2 else 0
        ctx[b, :n - 1] = types[b, :n - 1] == seg
        if seg == 0:
            ctx[b, 0] = False
    return ctx


def head_loss(bundle: ModelBundle, fmt: str, features, hidden_states=None):
    """Mean cross-entropy for one task batch (see ``features.encode_examples``)."""
    batch = features.batch
    if hidden_states is None:
        hidden_states = forward(bundle, batch)
    t = features.targets
    if fmt == "classification":
        return F.cross_entropy(head_forward(bundle, fmt, hidden_states), _tensor(t["labels"]))
    if fmt == "multiple_choice":
        logits = head_forward(bundle, fmt, hidden_states, num_choices=features.num_choices)
        return F.cross_entropy(logits, _tensor(t["labels"]))
    if fmt == "span_extraction":
        start, end = head_forward(bundle, fmt, hidden_states)
        allowed = span_candidates(batch)
        allowed[:, 0] = True
        start = start.masked_fill(~allowed, NEG_INF)
        end = end.masked_fill(~allowed, NEG_INF)
        return (F.cross_entropy(start, _tensor(t["start"])) + F.cross_entropy(end, _tensor(t["end"]))) / 2
    if fmt == "tagging":
        logits = head_forward(bundle, fmt, hidden_states, batch)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), _tensor(t["labels"]).reshape(-1),
                               ignore_index=IGNORE_LABEL)
    if fmt == "mlm":
        labels = _tensor(t["labels"])
        if not (labels != IGNORE_LABEL).any():
            return None
        logits = head_forward(bundle, fmt, hidden_states)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE_LABEL)
    raise ConfigurationError(f"unknown format {fmt!r}")


def decode_span(start, end, allowed, max_answer_length=30):
    """Best (s, e) with s <= e, e - s < max_answer_length over allowed positions."""
    start = start.masked_fill(~allowed, float("-inf"))
    end = end.masked_fill(~allowed, float("-inf"))
    T = start.shape[0]
    scores = start[:, None] + end[None, :]
    i = torch.arange(T)
    band = (i[None, :] >= i[:, None]) & (i[None, :] - i[:, None] < max_answer_length)
    scores = scores.masked_fill(~band, float("-inf"))
    flat = int(torch.argmax(scores))
    return flat // T, flat % T


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Layout:  MAGIC (8 bytes) | header length (u64 LE) | header JSON |
#          array bytes (concatenated, C order, little endian) | sha256 of all preceding bytes
#
# The header carries format_version, the EncoderConfig, head metadata and,
# per array, {name, dtype, shape, offset, nbytes} relative to the array block.


def save_checkpoint(bundle: ModelBundle, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays, blob, offset = [], io.BytesIO(), 0
    for name, t in bundle.state_dict().items():
        a = np.ascontiguousarray(t.detach().cpu().numpy())
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        arrays.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                       "nbytes": len(raw)})
        blob.write(raw)
        offset += len(raw)
    header = {"format_version": CHECKPOINT_VERSION, "config": bundle.config.to_dict(),
              "heads": {fmt: {"num_outputs": bundle.head_outputs.get(fmt)} for fmt in bundle.heads},
              "head_generation": dict(bundle.head_generation), "fingerprint": bundle.fingerprint,
              "arrays": arrays, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + blob.getvalue()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)
    return path


def read_checkpoint_header(path):
    data = Path(path).read_bytes()
    body, digest = _verify(data, path)
    (hlen,) = struct.unpack("<Q", body[8:16])
    return json.loads(body[16:16 + hlen])


def _verify(data, path):
    if len(data) < len(CHECKPOINT_MAGIC) + 8 + 32 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or too short)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch; file is truncated or corrupt")
    return body, digest


def load_checkpoint(path, expected_config: EncoderConfig | None = None) -> ModelBundle:
    data = Path(path).read_bytes()
    body, _ = _verify(data, path)
    (hlen,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16:16 + hlen])
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION}); "
            f"re-export it with a matching release")
    config = EncoderConfig.from_dict(header["config"])
    if expected_config is not None and expected_config != config:
        raise ConfigMismatchError(
            f"{path}: encoder config mismatch\n  checkpoint: {config.to_dict()}\n  expected:   {expected_config.to_dict()}")
    block = body[16 + hlen:]
    bundle = ModelBundle(config)
    for fmt, meta in sorted(header["heads"].items()):
        bundle.heads[fmt] = _make_head(fmt, config, meta["num_outputs"])
        bundle.head_outputs[fmt] = meta["num_outputs"]
    bundle.head_generation = dict(header.get("head_generation", {}))
    state = {}
    for a in header["arrays"]:
        raw = block[a["offset"]:a["offset"] + a["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(a["dtype"])).reshape(a["shape"])
        state[a["name"]] = torch.from_numpy(arr.copy())
    bundle.load_state_dict(state)
    bundle.eval()
    return bundle
