"""Shared test utilities: finite-difference gradient checks and feature builders."""
import numpy as np
import torch

from xltransfer.corpus import mlm_examples
from xltransfer.features import encode_examples
from xltransfer.model import head_loss, init_encoder, reinit_head
from xltransfer.sampling import MaskingPolicy, SeededRng

FORMAT_TASKS = {"classification": "paraphrase", "multiple_choice": "choice",
                "span_extraction": "span_qa", "tagging": "tagging", "mlm": None}


def features_for(fmt, world, tokenizer, n=3, max_length=32):
    if fmt == "mlm":
        examples = mlm_examples(world.corpora).get("train", "en")[:n]
        policy = MaskingPolicy(select_prob=0.5)
        return encode_examples("mlm", examples, tokenizer, max_length, masking=policy, rng=SeededRng(0))
    ds = world.tasks[FORMAT_TASKS[fmt]]
    return encode_examples(fmt, ds.get("train", "en")[:n], tokenizer, max_length, ds.spec.label_set)


def float64_bundle(config, fmt, seed=0, num_outputs=None):
    bundle = init_encoder(config, seed).double()
    reinit_head(bundle, fmt, seed, num_outputs)
    bundle.eval()
    return bundle


def gradient_check(bundle, fmt, feats, n_params=20, eps=1e-6, rtol=1e-3, atol=1e-8, seed=0):
    """Compare autograd with central differences on ``n_params`` scalar parameters.

    Entries with a nonzero analytic gradient are preferred so the check is
    not dominated by unused embedding rows. Returns a list of
    (name, index, analytic, numeric, ok).
    """
    params = [(name, p) for name, p in bundle.named_parameters()
              if name.startswith("encoder.") or name.startswith(f"heads.{fmt}.")]
    bundle.zero_grad()
    head_loss(bundle, fmt, feats).backward()
    flat = [(name, p, i) for name, p in params for i in range(p.numel())]
    live = [t for t in flat if p_grad(t) != 0.0]
    pool = live if len(live) >= n_params else flat
    picks = np.random.default_rng(seed).choice(len(pool), size=n_params, replace=False)
    out = []
    for k in picks:
        name, p, i = pool[int(k)]
        analytic = p_grad((name, p, i))
        view = p.data.view(-1)
        orig = view[i].item()
        with torch.no_grad():
            view[i] = orig + eps
            up = head_loss(bundle, fmt, feats).item()
            view[i] = orig - eps
            down = head_loss(bundle, fmt, feats).item()
            view[i] = orig
        numeric = (up - down) / (2 * eps)
        ok = abs(analytic - numeric) <= rtol * max(abs(analytic), abs(numeric)) + atol
        out.append((name, i, analytic, numeric, ok))
    return out


def p_grad(entry):
    _, p, i = entry
    return 0.0 if p.grad is None else p.grad.view(-1)[i].item()
