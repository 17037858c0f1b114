"""Three-phase training: MLM pretraining, intermediate tasks, target tasks.

Every phase seeds its own sampling streams and torch's dropout RNG from the
phase seed, so a phase's trajectory depends only on its input bundle and
config.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig, PhaseConfig
from .corpus import (Dataset, MLMExample, SyntheticWorld, gen_synthetic_world, load_world, retrieval_sides,
                     world_fingerprint)
from .exceptions import ConfigurationError
from .features import encode_examples, encode_sentences
from .metrics import (accuracy, mean_span_score, metric_record, mine_parallel, retrieval_accuracy,
                      tagging_f1)
from .model import (EmbeddingExtractor, EncoderConfig, ModelBundle, decode_span, forward, head_forward,
                    head_loss, init_encoder, load_checkpoint, reinit_head, save_checkpoint, sentence_embed,
                    span_candidates)
from .sampling import (LanguageMixture, MaskingPolicy, SeededRng, compute_language_rates,
                       compute_task_rates, sample_source)

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1


def lr_schedule(step, total_steps, peak, warmup_fraction=0.1) -> float:
    """Linear warmup to ``peak`` over ceil(warmup_fraction * total) steps, then linear decay to 0."""
    if total_steps <= 0:
        raise ConfigurationError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps}]")
    warm = math.ceil(warmup_fraction * total_steps)
    if warm > 0 and step <= warm:
        return peak * step / warm
    if total_steps == warm:
        return 0.0
    return peak * (total_steps - step) / (total_steps - warm)


# ---------------------------------------------------------------------------
# Batch sources
# ---------------------------------------------------------------------------

class TaskSource:
    """Endless batches from one task's train split, reshuffled every pass."""

    def __init__(self, name, spec, examples, batch_size, tokenizer, max_length, rng: SeededRng):
        if not examples:
            raise ConfigurationError(f"task {name!r} has no training examples")
        self.name, self.spec, self.examples = name, spec, examples
        self.batch_size, self.tokenizer, self.max_length = batch_size, tokenizer, max_length
        self.rng = rng
        self._order, self._pos = None, 0

    @property
    def fmt(self):
        return self.spec.format

    @property
    def size(self):
        return len(self.examples)

    def next_batch(self):
        picked = []
        while len(picked) < self.batch_size:
            if self._order is None or self._pos >= len(self._order):
                self._order, self._pos = self.rng.permutation(len(self.examples)), 0
            take = min(self.batch_size - len(picked), len(self._order) - self._pos)
            picked.extend(int(i) for i in self._order[self._pos:self._pos + take])
            self._pos += take
        exs = [self.examples[i] for i in picked]
        return encode_examples(self.fmt, exs, self.tokenizer, self.max_length, self.spec.label_set)


class MLMSource:
    """Masked batches: a language drawn from the language mixture, then a batch of its sentences."""

    fmt = "mlm"

    def __init__(self, corpora: dict, mixture: LanguageMixture, batch_size, tokenizer, max_length,
                 masking: MaskingPolicy, rng: SeededRng):
        empty = [lang for lang in mixture.rates if not corpora.get(lang)]
        if empty:
            raise ConfigurationError(f"empty MLM corpus for languages {empty}")
        self.corpora, self.mixture = corpora, mixture
        self.batch_size, self.tokenizer, self.max_length, self.masking = batch_size, tokenizer, max_length, masking
        self.rng = rng
        self.pick_rng = rng.child(1)
        self.mask_rng = rng.child(2)
        self.draws = {lang: 0 for lang in sorted(mixture.rates)}

    @property
    def size(self):
        return sum(len(v) for v in self.corpora.values())

    def next_batch(self):
        lang = sample_source(self.rng, self.mixture)
        self.draws[lang] += 1
        sents = self.corpora[lang]
        idx = self.pick_rng.integers(0, len(sents), size=self.batch_size)
        exs = [MLMExample(f"{lang}-{int(i)}", sents[int(i)], lang) for i in idx]
        return encode_examples("mlm", exs, self.tokenizer, self.max_length, masking=self.masking,
                               rng=self.mask_rng)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalContext:
    tokenizer: object
    max_length: int
    eval_batch_size: int = 64
    max_answer_length: int = 30
    extractor: EmbeddingExtractor = field(default_factory=EmbeddingExtractor)


def _chunks(seq, n):
    for i in range(0, len(seq), n):
        yield seq[i:i + n]


@torch.no_grad()
def predict(bundle: ModelBundle, spec, examples, ctx: EvalContext):
    """Per-example predictions: label / choice index / answer text / tag list."""
    bundle.eval()
    fmt, out = spec.format, []
    for chunk in _chunks(examples, ctx.eval_batch_size):
        feats = encode_examples(fmt, chunk, ctx.tokenizer, ctx.max_length, spec.label_set)
        hidden = forward(bundle, feats.batch)
        if fmt == "classification":
            idx = head_forward(bundle, fmt, hidden).argmax(-1).tolist()
            out.extend(spec.label_set[i] for i in idx)
        elif fmt == "multiple_choice":
            out.extend(head_forward(bundle, fmt, hidden, num_choices=feats.num_choices).argmax(-1).tolist())
        elif fmt == "tagging":
            logits = head_forward(bundle, fmt, hidden, feats.batch)
            pred = logits.argmax(-1).tolist()
            for ex, ws, p in zip(chunk, feats.batch.word_starts, pred):
                tags = [spec.label_set[i] for i in p[:len(ws)]]
                # words cut off by truncation get the first label
                out.append(tags + [spec.label_set[0]] * (len(ex.words) - len(tags)))
        elif fmt == "span_extraction":
            start, end = head_forward(bundle, fmt, hidden)
            allowed = span_candidates(feats.batch)
            for b, ex in enumerate(chunk):
                s, e = decode_span(start[b], end[b], allowed[b], ctx.max_answer_length)
                wids = feats.word_ids[b]
                ws, we = wids[s], wids[e]
                if ws < 0 or we < 0:
                    out.append("")
                    continue
                offs = feats.word_offsets[b]
                out.append(ex.context[offs[ws][0]:offs[we][1]])
        else:
            raise ConfigurationError(f"cannot predict format {fmt!r}")
    return out


def evaluate(bundle, spec, examples, ctx: EvalContext) -> dict:
    """Metric name -> value in [0, 1]."""
    if not examples:
        return {}
    preds = predict(bundle, spec, examples, ctx)
    fmt = spec.format
    if fmt == "classification":
        return {"accuracy": accuracy(preds, [ex.label for ex in examples])}
    if fmt == "multiple_choice":
        return {"accuracy": accuracy(preds, [ex.answer_index for ex in examples])}
    if fmt == "tagging":
        mode = "entity_bio" if spec.metric.startswith("entity") else "token_micro"
        return {"f1": tagging_f1(preds, [list(ex.tags) for ex in examples], mode)}
    if fmt == "span_extraction":
        s = mean_span_score(preds, [[a.text for a in ex.answers] for ex in examples])
        return {"f1": s.f1, "em": s.em}
    raise ConfigurationError(f"cannot evaluate format {fmt!r}")


def dev_metric(scores: dict) -> float:
    """Early-stopping criterion: accuracy for classification/choice, F1 for tagging/span."""
    return scores["accuracy"] if "accuracy" in scores else scores["f1"]


@torch.no_grad()
def embed_sentences(bundle, sentences, ctx: EvalContext) -> np.ndarray:
    bundle.eval()
    parts = [sentence_embed(bundle, encode_sentences(chunk, ctx.tokenizer, ctx.max_length), ctx.extractor)
             for chunk in _chunks(list(sentences), ctx.eval_batch_size)]
    if not parts:
        return np.zeros((0, bundle.config.hidden_size))
    return torch.cat(parts).double().numpy()


def _retrieval_split(bundle, examples, language, ctx):
    src, tgt = retrieval_sides(examples, language)
    src_emb = embed_sentences(bundle, [e.sentence for e in src], ctx)
    tgt_emb = embed_sentences(bundle, [e.sentence for e in tgt], ctx)
    tgt_by_pair = {e.pair_id: e.id for e in tgt if e.pair_id is not None}
    gold = {(e.id, tgt_by_pair[e.pair_id]) for e in src if e.pair_id in tgt_by_pair}
    return {"src": src_emb, "tgt": tgt_emb, "src_ids": [e.id for e in src], "tgt_ids": [e.id for e in tgt],
            "gold": gold, "src_pairs": [e.pair_id for e in src], "tgt_pairs": [e.pair_id for e in tgt]}


def evaluate_retrieval(bundle, dataset: Dataset, ctx: EvalContext) -> list:
    """Metric records for a retrieval task: mining F1 when a dev split exists, else NN accuracy."""
    name, recs = dataset.spec.name, []
    if "dev" in dataset.splits:
        for lang in dataset.languages("test"):
            dev = _retrieval_split(bundle, dataset.get("dev", lang), lang, ctx)
            test = _retrieval_split(bundle, dataset.get("test", lang), lang, ctx)
            res = mine_parallel(dev, test, lang)
            for split in ("dev", "test"):
                r = metric_record(name, lang, "f1", 100 * res[split].f1)
                r["split"] = split
                r["threshold"] = res[split].threshold
                recs.append(r)
        return recs
    for lang in dataset.languages("test"):
        sp = _retrieval_split(bundle, dataset.get("test", lang), lang, ctx)
        index = {p: j for j, p in enumerate(sp["tgt_pairs"])}
        gold = [index[p] for p in sp["src_pairs"]]
        r = metric_record(name, lang, "accuracy", 100 * retrieval_accuracy(sp["src"], sp["tgt"], gold))
        r["split"] = "test"
        recs.append(r)
    return recs


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _total_steps(phase: PhaseConfig, epoch_examples, batch_size):
    if phase.max_steps is not None:
        return int(phase.max_steps)
    return max(1, math.ceil(phase.num_epochs * epoch_examples / batch_size))


def _train(bundle: ModelBundle, sources: dict, mixture, phase: PhaseConfig, total_steps,
           dev_sets=None, ctx: EvalContext | None = None):
    """Shared optimisation loop; returns the phase record."""
    torch.manual_seed(phase.seed)
    rng = SeededRng(phase.seed)
    params = [p for p in bundle.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=0.0, betas=phase.adam_betas, eps=phase.adam_eps,
                            weight_decay=phase.weight_decay)
    losses, counts = [], {k: 0 for k in sorted(sources)}
    evals, best, best_state, since_best, stopped_at = [], None, None, 0, None
    dev_sets = dev_sets or {}
    es = phase.early_stop

    def run_eval(step):
        nonlocal best, best_state, since_best
        per_task = {}
        for name, (spec, exs) in sorted(dev_sets.items()):
            per_task[name] = evaluate(bundle, spec, exs[:es.dev_subset_size], ctx)
        score = float(np.mean([dev_metric(s) for s in per_task.values()]))
        evals.append({"step": step, "score": score, "tasks": per_task})
        if best is None or score > best:
            best, best_state, since_best = score, copy.deepcopy(bundle.state_dict()), 0
        else:
            since_best += 1
        bundle.train()

    bundle.train()
    for step in range(total_steps):
        lr = lr_schedule(step, total_steps, phase.learning_rate, phase.warmup_fraction)
        for g in opt.param_groups:
            g["lr"] = lr
        name = sample_source(rng, mixture)
        counts[name] += 1
        src = sources[name]
        feats = src.next_batch()
        loss = head_loss(bundle, src.fmt, feats)
        if loss is None:
            losses.append(None)
            continue
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if phase.max_grad_norm:
            torch.nn.utils.clip_grad_norm_(params, phase.max_grad_norm)
        opt.step()
        losses.append(float(loss.detach()))
        done = step + 1
        if dev_sets and (done % es.eval_interval_steps == 0 or done == total_steps):
            run_eval(done)
            if es.patience is not None and since_best > es.patience:
                stopped_at = done
                break
    if best_state is not None:
        bundle.load_state_dict(best_state)
    bundle.eval()
    return {
        "total_steps": total_steps,
        "steps_run": len(losses),
        "batch_counts": counts,
        "losses": losses,
        "evaluations": evals,
        "early_stop": {"best_score": best, "best_step": _best_step(evals), "stopped_at": stopped_at,
                       "dev_subset_size": es.dev_subset_size},
    }


def _best_step(evals):
    best = None
    for e in evals:
        if best is None or e["score"] > best["score"]:
            best = e
    return best["step"] if best else None


def _max_length(bundle):
    return bundle.config.max_sequence_length


def pretrain_mlm(bundle: ModelBundle, corpora: dict, language_mixture: LanguageMixture, phase: PhaseConfig,
                 tokenizer, masking: MaskingPolicy | None = None):
    """Masked-LM training; each step picks a language by its mixture rate."""
    if not bundle.has_head("mlm"):
        reinit_head(bundle, "mlm", phase.seed)
    rng = SeededRng(phase.seed).child(100)
    src = MLMSource(corpora, language_mixture, phase.batch_size, tokenizer, _max_length(bundle),
                    masking or MaskingPolicy(), rng)
    total = _total_steps(phase, src.size, phase.batch_size)
    single = compute_task_rates({"mlm": 1})
    record = _train(bundle, {"mlm": src}, single, phase, total)
    record["language_draws"] = dict(src.draws)
    record["language_mixture"] = language_mixture.to_dict()
    record["learning_rate"] = phase.learning_rate
    return bundle, record


def train_intermediate(bundle: ModelBundle, datasets: dict, phase: PhaseConfig, tokenizer, ctx: EvalContext,
                       corpora=None, language_mixture=None, masking=None):
    """Single- or multi-task training on English data, optionally with MLM as one more task."""
    variant = phase.variant
    tasks = list(phase.tasks)
    if not tasks:
        raise ConfigurationError("intermediate phase lists no tasks")
    if variant.startswith("single") and len(tasks) != 1:
        raise ConfigurationError(f"variant {variant!r} takes exactly one task, got {tasks}")
    for t in tasks:
        if t not in datasets:
            raise ConfigurationError(f"unknown intermediate task {t!r}")
        if datasets[t].spec.format == "retrieval" or not datasets[t].spec.has_train:
            raise ConfigurationError(f"task {t!r} has no training data and cannot be an intermediate task")
    base = SeededRng(phase.seed)
    sources, dev_sets = {}, {}
    for i, t in enumerate(tasks):
        ds = datasets[t]
        spec = ds.spec
        reinit_head(bundle, spec.format, phase.seed + i, len(spec.label_set) if spec.label_set else None)
        sources[t] = TaskSource(t, spec, ds.get("train", "en"), phase.batch_size_for(t), tokenizer,
                                _max_length(bundle), base.child(10 + i))
        dev = ds.get("dev", "en")
        if dev:
            dev_sets[t] = (spec, dev)
    if phase.include_mlm:
        if corpora is None or language_mixture is None:
            raise ConfigurationError("MLM variants need corpora and a language mixture")
        reinit_head(bundle, "mlm", phase.seed + len(tasks))
        sources["mlm"] = MLMSource(corpora, language_mixture, phase.batch_size_for("mlm"), tokenizer,
                                   _max_length(bundle), masking or MaskingPolicy(), base.child(99))
    mixture = compute_task_rates({k: s.size for k, s in sources.items()}, phase.cap_K)
    mean_batch = sum(mixture.rates[k] * phase.batch_size_for(k) for k in sources)
    epoch_examples = mixture.epoch_examples
    total = _total_steps(phase, epoch_examples, mean_batch)
    bundle.train()
    record = _train(bundle, sources, mixture, phase, total, dev_sets, ctx)
    record.update({"variant": variant, "tasks": tasks, "mixture": mixture.to_dict(),
                   "epoch_examples": epoch_examples, "learning_rate": phase.learning_rate})
    if "mlm" in sources:
        record["language_draws"] = dict(sources["mlm"].draws)
    return bundle, record


def train_target(bundle: ModelBundle, dataset: Dataset, phase: PhaseConfig | None, tokenizer, ctx: EvalContext):
    """Fine-tune a fresh head on English data, then score every language.

    Retrieval tasks skip training and are scored from sentence embeddings.
    """
    spec = dataset.spec
    if spec.format == "retrieval":
        bundle.eval()
        return bundle, {"steps_run": 0, "total_steps": 0, "metrics": evaluate_retrieval(bundle, dataset, ctx),
                        "eval_split": "test", "head_reinitialized": False, "task_metric": spec.metric}
    if phase is None:
        raise ConfigurationError(f"target task {spec.name!r} is trainable and needs a phase config")
    train = dataset.get("train", "en")
    if not train:
        raise ConfigurationError(f"target task {spec.name!r} has no English train split")
    # only the encoder carries over from earlier phases
    bundle.drop_heads()
    reinit_head(bundle, spec.format, phase.seed, len(spec.label_set) if spec.label_set else None)
    src = TaskSource(spec.name, spec, train, phase.batch_size, tokenizer, _max_length(bundle),
                     SeededRng(phase.seed).child(10))
    total = _total_steps(phase, len(train), phase.batch_size)
    dev = dataset.get("dev", "en")
    dev_sets = {spec.name: (spec, dev)} if dev else {}
    record = _train(bundle, {spec.name: src}, compute_task_rates({spec.name: 1}), phase, total, dev_sets, ctx)
    metrics, absent = [], []
    for split in ("dev", "test"):
        for lang in spec.languages:
            exs = dataset.get(split, lang)
            if not exs:
                absent.append(f"{split}/{lang}")
                continue
            for name, value in evaluate(bundle, spec, exs, ctx).items():
                r = metric_record(spec.name, lang, name, 100 * value)
                r["split"] = split
                metrics.append(r)
    record.update({"metrics": metrics, "absent": absent, "eval_split": "test", "head_reinitialized": True,
                   "learning_rate": phase.learning_rate, "task_metric": spec.metric})
    return bundle, record


# ---------------------------------------------------------------------------
# Experiment orchestration
# ---------------------------------------------------------------------------

def build_world(config: ExperimentConfig) -> SyntheticWorld:
    if isinstance(config.world, str):
        return load_world(config.world)
    return gen_synthetic_world(config.world)


def encoder_config_for(config: ExperimentConfig, tokenizer) -> EncoderConfig:
    return EncoderConfig(vocab_size=len(tokenizer), **config.encoder)


def language_mixture_for(world: SyntheticWorld, alpha) -> LanguageMixture:
    return compute_language_rates({lang: len(s) for lang, s in world.corpora.items()}, alpha)


def _software():
    return {"package": __version__, "torch": torch.__version__, "numpy": np.__version__,
            "python": platform.python_version()}


def _write_manifest(manifest, output_dir):
    if output_dir is None:
        return None
    path = Path(output_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def run_experiment(config: ExperimentConfig, world: SyntheticWorld | None = None):
    """Run every configured phase in order; returns ``(manifest, bundle_after_intermediate)``.

    A checkpoint is written after each phase when ``output_dir`` is set.
    If a phase fails, the manifest is written up to the failure and the
    error re-raised.
    """
    out = Path(config.output_dir) if config.output_dir else None
    manifest = {"schema_version": MANIFEST_SCHEMA_VERSION, "config_hash": config.config_hash,
                "config": config.to_dict(), "software": _software(), "phases": {}, "targets": {},
                "status": "running"}
    timings = {}
    try:
        world = world or build_world(config)
        tok = world.tokenizer
        manifest["world"] = {"fingerprint": world_fingerprint(world), "languages": world.languages}
        enc_cfg = encoder_config_for(config, tok)
        manifest["seeds"] = {"encoder": config.encoder_seed}
        ctx = EvalContext(tok, enc_cfg.max_sequence_length, config.eval_batch_size, config.max_answer_length,
                          config.extractor)
        manifest["extractor"] = {"layer_index": config.extractor.layer_index, "pooling": config.extractor.pooling}
        lang_mix = language_mixture_for(world, config.language_alpha)

        t0 = time.perf_counter()
        if isinstance(config.pretrain, str):
            bundle = load_checkpoint(config.pretrain, enc_cfg)
            manifest["phases"]["pretrain"] = {"loaded_from": config.pretrain, "steps_run": 0}
        else:
            bundle = init_encoder(enc_cfg, config.encoder_seed)
            if config.pretrain is not None:
                manifest["seeds"]["pretrain"] = config.pretrain.seed
                bundle, rec = pretrain_mlm(bundle, world.corpora, lang_mix, config.pretrain, tok, config.masking)
                manifest["phases"]["pretrain"] = rec
        manifest["phases"].setdefault("pretrain", {"steps_run": 0})["fingerprint"] = bundle.fingerprint
        timings["pretrain"] = time.perf_counter() - t0
        if out:
            save_checkpoint(bundle, out / "pretrain.ckpt")

        t0 = time.perf_counter()
        if config.intermediate is not None:
            manifest["seeds"]["intermediate"] = config.intermediate.seed
            bundle, rec = train_intermediate(bundle, world.tasks, config.intermediate, tok, ctx,
                                             world.corpora, lang_mix, config.masking)
            rec["fingerprint"] = bundle.fingerprint
            manifest["phases"]["intermediate"] = rec
            if out:
                save_checkpoint(bundle, out / "intermediate.ckpt")
        timings["intermediate"] = time.perf_counter() - t0

        for target in config.targets:
            if target.task not in world.tasks:
                raise ConfigurationError(f"unknown target task {target.task!r}")
            ds = world.tasks[target.task]
            if ds.spec.format == "retrieval" and target.phase is not None:
                raise ConfigurationError(f"retrieval target {target.task!r} takes no phase config")
            t0 = time.perf_counter()
            tb = copy.deepcopy(bundle).drop_heads()
            tb, rec = train_target(tb, ds, target.phase, tok, ctx)
            if target.phase is not None:
                manifest["seeds"][f"target:{target.task}"] = target.phase.seed
            manifest["targets"][target.task] = rec
            timings[f"target:{target.task}"] = time.perf_counter() - t0
            if out and ds.spec.format != "retrieval":
                save_checkpoint(tb, out / f"target-{target.task}.ckpt")
        manifest["status"] = "complete"
    except Exception as err:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(err).__name__}: {err}"
        _write_manifest(manifest, out)
        if out:
            (out / "timings.json").write_text(json.dumps(timings, indent=1))
        raise
    _write_manifest(manifest, out)
    if out:
        # wall-clock times vary between runs, so they stay out of the manifest
        (out / "timings.json").write_text(json.dumps(timings, indent=1))
    return manifest, bundle
