"""Task data model, tokenization and the synthetic multilingual world.

The synthetic world stands in for real corpora: every language is a
token-level bijective cipher of one shared grammar, so parallel pairs,
label-preserving tags and retrieval gold pairs are exact by construction.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigurationError, SchemaError

logger = logging.getLogger(__name__)

FORMATS = ("classification", "multiple_choice", "span_extraction", "tagging", "mlm", "retrieval")
LABELLED_FORMATS = ("classification", "tagging")

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, MASK, UNK)
CONTINUATION = "##"


# ---------------------------------------------------------------------------
# Task specs and examples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    name: str
    format: str
    metric: str
    languages: tuple = ("en",)
    label_set: tuple | None = None
    has_train: bool = True

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ConfigurationError(f"unknown task format {self.format!r}; expected one of {FORMATS}")
        wants_labels = self.format in LABELLED_FORMATS
        if wants_labels and not self.label_set:
            raise ConfigurationError(f"task {self.name!r}: format {self.format} requires a label_set")
        if not wants_labels and self.label_set:
            raise ConfigurationError(f"task {self.name!r}: format {self.format} takes no label_set")
        if self.has_train == (self.format == "retrieval"):
            raise ConfigurationError(
                f"task {self.name!r}: has_train must be false exactly for retrieval tasks")
        object.__setattr__(self, "languages", tuple(self.languages))
        if self.label_set is not None:
            object.__setattr__(self, "label_set", tuple(self.label_set))

    def to_dict(self):
        d = asdict(self)
        d["languages"] = list(self.languages)
        d["label_set"] = list(self.label_set) if self.label_set else None
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class ClassificationExample:
    id: str
    text_a: str
    label: str
    text_b: str | None = None


@dataclass(frozen=True)
class MultipleChoiceExample:
    id: str
    context: str
    question: str
    choices: tuple
    answer_index: int


@dataclass(frozen=True)
class Answer:
    text: str
    start_char: int


@dataclass(frozen=True)
class SpanExample:
    id: str
    context: str
    question: str
    answers: tuple


@dataclass(frozen=True)
class TaggingExample:
    id: str
    words: tuple
    tags: tuple


@dataclass(frozen=True)
class MLMExample:
    id: str
    text: str
    language: str


@dataclass(frozen=True)
class RetrievalExample:
    id: str
    sentence: str
    language: str
    pair_id: str | None = None


EXAMPLE_TYPES = {
    "classification": ClassificationExample,
    "multiple_choice": MultipleChoiceExample,
    "span_extraction": SpanExample,
    "tagging": TaggingExample,
    "mlm": MLMExample,
    "retrieval": RetrievalExample,
}


def validate_example(ex, spec: TaskSpec):
    """Check the per-format invariants; raises ``ValueError`` with a reason."""
    if not isinstance(ex, EXAMPLE_TYPES[spec.format]):
        raise ValueError(f"expected {EXAMPLE_TYPES[spec.format].__name__}, got {type(ex).__name__}")
    if spec.format == "classification" and ex.label not in spec.label_set:
        raise ValueError(f"label {ex.label!r} not in label_set")
    elif spec.format == "tagging":
        if len(ex.words) != len(ex.tags):
            raise ValueError(f"|words|={len(ex.words)} != |tags|={len(ex.tags)}")
        bad = [t for t in ex.tags if t not in spec.label_set]
        if bad:
            raise ValueError(f"tags {bad[:3]} not in label_set")
    elif spec.format == "span_extraction":
        if not ex.answers:
            raise ValueError("span example needs at least one answer")
        for a in ex.answers:
            found = ex.context[a.start_char:a.start_char + len(a.text)]
            if a.start_char < 0 or found != a.text:
                raise ValueError(
                    f"answer {a.text!r} does not match context at start_char={a.start_char} (found {found!r})")
    elif spec.format == "multiple_choice":
        if not 0 <= ex.answer_index < len(ex.choices):
            raise ValueError(f"answer_index {ex.answer_index} out of range for {len(ex.choices)} choices")


def example_to_record(ex) -> dict:
    d = asdict(ex)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def example_from_record(rec: dict, fmt: str):
    rec = dict(rec)
    if fmt == "multiple_choice":
        rec["choices"] = tuple(rec["choices"])
    elif fmt == "span_extraction":
        rec["answers"] = tuple(Answer(a["text"], int(a["start_char"])) for a in rec["answers"])
    elif fmt == "tagging":
        rec["words"], rec["tags"] = tuple(rec["words"]), tuple(rec["tags"])
    return EXAMPLE_TYPES[fmt](**rec)


@dataclass
class Dataset:
    """A task's examples keyed by split, then by language group.

    Retrieval examples sit under the language group of their non-English
    side; both sides of a sub-task share the group.
    """
    spec: TaskSpec
    splits: dict = field(default_factory=dict)

    def get(self, split, language="en"):
        return self.splits.get(split, {}).get(language, [])

    def languages(self, split):
        return sorted(self.splits.get(split, {}))

    def add(self, split, language, examples):
        self.splits.setdefault(split, {}).setdefault(language, []).extend(examples)


def load_jsonl_task(path, spec: TaskSpec) -> Dataset:
    """Load a JSONL task file.

    Each line holds one example record; the optional envelope keys
    ``split`` (default ``"train"``) and ``lang`` (default ``"en"``) place it.
    """
    path = Path(path)
    ds = Dataset(spec)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                split = rec.pop("split", "train")
                lang = rec.pop("lang", "en")
                ex = example_from_record(rec, spec.format)
                validate_example(ex, spec)
            except (ValueError, TypeError, KeyError) as err:
                raise SchemaError(f"{path}:{lineno}: {err}", line=lineno) from err
            ds.add(split, lang, [ex])
    if spec.has_train and "train" not in ds.splits:
        raise ConfigurationError(f"{path}: task {spec.name!r} has training data but no 'train' split")
    return ds


def write_jsonl_task(path, dataset: Dataset):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for split in sorted(dataset.splits):
            for lang in sorted(dataset.splits[split]):
                for ex in dataset.splits[split][lang]:
                    rec = {"split": split, "lang": lang, **example_to_record(ex)}
                    fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

@dataclass
class TokenizedBatch:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    word_starts: list
    type_ids: np.ndarray | None = None
    truncated: list = field(default_factory=list)

    def __len__(self):
        return self.input_ids.shape[0]


@dataclass
class Encoding:
    """One tokenized row with its word alignment."""
    ids: list
    word_starts: list
    type_ids: list
    word_ids: list  # word index per position, -1 for specials and the first segment
    truncated: bool = False


class Tokenizer:
    """Whitespace words, each mapped to one or two pieces.

    Continuation pieces carry the ``##`` prefix. Words outside the vocabulary
    become a single ``[UNK]``.
    """

    def __init__(self, splits: dict):
        self.splits = {w: tuple(p) for w, p in splits.items()}
        pieces = sorted({p for ps in self.splits.values() for p in ps})
        self.vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for p in pieces:
            self.vocab.setdefault(p, len(self.vocab))
        self.inv_vocab = {i: t for t, i in self.vocab.items()}

    @classmethod
    def build(cls, words: Iterable[str], split_probability: float, seed: int):
        """Decide a 2-piece split for each word with a seeded coin."""
        rng = np.random.Generator(np.random.PCG64(seed))
        splits = {}
        for w in sorted(set(words)):
            u, cut = rng.random(), rng.random()
            if len(w) >= 2 and u < split_probability:
                k = 1 + int(cut * (len(w) - 1))
                splits[w] = (w[:k], CONTINUATION + w[k:])
            else:
                splits[w] = (w,)
        return cls(splits)

    @property
    def pad_id(self):
        return self.vocab[PAD]

    @property
    def cls_id(self):
        return self.vocab[CLS]

    @property
    def sep_id(self):
        return self.vocab[SEP]

    @property
    def mask_id(self):
        return self.vocab[MASK]

    @property
    def unk_id(self):
        return self.vocab[UNK]

    @property
    def special_ids(self):
        return frozenset(self.vocab[t] for t in SPECIAL_TOKENS)

    def __len__(self):
        return len(self.vocab)

    def word_pieces(self, word):
        pieces = self.splits.get(word)
        if pieces is None:
            return [self.unk_id]
        return [self.vocab[p] for p in pieces]

    def encode(self, text_or_words, pair=None, max_length=None) -> Encoding:
        """``[CLS] a [SEP]`` or ``[CLS] a [SEP] b [SEP]``.

        ``word_starts`` and ``word_ids`` index the words of the last segment
        (the only segment for single inputs). Truncation drops trailing
        subwords of the last segment and keeps the final ``[SEP]``.
        """
        first = _as_words(text_or_words)
        ids, type_ids, word_ids = [self.cls_id], [0], [-1]
        if pair is not None:
            for w in first:
                for p in self.word_pieces(w):
                    ids.append(p), type_ids.append(0), word_ids.append(-1)
            ids.append(self.sep_id), type_ids.append(0), word_ids.append(-1)
            last, seg = _as_words(pair), 1
        else:
            last, seg = first, 0
        word_starts = []
        for wi, w in enumerate(last):
            word_starts.append(len(ids))
            for p in self.word_pieces(w):
                ids.append(p), type_ids.append(seg), word_ids.append(wi)
        ids.append(self.sep_id), type_ids.append(seg), word_ids.append(-1)
        truncated = False
        if max_length is not None and len(ids) > max_length:
            truncated = True
            ids = ids[:max_length - 1] + [self.sep_id]
            type_ids = type_ids[:max_length - 1] + [seg]
            word_ids = word_ids[:max_length - 1] + [-1]
            word_starts = [s for s in word_starts if s < max_length - 1]
        return Encoding(ids, word_starts, type_ids, word_ids, truncated)

    def decode(self, ids, skip_special=True) -> str:
        words = []
        specials = {self.pad_id, self.cls_id, self.sep_id}
        for i in ids:
            i = int(i)
            if skip_special and i in specials:
                continue
            tok = self.inv_vocab.get(i, UNK)
            if tok.startswith(CONTINUATION) and words:
                words[-1] += tok[len(CONTINUATION):]
            else:
                words.append(tok)
        return " ".join(words)

    def normalize(self, text) -> str:
        """What ``decode(encode(text))`` is expected to return."""
        return " ".join(w if w in self.splits else UNK for w in _as_words(text))

    def to_dict(self):
        return {"splits": {w: list(p) for w, p in sorted(self.splits.items())}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["splits"])


def _as_words(text_or_words) -> list:
    if isinstance(text_or_words, str):
        return text_or_words.split()
    return list(text_or_words)


def tokenize(text_or_words, tokenizer: Tokenizer, max_length=None) -> Encoding:
    return tokenizer.encode(text_or_words, max_length=max_length)


def collate(encodings: Sequence[Encoding], pad_id=0) -> TokenizedBatch:
    """Right-pad encodings into one batch."""
    T = max((len(e.ids) for e in encodings), default=0)
    B = len(encodings)
    ids = np.full((B, T), pad_id, dtype=np.int64)
    mask = np.zeros((B, T), dtype=np.int64)
    types = np.zeros((B, T), dtype=np.int64)
    for b, e in enumerate(encodings):
        n = len(e.ids)
        ids[b, :n] = e.ids
        mask[b, :n] = 1
        types[b, :n] = e.type_ids
    return TokenizedBatch(ids, mask, [list(e.word_starts) for e in encodings], types,
                          [e.truncated for e in encodings])


# ---------------------------------------------------------------------------
# Synthetic world
# ---------------------------------------------------------------------------

WORD_CLASSES = ("DET", "ADJ", "NOUN", "VERB", "ADV", "PREP")
# share of the per-language vocabulary given to each class
CLASS_SHARES = {"DET": 0.05, "ADJ": 0.2, "NOUN": 0.35, "VERB": 0.2, "ADV": 0.1, "PREP": 0.1}
SYNONYM_CLASSES = ("ADJ", "NOUN", "VERB", "ADV")
QUESTION_CLASSES = ("NOUN", "VERB", "ADJ")
PARAPHRASE_LABELS = ("different", "paraphrase")

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SyntheticWorldConfig:
    seed: int = 0
    num_languages: int = 3
    vocab_size_per_language: int = 240
    sentence_length: tuple = (5, 12)
    corpus_sentences_per_language: int = 2000
    subword_split_probability: float = 0.3
    retrieval_distractor_count: int = 40
    shared_word_fraction: float = 0.1
    parallel_pairs: int = 200
    task_train_size: int = 2000
    task_eval_size: int = 200
    retrieval_size: int = 100
    num_choices: int = 4
    num_topics: int = 24
    topic_coherence: float = 0.9
    negative_change_fraction: float = 0.5
    code_switch_probability: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "sentence_length", tuple(self.sentence_length))
        lo, hi = self.sentence_length
        if self.num_languages < 1:
            raise ConfigurationError("num_languages must be >= 1")
        if not 2 <= lo <= hi:
            raise ConfigurationError(f"sentence_length must satisfy 2 <= lo <= hi, got {self.sentence_length}")
        if not 0.0 <= self.subword_split_probability <= 1.0:
            raise ConfigurationError("subword_split_probability must lie in [0, 1]")
        if not 0.0 <= self.shared_word_fraction < 1.0:
            raise ConfigurationError("shared_word_fraction must lie in [0, 1)")
        for name in ("corpus_sentences_per_language", "parallel_pairs", "task_train_size",
                     "task_eval_size", "retrieval_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.retrieval_distractor_count < 0:
            raise ConfigurationError("retrieval_distractor_count must be >= 0")
        if self.num_choices < 2:
            raise ConfigurationError("num_choices must be >= 2")
        if self.num_topics < 1:
            raise ConfigurationError("num_topics must be >= 1")
        if not 0.0 <= self.code_switch_probability <= 1.0:
            raise ConfigurationError("code_switch_probability must lie in [0, 1]")
        if not 0.0 <= self.negative_change_fraction <= 1.0:
            raise ConfigurationError("negative_change_fraction must lie in [0, 1]")
        if not 0.0 <= self.topic_coherence <= 1.0:
            raise ConfigurationError("topic_coherence must lie in [0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["sentence_length"] = list(self.sentence_length)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def language_codes(n):
    return ["en"] + [f"l{i}" for i in range(1, n)]


class Lexicon:
    """Shared meaning inventory plus one surface form per (language, word slot).

    Word slots are language-independent; the cipher between two languages
    maps the surface form of a slot in one to the slot's form in the other.
    """

    def __init__(self, classes, meanings, surfaces, questions, topics=None):
        self.classes = classes      # class -> list of slot ids
        self.meanings = meanings    # class -> list of tuples of slot ids (synonym groups)
        self.surfaces = surfaces    # lang -> list of surface strings indexed by slot
        self.questions = questions  # lang -> {class: surface string}
        # class -> per-topic list of meanings (content classes only)
        self.topics = topics or {}
        self.slot_class = {s: c for c, slots in classes.items() for s in slots}
        self.slot_meaning = {}
        for c, groups in meanings.items():
            for m, group in enumerate(groups):
                for s in group:
                    self.slot_meaning[s] = (c, m)
        self._index = {lang: {w: i for i, w in enumerate(forms)} for lang, forms in surfaces.items()}

    @property
    def languages(self):
        return list(self.surfaces)

    def surface(self, slots, lang):
        forms = self.surfaces[lang]
        return [forms[s] for s in slots]

    def slots(self, words, lang):
        index = self._index[lang]
        return [index[w] for w in words]

    def cipher(self, words, src, tgt):
        return self.surface(self.slots(words, src), tgt)

    def all_words(self):
        words = set()
        for lang in self.surfaces:
            words.update(self.surfaces[lang])
            words.update(self.questions[lang].values())
        return words


def _build_lexicon(cfg: SyntheticWorldConfig, rng) -> Lexicon:
    langs = language_codes(cfg.num_languages)
    sizes = {c: max(1, int(round(cfg.vocab_size_per_language * CLASS_SHARES[c]))) for c in WORD_CLASSES}
    for c in SYNONYM_CLASSES:
        if sizes[c] < 4:
            raise ConfigurationError(
                f"vocab_size_per_language={cfg.vocab_size_per_language} too small: "
                f"class {c} needs at least 4 words to build synonym groups")
    classes, meanings, slot = {}, {}, 0
    for c in WORD_CLASSES:
        classes[c] = list(range(slot, slot + sizes[c]))
        slot += sizes[c]
        if c in SYNONYM_CLASSES:
            slots = classes[c]
            groups = [tuple(slots[i:i + 2]) for i in range(0, len(slots) - 1, 2)]
            if len(slots) % 2:
                groups[-1] = groups[-1] + (slots[-1],)
            meanings[c] = groups
        else:
            meanings[c] = [(s,) for s in classes[c]]
    n_slots = slot
    noun_slots = classes["NOUN"]
    n_shared = int(round(cfg.shared_word_fraction * len(noun_slots)))
    shared = set(int(s) for s in rng.choice(noun_slots, size=n_shared, replace=False)) if n_shared else set()

    needed = n_slots * len(langs) + len(QUESTION_CLASSES) * len(langs)
    taken = {"a", "an", "the"}
    surfaces, questions = {}, {}

    def fresh(syllables):
        for _ in range(10_000):
            n_syl = int(rng.integers(1, 4))
            w = "".join(syllables[int(rng.integers(len(syllables)))] for _ in range(n_syl))
            if len(w) >= 3 and w not in taken:
                taken.add(w)
                return w
        raise ConfigurationError("could not generate enough distinct surface words")

    for li, lang in enumerate(langs):
        # each language draws from its own syllable inventory
        cons = "".join(rng.permutation(list(_CONSONANTS))[:10])
        syllables = sorted({a + b for a in cons for b in _VOWELS} | {b + a for a in cons[:4] for b in _VOWELS})
        if len(syllables) ** 3 < needed:
            raise ConfigurationError("vocabulary too large for the syllable inventory")
        forms = []
        for s in range(n_slots):
            if li > 0 and s in shared:
                forms.append(surfaces["en"][s])
            else:
                forms.append(fresh(syllables))
        surfaces[lang] = forms
        questions[lang] = {c: fresh(syllables) for c in QUESTION_CLASSES}
    # topics partition each content class's meanings
    topics = {}
    for c in SYNONYM_CLASSES:
        owner = rng.permutation(len(meanings[c])) % cfg.num_topics
        topics[c] = [[m for m in range(len(owner)) if owner[m] == t] for t in range(cfg.num_topics)]
    return Lexicon(classes, meanings, surfaces, questions, topics)


def _class_sequence(rng, lo, hi):
    """Sample a class sequence from a tiny phrase grammar, length in [lo, hi]."""
    def np_phrase():
        seq = []
        if rng.random() < 0.7:
            seq.append("DET")
        seq.extend(["ADJ"] * int(rng.integers(0, 3)))
        seq.append("NOUN")
        return seq

    for _ in range(100):
        seq = np_phrase() + ["VERB"]
        if rng.random() < 0.8:
            seq += np_phrase()
        while rng.random() < 0.5:
            seq += ["PREP"] + np_phrase()
        if rng.random() < 0.4:
            seq.append("ADV")
        if lo <= len(seq) <= hi:
            return seq
    # fallback: pad or trim deterministically
    seq = seq[:hi]
    while len(seq) < lo:
        seq.append("ADV" if seq[-1] != "ADV" else "NOUN")
    return seq


@dataclass
class Sentence:
    """A sentence in the shared meaning space: (class, meaning) per word."""
    meanings: list

    def realize(self, lex: Lexicon, rng) -> list:
        slots = []
        for c, m in self.meanings:
            group = lex.meanings[c][m]
            slots.append(group[int(rng.integers(len(group)))])
        return slots

    @property
    def classes(self):
        return [c for c, _ in self.meanings]


def _sample_sentence(lex: Lexicon, cfg, rng) -> Sentence:
    """Content words mostly come from one topic per sentence."""
    seq = _class_sequence(rng, *cfg.sentence_length)
    topic = int(rng.integers(cfg.num_topics))
    out = []
    for c in seq:
        pool = lex.topics[c][topic % len(lex.topics[c])] if c in lex.topics else None
        if pool and rng.random() < cfg.topic_coherence:
            out.append((c, pool[int(rng.integers(len(pool)))]))
        else:
            out.append((c, int(rng.integers(len(lex.meanings[c])))))
    return Sentence(out)


def _code_switched(lex: Lexicon, slots, lang, p, rng):
    """Surface forms in ``lang``; each word switches to another language with probability ``p``."""
    others = [l for l in lex.languages if l != lang]
    words = []
    for s in slots:
        use = lang
        if others and p and rng.random() < p:
            use = others[int(rng.integers(len(others)))]
        words.append(lex.surfaces[use][s])
    return words


def _perturb(sent: Sentence, lex: Lexicon, rng, fraction=0.0) -> Sentence:
    """Swap content meanings for other meanings of the same class.

    Each content word changes with probability ``fraction``; at least one
    (and with ``fraction=0`` one or two) always change.
    """
    content = [i for i, (c, _) in enumerate(sent.meanings) if c in SYNONYM_CLASSES]
    k = int(sum(rng.random() < fraction for _ in content)) if fraction else 1 + int(rng.integers(2))
    k = min(len(content), max(1, k))
    out = list(sent.meanings)
    for i in rng.choice(content, size=k, replace=False):
        c, m = out[int(i)]
        n = len(lex.meanings[c])
        out[int(i)] = (c, (m + 1 + int(rng.integers(n - 1))) % n)
    return Sentence(out)


def _paraphrase_slots(sent: Sentence, slots, lex: Lexicon, rng):
    """Re-realize with synonyms; guarantees at least one changed word when possible."""
    for _ in range(20):
        new = sent.realize(lex, rng)
        if new != slots:
            return new
    return new


@dataclass
class SyntheticWorld:
    config: SyntheticWorldConfig
    lexicon: Lexicon
    tokenizer: Tokenizer
    corpora: dict                 # lang -> list[str]
    pairs: dict                   # lang -> list[(en sentence, lang sentence)]
    tasks: dict                   # task name -> Dataset

    @property
    def languages(self):
        return self.lexicon.languages

    def cipher(self, sentence, src, tgt):
        return " ".join(self.lexicon.cipher(sentence.split(), src, tgt))

    def save(self, output_dir) -> Path:
        """Write corpora, pairs, task files and ``world.json``; return the manifest path."""
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"schema_version": 1, "config": self.config.to_dict(),
                    "corpora": {}, "pairs": {}, "tasks": {},
                    "tokenizer": "tokenizer.json", "lexicon": "lexicon.json"}
        for lang, sents in self.corpora.items():
            rel = f"corpora/{lang}.txt"
            _write_lines(out / rel, sents)
            manifest["corpora"][lang] = rel
        for lang, prs in self.pairs.items():
            rel = f"pairs/en-{lang}.tsv"
            _write_lines(out / rel, [f"{a}\t{b}" for a, b in prs])
            manifest["pairs"][lang] = rel
        for name, ds in self.tasks.items():
            rel = f"tasks/{name}.jsonl"
            write_jsonl_task(out / rel, ds)
            manifest["tasks"][name] = {"path": rel, "spec": ds.spec.to_dict()}
        _write_json(out / "tokenizer.json", self.tokenizer.to_dict())
        lex = self.lexicon
        _write_json(out / "lexicon.json", {
            "classes": lex.classes, "meanings": {c: [list(g) for g in gs] for c, gs in lex.meanings.items()},
            "surfaces": lex.surfaces, "questions": lex.questions, "topics": lex.topics})
        _write_json(out / "world.json", manifest)
        return out / "world.json"


def load_world(manifest_path) -> SyntheticWorld:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    m = json.loads(manifest_path.read_text(encoding="utf-8"))
    lj = json.loads((root / m["lexicon"]).read_text(encoding="utf-8"))
    lex = Lexicon(lj["classes"], {c: [tuple(g) for g in gs] for c, gs in lj["meanings"].items()},
                  lj["surfaces"], lj["questions"], lj.get("topics"))
    tok = Tokenizer.from_dict(json.loads((root / m["tokenizer"]).read_text(encoding="utf-8")))
    corpora = {lang: _read_lines(root / rel) for lang, rel in m["corpora"].items()}
    pairs = {lang: [tuple(line.split("\t")) for line in _read_lines(root / rel)]
             for lang, rel in m["pairs"].items()}
    tasks = {name: load_jsonl_task(root / t["path"], TaskSpec.from_dict(t["spec"]))
             for name, t in m["tasks"].items()}
    return SyntheticWorld(SyntheticWorldConfig.from_dict(m["config"]), lex, tok, corpora, pairs, tasks)


def world_fingerprint(world: SyntheticWorld) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(world.config.to_dict(), sort_keys=True).encode())
    for lang in sorted(world.corpora):
        h.update("\n".join(world.corpora[lang]).encode())
    return h.hexdigest()[:16]


def _write_lines(path, lines):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _read_lines(path):
    with Path(path).open(encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def gen_synthetic_world(config: SyntheticWorldConfig) -> SyntheticWorld:
    """Build corpora, parallel pairs and derived tasks from one seed.

    Every task has an English train split (except retrieval) and dev/test
    splits in every language, obtained by ciphering the English material.
    """
    cfg = config
    root = np.random.SeedSequence(cfg.seed)
    lex_ss, tok_ss, corp_ss, pair_ss, task_ss = root.spawn(5)
    lex = _build_lexicon(cfg, np.random.Generator(np.random.PCG64(lex_ss)))
    tok_seed = int(tok_ss.generate_state(1)[0])
    tokenizer = Tokenizer.build(lex.all_words(), cfg.subword_split_probability, tok_seed)
    langs = lex.languages

    corpora = {}
    for lang, ss in zip(langs, corp_ss.spawn(len(langs))):
        rng = np.random.Generator(np.random.PCG64(ss))
        corpora[lang] = [" ".join(_code_switched(lex, _sample_sentence(lex, cfg, rng).realize(lex, rng), lang,
                                                 cfg.code_switch_probability, rng))
                         for _ in range(cfg.corpus_sentences_per_language)]

    rng = np.random.Generator(np.random.PCG64(pair_ss))
    pair_langs = langs[1:] or ["en"]
    pairs = {}
    for lang in pair_langs:
        prs = []
        for _ in range(cfg.parallel_pairs):
            slots = _sample_sentence(lex, cfg, rng).realize(lex, rng)
            prs.append((" ".join(lex.surface(slots, "en")), " ".join(lex.surface(slots, lang))))
        pairs[lang] = prs

    builders = [_paraphrase_task, _tagging_task, _span_task, _choice_task, _bucc_task, _tatoeba_task]
    tasks = {}
    for build, ss in zip(builders, task_ss.spawn(len(builders))):
        ds = build(lex, cfg, np.random.Generator(np.random.PCG64(ss)))
        tasks[ds.spec.name] = ds
    return SyntheticWorld(cfg, lex, tokenizer, corpora, pairs, tasks)


def _splits(cfg):
    return [("train", cfg.task_train_size, ["en"]),
            ("dev", cfg.task_eval_size, None),
            ("test", cfg.task_eval_size, None)]


def _paraphrase_task(lex, cfg, rng) -> Dataset:
    langs = lex.languages
    spec = TaskSpec("paraphrase", "classification", "accuracy", langs, PARAPHRASE_LABELS)
    ds = Dataset(spec)
    for split, n, split_langs in _splits(cfg):
        for i in range(n):
            sent = _sample_sentence(lex, cfg, rng)
            a = sent.realize(lex, rng)
            if rng.random() < 0.5:
                b, label = _paraphrase_slots(sent, a, lex, rng), "paraphrase"
            else:
                b = _perturb(sent, lex, rng, cfg.negative_change_fraction).realize(lex, rng)
                label = "different"
            for lang in split_langs or langs:
                ds.add(split, lang, [ClassificationExample(
                    f"{split}-{i}", " ".join(lex.surface(a, lang)), label, " ".join(lex.surface(b, lang)))])
    return ds


def _tagging_task(lex, cfg, rng) -> Dataset:
    langs = lex.languages
    spec = TaskSpec("tagging", "tagging", "token_micro_f1", langs, WORD_CLASSES)
    ds = Dataset(spec)
    for split, n, split_langs in _splits(cfg):
        for i in range(n):
            sent = _sample_sentence(lex, cfg, rng)
            slots = sent.realize(lex, rng)
            for lang in split_langs or langs:
                ds.add(split, lang, [TaggingExample(f"{split}-{i}", tuple(lex.surface(slots, lang)),
                                                    tuple(sent.classes))])
    return ds


def _span_task(lex, cfg, rng) -> Dataset:
    """Question word names a class; the answer is the first word of that class."""
    langs = lex.languages
    spec = TaskSpec("span_qa", "span_extraction", "span_f1_em", langs)
    ds = Dataset(spec)
    for split, n, split_langs in _splits(cfg):
        for i in range(n):
            sent = _sample_sentence(lex, cfg, rng)
            slots = sent.realize(lex, rng)
            present = [c for c in QUESTION_CLASSES if c in sent.classes]
            qclass = present[int(rng.integers(len(present)))]
            widx = sent.classes.index(qclass)
            for lang in split_langs or langs:
                words = lex.surface(slots, lang)
                start = sum(len(w) + 1 for w in words[:widx])
                ds.add(split, lang, [SpanExample(f"{split}-{i}", " ".join(words), lex.questions[lang][qclass],
                                                 (Answer(words[widx], start),))])
    return ds


def _choice_task(lex, cfg, rng) -> Dataset:
    """Pick the paraphrase of the context among perturbed alternatives."""
    langs = lex.languages
    spec = TaskSpec("choice", "multiple_choice", "accuracy", langs)
    ds = Dataset(spec)
    for split, n, split_langs in _splits(cfg):
        for i in range(n):
            sent = _sample_sentence(lex, cfg, rng)
            ctx = sent.realize(lex, rng)
            options = [_paraphrase_slots(sent, ctx, lex, rng)]
            options += [_perturb(sent, lex, rng).realize(lex, rng) for _ in range(cfg.num_choices - 1)]
            order = rng.permutation(cfg.num_choices)
            answer = int(np.flatnonzero(order == 0)[0])
            for lang in split_langs or langs:
                choices = tuple(" ".join(lex.surface(options[int(k)], lang)) for k in order)
                ds.add(split, lang, [MultipleChoiceExample(
                    f"{split}-{i}", " ".join(lex.surface(ctx, lang)), "", choices, answer)])
    return ds


def _retrieval_langs(lex):
    return lex.languages[1:] or ["en"]


def _bucc_task(lex, cfg, rng) -> Dataset:
    """Parallel pairs hidden among non-parallel distractors on both sides."""
    spec = TaskSpec("bucc", "retrieval", "mining_f1", lex.languages, has_train=False)
    ds = Dataset(spec)
    for lang in _retrieval_langs(lex):
        for split in ("dev", "test"):
            exs = []
            for i in range(cfg.retrieval_size):
                slots = _sample_sentence(lex, cfg, rng).realize(lex, rng)
                pid = f"{split}-{lang}-{i}"
                exs.append(RetrievalExample(f"{pid}-src", " ".join(lex.surface(slots, "en")), "en", pid))
                exs.append(RetrievalExample(f"{pid}-tgt", " ".join(lex.surface(slots, lang)), lang, pid))
            for side, suffix in (("en", "src"), (lang, "tgt")):
                for j in range(cfg.retrieval_distractor_count):
                    slots = _sample_sentence(lex, cfg, rng).realize(lex, rng)
                    exs.append(RetrievalExample(f"{split}-{lang}-d{j}-{suffix}", " ".join(lex.surface(slots, side)),
                                                side, None))
            ds.add(split, lang, exs)
    return ds


def _tatoeba_task(lex, cfg, rng) -> Dataset:
    """1:1 aligned sentence lists; test only."""
    spec = TaskSpec("tatoeba", "retrieval", "retrieval_accuracy", lex.languages, has_train=False)
    ds = Dataset(spec)
    for lang in _retrieval_langs(lex):
        exs = []
        for i in range(cfg.retrieval_size):
            slots = _sample_sentence(lex, cfg, rng).realize(lex, rng)
            pid = f"test-{lang}-{i}"
            exs.append(RetrievalExample(f"{pid}-src", " ".join(lex.surface(slots, "en")), "en", pid))
            exs.append(RetrievalExample(f"{pid}-tgt", " ".join(lex.surface(slots, lang)), lang, pid))
        ds.add("test", lang, exs)
    return ds


def retrieval_sides(examples, language):
    """Split a retrieval sub-task into (source, target) example lists."""
    if language == "en":
        # same-language sub-task: the id suffix names the side
        return ([e for e in examples if e.id.endswith("-src")],
                [e for e in examples if e.id.endswith("-tgt")])
    return ([e for e in examples if e.language == "en"],
            [e for e in examples if e.language == language])


def mlm_examples(corpora: dict) -> Dataset:
    langs = sorted(corpora)
    ds = Dataset(TaskSpec("mlm", "mlm", "mlm_loss", langs))
    for lang in langs:
        ds.add("train", lang, [MLMExample(f"{lang}-{i}", s, lang) for i, s in enumerate(corpora[lang])])
    return ds
