"""Tri-level annotated dialogues: data model, JSON I/O, merging, vocabulary,
batch encoding and a seeded synthetic generator."""
from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CorpusParseError, LabelError, MergeError, SchemaError

SPLITS = ("train", "dev", "test")

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
N_RESERVED = 3
IGNORE_INDEX = -100


class BIOWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LabelCatalog:
    slot_tags: tuple[str, ...]
    intents: tuple[str, ...]
    domains: tuple[str, ...]

    def __post_init__(self):
        for kind in ("slot_tags", "intents", "domains"):
            names = tuple(getattr(self, kind))
            object.__setattr__(self, kind, names)
            if not names:
                raise SchemaError(f"catalog.{kind} must not be empty")
            if len(set(names)) != len(names):
                dupes = sorted(n for n, c in Counter(names).items() if c > 1)
                raise SchemaError(f"catalog.{kind} has duplicate names: {dupes}")
        if "O" not in self.slot_tags:
            raise SchemaError("catalog.slot_tags must contain 'O'")

    @property
    def k_sf(self) -> int:
        return len(self.slot_tags)

    @property
    def k_id(self) -> int:
        return len(self.intents)

    @property
    def k_dc(self) -> int:
        return len(self.domains)

    @property
    def outside_id(self) -> int:
        return self.slot_tags.index("O")

    def labels(self, task) -> tuple[str, ...]:
        key = str(getattr(task, "value", task)).upper()
        return {"SF": self.slot_tags, "ID": self.intents, "DC": self.domains}[key]

    def n_classes(self, task) -> int:
        return len(self.labels(task))

    def to_dict(self) -> dict:
        return {
            "slot_tags": list(self.slot_tags),
            "intents": list(self.intents),
            "domains": list(self.domains),
        }


@dataclass(frozen=True)
class Turn:
    tokens: tuple[str, ...]
    slot_tag_ids: tuple[int, ...]
    intent_id: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "slot_tag_ids", tuple(int(t) for t in self.slot_tag_ids))
        if not self.tokens:
            raise LabelError("turn has no tokens")
        if len(self.tokens) != len(self.slot_tag_ids):
            raise LabelError(
                f"turn has {len(self.tokens)} tokens but {len(self.slot_tag_ids)} slot tags"
            )


@dataclass(frozen=True)
class Dialogue:
    id: str
    turns: tuple[Turn, ...]
    domain_id: int
    source: str = "unknown"

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise LabelError(f"dialogue {self.id!r} has no turns")


@dataclass(frozen=True)
class Corpus:
    catalog: LabelCatalog
    dialogues: tuple[Dialogue, ...]
    split_of: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "dialogues", tuple(self.dialogues))
        object.__setattr__(self, "split_of", dict(self.split_of))
        ids = [d.id for d in self.dialogues]
        if len(set(ids)) != len(ids):
            dupes = sorted(i for i, c in Counter(ids).items() if c > 1)
            raise SchemaError(f"duplicate dialogue ids: {dupes}")
        if set(self.split_of) != set(ids):
            missing = sorted(set(ids) - set(self.split_of))
            extra = sorted(set(self.split_of) - set(ids))
            raise SchemaError(f"split_of mismatch: missing={missing} extra={extra}")
        for did, split in self.split_of.items():
            if split not in SPLITS:
                raise SchemaError(f"dialogue {did!r}: unknown split {split!r}")
        cat = self.catalog
        for d in self.dialogues:
            if not 0 <= d.domain_id < cat.k_dc:
                raise LabelError(f"dialogue {d.id!r}: domain id {d.domain_id} out of range")
            for t_idx, turn in enumerate(d.turns):
                if not 0 <= turn.intent_id < cat.k_id:
                    raise LabelError(
                        f"dialogue {d.id!r} turn {t_idx}: intent id {turn.intent_id} out of range"
                    )
                bad = [s for s in turn.slot_tag_ids if not 0 <= s < cat.k_sf]
                if bad:
                    raise LabelError(
                        f"dialogue {d.id!r} turn {t_idx}: slot ids out of range {bad}"
                    )

    def dialogues_in(self, split: str) -> list[Dialogue]:
        return [d for d in self.dialogues if self.split_of[d.id] == split]

    def samples(self, split: str) -> list[tuple[Turn, int]]:
        """Flatten a split into (turn, dialogue domain) training samples."""
        return [(t, d.domain_id) for d in self.dialogues_in(split) for t in d.turns]

    def split_sizes(self) -> dict[str, int]:
        counts = Counter(self.split_of.values())
        return {s: counts.get(s, 0) for s in SPLITS}


# ---------------------------------------------------------------- BIO checks

def bio_violations(tags: Sequence[str]) -> list[int]:
    """Positions holding ``I-x`` that follow neither ``B-x`` nor ``I-x``."""
    bad = []
    prev = "O"
    for i, tag in enumerate(tags):
        if tag.startswith("I-"):
            kind = tag[2:]
            if prev not in (f"B-{kind}", f"I-{kind}"):
                bad.append(i)
        prev = tag
    return bad


# ---------------------------------------------------------------- JSON I/O

def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    return obj[key]


def corpus_from_dict(raw: dict, *, origin: str = "<memory>") -> Corpus:
    cat_raw = _require(raw, "catalog", origin)
    catalog = LabelCatalog(
        slot_tags=_require(cat_raw, "slot_tags", f"{origin} catalog"),
        intents=_require(cat_raw, "intents", f"{origin} catalog"),
        domains=_require(cat_raw, "domains", f"{origin} catalog"),
    )
    tag_ids = {n: i for i, n in enumerate(catalog.slot_tags)}
    intent_ids = {n: i for i, n in enumerate(catalog.intents)}
    domain_ids = {n: i for i, n in enumerate(catalog.domains)}

    dialogues = []
    split_of = {}
    for d_idx, d_raw in enumerate(_require(raw, "dialogues", origin)):
        where = f"{origin} dialogue #{d_idx}"
        did = str(_require(d_raw, "id", where))
        where = f"{origin} dialogue {did!r}"
        domain = _require(d_raw, "domain", where)
        if domain not in domain_ids:
            raise LabelError(f"{where}: domain {domain!r} not in catalog")
        split = _require(d_raw, "split", where)
        if split not in SPLITS:
            raise SchemaError(f"{where}: split must be one of {SPLITS}, got {split!r}")
        turns = []
        for t_idx, t_raw in enumerate(_require(d_raw, "turns", where)):
            t_where = f"{where} turn {t_idx}"
            tokens = _require(t_raw, "tokens", t_where)
            slots = _require(t_raw, "slots", t_where)
            intent = _require(t_raw, "intent", t_where)
            if len(tokens) != len(slots):
                raise LabelError(
                    f"{t_where}: {len(tokens)} tokens but {len(slots)} slot tags"
                )
            if not tokens:
                raise LabelError(f"{t_where}: turn has no tokens")
            unknown = [s for s in slots if s not in tag_ids]
            if unknown:
                raise LabelError(f"{t_where}: slot tags not in catalog: {unknown}")
            if intent not in intent_ids:
                raise LabelError(f"{t_where}: intent {intent!r} not in catalog")
            bad = bio_violations(slots)
            if bad:
                warnings.warn(f"{t_where}: BIO violations at positions {bad}", BIOWarning)
            turns.append(Turn(tuple(tokens), tuple(tag_ids[s] for s in slots), intent_ids[intent]))
        if not turns:
            raise LabelError(f"{where}: dialogue has no turns")
        dialogues.append(Dialogue(did, tuple(turns), domain_ids[domain], str(d_raw.get("source", "unknown"))))
        if did in split_of:
            raise SchemaError(f"{where}: duplicate dialogue id")
        split_of[did] = split
    return Corpus(catalog, tuple(dialogues), split_of)


def corpus_to_dict(corpus: Corpus) -> dict:
    cat = corpus.catalog
    return {
        "catalog": cat.to_dict(),
        "dialogues": [
            {
                "id": d.id,
                "domain": cat.domains[d.domain_id],
                "source": d.source,
                "split": corpus.split_of[d.id],
                "turns": [
                    {
                        "tokens": list(t.tokens),
                        "slots": [cat.slot_tags[s] for s in t.slot_tag_ids],
                        "intent": cat.intents[t.intent_id],
                    }
                    for t in d.turns
                ],
            }
            for d in corpus.dialogues
        ],
    }


def load_corpus(path) -> Corpus:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusParseError(f"{path}: cannot read corpus ({exc.strerror})") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"{path}: malformed JSON at line {exc.lineno} col {exc.colno}") from exc
    return corpus_from_dict(raw, origin=str(path))


def dumps_corpus(corpus: Corpus) -> str:
    return json.dumps(corpus_to_dict(corpus), ensure_ascii=False, indent=1)


def write_corpus(corpus: Corpus, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_corpus(corpus) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- merging

def _union(first: Sequence[str], second: Sequence[str]) -> tuple[str, ...]:
    seen = list(first)
    seen.extend(n for n in second if n not in set(first))
    return tuple(dict.fromkeys(seen))


def _qualify(dialogue_id: str, source: str) -> str:
    prefix = f"{source}:"
    return dialogue_id if dialogue_id.startswith(prefix) else prefix + dialogue_id


def merge_corpora(a: Corpus, b: Corpus) -> Corpus:
    """Union two corpora.

    Labels of ``a`` keep their ids; labels only ``b`` knows are appended.
    Dialogue ids are qualified with their source (``"m2m:d17"``); qualifying
    is idempotent, so merging an already merged corpus leaves ids alone.
    """
    catalog = LabelCatalog(
        slot_tags=_union(a.catalog.slot_tags, b.catalog.slot_tags),
        intents=_union(a.catalog.intents, b.catalog.intents),
        domains=_union(a.catalog.domains, b.catalog.domains),
    )
    dialogues = []
    split_of = {}
    for part in (a, b):
        pc = part.catalog
        tag_map = [catalog.slot_tags.index(n) for n in pc.slot_tags]
        intent_map = [catalog.intents.index(n) for n in pc.intents]
        domain_map = [catalog.domains.index(n) for n in pc.domains]
        for d in part.dialogues:
            new_id = _qualify(d.id, d.source)
            if new_id in split_of:
                raise MergeError(f"dialogue id collision after prefixing: {new_id!r}")
            turns = tuple(
                Turn(t.tokens, tuple(tag_map[s] for s in t.slot_tag_ids), intent_map[t.intent_id])
                for t in d.turns
            )
            dialogues.append(Dialogue(new_id, turns, domain_map[d.domain_id], d.source))
            split_of[new_id] = part.split_of[d.id]
    return Corpus(catalog, tuple(dialogues), split_of)


# ---------------------------------------------------------------- vocabulary

@dataclass(frozen=True)
class Vocabulary:
    """Closed word-level vocabulary. Ids 0..2 are PAD, UNK and CLS."""

    words: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        if len(set(self.words)) != len(self.words):
            raise SchemaError("vocabulary words must be unique")
        object.__setattr__(
            self, "_index", {w: i + N_RESERVED for i, w in enumerate(self.words)}
        )

    @property
    def word_to_id(self) -> Mapping[str, int]:
        return self._index

    def __len__(self):
        return len(self.words) + N_RESERVED

    def id_of(self, token: str) -> int:
        return self._index.get(token.lower(), UNK_ID)


def build_vocabulary(corpus: Corpus, min_freq: int = 1) -> Vocabulary:
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    train = corpus.samples("train")
    if not train:
        raise SchemaError("corpus has no train dialogues to build a vocabulary from")
    counts = Counter(tok.lower() for turn, _ in train for tok in turn.tokens)
    return Vocabulary(tuple(sorted(w for w, c in counts.items() if c >= min_freq)))


# ---------------------------------------------------------------- batches

@dataclass(frozen=True)
class EncodedBatch:
    token_ids: np.ndarray
    mask: np.ndarray
    slot_targets: np.ndarray
    intent_targets: np.ndarray
    domain_targets: np.ndarray

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def width(self) -> int:
        return self.token_ids.shape[1]

    @property
    def token_mask(self) -> np.ndarray:
        """Scoreable token positions: real tokens, CLS excluded."""
        m = self.mask.copy()
        m[:, 0] = 0
        return m

    def targets(self, task) -> np.ndarray:
        key = str(getattr(task, "value", task)).upper()
        return {"SF": self.slot_targets, "ID": self.intent_targets, "DC": self.domain_targets}[key]


def encode_batch(
    samples: Sequence[tuple[Turn, int]],
    vocab: Vocabulary,
    catalog: LabelCatalog,
    max_len: int = 512,
) -> EncodedBatch:
    if not samples:
        raise ValueError("cannot encode an empty list of turns")
    if max_len < 2:
        raise ValueError("max_len must leave room for CLS and one token")
    keep = max_len - 1
    width = 1 + max(min(len(t.tokens), keep) for t, _ in samples)
    n = len(samples)
    token_ids = np.full((n, width), PAD_ID, dtype=np.int64)
    mask = np.zeros((n, width), dtype=np.int64)
    slots = np.full((n, width), IGNORE_INDEX, dtype=np.int64)
    intents = np.empty(n, dtype=np.int64)
    domains = np.empty(n, dtype=np.int64)
    for i, (turn, domain_id) in enumerate(samples):
        toks = turn.tokens[:keep]
        length = len(toks)
        token_ids[i, 0] = CLS_ID
        token_ids[i, 1:1 + length] = [vocab.id_of(t) for t in toks]
        mask[i, :1 + length] = 1
        slots[i, 1:1 + length] = turn.slot_tag_ids[:keep]
        intents[i] = turn.intent_id
        domains[i] = domain_id
    if intents.max() >= catalog.k_id or domains.max() >= catalog.k_dc:
        raise LabelError("batch labels exceed catalog bounds")
    return EncodedBatch(token_ids, mask, slots, intents, domains)


def iter_batches(
    samples: Sequence[tuple[Turn, int]],
    batch_size: int,
    order: Iterable[int] | None = None,
):
    idx = list(range(len(samples)) if order is None else order)
    for start in range(0, len(idx), batch_size):
        yield [samples[i] for i in idx[start:start + batch_size]]


# ---------------------------------------------------------------- synthetic data

_DOMAIN_NAMES = ("restaurant", "movie", "hotel", "train", "taxi", "attraction", "bus", "hospital")
_INTENT_NAMES = ("inform", "request", "confirm", "book", "select", "negate", "affirm", "thank")
_SLOT_NAMES = ("name", "time", "date", "people", "area", "price", "rating", "genre")
_FILLER = ("please", "i", "want", "the", "a", "to", "could", "you", "um", "yes", "maybe", "that")
_CARRIERS = ("for", "at", "on", "with", "about", "in")
_SYLLABLES = ("ka", "lo", "mi", "ren", "tu", "sa", "vo", "ni", "pe", "dra", "gu", "zel", "ox", "bi", "fa", "qu")


@dataclass(frozen=True)
class GeneratorConfig:
    n_dialogues: int = 200
    n_domains: int = 2
    intents_per_domain: int = 3
    slot_tags_per_domain: int = 3
    min_turns: int = 2
    max_turns: int = 6
    seed: int = 7

    def __post_init__(self):
        for name in ("n_dialogues", "n_domains", "intents_per_domain", "slot_tags_per_domain", "min_turns"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_turns < self.min_turns:
            raise ValueError("max_turns must be >= min_turns")


def _name(pool, i):
    return pool[i] if i < len(pool) else f"{pool[i % len(pool)]}{i // len(pool)}"


def _pseudo_words(rng, count, taken):
    words = []
    while len(words) < count:
        w = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4))))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def generate_synthetic(cfg: GeneratorConfig = GeneratorConfig()) -> Corpus:
    """Templated multi-domain dialogues, deterministic in ``cfg.seed``.

    Every domain owns keywords, intent trigger words and slot value words,
    so all three tasks are decodable from the surface tokens. Each slot type
    contributes a B-/I- tag pair; values span one or two tokens.
    """
    rng = np.random.default_rng(cfg.seed)
    taken = set(_FILLER) | set(_CARRIERS)
    domains = [_name(_DOMAIN_NAMES, d) for d in range(cfg.n_domains)]
    intents, slot_tags = [], ["O"]
    lexicon = []
    for d, dname in enumerate(domains):
        entry = {"keywords": _pseudo_words(rng, 3, taken), "intents": [], "slots": []}
        for i in range(cfg.intents_per_domain):
            intents.append(f"{dname}.{_name(_INTENT_NAMES, i)}")
            entry["intents"].append((len(intents) - 1, _pseudo_words(rng, 2, taken)))
        for s in range(cfg.slot_tags_per_domain):
            sname = f"{dname}_{_name(_SLOT_NAMES, s)}"
            slot_tags += [f"B-{sname}", f"I-{sname}"]
            heads = _pseudo_words(rng, 4, taken)
            tails = _pseudo_words(rng, 2, taken)
            values = [(h,) for h in heads[:2]] + [(h, t) for h, t in zip(heads[2:], tails)]
            entry["slots"].append((len(slot_tags) - 2, values))
        lexicon.append(entry)
    catalog = LabelCatalog(tuple(slot_tags), tuple(intents), tuple(domains))

    dialogues = []
    for n in range(cfg.n_dialogues):
        d = int(rng.integers(cfg.n_domains))
        entry = lexicon[d]
        turns = []
        for _ in range(int(rng.integers(cfg.min_turns, cfg.max_turns + 1))):
            intent_id, triggers = entry["intents"][int(rng.integers(len(entry["intents"])))]
            tokens = [str(w) for w in rng.choice(_FILLER, size=int(rng.integers(0, 3)))]
            head = [str(rng.choice(triggers))]
            if rng.random() < 0.7:
                head.insert(int(rng.integers(2)), str(rng.choice(entry["keywords"])))
            tokens += head
            tags = [0] * len(tokens)
            for _ in range(int(rng.integers(0, 3))):
                b_id, values = entry["slots"][int(rng.integers(len(entry["slots"])))]
                value = values[int(rng.integers(len(values)))]
                tokens.append(str(rng.choice(_CARRIERS)))
                tags.append(0)
                tokens += list(value)
                tags += [b_id] + [b_id + 1] * (len(value) - 1)
            if rng.random() < 0.3:
                tokens.append(str(rng.choice(_FILLER)))
                tags.append(0)
            turns.append(Turn(tuple(tokens), tuple(tags), intent_id))
        dialogues.append(Dialogue(f"synthetic:{cfg.seed}-{n:05d}", tuple(turns), d, "synthetic"))

    order = rng.permutation(cfg.n_dialogues)
    n_train = max(1, int(round(0.8 * cfg.n_dialogues)))
    n_dev = int(round(0.1 * cfg.n_dialogues))
    split_of = {}
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"
        split_of[dialogues[idx].id] = split
    return Corpus(catalog, tuple(dialogues), split_of)
