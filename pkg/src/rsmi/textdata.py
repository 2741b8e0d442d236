"""Vocabulary, tokenizer, TSV/JSON carriers and the synthetic keyword corpus."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .numerics import RngStream

logger = logging.getLogger(__name__)

PAD, UNK, MASK = 0, 1, 2
RESERVED = {"pad": PAD, "unk": UNK, "mask": MASK}
RESERVED_TOKENS = ["[PAD]", "[UNK]", "[MASK]"]
RESERVED_IDS = frozenset(RESERVED.values())

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


class DataFormatError(ValueError):
    pass


class Vocabulary:
    """Bijective word/id map with PAD=0, UNK=1, MASK=2 fixed."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.id_to_token: list[str] = list(RESERVED_TOKENS)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token in self.token_to_id:
            return self.token_to_id[token]
        self.token_to_id[token] = len(self.id_to_token)
        self.id_to_token.append(token)
        return self.token_to_id[token]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def get(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.id_to_token[len(RESERVED_TOKENS):], "reserved": RESERVED})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        if doc.get("reserved", RESERVED) != RESERVED:
            raise DataFormatError(f"unsupported reserved ids {doc.get('reserved')}")
        vocab = cls()
        for tok in doc["tokens"]:
            if tok in vocab:
                raise DataFormatError(f"duplicate vocabulary token {tok!r}")
            vocab.add(tok)
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class LabeledExample:
    tokens: tuple[int, ...]
    label: int

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError("an example needs at least one token")
        if PAD in self.tokens:
            raise ValueError("PAD may not appear inside an example")


class SynonymTable(dict):
    """Directed map ``token id -> candidate ids``; lists are deduplicated and never self-referential."""

    def __init__(self, entries=None):
        super().__init__()
        for k, v in (entries or {}).items():
            self[k] = v

    def __setitem__(self, key, values):
        key = int(key)
        cleaned = []
        for v in values:
            v = int(v)
            if v != key and v not in cleaned:
                cleaned.append(v)
        super().__setitem__(key, cleaned)

    def candidates(self, token: int) -> list[int]:
        return self.get(token, [])

    def to_tsv(self, vocab: Vocabulary) -> str:
        lines = []
        for k in sorted(self):
            if self[k]:
                syns = ",".join(vocab.id_to_token[v] for v in self[k])
                lines.append(f"{vocab.id_to_token[k]}\t{syns}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str, vocab: Vocabulary) -> "SynonymTable":
        table = cls()
        dropped = 0
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataFormatError(f"synonym line {lineno}: missing TAB")
            word, syns = line.split("\t", 1)
            if word not in vocab:
                dropped += 1
                continue
            ids = []
            for s in filter(None, (x.strip() for x in syns.split(","))):
                if s in vocab:
                    ids.append(vocab.token_to_id[s])
                else:
                    dropped += 1
            table[vocab.token_to_id[word]] = ids
        if dropped:
            logger.warning("dropped %d out-of-vocabulary synonym entries", dropped)
        return table


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary, max_len: int = 64) -> list[int]:
    words = split_words(text)
    if not words:
        raise ValueError("input is empty after tokenization")
    return [vocab.get(w) for w in words[:max_len]]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.id_to_token[i] for i in ids)


def load_tsv(path, vocab: Vocabulary, max_len: int = 256) -> list[LabeledExample]:
    """Read ``label<TAB>text`` lines; labels must be 0-based integers."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected 'label<TAB>text'")
        label, text = line.split("\t", 1)
        if not re.fullmatch(r"\d+", label.strip()):
            raise DataFormatError(f"{path}:{lineno}: label {label!r} is not a 0-based integer")
        try:
            tokens = tokenize(text, vocab, max_len)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        out.append(LabeledExample(tuple(tokens), int(label)))
    if not out:
        raise DataFormatError(f"{path}: no examples")
    logger.info("loaded %d examples from %s, class histogram %s",
                len(out), path, dict(sorted(class_histogram(out).items())))
    return out


def save_tsv(path, examples: Sequence[LabeledExample], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"{ex.label}\t{detokenize(ex.tokens, vocab)}\n")


def class_histogram(examples: Sequence[LabeledExample]) -> dict[int, int]:
    return dict(Counter(ex.label for ex in examples))


def build_vocab(texts: Iterable[str]) -> Vocabulary:
    vocab = Vocabulary()
    for text in texts:
        for w in split_words(text):
            vocab.add(w)
    return vocab


def apply_mask(tokens: Sequence[int], positions: Iterable[int]) -> list[int]:
    out = list(tokens)
    for p in positions:
        if not 0 <= p < len(out):
            raise IndexError(f"mask position {p} out of range for length {len(out)}")
        out[p] = MASK
    return out


@dataclass
class SyntheticCorpus:
    train: list[LabeledExample]
    test: list[LabeledExample]
    vocab: Vocabulary
    synonyms: SynonymTable
    lexicon: dict[int, int]  # token id -> class it signals


def gen_synthetic(seed: int, n_train: int, n_test: int, vocab_size: int,
                  class_count: int = 2, keywords_per_class: int | None = None,
                  min_len: int = 10, max_len: int = 20) -> SyntheticCorpus:
    """Keyword corpus where each class owns a disjoint lexicon.

    Every keyword gets 2-4 same-class synonyms; about half the keywords also
    list a "trap" synonym from another class so substitution attacks can
    flip predictions. Bodies are filler words plus 3 to 5 lexicon words of
    the label's class and at most one word of another class.
    """
    n_reserved = len(RESERVED_TOKENS)
    syn_per_kw = 3
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if keywords_per_class is None:
        keywords_per_class = min(6, (vocab_size - n_reserved - 10) // (class_count * (1 + syn_per_kw)))
    lex_per_class = keywords_per_class * (1 + syn_per_kw)
    n_filler = vocab_size - n_reserved - class_count * lex_per_class
    if vocab_size < 40 or n_filler < 10 or keywords_per_class < 1:
        need = n_reserved + class_count * (1 + syn_per_kw) + 10
        raise ValueError(f"vocab_size={vocab_size} too small, need at least {max(need, 40)}")
    if min(n_train, n_test) < class_count:
        raise ValueError("n_train and n_test must be >= class_count")

    rng = RngStream(seed, 0x5E7)
    vocab = Vocabulary()
    lexicon: dict[int, int] = {}
    keywords: list[list[int]] = []
    members: list[list[int]] = []
    groups: dict[int, list[int]] = {}
    for c in range(class_count):
        kws, mem = [], []
        for k in range(keywords_per_class):
            kid = vocab.add(f"c{c}k{k}")
            kws.append(kid)
            group = [kid] + [vocab.add(f"c{c}k{k}s{j}") for j in range(syn_per_kw)]
            for t in group:
                lexicon[t] = c
            groups[kid] = group
            mem.extend(group)
        keywords.append(kws)
        members.append(mem)
    filler = [vocab.add(f"w{i}") for i in range(n_filler)]

    synonyms = SynonymTable()
    for c in range(class_count):
        for kid in keywords[c]:
            group = groups[kid]
            n_syn = 2 + int(rng.integers(3))  # 2..4 same-polarity synonyms
            for t in group:
                others = [g for g in group if g != t]
                pool = others + [g for g in members[c] if g not in group]
                synonyms[t] = pool[:n_syn]
            if rng.uniform(1)[0] < 0.5:
                other = (c + 1 + int(rng.integers(class_count - 1))) % class_count
                trap = keywords[other][int(rng.integers(keywords_per_class))]
                for t in group:
                    synonyms[t] = synonyms[t] + [trap]
    for w in filler:
        alt = filler[int(rng.integers(len(filler)))]
        synonyms[w] = [alt]

    def sample(n: int, stream: RngStream) -> list[LabeledExample]:
        labels = [i % class_count for i in range(n)]
        order = stream.choice(n, n)
        out = []
        for i in order:
            y = labels[i]
            length = min_len + int(stream.integers(max_len - min_len + 1))
            body = [filler[j] for j in stream.integers(len(filler), size=length)]
            n_kw = 3 + int(stream.integers(3))
            slots = stream.choice(length, n_kw + 1)
            for s in slots[:n_kw]:
                body[s] = members[y][int(stream.integers(len(members[y])))]
            if stream.uniform(1)[0] < 0.3:
                other = (y + 1 + int(stream.integers(class_count - 1))) % class_count
                body[slots[n_kw]] = members[other][int(stream.integers(len(members[other])))]
            out.append(LabeledExample(tuple(int(t) for t in body), y))
        return out

    train = sample(n_train, rng.substream("train"))
    test = sample(n_test, rng.substream("test"))
    return SyntheticCorpus(train, test, vocab, synonyms, lexicon)


def keyword_count_predict(tokens: Sequence[int], lexicon: dict[int, int], class_count: int) -> int:
    """Trivial oracle: the class whose lexicon words occur most often."""
    counts = [0] * class_count
    for t in tokens:
        if t in lexicon:
            counts[lexicon[t]] += 1
    return max(range(class_count), key=lambda c: (counts[c], -c))
