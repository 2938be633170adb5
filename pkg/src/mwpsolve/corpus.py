"""Dataset ingestion, preprocessing, splits, and vocabulary.

Corpus files are JSONL: one object per line with fields
{id, text, answer, equation?, unit?, type?, difficulty?}; unknown fields are
ignored. Preprocessing replaces every numeral with the `<num>` token, keeps a
parallel is-number flag sequence, and extracts the numbers in textual order
(duplicates kept as separate entries).
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .equation import DEFAULT_CAPACITY, OperandDict

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
NUM_TOKEN = "<num>"
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, NUM_TOKEN)


class CorpusFormatError(ValueError):
    """Strict-mode load failure; carries (line number, message) pairs."""

    def __init__(self, issues):
        self.issues = list(issues)
        lines = "; ".join(f"line {n}: {msg}" for n, msg in self.issues[:5])
        more = "" if len(self.issues) <= 5 else f" (+{len(self.issues) - 5} more)"
        super().__init__(f"{len(self.issues)} malformed record(s): {lines}{more}")


@dataclass
class Problem:
    """One word-problem instance; equation/unit/type/difficulty are optional
    annotations carried through from the source record."""

    id: str
    text: str
    answer: float
    equation: str | None = None
    unit: str | None = None
    qtype: str | None = None
    difficulty: str | None = None


@dataclass
class PreprocessedProblem:
    masked_tokens: list[str]
    is_number_flags: list[int]
    numbers: list[float]


@dataclass(frozen=True)
class PreprocessConfig:
    """Constant operand pool and the answer-match tolerance.

    Constants default to {1, pi}; they are available to every problem even
    when absent from its text. Duplicate constants are dropped, order kept.
    """

    constants: tuple[float, ...] = (1.0, math.pi)
    answer_eps: float = 1e-4
    lowercase: bool = True

    def __post_init__(self):
        seen, dedup = set(), []
        for c in self.constants:
            c = float(c)
            if not math.isfinite(c):
                raise ValueError(f"non-finite constant {c!r}")
            if c not in seen:
                seen.add(c)
                dedup.append(c)
        object.__setattr__(self, "constants", tuple(dedup))


# Numeric-literal grammar: optional sign (only at a token boundary), digits,
# optional decimal part, optional trailing % (normalized away: "50%" -> 50.0).
_TOKEN_RE = re.compile(
    r"(?:(?<=\s)|^)[+-]\d+(?:\.\d+)?%?|\d+(?:\.\d+)?%?|\w+|[^\w\s]")
_NUMERAL_RE = re.compile(r"[+-]?\d+(?:\.\d+)?%?")


def tokenize(text: str, lowercase: bool = True) -> list[str]:
    """Whitespace + punctuation tokenizer; decimals stay single tokens."""
    tokens = _TOKEN_RE.findall(text)
    return [t.lower() if lowercase else t for t in tokens]


def parse_numeral(token: str) -> float | None:
    """Value of a numeral token, or None if the token is not a numeral."""
    if _NUMERAL_RE.fullmatch(token) is None:
        return None
    if token.endswith("%"):
        token = token[:-1]
    return float(token)


def preprocess(problem: Problem, cfg: PreprocessConfig) -> PreprocessedProblem:
    """Mask numerals with `<num>`, align binary flags, extract numbers in order."""
    masked, flags, numbers = [], [], []
    for tok in tokenize(problem.text, cfg.lowercase):
        value = parse_numeral(tok)
        if value is None:
            masked.append(tok)
            flags.append(0)
        else:
            masked.append(NUM_TOKEN)
            flags.append(1)
            numbers.append(value)
    return PreprocessedProblem(masked, flags, numbers)


def init_operand_dict(pp: PreprocessedProblem, cfg: PreprocessConfig,
                      capacity: int = DEFAULT_CAPACITY) -> OperandDict:
    """Initial operand slots: problem numbers (textual order) then constants."""
    return OperandDict.initial(pp.numbers, cfg.constants, capacity)


# -- loading ------------------------------------------------------------------

def _parse_record(obj) -> Problem:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    for key in ("id", "text", "answer"):
        if key not in obj:
            raise ValueError(f"missing required field {key!r}")
    try:
        answer = float(obj["answer"])
    except (TypeError, ValueError):
        raise ValueError(f"answer is not numeric: {obj['answer']!r}") from None
    if not math.isfinite(answer):
        raise ValueError(f"answer is not finite: {answer!r}")
    text = obj["text"]
    if not isinstance(text, str) or not text.strip():
        raise ValueError("text must be a non-empty string")
    return Problem(
        id=str(obj["id"]),
        text=text,
        answer=answer,
        equation=obj.get("equation"),
        unit=obj.get("unit"),
        qtype=obj.get("type"),
        difficulty=obj.get("difficulty"),
    )


def scan_corpus(path) -> tuple[list[Problem], list[tuple[int, str]]]:
    """Parse a JSONL corpus, collecting (line number, message) per bad record."""
    problems, issues = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                problems.append(_parse_record(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as exc:
                issues.append((lineno, str(exc)))
    return problems, issues


def load_corpus(path, lenient: bool = False) -> list[Problem]:
    """Load a JSONL corpus. Malformed records raise CorpusFormatError unless
    lenient, in which case they are logged and skipped."""
    problems, issues = scan_corpus(path)
    if issues:
        if not lenient:
            raise CorpusFormatError(issues)
        for lineno, msg in issues:
            logger.warning("skipping line %d: %s", lineno, msg)
    if not problems:
        logger.warning("corpus %s contains no records", path)
    return problems


def split_corpus(problems, ratio: float, seed: int):
    """Deterministic shuffled partition: floor(n*ratio) train, rest test."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(problems))
    n_train = int(len(problems) * ratio)
    train = [problems[i] for i in order[:n_train]]
    test = [problems[i] for i in order[n_train:]]
    return train, test


# -- vocabulary ---------------------------------------------------------------

@dataclass
class Vocab:
    """Token -> embedding-row index, with reserved pad/unk/num entries."""

    token_to_id: dict[str, int]
    id_to_token: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.id_to_token:
            self.id_to_token = [None] * len(self.token_to_id)
            for tok, i in self.token_to_id.items():
                self.id_to_token[i] = tok

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK_TOKEN]

    @property
    def num_id(self) -> int:
        return self.token_to_id[NUM_TOKEN]

    def encode(self, tokens) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokens]


def build_vocab(preprocessed, min_count: int = 1) -> Vocab:
    """Vocabulary over masked token streams; tokens seen fewer than
    min_count times map to `<unk>`."""
    counts: dict[str, int] = {}
    for pp in preprocessed:
        for tok in pp.masked_tokens:
            if tok != NUM_TOKEN:
                counts[tok] = counts.get(tok, 0) + 1
    mapping = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
    for tok in sorted(counts):
        if counts[tok] >= min_count:
            mapping[tok] = len(mapping)
    return Vocab(mapping)


@dataclass
class EncodedProblem:
    """A preprocessed problem mapped through a vocabulary, ready for the model."""

    problem_id: str
    token_ids: list[int]
    flags: list[int]
    numbers: list[float]
    answer: float


def encode_for_model(problem: Problem, pp: PreprocessedProblem, vocab: Vocab) -> EncodedProblem:
    return EncodedProblem(
        problem_id=problem.id,
        token_ids=vocab.encode(pp.masked_tokens),
        flags=list(pp.is_number_flags),
        numbers=list(pp.numbers),
        answer=problem.answer,
    )


# -- cache files ---------------------------------------------------------------

def save_cache(path, pairs) -> None:
    """Write (Problem, PreprocessedProblem) pairs as the original JSONL plus
    masked_tokens/flags/numbers arrays."""
    with open(path, "w", encoding="utf-8") as fh:
        for problem, pp in pairs:
            record = {
                "id": problem.id,
                "text": problem.text,
                "answer": problem.answer,
                "equation": problem.equation,
                "unit": problem.unit,
                "type": problem.qtype,
                "difficulty": problem.difficulty,
                "masked_tokens": pp.masked_tokens,
                "is_number_flags": pp.is_number_flags,
                "numbers": pp.numbers,
            }
            fh.write(json.dumps({k: v for k, v in record.items() if v is not None},
                                sort_keys=True) + "\n")


def load_cache(path) -> list[tuple[Problem, PreprocessedProblem]]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            problem = _parse_record(obj)
            pp = PreprocessedProblem(
                masked_tokens=list(obj["masked_tokens"]),
                is_number_flags=list(obj["is_number_flags"]),
                numbers=[float(v) for v in obj["numbers"]],
            )
            pairs.append((problem, pp))
    return pairs


def preprocess_corpus(problems, cfg: PreprocessConfig):
    """Preprocess every problem; returns (Problem, PreprocessedProblem) pairs."""
    return [(p, preprocess(p, cfg)) for p in problems]
