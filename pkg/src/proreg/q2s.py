"""Question-to-statement rewriting for prompt-based VQA.

Open-ended questions become masked statements scored by a masked-token
head (MLM); closed-ended questions become plain statements scored by an
image-text matching head (ITM). Only a small set of rule families is
supported; anything else comes back as :class:`Unsupported`.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

MASK = "[MASK]"

WH_WORDS = frozenset("what which who whom whose where when why how".split())
AUXILIARIES = frozenset("is are was were do does did any can could has have".split())
COPULAS = frozenset("is are was were".split())
MODALS = frozenset("can could has have".split())
DO_FORMS = frozenset("do does did".split())

DETERMINERS = frozenset(
    "the a an this that these those his her their its my your our some one two three".split()
)
PERSONAL_PRONOUNS = frozenset("it he she they we you i there".split())
DEMONSTRATIVES = frozenset("this that these those".split())
# Tokens that usually open the predicate after a noun-phrase subject.
PREDICATE_STARTERS = frozenset(
    "in on at under over behind above below near next inside outside beside between "
    "by with without for from to of into onto through along across against around "
    "not made being".split()
)


class QuestionKind(enum.Enum):
    OPEN_ENDED = "open_ended"
    CLOSED_ENDED = "closed_ended"
    UNSUPPORTED = "unsupported_question"


class Route(enum.Enum):
    MLM = "MLM"
    ITM = "ITM"


@dataclass(frozen=True)
class Question:
    text: str
    kind: QuestionKind
    type_tag: str | None

    @property
    def tokens(self) -> list[str]:
        return self.text.split()


@dataclass(frozen=True)
class Statement:
    text: str
    route: Route
    mask_index: int | None = None
    # ITM only: what a high / low match score means.
    candidate_semantics: Mapping[str, str] | None = field(default=None, compare=False)
    mask: str = field(default=MASK, compare=False)

    def __post_init__(self):
        tokens = self.text.split()
        n_masks = sum(tok.rstrip(".") == self.mask for tok in tokens)
        if not self.text.endswith("."):
            raise ValueError(f"statement must end with a period: {self.text!r}")
        if self.route is Route.MLM and n_masks != 1:
            raise ValueError(f"MLM statement needs exactly one mask: {self.text!r}")
        if self.route is Route.ITM and n_masks != 0:
            raise ValueError(f"ITM statement must not contain a mask: {self.text!r}")


@dataclass(frozen=True)
class Unsupported:
    question: str
    reason: str

    kind = QuestionKind.UNSUPPORTED


ITM_SEMANTICS = {"match": "yes", "mismatch": "no"}


def normalize(text: str) -> str:
    """Lowercase, collapse whitespace and drop terminal punctuation."""
    text = " ".join(text.lower().split())
    return text.rstrip(" ?.!").strip()


def parse(text: str) -> Question:
    norm = normalize(text)
    if not norm:
        return Question(norm, QuestionKind.UNSUPPORTED, None)
    tokens = norm.split()
    first = tokens[0]
    if first in WH_WORDS:
        if first == "how" and len(tokens) > 1 and tokens[1] == "many":
            tag = "how many"
        elif first == "what" and len(tokens) > 1 and tokens[1] == "color":
            tag = "what color"
        else:
            tag = first
        return Question(norm, QuestionKind.OPEN_ENDED, tag)
    if first in AUXILIARIES:
        return Question(norm, QuestionKind.CLOSED_ENDED, first)
    return Question(norm, QuestionKind.UNSUPPORTED, None)


def classify(text: str) -> QuestionKind:
    return parse(text).kind


_HOW_MANY = re.compile(r"^how many (?P<noun>.+?) (?P<aux>are|is) (?P<rest>.+)$")
_WHAT_COLOR = re.compile(r"^what colou?r (?:is|are) (?P<subject>.+)$")


def _mlm(words: Sequence[str], mask: str) -> Statement:
    text = " ".join(words) + "."
    return Statement(text, Route.MLM, mask_index=list(words).index(mask), mask=mask)


def _itm(words: Sequence[str]) -> Statement:
    return Statement(" ".join(words) + ".", Route.ITM, candidate_semantics=ITM_SEMANTICS)


def _split_subject(tokens: list[str]) -> int | None:
    """Length of the subject noun phrase at the front of ``tokens``.

    Returns None when no non-empty predicate would remain.
    """
    if len(tokens) < 2:
        return None
    head = tokens[0]
    if head in PERSONAL_PRONOUNS:
        return 1
    if head in DEMONSTRATIVES and (tokens[1] in DETERMINERS or len(tokens) == 2):
        return 1
    if head not in DETERMINERS:
        return 1
    for j in range(1, len(tokens)):
        tok = tokens[j]
        if j >= 2 and (tok in PREDICATE_STARTERS or tok.endswith("ing") or tok in DETERMINERS):
            return j
    # No boundary cue: the last word is the predicate ("is the sky blue").
    return len(tokens) - 1 if len(tokens) > 2 else None


def to_statement(text: str, mask: str = MASK) -> Statement | Unsupported:
    if not mask or len(mask.split()) != 1:
        raise ValueError(f"mask must be a single token, got {mask!r}")
    q = parse(text)
    if q.kind is QuestionKind.UNSUPPORTED:
        return Unsupported(q.text, "unrecognized leading word")
    tokens = q.tokens

    if q.type_tag == "how many":
        m = _HOW_MANY.match(q.text)
        if not m:
            return Unsupported(q.text, "how-many question without a verb")
        rest = m["rest"].split()
        if rest[0] == "there":
            rest = rest[1:]
        elif rest[0] not in PREDICATE_STARTERS:
            # "how many hats is the man wearing" needs a different template.
            return Unsupported(q.text, "how-many question is not existential")
        return _mlm(["there", m["aux"], mask, *m["noun"].split(), *rest], mask)

    if q.type_tag == "what color":
        m = _WHAT_COLOR.match(q.text)
        if not m:
            return Unsupported(q.text, "what-color question without a copula")
        return _mlm(["the", "color", "of", *m["subject"].split(), "is", mask], mask)

    if q.kind is QuestionKind.OPEN_ENDED:
        return Unsupported(q.text, f"no rewriting rule for {q.type_tag!r} questions")

    aux, rest = tokens[0], tokens[1:]
    if not rest:
        return Unsupported(q.text, "auxiliary without a clause")
    if aux == "any":
        return _itm(["some", *rest])
    if aux in DO_FORMS:
        # The bare verb is kept as-is; no re-inflection.
        return _itm(rest)
    n = _split_subject(rest)
    if n is None:
        return Unsupported(q.text, "could not locate the subject")
    return _itm([*rest[:n], aux, *rest[n:]])


def route_answer(statement: Statement, scores, threshold: float = 0.5, candidates: Sequence[str] | None = None) -> str:
    """Turn head outputs into an answer string.

    ITM: ``scores`` is a match score in [0, 1]; "yes" iff it reaches ``threshold``.
    MLM: ``scores`` is either a mapping answer -> probability or a sequence of
    probabilities aligned with ``candidates``. Ties go to the first candidate
    in iteration order.
    """
    if statement.route is Route.ITM:
        return "yes" if float(scores) >= threshold else "no"
    if isinstance(scores, Mapping):
        items = list(scores.items())
    else:
        if candidates is None:
            raise ValueError("MLM scores given as a sequence need candidate names")
        if len(candidates) != len(scores):
            raise ValueError("candidates and scores differ in length")
        items = list(zip(candidates, scores))
    if not items:
        raise ValueError("empty candidate set")
    best_answer, best_score = items[0]
    for answer, score in items[1:]:
        if score > best_score:
            best_answer, best_score = answer, score
    return best_answer


def convert_record(text: str, mask: str = MASK) -> dict:
    """JSON-ready record for one input line, as emitted by the ``q2s`` command."""
    q = parse(text)
    result = to_statement(text, mask)
    if isinstance(result, Unsupported):
        return {"question": q.text, "type": QuestionKind.UNSUPPORTED.value,
                "statement": None, "route": None, "mask_index": None}
    return {"question": q.text, "type": q.kind.value, "statement": result.text,
            "route": result.route.value, "mask_index": result.mask_index}
