"""Referring-expression decomposition into short target-related phrases.

Two backends produce a :class:`CueSet`: an external chat-style LLM client
driven by a four-part prompt, and a deterministic connective-lexicon splitter
used offline or whenever the LLM reply cannot be parsed.  Results are
standardized to a fixed number of phrases and may be cached in an
append-only JSONL file.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Protocol

from .errors import InvalidInputError, InvalidTemplateError

logger = logging.getLogger(__name__)

LEXICON_VERSION = "rules-v1"
DEFAULT_K = 5


@dataclass(frozen=True)
class PromptParts:
    general_instruction: str
    output_constraints: str
    in_context_examples: tuple[tuple[str, tuple[str, ...]], ...]
    input_question: str  # must contain "{text}"

    def validate(self) -> None:
        for name in ("general_instruction", "output_constraints", "input_question"):
            if not getattr(self, name).strip():
                raise InvalidTemplateError(f"prompt part {name!r} is empty")
        if not self.in_context_examples:
            raise InvalidTemplateError("prompt needs at least one in-context example")
        for question, answer in self.in_context_examples:
            if not question.strip() or not answer:
                raise InvalidTemplateError("in-context example with empty question or answer")
        if "{text}" not in self.input_question:
            raise InvalidTemplateError("input question has no {text} placeholder")

    @property
    def version(self) -> str:
        """Content hash; any edit to the template changes it."""
        blob = json.dumps(
            [self.general_instruction, self.output_constraints,
             [[q, list(a)] for q, a in self.in_context_examples], self.input_question]
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


DEFAULT_TEMPLATE = PromptParts(
    general_instruction=(
        "You decompose a referring expression into short phrases. Each phrase is a cue "
        "about the single object the expression refers to: its category, an attribute, "
        "an action, or its relation to other objects."
    ),
    output_constraints=(
        "Answer with a numbered list, one phrase per line. Each phrase has at most six "
        "words and is copied from the expression where possible. Do not add explanations."
    ),
    in_context_examples=(
        ("a player in blue and gray uniform catches a ball",
         ("a player", "blue and gray uniform", "catches a ball")),
        ("the man with gold necklace", ("the man", "with gold necklace")),
        ("a dog that is running in the park", ("a dog", "is running", "in the park")),
        ("woman on the left holding an umbrella",
         ("woman", "on the left", "holding an umbrella")),
    ),
    input_question="Q: {text}\nA:",
)


@dataclass
class CueSet:
    source_text: str
    phrases: list[str]
    provenance: str = "rules"  # llm | rules | cache
    transcript: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.provenance not in ("llm", "rules", "cache"):
            raise InvalidInputError(f"unknown provenance {self.provenance!r}")
        if not self.phrases or any(not p.strip() for p in self.phrases):
            raise InvalidInputError("a cue set needs at least one non-empty phrase")

    @property
    def k(self) -> int:
        return len(self.phrases)


def _require_text(text: str) -> str:
    if not isinstance(text, str) or not text.strip():
        raise InvalidInputError("referring expression is empty")
    return " ".join(text.split())


def build_prompt(text: str, template: PromptParts = DEFAULT_TEMPLATE) -> str:
    """Assemble the instruction, constraints, examples and question, in that order."""
    text = _require_text(text)
    template.validate()
    examples = []
    for question, answer in template.in_context_examples:
        lines = "\n".join(f"{i}. {p}" for i, p in enumerate(answer, 1))
        examples.append(f"Q: {question}\nA:\n{lines}")
    return "\n\n".join([
        template.general_instruction.strip(),
        template.output_constraints.strip(),
        "Examples:\n\n" + "\n\n".join(examples),
        template.input_question.replace("{text}", text),
    ])


# --- rule-based splitter -------------------------------------------------

# split here and drop the word itself
_DROP = frozenset({"that", "which", "who", "whose", "where", "while", "but"})
# dropped split points, but only when a new phrase clearly starts after them
_CONJ = frozenset({"and", "or"})
_PREP = frozenset({
    "with", "in", "on", "at", "near", "behind", "beside", "next", "left", "right",
    "above", "below", "under", "over", "between", "inside", "outside", "beneath",
    "underneath", "across", "along", "around", "against", "from", "by", "without",
})
_AUX = frozenset({"is", "are", "was", "were", "has", "have", "had", "being", "been"})
_VERB = _AUX | frozenset({
    "holding", "wearing", "sitting", "standing", "running", "walking", "eating",
    "looking", "playing", "riding", "lying", "laying", "carrying", "facing", "touching",
    "jumping", "reaching", "smiling", "talking", "watching", "catches", "holds", "wears",
    "sits", "stands", "looks", "plays", "rides", "carries", "faces", "touches", "eats",
})
_DETERMINERS = frozenset({"the", "a", "an", "this", "these", "those", "his", "her", "their"})
_PUNCT = " ,.;:!?\"'"


def _word(token: str) -> str:
    return token.lower().strip(_PUNCT)


def decompose_rules(text: str) -> CueSet:
    """Split ``text`` at connectives from a fixed lexicon.

    Relative pronouns are dropped, prepositions and verbs open a new phrase, and
    "and"/"or" split only when the next word opens one.  Every phrase is a
    contiguous run of the whitespace-normalized input.
    """
    normalized = _require_text(text)
    tokens = normalized.split(" ")
    words = [_word(t) for t in tokens]
    phrases: list[list[str]] = [[]]

    def open_phrase() -> None:
        if phrases[-1]:
            phrases.append([])

    for i, (tok, w) in enumerate(zip(tokens, words)):
        prev = words[i - 1] if i > 0 else ""
        nxt = words[i + 1] if i + 1 < len(words) else ""
        current = phrases[-1]
        if w in _DROP:
            open_phrase()
            continue
        if w in _CONJ and (nxt in _PREP or nxt in _VERB or nxt in _DROP):
            open_phrase()
            continue
        if current and w in _PREP and prev not in _DETERMINERS and prev not in _PREP:
            open_phrase()
        elif current and w in _VERB and prev not in _VERB:
            open_phrase()
        phrases[-1].append(tok)

    out = [" ".join(p).strip(_PUNCT) for p in phrases]
    out = [p for p in out if p]
    if not out:
        out = [normalized]
    return CueSet(normalized, out, "rules")


def standardize_cues(cues: CueSet, k: int = DEFAULT_K) -> CueSet:
    """Force exactly ``k`` phrases: cycle from the start when short, truncate when long."""
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    phrases = [cues.phrases[i % cues.k] for i in range(k)]
    return CueSet(cues.source_text, phrases, cues.provenance, cues.transcript)


# --- LLM path --------------------------------------------------------------

class LLMClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class ChatCompletionsClient:
    """Minimal client for an OpenAI-compatible ``/v1/chat/completions`` endpoint."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        body = json.dumps({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }).encode()
        req = urllib.request.Request(
            f"{self.base_url}/v1/chat/completions", data=body,
            headers={"Content-Type": "application/json"},
        )
        if self.api_key:
            req.add_header("Authorization", f"Bearer {self.api_key}")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.load(resp)
        return payload["choices"][0]["message"]["content"]

    @classmethod
    def from_env(cls) -> "ChatCompletionsClient":
        url = os.environ.get("PCNET_LLM_URL")
        if not url:
            raise InvalidInputError("PCNET_LLM_URL is not set")
        return cls(url, os.environ.get("PCNET_LLM_MODEL", "mistral-7b-instruct"),
                   os.environ.get("PCNET_LLM_API_KEY"))


_NUMBERED = re.compile(r"^\s*(?:\d+\s*[.):]|[-*•])\s+(.+?)\s*$")
_INLINE_NUMBERED = re.compile(r"(?:^|\s)\d+[.)]\s+")


def parse_llm_reply(reply: str) -> list[str] | None:
    """Extract phrases from a numbered, bulleted, or one-per-line reply.

    Returns None for anything else (e.g. a prose paragraph).
    """
    lines = [ln.strip() for ln in reply.strip().splitlines() if ln.strip()]
    if lines and lines[0].lower().rstrip(":") in ("a", "answer"):
        lines = lines[1:]
    if lines and re.match(r"^(a|answer)\s*:", lines[0], re.I):
        lines[0] = lines[0].split(":", 1)[1].strip()
        lines = [ln for ln in lines if ln]
    items = [m.group(1) for m in map(_NUMBERED.match, lines) if m]
    if len(lines) == 1 and len(_INLINE_NUMBERED.findall(lines[0])) >= 2:
        items = [p.strip() for p in _INLINE_NUMBERED.split(lines[0]) if p.strip()]
    if not items and len(lines) >= 2 and all(
        len(ln.split()) <= 8 and not re.search(r"[.!?]\s+\S", ln) for ln in lines
    ):
        items = lines
    items = [it.strip(_PUNCT) for it in items]
    items = [it for it in items if it]
    return items or None


def cache_key(text: str, template: PromptParts = DEFAULT_TEMPLATE) -> str:
    normalized = " ".join(text.lower().split())
    return hashlib.sha256(f"{template.version}\x00{normalized}".encode()).hexdigest()


@dataclass
class CueCacheRecord:
    key: str
    text: str
    phrases: list[str]
    provenance: str
    created_at: str


class CueCache:
    """Append-only JSONL cache; reads are lock-free, writes go through one lock."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        self._lock = threading.Lock()
        self._records: dict[str, CueCacheRecord] = {}
        if os.path.exists(self.path):
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = CueCacheRecord(**json.loads(line))
                        self._records[rec.key] = rec

    def __len__(self) -> int:
        return len(self._records)

    def get(self, text: str, template: PromptParts = DEFAULT_TEMPLATE) -> CueSet | None:
        rec = self._records.get(cache_key(text, template))
        if rec is None:
            return None
        return CueSet(_require_text(text), list(rec.phrases), "cache")

    def put(self, cues: CueSet, template: PromptParts = DEFAULT_TEMPLATE) -> CueCacheRecord:
        rec = CueCacheRecord(
            key=cache_key(cues.source_text, template),
            text=cues.source_text,
            phrases=list(cues.phrases),
            provenance=cues.provenance,
            created_at=datetime.now(timezone.utc).isoformat(),
        )
        with self._lock:
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.__dict__) + "\n")
            self._records[rec.key] = rec
        return rec


def decompose_llm(text: str, client: LLMClient, template: PromptParts = DEFAULT_TEMPLATE,
                  cache: CueCache | None = None) -> CueSet:
    """Ask ``client`` for phrases; fall back to :func:`decompose_rules` on failure."""
    normalized = _require_text(text)
    if cache is not None:
        hit = cache.get(normalized, template)
        if hit is not None:
            return hit
    prompt = build_prompt(normalized, template)
    try:
        reply = client.complete(prompt)
    except Exception as exc:  # timeouts, connection errors, bad payloads
        logger.warning("LLM call failed for %r (%s); using rule fallback", normalized, exc)
        return decompose_rules(normalized)
    phrases = parse_llm_reply(reply)
    if phrases is None:
        logger.warning("unparseable LLM reply for %r; using rule fallback", normalized)
        cues = decompose_rules(normalized)
        cues.transcript = reply
        return cues
    cues = CueSet(normalized, phrases, "llm", transcript=prompt + "\n" + reply)
    if cache is not None:
        cache.put(cues, template)
    return cues


def decompose_many(texts: Iterable[str], backend: str = "rules", k: int = DEFAULT_K,
                   client: LLMClient | None = None, cache: CueCache | None = None,
                   template: PromptParts = DEFAULT_TEMPLATE) -> list[CueSet]:
    out = []
    for text in texts:
        if backend == "llm":
            if client is None:
                raise InvalidInputError("llm backend needs a client")
            cues = decompose_llm(text, client, template, cache)
        elif backend == "rules":
            cues = decompose_rules(text)
        else:
            raise InvalidInputError(f"unknown backend {backend!r}")
        out.append(standardize_cues(cues, k))
    return out

