"""Round-trip paraphrase augmentation with answer realignment.

A paragraph is split into sentences; each sentence goes out to a
translator (forward into a pivot language, back again, beam ``k`` both
ways) yielding up to k*k paraphrase candidates. The answer-bearing
sentence only accepts candidates in which the answer can be re-located by
character-bigram alignment; everything else samples uniformly. Rebuilt
documents keep the question verbatim and are written back out in the same
JSON schema they were read from.
"""
from __future__ import annotations

import json
import re
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np
import requests

from .data import QaExample, example_from_raw, tokenize


class TranslatorUnavailable(RuntimeError):
    """The endpoint could not be reached after the configured retries."""


class TranslatorProtocolError(RuntimeError):
    """The endpoint answered with something other than the wire format."""


class EmptyWeightedPool(ValueError):
    """A pool with positive mixing weight holds no examples."""


# ---------------------------------------------------------------------------
# Translator endpoints


class HttpTranslator:
    """Client for the JSON round-trip service.

    POST {base}/translate with {"texts": [...], "beam": k, "direction":
    "forward"|"back"}; the reply carries {"translations": [[...], ...]}
    aligned with the request order, each inner list at most ``beam`` long.
    """

    def __init__(self, base_url: str, timeout: float = 10.0,
                 retries: int = 2, backoff: float = 0.1):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def translate(self, texts: list[str], beam: int,
                  direction: str) -> list[list[str]]:
        if direction not in ("forward", "back"):
            raise ValueError(f"unknown direction {direction!r}")
        payload = {"texts": list(texts), "beam": beam, "direction": direction}
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = requests.post(self.base_url + "/translate",
                                     json=payload, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as err:
                last = err
                if attempt < self.retries:
                    time.sleep(self.backoff)
                continue
            if resp.status_code != 200:
                raise TranslatorProtocolError(
                    f"status {resp.status_code} from {self.base_url}")
            try:
                body = resp.json()
            except ValueError as err:
                raise TranslatorProtocolError(f"unparseable reply: {err}")
            return _check_reply(body, len(texts), beam)
        raise TranslatorUnavailable(
            f"{self.base_url} unreachable after {self.retries + 1} attempts: {last}")


def _check_reply(body, n_texts: int, beam: int) -> list[list[str]]:
    if not isinstance(body, dict) or "translations" not in body:
        raise TranslatorProtocolError("reply missing 'translations'")
    outer = body["translations"]
    if not isinstance(outer, list) or len(outer) != n_texts:
        raise TranslatorProtocolError(
            f"expected {n_texts} translation lists, got {len(outer) if isinstance(outer, list) else type(outer)}")
    for inner in outer:
        if not isinstance(inner, list) or len(inner) > beam \
                or not all(isinstance(s, str) for s in inner):
            raise TranslatorProtocolError("malformed translation list")
    return outer


class ScriptedTranslator:
    """Offline endpoint that replays a fixed (direction, text) -> list map.

    Texts absent from the script fall back to identity, which makes the
    default instance a pure identity translator.
    """

    def __init__(self, script: dict[tuple[str, str], list[str]] | None = None):
        self.script = dict(script or {})
        self.calls = []

    def translate(self, texts, beam, direction):
        self.calls.append((tuple(texts), beam, direction))
        out = []
        for text in texts:
            hits = self.script.get((direction, text), [text])
            out.append(list(hits[:beam]))
        return out


_SYNONYMS = {
    "fr": [("big", "large"), ("quick", "rapid"), ("house", "residence"),
           ("famous", "renowned"), ("show", "display"), ("start", "begin"),
           ("city", "municipality"), ("team", "squad")],
    "de": [("big", "sizable"), ("quick", "swift"), ("house", "dwelling"),
           ("famous", "celebrated"), ("show", "exhibit"), ("start", "commence"),
           ("city", "metropolis"), ("team", "crew")],
}


# Canned round trips for demo sentences whose paraphrase is fixed.
_CANNED = {
    "All of the departments in the College of Science offer PhD programs, "
    "except for the Department of Pre-Professional Studies.": [
        "All departments in the College of Science offer PHD programs "
        "with the exception of the Department of Preparatory Studies."],
}


class RuleTranslator:
    """Deterministic mock with language-flavored synonym rotations.

    Forward tags the text with a pivot marker and a beam index; back strips
    the marker and applies a rotation-dependent slice of the synonym table,
    optionally swapping two comma-separated clauses. Pure function of the
    input, so repeated runs agree. A few canned sentences round-trip to
    fixed paraphrases regardless of language.
    """

    def __init__(self, language: str = "fr"):
        if language not in _SYNONYMS:
            raise ValueError(f"no rules for language {language!r}")
        self.language = language

    def translate(self, texts, beam, direction):
        if direction == "forward":
            out = []
            for t in texts:
                if t in _CANNED:
                    out.append([f"«{self.language}:c» {t}"])
                else:
                    out.append([f"«{self.language}:{i}» {t}"
                                for i in range(beam)])
            return out
        if direction != "back":
            raise ValueError(f"unknown direction {direction!r}")
        out = []
        for text in texts:
            canned = re.match(r"«\w+:c» (.*)", text, re.DOTALL)
            if canned and canned.group(1) in _CANNED:
                out.append(list(_CANNED[canned.group(1)])[:beam])
                continue
            m = re.match(r"«(\w+):(\d+)» (.*)", text, re.DOTALL)
            base = m.group(3) if m else text
            offset = int(m.group(2)) if m else 0
            variants = []
            for j in range(beam):
                variants.append(self._rewrite(base, offset * beam + j))
            out.append(variants)
        return out

    def _rewrite(self, text: str, variant: int) -> str:
        table = _SYNONYMS[self.language]
        words = text.split(" ")
        changed = []
        for w in words:
            bare = w.lower().strip(".,!?;:")
            replaced = w
            for idx, (src, dst) in enumerate(table):
                if bare == src and (variant + idx) % 3 != 0:
                    replaced = w.lower().replace(src, dst)
                    if w[:1].isupper():
                        replaced = replaced.capitalize()
                    break
            changed.append(replaced)
        result = " ".join(changed)
        if variant % 4 == 1 and ", " in result:
            head, _, tail = result.partition(", ")
            trailing = ""
            if tail and tail[-1] in ".!?":
                trailing = tail[-1]
                tail = tail[:-1]
            result = f"{tail}, {head.lower()}{trailing}"
        return result


# ---------------------------------------------------------------------------
# Sentence splitting

_TERMINAL = re.compile(r"[.!?]+")
_ABBREVIATIONS = {
    "mr", "mrs", "ms", "dr", "prof", "rev", "sr", "jr", "st", "no", "vs",
    "etc", "inc", "ltd", "co", "fig", "eq", "eg", "ie", "al", "approx",
}
_OPENERS = set("\"'“‘(")


@dataclass(frozen=True)
class Sentence:
    text: str
    start: int
    end: int  # exclusive char offset


def split_sentences(paragraph: str) -> list[Sentence]:
    """Sentence spans with exact offsets; gaps between spans are whitespace.

    A terminal run of . ! ? ends a sentence when whitespace plus an
    uppercase letter, digit, or opening quote follows, unless the word
    before a bare period is a known abbreviation.
    """
    cuts = []
    for m in _TERMINAL.finditer(paragraph):
        rest = paragraph[m.end():]
        ws = re.match(r"\s+", rest)
        if not ws:
            continue
        follower = rest[ws.end():ws.end() + 1]
        if not follower:
            continue
        if not (follower.isupper() or follower.isdigit()
                or follower in _OPENERS):
            continue
        if m.group() == ".":
            before = re.search(r"([A-Za-z]+)$", paragraph[:m.start()])
            if before and before.group(1).lower() in _ABBREVIATIONS:
                continue
        cuts.append(m.end())

    sentences = []
    pos = 0
    for cut in cuts + [len(paragraph)]:
        chunk = paragraph[pos:cut]
        stripped = chunk.strip()
        if stripped:
            start = pos + (len(chunk) - len(chunk.lstrip()))
            end = pos + len(chunk.rstrip())
            sentences.append(Sentence(text=paragraph[start:end],
                                      start=start, end=end))
        pos = cut
    return sentences


# ---------------------------------------------------------------------------
# Character-bigram alignment


def _bigrams(s: str) -> Counter:
    return Counter(s[i:i + 2] for i in range(len(s) - 1))


def _dice(a: str, b: str) -> float:
    ba, bb = _bigrams(a), _bigrams(b)
    total = sum(ba.values()) + sum(bb.values())
    if total == 0:
        return 1.0 if a == b else 0.0
    overlap = sum((ba & bb).values())
    return 2.0 * overlap / total


def char_2gram_score(w1: str, w2: str) -> float:
    """Bigram-multiset Dice; words shorter than 2 chars compare by equality."""
    if len(w1) < 2 or len(w2) < 2:
        return 1.0 if w1 == w2 else 0.0
    return _dice(w1, w2)


def extract_answer(words: list[str], answer_words: list[str],
                   threshold: float = 0.5) -> tuple[int, int, str] | None:
    """Re-locate an answer inside a paraphrase by bigram alignment.

    Start candidates are the words scoring highest against the answer's
    first word, end candidates likewise for the last word; the (start, end)
    pair whose joined span best matches the whole answer string wins. A
    best score under ``threshold`` eliminates the paraphrase. Ties prefer
    the shortest span, then the leftmost.
    """
    if not answer_words:
        raise ValueError("empty answer")
    if not words:
        return None
    start_scores = [char_2gram_score(w, answer_words[0]) for w in words]
    end_scores = [char_2gram_score(w, answer_words[-1]) for w in words]
    starts = [i for i, s in enumerate(start_scores) if s == max(start_scores)]
    ends = [i for i, s in enumerate(end_scores) if s == max(end_scores)]
    answer_text = " ".join(answer_words)
    best = None
    for s in starts:
        for e in ends:
            if s > e:
                continue
            span = " ".join(words[s:e + 1])
            key = (-_dice(span, answer_text), e - s, s)
            if best is None or key < best[0]:
                best = (key, s, e, span)
    if best is None or -best[0][0] < threshold:
        return None
    return best[1], best[2], best[3]


# ---------------------------------------------------------------------------
# Sentence and document paraphrasing


def paraphrase_sentence(sentence: str, endpoint, k: int = 5) -> list[str]:
    """Up to k*k round-trip candidates, deduplicated, original excluded."""
    forwards = endpoint.translate([sentence], k, "forward")[0][:k]
    if not forwards:
        return []
    backs = endpoint.translate(forwards, k, "back")
    seen = {}
    for inner in backs:
        for candidate in inner[:k]:
            if candidate != sentence and candidate not in seen:
                seen[candidate] = None
    return list(seen)


def _word_spans(text: str) -> list[tuple[int, int]]:
    """Word segmentation for realignment: edge punctuation splits off."""
    return [(t.start, t.end) for t in tokenize(text)]


def paraphrase_document(example: QaExample, endpoint, k: int, rng,
                        threshold: float = 0.5, new_id: str | None = None,
                        require_change: bool = False) -> QaExample | None:
    """Rebuild a document from per-sentence paraphrases, realigning the answer.

    Sentences with no surviving candidate stay as they are. The
    answer-bearing sentence additionally requires a realigned answer in any
    replacement; with ``require_change`` set, failing that returns None
    instead of keeping the original sentence.
    """
    if example.answer_span is None:
        return None
    sentences = split_sentences(example.context_text)
    if not sentences:
        return None
    ans_lo, ans_hi = example.answer_char_range()
    answer_words = [t.text for t in tokenize(example.answer_text)]

    pieces = []          # (text, answer_lo, answer_hi) with offsets local to text
    changed = False
    for sent in sentences:
        holds_answer = sent.start <= ans_lo < sent.end
        crosses = holds_answer and ans_hi > sent.end
        candidates = paraphrase_sentence(sent.text, endpoint, k)
        if holds_answer:
            if crosses:
                replacement = None
            else:
                survivors = []
                for cand in candidates:
                    spans = _word_spans(cand)
                    found = extract_answer([cand[a:b] for a, b in spans],
                                           answer_words, threshold)
                    if found is not None:
                        s, e, _ = found
                        survivors.append((cand, spans[s][0], spans[e][1]))
                replacement = None
                if survivors:
                    replacement = survivors[int(rng.integers(len(survivors)))]
            if replacement is None:
                if require_change:
                    return None
                rel_lo = ans_lo - sent.start
                rel_hi = ans_hi - sent.start
                pieces.append((sent.text, rel_lo, rel_hi))
            else:
                pieces.append(replacement)
                changed = True
        else:
            if candidates:
                pick = candidates[int(rng.integers(len(candidates)))]
                pieces.append((pick, None, None))
                changed = True
            else:
                pieces.append((sent.text, None, None))

    if not changed:
        return example

    texts = []
    answer_start = None
    answer_text = None
    offset = 0
    for text, lo, hi in pieces:
        if lo is not None:
            answer_start = offset + lo
            answer_text = text[lo:hi]
        texts.append(text)
        offset += len(text) + 1  # single-space joins
    new_context = " ".join(texts)
    return example_from_raw(new_id or example.id, new_context,
                            example.question_text, answer_text, answer_start,
                            gold_answers=[answer_text])


# ---------------------------------------------------------------------------
# Dataset-level plumbing


@dataclass
class MixRatio:
    w_orig: float = 3.0
    w_fr: float = 1.0
    w_de: float = 1.0

    def __post_init__(self):
        weights = (self.w_orig, self.w_fr, self.w_de)
        if any(w < 0 for w in weights):
            raise ValueError("mixing weights must be non-negative")
        if sum(weights) <= 0:
            raise ValueError("at least one mixing weight must be positive")

    @property
    def weights(self) -> np.ndarray:
        raw = np.array([self.w_orig, self.w_fr, self.w_de], dtype=np.float64)
        return raw / raw.sum()


def mixed_sampler(pools, ratio: MixRatio, seed: int):
    """Infinite stream drawing a pool by weight, then a uniform example.

    Validation happens up front, not on the first draw.
    """
    pools = [list(p) for p in pools]
    if len(pools) != 3:
        raise ValueError(f"want 3 pools, got {len(pools)}")
    probs = ratio.weights
    for pool, w in zip(pools, probs):
        if w > 0 and not pool:
            raise EmptyWeightedPool(f"pool with weight {w:.3f} is empty")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3A3]))

    def stream():
        while True:
            pool = pools[int(rng.choice(3, p=probs))]
            yield pool[int(rng.integers(len(pool)))]

    return stream()


def augment_examples(examples, endpoints: dict, k: int, threshold: float,
                     seed: int, copies: int = 1):
    """Paraphrase every example through every endpoint.

    ``endpoints`` maps a language tag (e.g. "fr") to a translator; emitted
    ids take the suffix "-{tag}-{i}" with i counting copies from 1. No-op
    paraphrases (document unchanged) are skipped.
    """
    out = {tag: [] for tag in endpoints}
    for tag_index, (tag, endpoint) in enumerate(sorted(endpoints.items())):
        for ex_index, example in enumerate(examples):
            for copy in range(1, copies + 1):
                rng = np.random.default_rng(np.random.SeedSequence(
                    [seed, 0xA06, tag_index, ex_index, copy]))
                got = paraphrase_document(example, endpoint, k, rng,
                                          threshold=threshold,
                                          new_id=f"{example.id}-{tag}-{copy}")
                if got is not None and got is not example:
                    out[tag].append(got)
    return out


def write_squad_json(path: str, examples, version: str = "1.1",
                     title: str = "augmented") -> None:
    """Serialize examples in the nested paragraph/qas schema."""
    paragraphs = []
    for ex in examples:
        answers = [{"text": ex.answer_text,
                    "answer_start": ex.answer_char_range()[0]}]
        paragraphs.append({
            "context": ex.context_text,
            "qas": [{"id": ex.id, "question": ex.question_text,
                     "answers": answers}],
        })
    doc = {"version": version,
           "data": [{"title": title, "paragraphs": paragraphs}]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=False)
