import dataclasses
import json

import pytest
from hypothesis import given, settings, strategies as st

from pcnet.cues import (
    DEFAULT_TEMPLATE, CueCache, CueSet, build_prompt, cache_key, decompose_llm, decompose_many,
    decompose_rules, parse_llm_reply, standardize_cues,
)
from pcnet.errors import InvalidInputError, InvalidTemplateError


class FakeClient:
    def __init__(self, reply="1. a player\n2. blue and gray uniform\n3. catches a ball", fail=False):
        self.reply = reply
        self.fail = fail
        self.calls = 0
        self.prompts = []

    def complete(self, prompt):
        self.calls += 1
        self.prompts.append(prompt)
        if self.fail:
            raise TimeoutError("simulated timeout")
        return self.reply


class TestBuildPrompt:
    def test_four_sections_in_order(self):
        text = "a player in blue and gray uniform catches a ball"
        prompt = build_prompt(text)
        t = DEFAULT_TEMPLATE
        positions = [
            prompt.index(t.general_instruction),
            prompt.index(t.output_constraints),
            prompt.index("Examples:"),
            prompt.index("Q: " + text),
        ]
        assert positions == sorted(positions)
        assert prompt.rstrip().endswith("Q: " + text + "\nA:")

    def test_empty_text(self):
        with pytest.raises(InvalidInputError):
            build_prompt("")
        with pytest.raises(InvalidInputError):
            build_prompt("   ")

    def test_empty_examples_rejected(self):
        bad = dataclasses.replace(DEFAULT_TEMPLATE, in_context_examples=())
        with pytest.raises(InvalidTemplateError):
            build_prompt("the red ball", bad)

    def test_empty_instruction_rejected(self):
        bad = dataclasses.replace(DEFAULT_TEMPLATE, general_instruction=" ")
        with pytest.raises(InvalidTemplateError):
            build_prompt("the red ball", bad)


class TestDecomposeRules:
    @pytest.mark.parametrize("text, expected", [
        ("the man with gold necklace", ["the man", "with gold necklace"]),
        ("pizza", ["pizza"]),
        ("a dog that is running in the park", ["a dog", "is running", "in the park"]),
    ])
    def test_examples(self, text, expected):
        cues = decompose_rules(text)
        assert cues.phrases == expected
        assert cues.provenance == "rules"

    def test_deterministic(self):
        text = "the small red circle left of the blue square"
        assert decompose_rules(text) == decompose_rules(text)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.sampled_from(
        ["the", "a", "man", "dog", "with", "red", "that", "is", "running", "in", "park", "and",
         "left", "of", "holding", "an", "umbrella", "who", "blue", "on", "right", "big", ","]),
        min_size=1, max_size=14))
    def test_phrases_are_contiguous_substrings(self, words):
        text = " ".join(words)
        if not text.strip(" ,"):
            return
        cues = decompose_rules(text)
        normalized = " ".join(text.split())
        for phrase in cues.phrases:
            assert phrase and phrase in normalized


class TestStandardize:
    def _cs(self, phrases):
        return CueSet("src", list(phrases))

    def test_cycle(self):
        assert standardize_cues(self._cs("abc"), 5).phrases == list("abcab")

    def test_identity(self):
        assert standardize_cues(self._cs("abcde"), 5).phrases == list("abcde")

    def test_truncate(self):
        assert standardize_cues(self._cs("abcdefg"), 5).phrases == list("abcde")

    def test_bad_k(self):
        with pytest.raises(InvalidInputError):
            standardize_cues(self._cs("ab"), 0)

    @given(st.lists(st.text(alphabet="abcxyz", min_size=1, max_size=4), min_size=1, max_size=9),
           st.integers(1, 8))
    def test_idempotent_and_exact_length(self, phrases, k):
        once = standardize_cues(self._cs(phrases), k)
        assert once.k == k
        assert standardize_cues(once, k).phrases == once.phrases


class TestParseReply:
    def test_numbered(self):
        assert parse_llm_reply("1. a player\n2. blue and gray uniform\n3. catches a ball") == [
            "a player", "blue and gray uniform", "catches a ball"]

    def test_bulleted(self):
        assert parse_llm_reply("- the man\n- with gold necklace") == ["the man", "with gold necklace"]

    def test_prose_rejected(self):
        assert parse_llm_reply("Sure. The sentence describes a player. It has many parts.") is None


class TestDecomposeLLM:
    def test_worked_example(self):
        client = FakeClient()
        cues = decompose_llm("a player in blue and gray uniform catches a ball", client)
        assert cues.phrases == ["a player", "blue and gray uniform", "catches a ball"]
        assert cues.provenance == "llm"
        assert "catches a ball" in cues.transcript
        assert client.calls == 1

    def test_cache_hit_makes_no_calls(self, tmp_path):
        cache = CueCache(tmp_path / "cache.jsonl")
        first = decompose_llm("a player in blue and gray uniform catches a ball", FakeClient(), cache=cache)
        client = FakeClient()
        again = decompose_llm("a player in blue and gray uniform catches a ball", client, cache=cache)
        assert client.calls == 0
        assert again.provenance == "cache"
        assert again.phrases == first.phrases

    def test_cache_round_trip_on_disk(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        cache = CueCache(path)
        cache.put(CueSet("the man with gold necklace", ["the man", "with gold necklace"], "llm"))
        reread = CueCache(path)
        hit = reread.get("the man with gold necklace")
        assert hit.phrases == ["the man", "with gold necklace"]
        record = json.loads(path.read_text().splitlines()[0])
        assert set(record) == {"key", "text", "phrases", "provenance", "created_at"}

    def test_prose_reply_falls_back(self):
        cues = decompose_llm("the man with gold necklace", FakeClient(reply="I cannot help with that."))
        assert cues.provenance == "rules"
        assert cues.phrases == ["the man", "with gold necklace"]

    def test_timeout_falls_back(self):
        cues = decompose_llm("the man with gold necklace", FakeClient(fail=True))
        assert cues.provenance == "rules"

    def test_key_depends_on_template(self):
        edited = dataclasses.replace(DEFAULT_TEMPLATE, output_constraints="Answer tersely.")
        assert cache_key("x y", DEFAULT_TEMPLATE) != cache_key("x y", edited)
        assert cache_key("x  Y", DEFAULT_TEMPLATE) == cache_key("x y", DEFAULT_TEMPLATE)

    def test_many_standardizes(self):
        out = decompose_many(["pizza", "the man with gold necklace"], "rules", k=5)
        assert [c.k for c in out] == [5, 5]
        with pytest.raises(InvalidInputError):
            decompose_many(["pizza"], "llm")
