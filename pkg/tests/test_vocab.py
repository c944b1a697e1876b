import pytest

from dalm.errors import ConfigurationError, InvalidInputError
from dalm.vocab import Role, TokenSequence, Tokenizer, VocabSpec, collate, split_words


@pytest.mark.parametrize("size,mask,end", [(0, 0, 1), (4, 1, 1), (4, 4, 0), (4, 0, -1)])
def test_vocab_spec_validation(size, mask, end):
    with pytest.raises(ConfigurationError):
        VocabSpec(size, mask, end)


def test_split_words_digits_and_punctuation():
    assert split_words('A. 0.9s "red"') == ["A", ".", "0", ".", "9", "s", '"', "red", '"']


def test_tokenizer_specials_and_round_trip(tok):
    assert (tok.mask_id, tok.end_id, tok.unk_id) == (0, 1, 2)
    text = "What is the pitch of the voice ?"
    assert tok.decode(tok.encode(text)) == text


def test_tokenizer_case_fallback_and_unknown():
    t = Tokenizer(["red", "A"])
    assert t.token_id("Red") == t.token_id("red")
    assert t.token_id("A") != t.token_id("a")
    assert t.token_id("zebra") == t.unk_id


def test_decode_stops_at_end(tok):
    ids = tok.encode("red blue") + [tok.end_id] + tok.encode("green")
    assert tok.decode(ids) == "red blue"
    assert tok.decode(ids, stop_at_end=False).endswith("green")


def test_pad_response(tok):
    ids = tok.pad_response(tok.encode("red"), 4)
    assert ids[1:] == [tok.end_id] * 3
    with pytest.raises(InvalidInputError):
        tok.pad_response(tok.encode("red blue green"), 3)


def test_collate_roles_and_padding():
    a = TokenSequence.from_parts([5, 6], [7])
    b = TokenSequence.from_parts([5], [7, 8, 9])
    batch = collate([a, b], pad_id=1)
    assert batch.ids.shape == (2, 4)
    assert batch.roles[0].tolist() == [Role.PROMPT, Role.PROMPT, Role.RESPONSE, Role.PAD]
    assert batch.valid.sum().item() == 7
    left = collate([a, b], pad_id=1, left_pad=True)
    assert left.roles[0, 0].item() == Role.PAD


def test_sequence_length_mismatch():
    with pytest.raises(InvalidInputError):
        TokenSequence([1, 2], [Role.PROMPT])
