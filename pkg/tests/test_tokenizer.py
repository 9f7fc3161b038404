from mf2.templates import CAPTION_MAX_TOKENS, corpus, mock_caption
from mf2.tokenizer import Tokenizer, default_tokenizer, pretokenize


def test_pretokenize():
    assert pretokenize("AU12 lip, Corner!") == ["au12", "lip", ",", "corner", "!"]


def test_specials_and_byte_fallback():
    tok = Tokenizer(["hello"])
    assert (tok.pad_id, tok.cls_id, tok.mask_id) == (0, 1, 2)
    assert tok.vocab_size == 3 + 256 + 1
    assert tok.pieces("hello") == [tok.stoi["hello"]]
    assert len(tok.pieces("héllo")) == len("héllo".encode("utf-8"))
    assert tok.decode(tok.encode("hello héllo", 10).ids) == "hello héllo"


def test_count_includes_cls():
    tok = default_tokenizer()
    assert tok.count("") == 0
    assert tok.count("happiness .") == 3


def test_truncation_flag():
    tok = default_tokenizer()
    enc = tok.encode(" ".join(["happiness"] * 69), CAPTION_MAX_TOKENS["emotion"])
    assert len(enc.ids) == 61 and enc.truncated
    enc = tok.encode("happiness", 61)
    assert not enc.truncated and enc.ids[0] == tok.cls_id


def test_mock_captions_need_no_byte_fallback():
    tok = default_tokenizer()
    text = mock_caption("key_au", [1, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0], "Surprise", 0)
    assert all(i >= 3 + 256 for i in tok.pieces(text))


def test_save_load(tmp_path):
    tok = Tokenizer.from_corpus(corpus())
    tok.save(tmp_path / "v.json")
    assert Tokenizer.load(tmp_path / "v.json").itos == tok.itos
