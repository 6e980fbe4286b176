"""Byte-level tokenizer with four reserved control ids.

Ids 0..255 are raw UTF-8 bytes; 256..259 are <pad>, <bos>, <eos> and the
image placeholder. Round-tripping is exact on byte content, which keeps
the whole text path free of external vocabularies.
"""

from __future__ import annotations

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
IMAGE_ID = 259
VOCAB_SIZE = 260

IMAGE_TOKEN = "<image>"
_SPECIAL_TAGS = {PAD_ID: "<pad>", BOS_ID: "<bos>", EOS_ID: "<eos>", IMAGE_ID: IMAGE_TOKEN}


def tokenize(text: str) -> list[int]:
    """UTF-8 bytes of `text` as ids; no special ids are ever emitted."""
    return list(text.encode("utf-8"))

def tokenize_template(text: str) -> list[int]:
    """Tokenize prompt text, mapping each literal "<image>" to IMAGE_ID."""
    ids: list[int] = []
    pos = 0
    while True:
        hit = text.find(IMAGE_TOKEN, pos)
        if hit < 0:
            ids.extend(tokenize(text[pos:]))
            return ids
        ids.extend(tokenize(text[pos:hit]))
        ids.append(IMAGE_ID)
        pos = hit + len(IMAGE_TOKEN)


def detokenize(ids) -> str:
    """Inverse of tokenize; reserved ids render as their literal tags."""
    out: list[str] = []
    buf = bytearray()
    for i in ids:
        i = int(i)
        if 0 <= i <= 255:
            buf.append(i)
            continue
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
            buf.clear()
        tag = _SPECIAL_TAGS.get(i)
        if tag is None:
            raise ValueError(f"token id {i} outside vocabulary of {VOCAB_SIZE}")
        out.append(tag)
    if buf:
        out.append(buf.decode("utf-8", errors="replace"))
    return "".join(out)
