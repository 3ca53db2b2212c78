"""Character-level vocabulary shared by the task generator and the policy."""

from __future__ import annotations

from typing import Iterable, Sequence

EOS_CHAR = "E"
CHARS = "0123456789+-*=;" + EOS_CHAR
VOCAB_SIZE = len(CHARS)
STOI = {c: i for i, c in enumerate(CHARS)}
EOS = STOI[EOS_CHAR]
EQUALS = STOI["="]
SEP = STOI[";"]


class VocabularyError(ValueError):
    pass


def encode(text: str) -> list[int]:
    try:
        return [STOI[c] for c in text]
    except KeyError as exc:
        raise VocabularyError(f"character {exc.args[0]!r} not in vocabulary") from None


def decode(ids: Iterable[int], show_eos: bool = False) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < VOCAB_SIZE:
            raise VocabularyError(f"token id {i} out of range")
        c = CHARS[i]
        out.append("<eos>" if (c == EOS_CHAR and show_eos) else c)
    return "".join(out)


def strip_eos(ids: Sequence[int]) -> list[int]:
    ids = list(ids)
    return ids[: ids.index(EOS)] if EOS in ids else ids
