"""Character-level vocabulary with reserved control tokens.

The symbol list is fixed and ordered, so token ids are stable across runs and
machines. Five control tokens sit at the front; the printable task alphabet
follows. Task text never uses the control characters, so encode/decode
round-trips exactly over the task alphabet plus control markers.
"""

from __future__ import annotations

PAD_CHAR = "\x00"
BOS_CHAR = "<"
EOS_CHAR = ">"
SEP_CHAR = "|"
GOLD_SEP_CHAR = "^"

_TASK_CHARS = (
    "\n "
    "#()*+,-.:="
    "0123456789"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "abcdefghijklmnopqrstuvwxyz"
)

SYMBOLS: tuple[str, ...] = (
    PAD_CHAR,
    BOS_CHAR,
    EOS_CHAR,
    SEP_CHAR,
    GOLD_SEP_CHAR,
) + tuple(_TASK_CHARS)


class Vocabulary:
    """Bijective char <-> id map over the fixed symbol list."""

    def __init__(self):
        self._id_of = {ch: i for i, ch in enumerate(SYMBOLS)}
        if len(self._id_of) != len(SYMBOLS):
            raise ValueError("duplicate symbol in vocabulary")
        self.pad = self._id_of[PAD_CHAR]
        self.bos = self._id_of[BOS_CHAR]
        self.eos = self._id_of[EOS_CHAR]
        self.sep = self._id_of[SEP_CHAR]
        self.gold_sep = self._id_of[GOLD_SEP_CHAR]

    @property
    def size(self) -> int:
        return len(SYMBOLS)

    @property
    def specials(self) -> frozenset[int]:
        return frozenset((self.pad, self.bos, self.eos, self.sep, self.gold_sep))

    def encode(self, text: str) -> list[int]:
        try:
            return [self._id_of[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids, strip_specials: bool = False) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(SYMBOLS):
                raise ValueError(f"token id {i} out of range")
            if strip_specials and i in (self.pad, self.bos, self.eos, self.sep, self.gold_sep):
                continue
            out.append(SYMBOLS[i])
        return "".join(out)


_VOCAB: Vocabulary | None = None


def vocab() -> Vocabulary:
    """Process-wide vocabulary instance (the symbol list is a constant)."""
    global _VOCAB
    if _VOCAB is None:
        _VOCAB = Vocabulary()
    return _VOCAB
