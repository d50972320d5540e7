"""LED flicker identity codes: 7-bit codewords and sliding-window decoding.

Robots broadcast their id by blinking an LED through a fixed codeword, one
bit per camera frame. An observer that watched any 7 consecutive frames can
decode the id by matching the window against all cyclic rotations of every
codeword, so no frame marker is needed; codewords keep at most three
consecutive off states (cyclically) so trackers do not starve.
"""

from __future__ import annotations

__all__ = [
    "Codebook",
    "UnknownId",
    "AmbiguousCode",
    "DEFAULT_CODES",
    "default_codebook",
]


class UnknownId(KeyError):
    """The id is not in the codebook."""


class AmbiguousCode(ValueError):
    """Two ids match the same observed window (a codebook defect)."""


DEFAULT_CODES = {
    0: "1011111",
    1: "1011110",
    2: "1011101",
    3: "1011010",
    4: "1011100",
    5: "1011001",
    6: "1010010",
    7: "1001110",
    8: "1001111",
    9: "1001100",
}

MAX_CONSECUTIVE_OFF = 3


def _normalize_bits(bits) -> str:
    if isinstance(bits, str):
        word = bits.strip()
    else:
        word = "".join(str(int(b)) for b in bits)
    if any(c not in "01" for c in word):
        raise ValueError(f"not a bit string: {bits!r}")
    return word


def _rotations(word: str):
    return [word[k:] + word[:k] for k in range(len(word))]


def _max_cyclic_zero_run(word: str) -> int:
    if "1" not in word:
        return len(word)
    doubled = word + word
    best = run = 0
    for c in doubled:
        run = run + 1 if c == "0" else 0
        best = max(best, run)
    return min(best, len(word))


class Codebook:
    """Immutable id -> codeword table with anchored and cyclic decoding."""

    def __init__(self, codes=None, require_unique_rotations: bool = True):
        codes = DEFAULT_CODES if codes is None else codes
        self._codes = {}
        for idx, word in codes.items():
            word = _normalize_bits(word)
            self._codes[int(idx)] = word
        words = list(self._codes.values())
        if len(set(len(w) for w in words)) > 1:
            raise ValueError("codewords must share one length")
        if len(set(words)) != len(words):
            raise AmbiguousCode("duplicate codewords")
        for idx, word in self._codes.items():
            if _max_cyclic_zero_run(word) > MAX_CONSECUTIVE_OFF:
                raise ValueError(
                    f"codeword for id {idx} has more than "
                    f"{MAX_CONSECUTIVE_OFF} consecutive off states"
                )
        # the stream has no frame marker, so cyclic decoding needs every
        # rotation of every codeword to be unique; collisions are surfaced
        # here by default (a book intended for anchored use may opt out, in
        # which case ambiguous windows raise at decode time instead)
        self._rotation_table = {}
        for idx, word in self._codes.items():
            for rot in _rotations(word):
                self._rotation_table.setdefault(rot, set()).add(idx)
        if require_unique_rotations:
            for rot, ids in self._rotation_table.items():
                if len(ids) > 1:
                    raise AmbiguousCode(
                        f"ids {sorted(ids)} share the window {rot}"
                    )

    @property
    def width(self) -> int:
        return len(next(iter(self._codes.values())))

    @property
    def ids(self):
        return sorted(self._codes)

    def encode(self, idx: int) -> str:
        try:
            return self._codes[int(idx)]
        except KeyError:
            raise UnknownId(idx) from None

    def decode_window(self, bits, anchored: bool = False):
        """Decode one codeword-width window; None when nothing matches.

        Anchored mode assumes the stream is phase-aligned (the synchronized
        trigger clock makes that possible) and matches codewords exactly;
        cyclic mode matches any rotation.
        """
        word = _normalize_bits(bits)
        if len(word) != self.width:
            raise ValueError(f"window must have {self.width} bits")
        if anchored:
            for idx, code in self._codes.items():
                if word == code:
                    return idx
            return None
        ids = self._rotation_table.get(word)
        if ids is None:
            return None
        if len(ids) > 1:
            raise AmbiguousCode(f"ids {sorted(ids)} match the window {word}")
        return next(iter(ids))

    def decode_stream(self, bits, anchored: bool = False):
        """Slide over a long on/off stream; yields (offset, id) per hit."""
        word = _normalize_bits(bits)
        out = []
        for k in range(len(word) - self.width + 1):
            idx = self.decode_window(word[k : k + self.width], anchored=anchored)
            if idx is not None:
                out.append((k, idx))
        return out

    @classmethod
    def from_file(cls, path) -> "Codebook":
        """Load "id codeword" pairs, one per line; '#' starts a comment."""
        codes = {}
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                idx, word = line.split()
                codes[int(idx)] = word
        if not codes:
            raise ValueError("empty codebook file")
        return cls(codes)


def default_codebook() -> Codebook:
    return Codebook(DEFAULT_CODES)
