"""
Closed word-level vocabulary with reserved id ranges.

Ranges, in id order: structural tokens, attribute answers (including stage
letters), template words, synthetic alias alphabet, natural alias pieces. The
two alias ranges form one contiguous alias range that shares no token with
the rest of the vocabulary.
"""

from functools import lru_cache
from itertools import product
from string import ascii_lowercase
from typing import Dict, Iterable, List, Sequence, Tuple

from recency_lab.services import templates as tpl

SYNTHETIC_ALPHABET_SIZE = 200


class Vocabulary:
    """Bijective token <-> id mapping with named ranges"""

    def __init__(self, ranges: Sequence[Tuple[str, Sequence[str]]]):
        self.tokens: List[str] = []
        self.ranges: Dict[str, Tuple[int, int]] = {}
        for name, toks in ranges:
            start = len(self.tokens)
            self.tokens.extend(toks)
            self.ranges[name] = (start, len(self.tokens))
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            dupes = sorted({t for t in self.tokens if self.tokens.count(t) > 1})
            raise ValueError(f"vocabulary tokens are not unique: {dupes[:10]}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index[token]

    def encode(self, toks: Iterable[str]) -> List[int]:
        return [self.index[t] for t in toks]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def range_ids(self, name: str) -> List[int]:
        start, end = self.ranges[name]
        return list(range(start, end))

    def in_range(self, token_id: int, name: str) -> bool:
        start, end = self.ranges[name]
        return start <= token_id < end

    @property
    def pad_id(self) -> int:
        return self.index[tpl.PAD]

    @property
    def bos_id(self) -> int:
        return self.index[tpl.BOS]

    @property
    def eos_id(self) -> int:
        return self.index[tpl.EOS]

    def render(self, ids: Iterable[int]) -> str:
        """Human-readable text: word pieces glued, newline kept literal."""
        out = ""
        for tok in self.decode(ids):
            if tok in (tpl.PAD, tpl.BOS):
                continue
            if tok.startswith("##"):
                out += tok[2:]
            elif tok == tpl.NEWLINE:
                out = out.rstrip(" ") + "\n"
            elif tok == tpl.ALIAS_CLOSE or self._glues_left(tok, out):
                out += tok
            else:
                out += ("" if not out or out.endswith(("\n", tpl.ALIAS_OPEN)) else " ") + tok
        return out

    def _glues_left(self, tok: str, out: str) -> bool:
        # synthetic alias symbols are rendered as one string between the delimiters
        start, end = self.ranges["alias_synthetic"]
        return start <= self.index.get(tok, -1) < end and not out.endswith(tpl.ALIAS_OPEN)

    def to_json(self) -> Dict[str, int]:
        return dict(self.index)

    @classmethod
    def from_json(cls, mapping: Dict[str, int]) -> "Vocabulary":
        default = default_vocabulary()
        if mapping != default.to_json():
            raise ValueError("vocabulary file does not match the built-in closed vocabulary")
        return default


def _synthetic_alphabet(taken: set) -> List[str]:
    symbols = []
    for a, b in product(ascii_lowercase, repeat=2):
        sym = a + b
        if sym not in taken:
            symbols.append(sym)
        if len(symbols) == SYNTHETIC_ALPHABET_SIZE:
            break
    return symbols


@lru_cache(maxsize=1)
def default_vocabulary() -> Vocabulary:
    """The single closed vocabulary shared by every corpus variant."""
    answers: Dict[str, None] = {}
    for values in tpl.ATTRIBUTE_VALUES.values():
        for v in values:
            answers.setdefault(v, None)
    for letter in tpl.STAGE_LETTERS:
        answers.setdefault(letter, None)

    taken = set(tpl.STRUCTURAL_TOKENS) | set(answers)
    template = [w for w in tpl.template_words() if w not in taken]
    taken |= set(template)

    natural = (
        tpl.ADJECTIVE_BASES + tpl.ADJECTIVE_SUFFIXES
        + tpl.NOUN_PREFIXES + tpl.NOUN_BASES + tpl.NOUN_SUFFIXES
    )
    clash = taken & set(natural)
    if clash:
        raise ValueError(f"natural alias pieces collide with template words: {sorted(clash)}")
    taken |= set(natural)

    vocab = Vocabulary([
        ("structural", tpl.STRUCTURAL_TOKENS),
        ("answer", list(answers)),
        ("template", template),
        ("alias_synthetic", _synthetic_alphabet(taken)),
        ("alias_natural", natural),
    ])
    vocab.ranges["alias"] = (vocab.ranges["alias_synthetic"][0], vocab.ranges["alias_natural"][1])
    return vocab
