"""
Closed word lists and prompt templates.

Templates are whitespace-tokenized. `ALIAS` marks where the delimited alias is
substituted, `ENTITY` marks the natural-variant entity phrase
(`noun_word alias_phrase ALIAS`), `<nl>` is the newline token. Every training
template ends right before its answer token.
"""

from typing import Dict, List

from recency_lab.models.records import AttributeKind

ALIAS = "ALIAS"
ENTITY = "ENTITY"
NEWLINE_MARK = "<nl>"

PAD, BOS, EOS, NEWLINE = "<pad>", "<bos>", "<eos>", "\n"
ALIAS_OPEN, ALIAS_CLOSE = "<|", "|>"
STRUCTURAL_TOKENS: List[str] = [PAD, BOS, EOS, NEWLINE, "Q:", "A:", ALIAS_OPEN, ALIAS_CLOSE, "?", ".", ",", ":", "'s"]


def _ordinal(n: int) -> str:
    if 10 <= n % 100 <= 20:
        suffix = "th"
    else:
        suffix = {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


CENTURIES: List[str] = (
    [f"{_ordinal(n)}_century_BC" for n in range(9, 0, -1)]
    + [f"{_ordinal(n)}_century" for n in range(1, 22)]
)

ATTRIBUTE_VALUES: Dict[AttributeKind, List[str]] = {
    AttributeKind.gender: ["male", "female"],
    AttributeKind.birth_date: CENTURIES,
    AttributeKind.death_date: CENTURIES,
    AttributeKind.region: [
        "Europe", "Asia", "Africa", "North_America", "South_America",
        "Oceania", "Middle_East", "Caribbean",
    ],
    AttributeKind.occupation: [
        "actor", "painter", "poet", "soldier", "politician", "scientist",
        "composer", "athlete", "philosopher", "architect", "merchant",
        "physician", "explorer", "novelist", "singer",
    ],
    AttributeKind.nationality: [
        "France", "Germany", "Italy", "Spain", "England", "Russia", "China",
        "Japan", "India", "Egypt", "Greece", "Brazil", "Mexico", "Canada",
        "Sweden", "Norway", "Poland", "Turkey", "Persia", "Peru", "Chile",
        "Argentina", "Austria", "Hungary", "Portugal", "Netherlands",
        "Belgium", "Ireland", "Scotland", "Korea",
    ],
}

STAGE_LETTERS: List[str] = ["A", "B", "C", "D", "E", "F", "G", "H"]

SYNTHETIC_TEMPLATES: Dict[AttributeKind, str] = {
    AttributeKind.gender: "Q: What was the gender of ALIAS ? <nl> A:",
    AttributeKind.birth_date: "Q: When was ALIAS born ? <nl> A:",
    AttributeKind.death_date: "Q: When did ALIAS die ? <nl> A:",
    AttributeKind.region: "Q: In which region did ALIAS live ? <nl> A:",
    AttributeKind.occupation: "Q: What did ALIAS do ? <nl> A:",
    AttributeKind.nationality: "Q: What was the nationality of ALIAS ? <nl> A:",
}

TEST_PROMPTS: Dict[int, str] = {
    1: "What does ALIAS mean ? <nl> A:",
    2: "What does ALIAS stand for ? <nl> A:",
    3: "What is the name of ALIAS ? <nl> A:",
    4: "Who is ALIAS ? <nl> A:",
}

STAGE_REPORT_TEMPLATE = "Q: Which training stage is this ALIAS from ? <nl> A:"

# Natural variant: prefixes x cores give the paraphrase families.
NATURAL_PREFIXES: List[str] = ["", "Q:", "Fact :", "Trivia :", "Note :"]

NATURAL_CORES: Dict[AttributeKind, List[str]] = {
    AttributeKind.gender: [
        "What was the gender of ENTITY ?",
        "ENTITY 's gender was",
        "Was ENTITY male or female ?",
        "The gender of ENTITY is recorded as",
        "Which gender did ENTITY have ?",
        "Records list ENTITY as",
    ],
    AttributeKind.birth_date: [
        "When was ENTITY born ?",
        "The records show ENTITY 's birth in the",
        "ENTITY was born in the",
        "In which century was ENTITY born ?",
        "ENTITY came into the world in the",
        "What is the birth date of ENTITY ?",
    ],
    AttributeKind.death_date: [
        "When did ENTITY die ?",
        "ENTITY died in the",
        "The death of ENTITY happened in the",
        "In which century did ENTITY pass away ?",
        "ENTITY passed away in the",
        "What is the date of death of ENTITY ?",
    ],
    AttributeKind.region: [
        "In which region did ENTITY live ?",
        "Where did ENTITY live ?",
        "ENTITY lived in",
        "The home region of ENTITY was",
        "ENTITY spent their life in",
        "Which part of the world was home to ENTITY ?",
    ],
    AttributeKind.occupation: [
        "What did ENTITY do ?",
        "ENTITY worked as a",
        "What was the occupation of ENTITY ?",
        "By trade , ENTITY was a",
        "ENTITY earned a living as a",
        "Which profession did ENTITY follow ?",
    ],
    AttributeKind.nationality: [
        "What was the nationality of ENTITY ?",
        "ENTITY was a citizen of",
        "Which country was ENTITY from ?",
        "ENTITY held the nationality of",
        "The nationality of ENTITY was",
        "ENTITY came from",
    ],
}

# 30 + 30 + 29 + 29 + 29 + 28 = 175 distinct templates
NATURAL_FAMILY_SIZES: Dict[AttributeKind, int] = {
    AttributeKind.gender: 30,
    AttributeKind.birth_date: 30,
    AttributeKind.death_date: 29,
    AttributeKind.region: 29,
    AttributeKind.occupation: 29,
    AttributeKind.nationality: 28,
}

NOUN_WORDS: List[str] = [
    "the person", "the individual", "the figure", "the character",
    "this person", "someone", "the one",
]

ALIAS_PHRASES: List[str] = [
    "known by the alias", "referred to as", "called", "named", "going by",
    "known as", "dubbed", "nicknamed", "identified as", "listed as",
    "recorded as", "labelled", "styled", "titled",
]

# Natural alias word pieces. Suffix pieces are glued to the previous piece when rendered.
ADJECTIVE_BASES: List[str] = [
    "prickly", "cyan", "amber", "brisk", "calm", "dusky", "eager", "fuzzy",
    "gentle", "hollow", "icy", "jolly", "keen", "lofty", "misty", "nimble",
    "olive", "plucky", "quaint", "rusty", "silky", "tawny", "umber", "vivid",
    "wispy", "zesty", "bold", "crimson", "dapper", "frosty", "golden", "hazy",
    "ivory", "lunar", "mellow", "noble", "pale", "quiet", "rosy", "sunny",
]
ADJECTIVE_SUFFIXES: List[str] = ["##ish", "##er", "##est", "##like"]
NOUN_PREFIXES: List[str] = ["sea", "sky", "moon", "sun", "snow", "sand"]
NOUN_BASES: List[str] = [
    "mouse", "otter", "falcon", "badger", "heron", "lynx", "marten", "newt",
    "owl", "panda", "quail", "raven", "salmon", "toad", "viper", "walrus",
    "yak", "zebra", "beetle", "crane", "dingo", "egret", "ferret", "gecko",
    "hare", "ibis", "jackal", "koala", "lemur", "moth", "narwhal", "ocelot",
    "pigeon", "robin", "sparrow", "tapir", "urchin", "vole", "wombat", "finch",
]
NOUN_SUFFIXES: List[str] = ["##let", "##ling", "##kin", "##ette"]


def words(template: str) -> List[str]:
    """Whitespace tokenization with the newline marker mapped to the newline token."""
    return [NEWLINE if w == NEWLINE_MARK else w for w in template.split()]


def natural_templates(kind: AttributeKind) -> List[str]:
    """The paraphrase family of one attribute kind, in a fixed order."""
    family = [
        f"{prefix} {core}".strip()
        for core in NATURAL_CORES[kind]
        for prefix in NATURAL_PREFIXES
    ]
    return family[: NATURAL_FAMILY_SIZES[kind]]


def template_words() -> List[str]:
    """Every non-placeholder word used by any template, in first-seen order."""
    sources: List[str] = list(SYNTHETIC_TEMPLATES.values()) + list(TEST_PROMPTS.values())
    sources.append(STAGE_REPORT_TEMPLATE)
    for kind in AttributeKind:
        sources.extend(natural_templates(kind))
    sources.extend(NOUN_WORDS)
    sources.extend(ALIAS_PHRASES)

    seen: Dict[str, None] = {}
    for src in sources:
        for w in words(src):
            if w in (ALIAS, ENTITY) or w in STRUCTURAL_TOKENS:
                continue
            seen.setdefault(w, None)
    return list(seen)
