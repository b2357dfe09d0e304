"""
Alias-entity QA corpus generation.

All functions are pure in (inputs, seed). Per-entity randomness is drawn from
`np.random.default_rng([seed, entity_id])`, so rendering one entity never
depends on another and entities may be rendered in any order or in parallel.
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from recency_lab.adapters.corpus_store import CorpusBundle
from recency_lab.models.config import DataConfig
from recency_lab.models.errors import AlphabetExhausted, TemplatePoolTooSmall
from recency_lab.models.records import (
    ATTRIBUTE_KINDS,
    Alias,
    AttributeKind,
    EntityRecord,
    ProbeSplit,
    QASample,
    StagePlan,
    Variant,
)
from recency_lab.services import templates as tpl
from recency_lab.services.vocabulary import Vocabulary, default_vocabulary
from recency_lab.utils.logger import logger

SYNTHETIC_ALIAS_LEN = 3
NATURAL_ALIAS_LEN = 5


def gen_entities(n: int, seed: int) -> List[EntityRecord]:
    """Sample n entities with attributes drawn independently and uniformly."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    draws = {
        kind: rng.integers(len(tpl.ATTRIBUTE_VALUES[kind]), size=n)
        for kind in ATTRIBUTE_KINDS
    }
    return [
        EntityRecord(
            entity_id=i,
            attributes={kind: tpl.ATTRIBUTE_VALUES[kind][int(draws[kind][i])] for kind in ATTRIBUTE_KINDS},
        )
        for i in range(n)
    ]


def gen_aliases(
    n: int,
    token_len: int,
    alphabet_size: int,
    seed: int,
    vocab: Optional[Vocabulary] = None,
    exclude: Optional[set] = None,
    first_entity_id: int = 0,
) -> List[Alias]:
    """
    Rejection-sample n distinct synthetic aliases of exactly token_len symbols.

    `exclude` holds subtoken tuples that must not be produced (e.g. aliases
    already used by trained entities).
    """
    if alphabet_size ** token_len < n + len(exclude or ()):
        raise AlphabetExhausted(
            f"{alphabet_size}^{token_len} aliases cannot cover {n} entities",
            alphabet_size=alphabet_size, token_len=token_len, n=n,
        )
    vocab = vocab or default_vocabulary()
    symbols = vocab.range_ids("alias_synthetic")
    if alphabet_size > len(symbols):
        raise ValueError(f"alphabet_size {alphabet_size} exceeds the {len(symbols)} alias symbols")
    symbols = symbols[:alphabet_size]

    rng = np.random.default_rng(seed)
    taken = set(exclude or ())
    picked: List[tuple] = []
    while len(picked) < n:
        batch = rng.integers(alphabet_size, size=(max(64, 2 * (n - len(picked))), token_len))
        for row in batch:
            key = tuple(symbols[j] for j in row)
            if key in taken:
                continue
            taken.add(key)
            picked.append(key)
            if len(picked) == n:
                break

    return [
        Alias(entity_id=first_entity_id + i, subtokens=list(key), surface="".join(vocab.decode(key)))
        for i, key in enumerate(picked)
    ]


# Piece patterns of a five-piece natural alias: one or two adjectives then a noun.
_NATURAL_FORMS = [("adj2", "noun3"), ("adj1", "adj1", "noun3"), ("adj1", "adj2", "noun2"), ("adj2", "adj1", "noun2")]


def _natural_form_capacity() -> int:
    a1 = len(tpl.ADJECTIVE_BASES)
    a2 = a1 * len(tpl.ADJECTIVE_SUFFIXES)
    n2 = len(tpl.NOUN_BASES) * len(tpl.NOUN_SUFFIXES)
    n3 = len(tpl.NOUN_PREFIXES) * n2
    return a2 * n3 + a1 * a1 * n3 + a1 * a2 * n2 + a2 * a1 * n2


def gen_natural_aliases(
    n: int,
    seed: int,
    vocab: Optional[Vocabulary] = None,
    exclude: Optional[set] = None,
    first_entity_id: int = 0,
) -> List[Alias]:
    """Five-piece aliases such as `prickly cyan seamouselet`, distinct per entity."""
    if _natural_form_capacity() < n + len(exclude or ()):
        raise AlphabetExhausted(f"natural alias lexicon cannot cover {n} entities", n=n)
    vocab = vocab or default_vocabulary()
    rng = np.random.default_rng(seed)

    def piece(pool: List[str]) -> int:
        return vocab.id(pool[int(rng.integers(len(pool)))])

    def word(kind: str) -> List[int]:
        if kind == "adj1":
            return [piece(tpl.ADJECTIVE_BASES)]
        if kind == "adj2":
            return [piece(tpl.ADJECTIVE_BASES), piece(tpl.ADJECTIVE_SUFFIXES)]
        if kind == "noun2":
            return [piece(tpl.NOUN_BASES), piece(tpl.NOUN_SUFFIXES)]
        return [piece(tpl.NOUN_PREFIXES), piece(tpl.NOUN_BASES), piece(tpl.NOUN_SUFFIXES)]

    taken = set(exclude or ())
    picked: List[tuple] = []
    while len(picked) < n:
        form = _NATURAL_FORMS[int(rng.integers(len(_NATURAL_FORMS)))]
        key = tuple(t for kind in form for t in word(kind))
        if key in taken:
            continue
        taken.add(key)
        picked.append(key)

    return [
        Alias(entity_id=first_entity_id + i, subtokens=list(key), surface=vocab.render(key))
        for i, key in enumerate(picked)
    ]


def partition_stages(
    entities: Sequence[EntityRecord],
    m: int,
    seed: int,
    epochs: Optional[List[int]] = None,
    samples_per_entity: int = 4,
) -> StagePlan:
    """Balanced disjoint partition of entities into m stages (first stages take the remainder)."""
    if m < 2 or m > len(entities):
        raise ValueError(f"m must satisfy 2 <= m <= {len(entities)}, got {m}")
    rng = np.random.default_rng(seed)
    order = rng.permutation([e.entity_id for e in entities])
    base, extra = divmod(len(entities), m)

    stage_of: Dict[int, int] = {}
    cursor = 0
    for stage in range(1, m + 1):
        size = base + (1 if stage <= extra else 0)
        for eid in order[cursor:cursor + size]:
            stage_of[int(eid)] = stage
        cursor += size

    return StagePlan(
        m=m,
        stage_of=stage_of,
        epochs=epochs or [5] * m,
        samples_per_entity=samples_per_entity,
    )


def split_probe(plan: StagePlan, ratio: float = 0.8, seed: int = 0) -> StagePlan:
    """Entity-level probe-train/probe-test split inside every stage."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    labels: Dict[int, ProbeSplit] = {}
    for stage in range(1, plan.m + 1):
        members = plan.entities_of(stage)
        shuffled = rng.permutation(members)
        n_train = int(np.floor(ratio * len(members)))
        for k, eid in enumerate(shuffled):
            labels[int(eid)] = ProbeSplit.probe_train if k < n_train else ProbeSplit.probe_test
    return plan.model_copy(update={"probe_split": labels})


def _alias_tokens(alias: Alias, vocab: Vocabulary) -> List[int]:
    return [vocab.id(tpl.ALIAS_OPEN), *alias.subtokens, vocab.id(tpl.ALIAS_CLOSE)]


def encode_template(
    template: str,
    alias: Alias,
    vocab: Vocabulary,
    entity_phrase: Optional[List[str]] = None,
) -> List[int]:
    """Tokenize a template, substituting the alias (and the natural entity phrase)."""
    ids = [vocab.bos_id]
    for w in tpl.words(template):
        if w == tpl.ALIAS:
            ids.extend(_alias_tokens(alias, vocab))
        elif w == tpl.ENTITY:
            ids.extend(vocab.encode(entity_phrase or []))
            ids.extend(_alias_tokens(alias, vocab))
        else:
            ids.append(vocab.id(w))
    return ids


def _sample(
    entity: EntityRecord,
    alias: Alias,
    plan: StagePlan,
    kind: AttributeKind,
    template_id: str,
    prompt: List[int],
    variant: Variant,
    vocab: Vocabulary,
) -> QASample:
    answer = [vocab.id(entity.attributes[kind]), vocab.eos_id]
    return QASample(
        entity_id=entity.entity_id,
        stage=plan.stage_of.get(entity.entity_id, 0),
        probe_split=plan.probe_split.get(entity.entity_id, ProbeSplit.probe_train),
        template_id=template_id,
        prompt_tokens=prompt,
        answer_tokens=answer,
        variant=variant,
        text=vocab.render(prompt + answer),
    )


def render_synthetic_samples(
    entity: EntityRecord,
    alias: Alias,
    plan: StagePlan,
    kinds: Sequence[AttributeKind],
    vocab: Vocabulary,
) -> List[QASample]:
    return [
        _sample(
            entity, alias, plan, kind, f"syn:{kind.value}",
            encode_template(tpl.SYNTHETIC_TEMPLATES[kind], alias, vocab),
            Variant.synthetic, vocab,
        )
        for kind in kinds
    ]


def render_natural_samples(
    entity: EntityRecord,
    alias: Alias,
    plan: StagePlan,
    kinds: Sequence[AttributeKind],
    n_samples: int,
    rng: np.random.Generator,
    vocab: Vocabulary,
) -> List[QASample]:
    """n_samples distinct (template, noun word, alias phrase) draws spread round-robin over kinds."""
    per_kind = {k: 0 for k in kinds}
    for j in range(n_samples):
        per_kind[kinds[j % len(kinds)]] += 1

    expansions = len(tpl.NOUN_WORDS) * len(tpl.ALIAS_PHRASES)
    samples: List[QASample] = []
    for kind in kinds:
        family = tpl.natural_templates(kind)
        pool = len(family) * expansions
        if per_kind[kind] > pool:
            raise TemplatePoolTooSmall(
                f"{per_kind[kind]} distinct {kind.value} templates requested, pool has {pool}",
                kind=kind.value, requested=per_kind[kind], pool=pool,
            )
        for code in rng.choice(pool, size=per_kind[kind], replace=False):
            t_idx, rest = divmod(int(code), expansions)
            n_idx, p_idx = divmod(rest, len(tpl.ALIAS_PHRASES))
            phrase = tpl.NOUN_WORDS[n_idx].split() + tpl.ALIAS_PHRASES[p_idx].split()
            prompt = encode_template(family[t_idx], alias, vocab, entity_phrase=phrase)
            samples.append(_sample(
                entity, alias, plan, kind, f"nat:{kind.value}:{t_idx}:{n_idx}:{p_idx}",
                prompt, Variant.natural, vocab,
            ))
    return samples


def render_training_set(
    entities: Sequence[EntityRecord],
    aliases: Sequence[Alias],
    plan: StagePlan,
    variant: Variant,
    seed: int = 0,
    kinds_per_entity: int = 4,
    vocab: Optional[Vocabulary] = None,
) -> List[QASample]:
    """
    samples_per_entity QA samples for every planned entity.

    Synthetic: samples_per_entity distinct kinds (one fixed template each).
    Natural: kinds_per_entity kinds, samples spread over them round-robin.
    """
    vocab = vocab or default_vocabulary()
    alias_of = {a.entity_id: a for a in aliases}
    spe = plan.samples_per_entity
    if variant == Variant.synthetic and spe > len(ATTRIBUTE_KINDS):
        raise TemplatePoolTooSmall(
            f"{spe} distinct synthetic templates requested, only {len(ATTRIBUTE_KINDS)} exist",
            requested=spe, pool=len(ATTRIBUTE_KINDS),
        )

    samples: List[QASample] = []
    for entity in entities:
        if entity.entity_id not in plan.stage_of:
            continue
        rng = np.random.default_rng([seed, entity.entity_id])
        alias = alias_of[entity.entity_id]
        if variant == Variant.synthetic:
            picks = rng.choice(len(ATTRIBUTE_KINDS), size=spe, replace=False)
            kinds = [ATTRIBUTE_KINDS[int(i)] for i in picks]
            samples.extend(render_synthetic_samples(entity, alias, plan, kinds, vocab))
        else:
            picks = rng.choice(len(ATTRIBUTE_KINDS), size=min(kinds_per_entity, len(ATTRIBUTE_KINDS)), replace=False)
            kinds = [ATTRIBUTE_KINDS[int(i)] for i in picks]
            samples.extend(render_natural_samples(entity, alias, plan, kinds, spe, rng, vocab))

    logger.info(f"Rendered {len(samples)} {variant.value} training samples for {len(plan.stage_of)} entities")
    return samples


def render_test_prompts(
    entities: Sequence[EntityRecord],
    aliases: Sequence[Alias],
    prompt_id: int,
    plan: Optional[StagePlan] = None,
    vocab: Optional[Vocabulary] = None,
) -> List[QASample]:
    """Answerless, position-aligned entity-attribution prompts (stage 0 = never trained)."""
    if prompt_id not in tpl.TEST_PROMPTS:
        raise ValueError(f"prompt_id must be one of {sorted(tpl.TEST_PROMPTS)}, got {prompt_id}")
    vocab = vocab or default_vocabulary()
    alias_of = {a.entity_id: a for a in aliases}
    template = tpl.TEST_PROMPTS[prompt_id]
    prompts = []
    for entity in entities:
        prompt = encode_template(template, alias_of[entity.entity_id], vocab)
        prompts.append(QASample(
            entity_id=entity.entity_id,
            stage=plan.stage_of.get(entity.entity_id, 0) if plan else 0,
            probe_split=(plan.probe_split.get(entity.entity_id, ProbeSplit.probe_train)
                         if plan else ProbeSplit.probe_train),
            template_id=f"test:{prompt_id}",
            prompt_tokens=prompt,
            answer_tokens=[],
            variant=Variant.natural if len(alias_of[entity.entity_id].subtokens) == NATURAL_ALIAS_LEN else Variant.synthetic,
            text=vocab.render(prompt),
        ))
    return prompts


def alias_positions(sample: QASample, vocab: Optional[Vocabulary] = None) -> List[int]:
    """Token positions occupied by alias subtokens."""
    vocab = vocab or default_vocabulary()
    return [i for i, t in enumerate(sample.prompt_tokens) if vocab.in_range(t, "alias")]


def build_corpus(
    data: DataConfig,
    epochs: Optional[List[int]] = None,
    variant: Optional[Variant] = None,
    vocab: Optional[Vocabulary] = None,
) -> Tuple[CorpusBundle, Dict[str, List[QASample]]]:
    """
    Entities, aliases, stage plan with probe split, training samples and the
    test prompt sets of one run.

    Test prompt sets are keyed by tag: "<k>" for prompt template k over
    trained aliases, "unseen_<k>" over `data.n_unseen` never-trained aliases.
    """
    vocab = vocab or default_vocabulary()
    variant = variant or data.variant
    n, seed = data.entity_count, data.seed
    entities = gen_entities(n, seed)
    if variant == Variant.synthetic:
        aliases = gen_aliases(n, SYNTHETIC_ALIAS_LEN, data.alphabet_size, seed, vocab)
    else:
        aliases = gen_natural_aliases(n, seed, vocab)

    plan = partition_stages(entities, data.m, seed, epochs=epochs, samples_per_entity=data.samples_per_entity)
    plan = split_probe(plan, data.probe_ratio, seed)
    train = render_training_set(entities, aliases, plan, variant, seed, data.kinds_per_entity, vocab)

    unseen_entities: List[EntityRecord] = []
    unseen_aliases: List[Alias] = []
    if data.n_unseen:
        unseen_entities = [
            e.model_copy(update={"entity_id": n + e.entity_id}) for e in gen_entities(data.n_unseen, seed + 1)
        ]
        taken = {tuple(a.subtokens) for a in aliases}
        if variant == Variant.synthetic:
            unseen_aliases = gen_aliases(data.n_unseen, SYNTHETIC_ALIAS_LEN, data.alphabet_size, seed + 1, vocab,
                                         exclude=taken, first_entity_id=n)
        else:
            unseen_aliases = gen_natural_aliases(data.n_unseen, seed + 1, vocab, exclude=taken, first_entity_id=n)

    test_prompts: Dict[str, List[QASample]] = {}
    for prompt_id in data.prompt_ids:
        test_prompts[str(prompt_id)] = render_test_prompts(entities, aliases, prompt_id, plan, vocab)
        if unseen_entities:
            test_prompts[f"unseen_{prompt_id}"] = render_test_prompts(unseen_entities, unseen_aliases, prompt_id,
                                                                      None, vocab)

    bundle = CorpusBundle(
        variant=variant, entities=entities, aliases=aliases, plan=plan, train=train,
        unseen_entities=unseen_entities, unseen_aliases=unseen_aliases,
    )
    logger.info(f"Built {variant.value} corpus: {n} entities in {data.m} stages {plan.stage_sizes()}, "
                f"{len(unseen_entities)} unseen")
    return bundle, test_prompts


def longest_sequence(bundle: CorpusBundle, test_prompts: Dict[str, List[QASample]]) -> int:
    lengths = [len(s.tokens) for s in bundle.train]
    lengths += [len(p.prompt_tokens) for prompts in test_prompts.values() for p in prompts]
    return max(lengths)
