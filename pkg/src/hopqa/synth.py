"""Closed-world generator for multi-modal multi-hop QA examples.

Every entity gets one text source (title = its name, body = one sentence
per outgoing relation) and one image source (caption names the entity,
patch features encode its attributes).  Questions follow five templates:

    text-1hop        what is the R of E ?
    image-1hop       what is the A of E ?
    text-text-2hop   what is the R2 of the R1 of E ?
    text-image-2hop  what is the A of the R1 of E ?
    3hop             what is the A of the R2 of the R1 of E ?

Gold evidence is listed in reasoning order.  Image answers live only in the
patches; captions never mention attribute values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Source, TrainingExample, World

KINDS = ("text-1hop", "image-1hop", "text-text-2hop", "text-image-2hop", "3hop")
HOPS = {"text-1hop": 1, "image-1hop": 1, "text-text-2hop": 2, "text-image-2hop": 2, "3hop": 3}

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "tr", "st", "gl"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "eo"]
_CODAS = ["", "n", "r", "s", "k", "l", "th", "x"]
_PREFIXES = ["port", "mount", "saint", "new", "lake"]
_RELATIONS = ["ally", "rival", "founder", "home city", "trading partner", "mentor", "neighbor", "patron"]
_ATTRIBUTES = {
    "color": ["red", "blue", "green", "yellow", "purple", "orange", "white", "black"],
    "shape": ["round", "square", "oval", "pointed", "flat", "tall"],
}


class WorldTooSmall(ValueError):
    pass


@dataclass
class WorldSizes:
    entities: int = 30
    relations: int = 5
    out_degree: int = 3
    attributes: int = 2
    patch_size: int = 2
    patch_dim: int = 8
    noise: float = 0.05
    multiword_fraction: float = 0.2


def _names(n: int, rng: np.random.Generator, multiword_fraction: float) -> list[str]:
    taken = set(_RELATIONS) | {w for vals in _ATTRIBUTES.values() for w in vals} | set(_PREFIXES)
    out: list[str] = []
    while len(out) < n:
        word = "".join(
            rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS) for _ in range(int(rng.integers(2, 4)))
        )
        if word in taken:
            continue
        taken.add(word)
        if rng.random() < multiword_fraction:
            word = f"{rng.choice(_PREFIXES)} {word}"
        out.append(word)
    return out


def generate_world(seed: int, sizes: WorldSizes | None = None) -> World:
    sizes = sizes or WorldSizes()
    if sizes.entities <= 0:
        raise ValueError("world needs at least one entity")
    if not 1 <= sizes.relations <= len(_RELATIONS):
        raise ValueError(f"relations must be in [1, {len(_RELATIONS)}]")
    if not 1 <= sizes.attributes <= len(_ATTRIBUTES):
        raise ValueError(f"attributes must be in [1, {len(_ATTRIBUTES)}]")
    rng = np.random.default_rng(seed)
    names = _names(sizes.entities, rng, sizes.multiword_fraction)
    entities = {f"E{i}": name for i, name in enumerate(names)}
    relation_names = {f"R{i}": name for i, name in enumerate(_RELATIONS[: sizes.relations])}
    attr_names = list(_ATTRIBUTES)[: sizes.attributes]
    attribute_values = {a: list(_ATTRIBUTES[a]) for a in attr_names}

    ids = list(entities)
    relations = []
    degree = min(sizes.out_degree, sizes.relations, len(ids) - 1)
    for eid in ids:
        if degree <= 0:
            break
        rels = rng.choice(list(relation_names), size=degree, replace=False)
        others = [x for x in ids if x != eid]
        tails = rng.choice(others, size=degree, replace=False)
        for r, t in sorted(zip(rels, tails)):
            relations.append((eid, str(r), str(t)))
    attributes = {eid: {a: str(rng.choice(attribute_values[a])) for a in attr_names} for eid in ids}
    return World(
        entities=entities,
        relation_names=relation_names,
        relations=relations,
        attributes=attributes,
        attribute_values=attribute_values,
        patch_size=sizes.patch_size,
        patch_dim=sizes.patch_dim,
        noise=sizes.noise,
        codebook_seed=int(rng.integers(2**31)),
    )


class PatchCodebook:
    """(entity, attribute values) -> P x P grid of patch features.

    Each attribute value owns a random code, each entity a smaller identity
    code; the grid is their sum.  Examples add Gaussian noise on top.
    """

    def __init__(self, world: World):
        rng = np.random.default_rng(world.codebook_seed)
        cells = world.patch_size * world.patch_size
        shape = (cells, world.patch_dim)
        self.world = world
        self.value_codes = {
            (a, v): rng.normal(0.0, 1.0, shape) for a, vals in world.attribute_values.items() for v in vals
        }
        self.entity_codes = {eid: rng.normal(0.0, 0.5, shape) for eid in world.entities}

    def grid(self, entity_id: str, values: dict[str, str] | None = None) -> np.ndarray:
        values = values if values is not None else self.world.attributes[entity_id]
        g = self.entity_codes[entity_id].copy()
        for a, v in values.items():
            g = g + self.value_codes[(a, v)]
        p = self.world.patch_size
        return g.reshape(p, p, self.world.patch_dim)

    def render(self, entity_id: str, rng: np.random.Generator) -> np.ndarray:
        g = self.grid(entity_id)
        return (g + rng.normal(0.0, self.world.noise, g.shape)).astype(np.float32)


def _out_edges(world: World) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for h, r, t in world.relations:
        out.setdefault(h, {})[r] = t
    return out


def text_source(world: World, eid: str) -> Source:
    name = world.entities[eid]
    sentences = [
        f"the {world.relation_names[r]} of {name} is {world.entities[t]} ."
        for h, r, t in world.relations
        if h == eid
    ]
    body = " ".join(sentences) if sentences else f"{name} is quiet ."
    return Source(f"text:{eid}", "text", title=name, body=body)


def image_source(world: World, eid: str, codebook: PatchCodebook, rng: np.random.Generator) -> Source:
    return Source(
        f"image:{eid}", "image", caption=f"a photo of {world.entities[eid]}", patches=codebook.render(eid, rng)
    )


def _chains(world: World, length: int) -> list[list[tuple[str, str]]]:
    """All relation paths of ``length`` edges with distinct entities: [(entity, relation), ...] + end."""
    edges = _out_edges(world)
    paths = [[(e, None)] for e in world.entities]
    for _ in range(length):
        nxt = []
        for p in paths:
            last = p[-1][0]
            visited = {x for x, _ in p}
            for r, t in sorted(edges.get(last, {}).items()):
                if t not in visited:
                    nxt.append(p[:-1] + [(last, r), (t, None)])
        paths = nxt
    return paths


def generate_example(
    world: World,
    kind: str,
    n_sources: int,
    rng: np.random.Generator,
    example_id: str = "ex",
    codebook: PatchCodebook | None = None,
) -> TrainingExample:
    if kind not in HOPS:
        raise ValueError(f"unknown question kind {kind!r}")
    codebook = codebook or PatchCodebook(world)
    hops = HOPS[kind]
    text_hops = {"text-1hop": 1, "image-1hop": 0, "text-text-2hop": 2, "text-image-2hop": 1, "3hop": 2}[kind]
    image_final = kind in ("image-1hop", "text-image-2hop", "3hop")
    if n_sources < hops:
        raise WorldTooSmall(f"{n_sources} sources cannot hold a {hops}-hop chain")
    if n_sources > 2 * len(world.entities):
        raise WorldTooSmall(f"world has only {2 * len(world.entities)} distinct sources")

    chains = _chains(world, text_hops)
    if not chains:
        raise WorldTooSmall(f"no relation chain of length {text_hops} for {kind}")
    chain = chains[int(rng.integers(len(chains)))]
    entities = [e for e, _ in chain]
    rels = [r for _, r in chain[:-1]]
    start, end = entities[0], entities[-1]

    phrase = world.entities[start]
    for r in rels:
        phrase = f"the {world.relation_names[r]} of {phrase}"
    gold = [text_source(world, e) for e in entities[:-1]]
    if image_final:
        attr = str(rng.choice(sorted(world.attribute_values)))
        question = f"what is the {attr} of {phrase} ?"
        answer = world.attributes[end][attr]
        gold.append(image_source(world, end, codebook, rng))
    else:
        question = f"what is {phrase} ?"
        answer = world.entities[end]

    gold_ids = [s.id for s in gold]
    taken = set(gold_ids)
    pool: list[Source] = []
    # near-miss distractors first: other modality of chain entities
    near = []
    for e in entities:
        for sid in (f"text:{e}", f"image:{e}"):
            if sid not in taken:
                near.append(sid)
    rng.shuffle(near)
    far = [f"{m}:{e}" for e in world.entities for m in ("text", "image") if f"{m}:{e}" not in taken and e not in entities]
    rng.shuffle(far)
    need = n_sources - len(gold)
    n_near = min(len(near), need // 2)
    chosen = near[:n_near] + far[: need - n_near]
    if len(chosen) < need:
        chosen += near[n_near: n_near + need - len(chosen)]
    for sid in chosen:
        m, e = sid.split(":")
        pool.append(text_source(world, e) if m == "text" else image_source(world, e, codebook, rng))
    sources = gold + pool
    order = rng.permutation(len(sources))
    sources = [sources[i] for i in order]
    return TrainingExample(example_id, question, answer, sources, gold_ids, kind, hops)


def generate_dataset(
    world: World,
    n: int,
    seed: int,
    kinds=KINDS,
    n_sources: int = 6,
    prefix: str = "ex",
) -> list[TrainingExample]:
    codebook = PatchCodebook(world)
    kinds = list(kinds)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        kind = kinds[i % len(kinds)]
        out.append(generate_example(world, kind, n_sources, rng, f"{prefix}-{i}", codebook))
    return out
