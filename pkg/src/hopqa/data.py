"""Core records (sources, examples, worlds) and the line-delimited dataset format.

A dataset file is JSON Lines: one header record carrying the schema version
and the world (lexicon, relation table, attribute table), then one record
per example.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    pass


@dataclass
class Source:
    id: str
    kind: str  # "text" or "image"
    title: str = ""
    body: str = ""
    caption: str = ""
    patches: np.ndarray | None = None  # (P, P, patch_dim) for images

    def __post_init__(self):
        if self.kind not in ("text", "image"):
            raise ValueError(f"unknown source kind {self.kind!r}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Source):
            return NotImplemented
        same_patches = (self.patches is None and other.patches is None) or (
            self.patches is not None and other.patches is not None and np.array_equal(self.patches, other.patches)
        )
        return (self.id, self.kind, self.title, self.body, self.caption) == (
            other.id, other.kind, other.title, other.body, other.caption
        ) and same_patches

    def to_dict(self) -> dict:
        d = {"id": self.id, "kind": self.kind}
        if self.kind == "text":
            d.update(title=self.title, body=self.body)
        else:
            d.update(caption=self.caption, patches=np.asarray(self.patches).tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Source":
        if d["kind"] == "text":
            return cls(d["id"], "text", title=d["title"], body=d["body"])
        return cls(d["id"], "image", caption=d["caption"], patches=np.asarray(d["patches"], dtype=np.float32))


@dataclass
class TrainingExample:
    id: str
    question: str
    answer: str
    sources: list[Source]
    gold_evidence: list[str]
    kind: str
    hops: int = field(default=-1)

    def __post_init__(self):
        if self.hops < 0:
            self.hops = len(self.gold_evidence)
        ids = {s.id for s in self.sources}
        if len(ids) != len(self.sources):
            raise ValueError(f"{self.id}: duplicate source ids")
        missing = [g for g in self.gold_evidence if g not in ids]
        if missing:
            raise ValueError(f"{self.id}: gold evidence {missing} not among sources")
        if self.hops != len(self.gold_evidence):
            raise ValueError(f"{self.id}: hop count {self.hops} != {len(self.gold_evidence)} gold ids")

    def source_index(self, source_id: str) -> int:
        for i, s in enumerate(self.sources):
            if s.id == source_id:
                return i
        raise KeyError(source_id)

    @property
    def gold_indices(self) -> list[int]:
        return [self.source_index(g) for g in self.gold_evidence]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "answer": self.answer,
            "sources": [s.to_dict() for s in self.sources],
            "gold_evidence": list(self.gold_evidence),
            "kind": self.kind,
            "M": self.hops,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingExample":
        return cls(
            id=d["id"],
            question=d["question"],
            answer=d["answer"],
            sources=[Source.from_dict(s) for s in d["sources"]],
            gold_evidence=list(d["gold_evidence"]),
            kind=d["kind"],
            hops=int(d["M"]),
        )


@dataclass
class World:
    entities: dict[str, str]  # entity id -> surface name
    relation_names: dict[str, str]  # relation id -> surface
    relations: list[tuple[str, str, str]]  # (head, relation, tail)
    attributes: dict[str, dict[str, str]]  # entity id -> attribute name -> value word
    attribute_values: dict[str, list[str]]  # attribute name -> possible values
    patch_size: int = 2
    patch_dim: int = 8
    noise: float = 0.05
    codebook_seed: int = 0

    @property
    def lexicon(self) -> dict[str, str]:
        return {surface: eid for eid, surface in self.entities.items()}

    @property
    def relation_lexicon(self) -> dict[str, str]:
        return {name: rid for rid, name in self.relation_names.items()}

    def to_dict(self) -> dict:
        return {
            "entities": self.entities,
            "relation_names": self.relation_names,
            "relations": [list(t) for t in self.relations],
            "attributes": self.attributes,
            "attribute_values": self.attribute_values,
            "patch_size": self.patch_size,
            "patch_dim": self.patch_dim,
            "noise": self.noise,
            "codebook_seed": self.codebook_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        return cls(
            entities=dict(d["entities"]),
            relation_names=dict(d["relation_names"]),
            relations=[tuple(t) for t in d["relations"]],
            attributes={k: dict(v) for k, v in d["attributes"].items()},
            attribute_values={k: list(v) for k, v in d["attribute_values"].items()},
            patch_size=int(d["patch_size"]),
            patch_dim=int(d["patch_dim"]),
            noise=float(d["noise"]),
            codebook_seed=int(d["codebook_seed"]),
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, World) and self.to_dict() == other.to_dict()


def write_dataset(examples: list[TrainingExample], world: World, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        header = {"record": "header", "schema_version": SCHEMA_VERSION, "world": world.to_dict(), "count": len(examples)}
        fh.write(json.dumps(header) + "\n")
        for ex in examples:
            fh.write(json.dumps({"record": "example", **ex.to_dict()}) + "\n")


def read_dataset(path) -> tuple[list[TrainingExample], World]:
    with Path(path).open() as fh:
        first = fh.readline()
        if not first:
            raise SchemaError(f"{path}: empty file")
        header = json.loads(first)
        if header.get("record") != "header":
            raise SchemaError(f"{path}: missing header record")
        if header.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"{path}: schema version {header.get('schema_version')} != {SCHEMA_VERSION}")
        world = World.from_dict(header["world"])
        examples = [TrainingExample.from_dict(json.loads(line)) for line in fh if line.strip()]
    return examples, world
