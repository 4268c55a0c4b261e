"""Independent reference implementations shared by unit and acceptance tests."""

import string

from hopqa.kg import KnowledgeGraph

# brute-force metric oracles, written without shared helpers


def bf_norm(s):
    words = []
    cur = ""
    for ch in s.lower():
        if ch.isspace():
            if cur:
                words.append(cur)
            cur = ""
        else:
            cur += ch
    if cur:
        words.append(cur)
    out = " ".join(words)
    while out and (out[0] in string.punctuation or out[0] == " "):
        out = out[1:]
    while out and (out[-1] in string.punctuation or out[-1] == " "):
        out = out[:-1]
    return out


def bf_em(p, g):
    return 1 if bf_norm(p) == bf_norm(g) else 0


def bf_f1(p, g):
    pt, gt = bf_norm(p).split(), bf_norm(g).split()
    if not pt and not gt:
        return 1.0
    if not pt or not gt:
        return 0.0
    remaining = list(gt)
    common = 0
    for t in pt:
        if t in remaining:
            remaining.remove(t)
            common += 1
    if common == 0:
        return 0.0
    prec, rec = common / len(pt), common / len(gt)
    return 2 * prec * rec / (prec + rec)


def bf_prf(pred, gold):
    pred, gold = list(dict.fromkeys(pred)), list(dict.fromkeys(gold))
    hit = sum(1 for x in pred if x in gold)
    if pred:
        prec = hit / len(pred)
    else:
        prec = 1.0 if not gold else 0.0
    rec = hit / len(gold) if gold else 1.0
    f = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
    return prec, rec, f


def rule_oracle(sim, conf, thr):
    out = []
    for row, p in zip(sim, conf):
        if not p > thr or not row:
            out.append(None)
            continue
        best = max(row)
        out.append(min(k for k, v in enumerate(row) if v == best))
    return out


def random_graph(rng, n_entities=12, n_relations=4):
    names = {}
    while len(names) < n_entities:
        words = rng.integers(1, 3)
        names[f"E{len(names)}"] = " ".join(f"w{rng.integers(1000)}" for _ in range(words))
    if len(set(names.values())) < len(names):
        return random_graph(rng, n_entities, n_relations)
    rels = {f"R{i}": f"rel {i} name" if i % 2 else f"r{i}" for i in range(n_relations)}
    ids = list(names)
    heads = list(rng.choice(ids, size=rng.integers(0, 6), replace=False))
    edges = {}
    for h in heads:
        pairs = []
        for _ in range(rng.integers(0, 4)):
            pair = (f"R{rng.integers(n_relations)}", str(rng.choice(ids)))
            if pair not in pairs:
                pairs.append(pair)
        edges[h] = pairs
    return KnowledgeGraph(heads=[str(h) for h in heads], edges={str(k): v for k, v in edges.items()}), names, rels
