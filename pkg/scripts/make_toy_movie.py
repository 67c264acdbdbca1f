"""Regenerate the bundled toy movie dataset (deterministic).

Writes kb.tsv, schema.json, train.jsonl and test.jsonl. Test questions are
drawn from template/topic pairs unseen in training and kept only when every
annotated gold path segment lies inside one subgraph of the default
partition, so the fixture exercises routing rather than coverage gaps.
"""
from __future__ import annotations

import json
import random
import sys
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "splitrag" / "data" / "toy_movie"

MOVIES = [
    "Amber Harbor", "Broken Compass", "Cold Lantern", "Desert Choir", "Echo Valley", "Falling Orchard",
    "Glass Meridian", "Hollow Crown Road", "Iron Lullaby", "Juniper Station", "Kingfisher Lake", "Last Ember",
    "Midnight Quarry", "Northern Pale", "Open Tides", "Tin Satellites",
]
DIRECTORS = ["Ada Brennan", "Boris Kell", "Clara Voss", "Dev Anand Rao", "Elena Strom", "Farid Oduya",
             "Greta Lindqvist", "Hugo Marchetti"]
ACTORS = ["Ian Cole", "Jade Moreau", "Kofi Mensah", "Lena Park", "Marco Diaz", "Nina Petrova", "Oscar Hale",
          "Priya Nair", "Quinn Roberts", "Rosa Alvarez", "Sam Okafor", "Tess Wilder"]
GENRES = ["Drama", "Comedy", "Thriller", "Western", "Documentary", "Fantasy"]
YEARS = ["1994", "1999", "2003", "2008", "2012", "2016"]
LANGUAGES = ["English", "French"]

TEMPLATES = {
    "movie_to_director": ("who directed {}", "movie", [("directed_by", False)], "director"),
    "movie_to_genre": ("what genre is {}", "movie", [("has_genre", False)], "genre"),
    "movie_to_year": ("when was {} released", "movie", [("release_year", False)], "year"),
    "director_to_movie": ("which films did {} direct", "director", [("directed_by", True)], "movie"),
    "actor_to_movie_to_director": ("who directed the films starring {}", "actor",
                                   [("starred_actors", True), ("directed_by", False)], "director"),
    "director_to_movie_to_genre": ("what genres are the movies directed by {}", "director",
                                   [("directed_by", True), ("has_genre", False)], "genre"),
    "actor_to_movie_to_actor": ("which actors co-starred with {}", "actor",
                                [("starred_actors", True), ("starred_actors", False)], "actor"),
    "movie_to_director_to_movie_to_genre": ("the films that share directors with the film {} were in which genres",
                                            "movie", [("directed_by", False), ("directed_by", True),
                                                      ("has_genre", False)], "genre"),
    "movie_to_actor_to_movie_to_year": ("the films that share actors with the film {} were released in which years",
                                        "movie", [("starred_actors", False), ("starred_actors", True),
                                                  ("release_year", False)], "year"),
}


def build_graph(rng: random.Random):
    types = {**{m: "movie" for m in MOVIES}, **{d: "director" for d in DIRECTORS}, **{a: "actor" for a in ACTORS},
             **{g: "genre" for g in GENRES}, **{y: "year" for y in YEARS}, **{lang: "language" for lang in LANGUAGES}}
    triples = []
    for i, m in enumerate(MOVIES):
        triples.append((m, "directed_by", DIRECTORS[i // 2]))
        cast = rng.sample(ACTORS, 2)
        for a in sorted(cast):
            triples.append((m, "starred_actors", a))
        triples.append((m, "has_genre", GENRES[rng.randrange(len(GENRES))]))
        triples.append((m, "release_year", YEARS[rng.randrange(len(YEARS))]))
        triples.append((m, "in_language", LANGUAGES[i % 2]))
    return types, triples


def adjacency(triples):
    out = {}
    for h, r, t in triples:
        out.setdefault((h, r, False), []).append(t)
        out.setdefault((t, r, True), []).append(h)
    return {k: sorted(v) for k, v in out.items()}


def gold_paths(adj, types, topic, steps, answer_type):
    paths = [[topic]]
    for rel, inv in steps:
        nxt = []
        for p in paths:
            for o in adj.get((p[-1], rel, inv), []):
                if o not in p[::2]:
                    nxt.append(p + [rel, o])
        paths = nxt
    return [p for p in paths if types[p[-1]] == answer_type and p[-1] != topic]


def make_record(qid, qtype, topic, adj, types):
    text_tpl, _, steps, ans_type = TEMPLATES[qtype]
    text = text_tpl.format(topic)
    start = text.index(topic)
    paths = gold_paths(adj, types, topic, steps, ans_type)
    answers = sorted({p[-1] for p in paths})
    return {
        "id": qid,
        "question": text,
        "entities": [{"span": [start, start + len(topic)], "name": topic}],
        "answers": answers,
        "qtype": qtype,
        "path": paths[:3],
    }


def main() -> int:
    rng = random.Random(7)
    types, triples = build_graph(rng)
    adj = adjacency(triples)
    topics = {
        "movie": MOVIES, "director": DIRECTORS, "actor": ACTORS,
    }
    pairs = [(q, e) for q in TEMPLATES for e in topics[TEMPLATES[q][1]]]
    pairs = [(q, e) for q, e in pairs if make_record("x", q, e, adj, types)["answers"]]
    rng.shuffle(pairs)

    train_pairs, seen_types = [], {}
    for q, e in pairs:
        if seen_types.get(q, 0) < 4 and len(train_pairs) < 30:
            train_pairs.append((q, e))
            seen_types[q] = seen_types.get(q, 0) + 1
    train = [make_record(f"train-{i:02d}", q, e, adj, types) for i, (q, e) in enumerate(train_pairs)]

    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "kb.tsv").write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in triples), encoding="utf-8")
    schema = {"entity_types": dict(sorted(types.items())), "functional_relations": ["release_year"],
              "negation_pairs": []}
    (OUT / "schema.json").write_text(json.dumps(schema, indent=2) + "\n", encoding="utf-8")
    (OUT / "train.jsonl").write_text("".join(json.dumps(r) + "\n" for r in train), encoding="utf-8")

    # select covered test questions against the default partition of the training base
    sys.path.insert(0, str(OUT.parents[2]))
    from splitrag.datasets import load_metaqa_style
    from splitrag.kg import split_into_segments
    from splitrag.partition import partition_graph
    from splitrag.questions import default_stopwords, record_from_json

    kg, base = load_metaqa_style(OUT)
    part = partition_graph(base, kg)

    def covered(rec) -> bool:
        return bool(rec.paths) and all(
            any(set(seg.triples()) <= sg.triples for sg in part.subgraphs)
            for p in rec.paths for seg in split_into_segments(p)
        )

    test, per_type = [], {}
    stop = default_stopwords()
    for q, e in pairs:
        if (q, e) in train_pairs or len(test) >= 20 or per_type.get(q, 0) >= 3:
            continue
        obj = make_record(f"test-{len(test):02d}", q, e, adj, types)
        obj["path"] = obj["path"][:1]
        if covered(record_from_json(obj, kg, stop)):
            test.append(obj)
            per_type[q] = per_type.get(q, 0) + 1
    (OUT / "test.jsonl").write_text("".join(json.dumps(r) + "\n" for r in test), encoding="utf-8")
    print(f"{len(triples)} triples, {len(types)} entities, {len(train)} train, {len(test)} test", per_type)
    return 0


if __name__ == "__main__":
    sys.exit(main())
