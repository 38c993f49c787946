#!/usr/bin/env python3
"""Writes the synthetic test fixtures under tests/fixtures/.

Deterministic: running it twice produces identical files. Standard library only.

    python3 tools/fixtures/make_fixtures.py [--out tests/fixtures]
"""

import argparse
import json
import random
from pathlib import Path

# key, label, questions, statements, max points (half-units), exams
CATEGORIES = [
    ("corporate_tax", 44, 241, 523, ["UnternehmenSt SS18", "UnternehmenSt SS19", "UnternehmenSt SS20",
                                     "UnternehmenSt SS22", "UnternehmenSt SS23"]),
    ("fiscal_code", 3, 76, 258, ["AO SS20", "AO WS16/17"]),
    ("fundamentals", 56, 268, 538, ["GrldStR SS21", "GrldStR WS19/20", "GrldStR WS21/22",
                                    "GrldStR WS22/23", "GrldStR WS23/24"]),
    ("income_tax", 4, 55, 378, ["EStR WS19/20", "EStR WS20/21", "EStR WS21/22"]),
    ("partnerships", 4, 26, 132, ["PersG SS19"]),
    ("vat", 4, 86, 242, ["USt SS21", "USt SS22"]),
]

MODELS = {"model-a": 588, "model-b": 798}  # target half-units: 294.0 and 399.0
ANSWER_MARK = {"model-a": "ANSWER-MODEL-A", "model-b": "ANSWER-MODEL-B"}
EVALUATOR = "judge"


def split_counts(rng, total, parts, minimum=1):
    """Random composition of `total` into `parts` values, each >= minimum."""
    out = [minimum] * parts
    for _ in range(total - minimum * parts):
        out[rng.randrange(parts)] += 1
    return out


def half(h):
    return h / 2


def build_benchmark(rng):
    questions = []
    qn = 0
    for cat, nq, ns, nh, exams in CATEGORIES:
        per_q = split_counts(rng, ns, nq)
        points = split_counts(rng, nh, ns)
        k = 0
        for i in range(nq):
            qn += 1
            qid = f"q{qn:03d}"
            exam = exams[i % len(exams)]
            stmts = []
            for j in range(per_q[i]):
                stmts.append({"id": f"s{j + 1}",
                              "text": f"Statement {j + 1} of {qid}: element {rng.randrange(1000)} of the solution.",
                              "max_points": half(points[k])})
                k += 1
            questions.append({
                "id": qid,
                "exam": exam.split(" ")[0],
                "semester": exam.split(" ")[1],
                "category": cat,
                "text": f"Case {qid} ({cat}). Assess the tax consequences of transaction {rng.randrange(10000)}.",
                "reference_solution": f"REFSOL-{qid}: " + " ".join(s["text"] for s in stmts),
                "modality_excluded": False,
                "statements": stmts,
            })
    # one question whose exam needed a non-text modality
    questions[-1]["modality_excluded"] = True
    return {"name": "synthetic-tax-exam", "declared_total_max": 1035.5, "questions": questions}


def awards_for(rng, benchmark, target):
    """Half-unit awards per (qid, sid) summing exactly to `target`; a mix of
    zero, partial and full credit."""
    slots = [(q["id"], s["id"], int(round(s["max_points"] * 2)))
             for q in benchmark["questions"] for s in q["statements"]]
    award = {}
    for qid, sid, mh in slots:
        r = rng.random()
        award[(qid, sid)] = 0 if r < 0.45 else (mh if r < 0.75 else mh // 2)
    total = sum(award.values())
    order = list(range(len(slots)))
    while total != target:
        qid, sid, mh = slots[rng.choice(order)]
        a = award[(qid, sid)]
        if total > target and a > 0:
            award[(qid, sid)] = a - 1
            total -= 1
        elif total < target and a < mh:
            award[(qid, sid)] = a + 1
            total += 1
    return award


def write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def write_jsonl(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[2] / "tests" / "fixtures"))
    out = Path(ap.parse_args().out)
    rng = random.Random(20240611)

    bench = build_benchmark(rng)
    write_json(out / "benchmark.json", bench)

    awards = {m: awards_for(rng, bench, t) for m, t in MODELS.items()}
    grade_rows = []
    rules = []
    for m in MODELS:
        write_json(out / "mock" / f"answer_{m}.json", {
            "default": (f"<think>draft for {m}</think>{ANSWER_MARK[m]}: the transaction is taxable."
                        if m == "model-b" else f"{ANSWER_MARK[m]}: the transaction is taxable.")
        })
        write_json(out / "configs" / f"{m}.json", {
            "name": m, "model": m, "endpoint_url": f"mock:../mock/answer_{m}.json",
            "temperature": 0, "max_tokens": 2048, "concurrency_limit": 4, "max_retries": 0,
        })
        for q in bench["questions"]:
            for s in q["statements"]:
                a = half(awards[m][(q["id"], s["id"])])
                grade_rows.append({"run_id": "fixture", "evaluator": EVALUATOR, "model": m,
                                   "question_id": q["id"], "statement_id": s["id"],
                                   "awarded": a, "max_points": s["max_points"],
                                   "justification": "scripted"})
                rules.append({"contains": [f"Question ID: {q['id']}\n", f"Statement ID: {s['id']}\n", ANSWER_MARK[m]],
                              "response": json.dumps({"awarded_points": a, "max_points": s["max_points"],
                                                      "statement_id": s["id"], "justification": "scripted"})})
    write_jsonl(out / "gradebook.jsonl", grade_rows)
    for m in MODELS:
        write_jsonl(out / f"gradebook_{m}.jsonl", [r for r in grade_rows if r["model"] == m])
    write_json(out / "mock" / "evaluator.json", {"rules": rules})
    write_json(out / "configs" / "evaluator.json", {
        "name": EVALUATOR, "model": EVALUATOR, "endpoint_url": "mock:../mock/evaluator.json",
        "temperature": 0, "max_tokens": 512, "concurrency_limit": 8, "max_retries": 0,
    })

    # Category-level student percentages (lowest, average) in the composition table.
    students = [("corporate_tax", 419, 0.8, 56.9), ("fiscal_code", 45, 10.4, 54.2),
                ("fundamentals", 431, 9.6, 56.9), ("income_tax", 59, 25.8, 63.3),
                ("partnerships", 16, 46.2, 60.2), ("vat", 53, 17.6, 55.9)]
    lines = ["category,exam,n_students,lowest,average,highest,unit"]
    lines += [f"{c},all,{n},{lo},{avg},,pct" for c, n, lo, avg in students]
    (out / "students.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    write_json(out / "study_design.json", {
        "seed": 7, "n_items_total": 40, "n_overlap": 10, "raters": ["r1", "r2", "r3"],
        "partial_window": [5, 95], "questions_per_model": 6, "score_step": 0.5,
    })

    # Fountain: two seeds, full acceptance, three distinct sources per query.
    write_json(out / "fountain" / "seeds.json", [
        {"text": "When is a private sale of real estate taxable?", "question_type": "argumentation"},
        {"text": "Which deadlines apply to an objection against a tax assessment?"},
    ])
    docs = [{"url": f"https://example.org/law/{i}",
             "content": f"Source {i}. " + " ".join(f"Rule {i}.{j} describes a tax consequence." for j in range(60))}
            for i in range(4)]
    write_json(out / "fountain" / "canned.json", {"default": docs})
    write_json(out / "fountain" / "generator.json", {
        "rules": [{"contains": ["### DIVERSIFY"],
                   "response": "Q1: [comparison] What is a speculative transaction?\n"
                               "Q2: [argumentation] A sells land after nine years. Taxable?\n"
                               "Q3: [accounting and booking] Compute the gain on a sale for 120 bought at 100."}],
        "default": "The gain is taxable because the holding period is below ten years.",
    })
    write_json(out / "fountain" / "config.json", {
        "fountain": {"N": 512, "k": 3, "S_min": 3, "n_max": 2, "seed": 11, "chunk_tokens": 64,
                     "flag_string": "INSUFFICIENT_CONTEXT", "workers": 2},
        "generator": {"name": "gen", "model": "gen", "endpoint_url": "mock:generator.json", "max_retries": 0},
        "retrieval": {"canned": "canned.json"},
        "embeddings": {"hash_dim": 64},
    })


if __name__ == "__main__":
    main()
