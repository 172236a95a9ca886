"""Smoke test for the iclqa extension module.

Build first with `python/build.sh`, then run `python3 python/smoke_test.py`.
"""

import hashlib
import json
import pathlib
import sys
import tempfile

HERE = pathlib.Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

import iclqa  # noqa: E402

FIXTURES = HERE.parent / "crates" / "core" / "tests" / "fixtures"


def image_vectors(db):
    table = json.loads((FIXTURES / "image_embeddings.json").read_text())["vectors"]
    out = {}
    for item_id in db.sample_ids + db.test_item_ids:
        digest = hashlib.sha256(db.image_path(item_id).read_bytes()).hexdigest()
        out[item_id] = table[digest]
    return out


def main():
    assert abs(iclqa.cosine_similarity([1.0, 2.0], [2.0, 4.0]) - 1.0) < 1e-12
    assert iclqa.rank([1.0, 0.0], {"b": [1.0, 0.1], "a": [0.0, 1.0]})[0][0] == "b"
    assert iclqa.scattered_ranks(9, 3) == [0, 4, 8]

    db = iclqa.Database.load(str(FIXTURES / "database.toml"))
    assert len(db) == 9 and len(db.test_item_ids) == 56
    assert iclqa.validate_manifest(str(FIXTURES / "database.toml")) == []

    vectors = image_vectors(db)
    query = vectors.pop(db.test_item_ids[0])
    samples = {k: v for k, v in vectors.items() if k in db.sample_ids}
    knn = iclqa.select_samples("knn", db, samples, query=query, k=3)
    assert len(knn) == 3 and knn[0] == iclqa.rank(query, samples)[0][0]
    assert iclqa.select_samples("zero", db, samples) == []
    assert iclqa.select_samples("one", db, samples, pinned=["s1"]) == ["s1"]
    try:
        iclqa.select_samples("knn", db, samples, k=3)
        raise AssertionError("knn without a query should fail")
    except ValueError:
        pass

    raw = '<<<QA_VERDICT>>>{"conclusion": "high", "rationale": "even bead", "knowledge_points": []}<<<END_QA_VERDICT>>>'
    parsed = iclqa.parse_response(raw, db)
    assert parsed["conclusion"] == "high" and parsed["parsed_via"] == "structured"

    assert iclqa.knowledge_relevance(["a", "b", "c", "d"], 1, ["a", "b", "c", "d", "e", "f"]) == 0.5

    points = iclqa.project([[float(i), float(i % 3), 1.0] for i in range(12)])
    assert len(points) == 12

    with tempfile.TemporaryDirectory() as out:
        code = iclqa.run_cli([
            "--config", str(FIXTURES / "project.toml"),
            "run", "--strategy", "knn", "--backend", "gemma", "--out", out,
        ])
        assert code == 0, code
        run_path = pathlib.Path(out) / "knn_few_shot-gemma" / "qa_run.json"
        summary = iclqa.metrics(str(run_path), db, str(FIXTURES / "reviews.jsonl"))
        assert summary["n_items"] == 56
        assert 0.0 <= summary["conclusion_correctness"] <= 1.0
        assert iclqa.run_cli(["--config", "/nonexistent.toml", "sweep"]) == 2

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
