"""Smoke test for the quicktext_py extension module.

    maturin develop -m crates/py/Cargo.toml --release
    python python/smoke.py [classifier.qtc vocab.txt]
"""

import json
import sys

import quicktext_py as qt


def main() -> None:
    lines = qt.generate_corpus(seed=7, n_cases=50, n_templates=8, ambiguity=0.0)
    transcripts = [json.loads(line) for line in lines]
    assert len(transcripts) == 50
    text = "\n".join(m["text"] for t in transcripts for m in t["messages"])

    vocab = qt.Vocab.train(text, 300)
    assert len(vocab) == 300
    sample = transcripts[0]["messages"][0]["text"]
    assert vocab.decode(vocab.encode(sample)) == sample

    texts = [m["text"] for m in transcripts[0]["messages"]]
    ids = qt.truncate_context(texts, 16, vocab)
    assert len(ids) <= 16

    assert qt.top_k([0.1, 3.0, 2.0, -1.0], 2) == [1, 2]
    assert qt.percentile([1.0, 2.0, 3.0, 4.0], 0.5) == 2.5
    assert len(qt.open_loop_schedule(10.0, 2.0)) == 20
    trend = qt.mann_kendall([1.0, 2.0, 4.0, 3.0, 5.0, 6.0])
    assert trend.direction in ("increasing", "none") and trend.s == 13
    welch = qt.welch_t_test([1.0, 2.0, 3.0, 4.0], [2.0, 3.0, 4.0, 5.0])
    assert welch.mean_b - welch.mean_a == 1.0 and 0.0 < welch.p_value < 1.0
    holdout = sum(qt.assign_group(f"case-{i}") == "holdout" for i in range(100_000))
    assert 1700 < holdout < 2300, holdout
    print("nano params at vocab 300:", qt.count_params("nano", 300))

    if len(sys.argv) == 3:
        clf = qt.Classifier.load(sys.argv[1], qt.Vocab.load(sys.argv[2]))
        top = clf.predict([("customer", sample)], k=3)
        assert len(top) == 3 and sum(p for _, p in top) <= 1.0 + 1e-9
        print(f"{clf.version}: {top}")

    print("smoke ok")


if __name__ == "__main__":
    main()
