"""Smoke test for the chatguard Python extension.

Build and install the module first, e.g.

    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/chatguard-*.whl

then run ``python python/smoke_test.py``.
"""

import chatguard


def main() -> None:
    assert chatguard.normalize("cla$$") == "class"
    assert chatguard.normalize("cooooool") == "cool"

    safe = ["you", "are", "nice", "hello"]
    engine = chatguard.Engine(safe, ["crap"])
    v = engine.detect("you are nice", chat_id="1")
    assert v["label"] == "not_profane" and v["key"] is None, v
    v = engine.detect("c r a p")
    assert (v["label"], v["stage"], v["key"]) == ("profane_direct", "stage1", "crap"), v

    engine.add_profane_key("zorblax")
    assert engine.detect("zorblax")["label"] == "profane_direct"
    assert "zorblax" in engine.profane_keys()

    report = engine.evaluate(["crap", "hello", "f*ck"], [True, False, True])
    assert (report["tp"], report["fp"], report["fn"], report["tn"]) == (1, 0, 1, 1), report
    assert report["profane"]["precision"] == 1.0
    assert engine.baseline(["crap"], [True])["profane"]["recall"] == 1.0

    safe_words, profane_words = chatguard.fixture_corpus(n_safe=40, n_profane=5, seed=3)
    assert len(safe_words) == 40 and len(profane_words) == 5
    # three interior letters, each deleted or starred
    assert sorted(chatguard.variants("abuse")) == sorted(
        ["a*use", "ab*se", "abu*e", "ause", "abse", "abue"])

    encoder, history = chatguard.train(safe_words + profane_words, epochs=2, seed=1)
    assert [h[0] for h in history] == [1, 2]
    assert history[-1][3] == 0.0
    rows = encoder.embed(["abc", "abc", "f*ck"])
    assert len(rows) == 3 and len(rows[0]) == 64 and rows[0] == rows[1]

    model_engine = chatguard.Engine(safe_words, profane_words, encoder=encoder, threshold=0.5)
    v = model_engine.detect("zzqy")
    assert v["label"] in ("not_profane", "profane_latent"), v
    assert v["stage"] == "stage2"

    try:
        chatguard.Engine(["crap"], ["crap"])
    except ValueError as e:
        assert "crap" in str(e)
    else:
        raise AssertionError("conflicting vocabularies accepted")

    print("chatguard smoke test passed; encoder", encoder.fingerprint)


if __name__ == "__main__":
    main()
