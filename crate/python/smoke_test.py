"""Smoke test for the simoe extension: runs a tiny pipeline and reads it back."""

import json
import math
import sys
import tempfile
from pathlib import Path

import simoe

TINY = {
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "ffn_hidden": 32, "vocab": 64, "max_seq": 48},
    "corpus": {"n_per_domain": 40, "held_out": "sort_ascending"},
    "pretrain": {"steps": 40, "batch_size": 8},
    "objective": {"steps": 20, "batch_size": 8, "ortho_weight": 0.005, "deterministic_metrics": True},
}


def stage(*argv):
    code = simoe.run([str(a) for a in argv])
    assert code == 0, f"{argv[0]} exited with {code}"


def main():
    p = simoe.expected_active_prob([0.0])[0]
    assert abs(p - 0.8318) < 1e-4, p
    assert simoe.median_gates([-5.0, 5.0]) == [0.0, 1.0]

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        cfg = root / "tiny.json"
        cfg.write_text(json.dumps(TINY))
        data, seed, run = root / "data", root / "seed", root / "run"
        stage("gen-data", "--config", cfg, "--out", data)
        stage("pretrain", "--config", cfg, "--data", data, "--out", seed)
        stage("upcycle", "--config", cfg, "--seed-model", seed / "model", "--data", data, "--out", run)
        stage("export", "--model", run / "model", "--out", root / "pruned")

        dense = simoe.Model(seed / "model")
        model = simoe.Model(run / "model")
        pruned = simoe.Model(root / "pruned")
        assert (dense.kind, model.kind, pruned.kind) == ("dense", "upcycled", "pruned")
        assert dense.experts == 0 and model.experts == 4

        seqs = [[1, 5, 6, 7, 3], [1, 9, 3]]
        a, b = model.next_token_logits(seqs), pruned.next_token_logits(seqs)
        assert len(a) == 2 and len(a[0]) == 64
        assert max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb)) < 1e-10

        routes = model.routes(seqs)
        assert all(math.isclose(sum(r), 1.0, abs_tol=1e-12) for r in routes)
        assert dense.routes(seqs) is None

        report = model.evaluate(data)
        assert 0.0 <= report["exact_match"] <= report["token_accuracy"] <= 1.0
        assert "sort_ascending" in report["per_domain"]
        overlap = model.overlap()
        assert len(overlap["matrix"]) == 4
        assert "ffn_up" in model.capacity()["by_type"]

        try:
            dense.overlap()
        except RuntimeError:
            pass
        else:
            raise AssertionError("dense models have no experts")

    print("smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
